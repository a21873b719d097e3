"""Label cleaning, tokenization, vocabulary and per-category dataset splits.

Raw content descriptions are noisy: some merely restate the element class
("image button"), some repeat the app name, and some are unfinished
placeholders ("untitled"). :func:`clean_label` rejects those three kinds
plus empty labels and normalizes the rest to lowercase words.

Accepted labels are encoded as ``<start> w1 .. wk <end>`` padded to a fixed
capacity of 17 ids (15 content words plus the two boundary tokens).
"""

from __future__ import annotations

import json
import logging
import random
import string
from collections import Counter
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ingest import ElementCrop
from .jsonl import FORMAT_VERSION, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

START_TOKEN = "<start>"
END_TOKEN = "<end>"
UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"
START_ID, END_ID, UNK_ID, PAD_ID = 0, 1, 2, 3
SPECIAL_TOKENS = (START_TOKEN, END_TOKEN, UNK_TOKEN, PAD_TOKEN)

MAX_LABEL_WORDS = 15
SEQUENCE_CAPACITY = MAX_LABEL_WORDS + 2  # <start> + 15 words + <end>

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})

Translator = Callable[[str], str]


def identity_translator(text: str) -> str:
    return text


def normalize_label(text: str) -> list[str]:
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


DEFAULT_ELEMENT_CLASS_PHRASES = (
    "image button",
    "button with image",
    "imagebutton",
    "imageview",
    "image view",
)
DEFAULT_PLACEHOLDERS = ("test", "content description", "untitled", "none")


@dataclass(frozen=True)
class CleanConfig:
    """Rule tables for :func:`clean_label`; extensible from a JSON file."""

    element_class_phrases: tuple[str, ...] = DEFAULT_ELEMENT_CLASS_PHRASES
    placeholders: tuple[str, ...] = DEFAULT_PLACEHOLDERS
    translator: Translator = identity_translator

    @classmethod
    def from_file(cls, path: str | Path, translator: Translator = identity_translator) -> "CleanConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            element_class_phrases=tuple(raw.get("element_class_phrases", DEFAULT_ELEMENT_CLASS_PHRASES)),
            placeholders=tuple(raw.get("placeholders", DEFAULT_PLACEHOLDERS)),
            translator=translator,
        )


@dataclass(frozen=True)
class CleanedLabel:
    """Outcome of cleaning one raw label: words when accepted, else a reason."""

    words: tuple[str, ...] | None
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.words is not None


def _contains_phrase(words: Sequence[str], phrase_words: Sequence[str]) -> bool:
    """True when phrase_words occur as a contiguous run inside words."""
    n = len(phrase_words)
    if n == 0 or n > len(words):
        return False
    return any(tuple(words[i : i + n]) == tuple(phrase_words) for i in range(len(words) - n + 1))


def clean_label(raw_label: str, app_name: str, config: CleanConfig | None = None) -> CleanedLabel:
    """Normalize a raw content description or reject it with a reason.

    Reject reasons: ``empty`` (nothing left after normalization),
    ``element-class`` (label restates the widget class), ``app-name``
    (label equals or contains the app name), ``placeholder`` (label is a
    known unfinished placeholder). Non-ASCII labels pass through the
    configured translator first; the default translator is the identity.
    """
    config = config or CleanConfig()
    text = raw_label
    if any(ord(ch) > 127 for ch in text):
        text = config.translator(text)
    words = normalize_label(text)
    if not words:
        return CleanedLabel(None, "empty")
    for phrase in config.element_class_phrases:
        if _contains_phrase(words, normalize_label(phrase)):
            return CleanedLabel(None, "element-class")
    app_words = normalize_label(app_name)
    if app_words and _contains_phrase(words, app_words):
        return CleanedLabel(None, "app-name")
    joined = " ".join(words)
    if joined in {" ".join(normalize_label(p)) for p in config.placeholders}:
        return CleanedLabel(None, "placeholder")
    return CleanedLabel(tuple(words))


class Vocabulary:
    """Token/id bijection with reserved specials and a frequency cutoff.

    Ids 0..3 are fixed to ``<start>``, ``<end>``, ``<unk>``, ``<pad>``;
    content tokens get ids from 4 upward ordered by descending training
    frequency then lexicographically.
    """

    def __init__(self, counts: Mapping[str, int], min_count: int):
        self.min_count = int(min_count)
        self.counts: dict[str, int] = dict(counts)
        kept = sorted(
            (t for t, c in self.counts.items() if c >= self.min_count and t not in SPECIAL_TOKENS),
            key=lambda t: (-self.counts[t], t),
        )
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        for offset, token in enumerate(kept):
            self.token_to_id[token] = len(SPECIAL_TOKENS) + offset
        self.id_to_token: dict[int, str] = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_for(self, token_id: int) -> str:
        try:
            return self.id_to_token[int(token_id)]
        except KeyError:
            raise ValueError(f"unknown token id {token_id}") from None

    def content_hash(self) -> str:
        payload = json.dumps(
            {"min_count": self.min_count, "tokens": sorted(self.token_to_id.items())},
            sort_keys=True,
        )
        return sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> Path:
        """Token-per-line vocabulary file: ``token<TAB>frequency``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# labelforge-vocab format_version={FORMAT_VERSION} min_count={self.min_count}"]
        for token_id in range(len(self)):
            token = self.id_to_token[token_id]
            lines.append(f"{token}\t{self.counts.get(token, 0)}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# labelforge-vocab"):
            raise ValueError(f"{path}: not a labelforge vocabulary file")
        min_count = int(lines[0].rsplit("min_count=", 1)[1])
        counts: dict[str, int] = {}
        order: list[str] = []
        for line in lines[1:]:
            if not line.strip():
                continue
            token, count = line.rsplit("\t", 1)
            counts[token] = int(count)
            order.append(token)
        vocab = cls({t: c for t, c in counts.items() if t not in SPECIAL_TOKENS}, min_count)
        if order != [vocab.id_to_token[i] for i in range(len(vocab))]:
            raise ValueError(f"{path}: token order does not match vocabulary rules")
        return vocab


def build_vocab(sequences: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Build the vocabulary from training-split word sequences only."""
    counts: Counter[str] = Counter()
    empty = True
    for words in sequences:
        empty = False
        counts.update(words)
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(counts, min_count)


def encode_label(words: Sequence[str], vocab: Vocabulary, max_words: int = MAX_LABEL_WORDS) -> list[int]:
    """Encode words as ``[<start>] ids [<end>]`` padded to fixed capacity.

    Inputs longer than ``max_words`` are truncated with a warning; words
    missing from the vocabulary map to ``<unk>``.
    """
    words = list(words)
    if len(words) > max_words:
        logger.warning("truncating %d-word label to %d words: %r", len(words), max_words, words)
        words = words[:max_words]
    ids = [START_ID] + [vocab.id_for(w) for w in words] + [END_ID]
    ids.extend([PAD_ID] * (max_words + 2 - len(ids)))
    return ids


def decode_ids(token_ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Words between ``<start>`` and the first ``<end>``, specials dropped."""
    words: list[str] = []
    for token_id in token_ids:
        token = vocab.token_for(token_id)  # raises on unknown ids
        if token == END_TOKEN:
            break
        if token in SPECIAL_TOKENS:
            continue
        words.append(token)
    return words


def sequence_length(token_ids: Sequence[int]) -> int:
    """Count of real tokens including <start> and <end>."""
    ids = list(token_ids)
    return ids.index(END_ID) + 1 if END_ID in ids else len(ids)


# --- train/val/test splits ------------------------------------------------

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class SplitManifest:
    """Seeded per-category assignment of apps to train/val/test."""

    assignments: dict[str, str]
    seed: int
    per_category_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def apps_for(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return sorted(a for a, s in self.assignments.items() if s == split)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": FORMAT_VERSION,
            "kind": "split-manifest",
            "seed": self.seed,
            "assignments": self.assignments,
            "per_category_counts": self.per_category_counts,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if raw.get("kind") != "split-manifest":
            raise ValueError(f"{path}: not a split manifest")
        return cls(
            assignments=dict(raw["assignments"]),
            seed=int(raw["seed"]),
            per_category_counts=raw.get("per_category_counts", {}),
        )


def _largest_remainder_quotas(n: int) -> tuple[int, int, int]:
    exact = [f * n for f in SPLIT_FRACTIONS]
    base = [int(q) for q in exact]
    remainders = [q - b for q, b in zip(exact, base)]
    leftover = n - sum(base)
    # remaining seats go to the largest remainders; ties favor train, val, test order
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        base[i] += 1
    return tuple(base)  # type: ignore[return-value]


def split_dataset(app_categories: Mapping[str, str], seed: int) -> SplitManifest:
    """Assign apps to 80/10/10 splits independently within each category.

    The shuffle is seeded per category so the outcome does not depend on
    input ordering. Categories with fewer than 3 apps go entirely to train.
    """
    by_category: dict[str, list[str]] = {}
    for app_id in sorted(app_categories):
        by_category.setdefault(app_categories[app_id], []).append(app_id)

    assignments: dict[str, str] = {}
    per_category: dict[str, dict[str, int]] = {}
    for category in sorted(by_category):
        apps = sorted(by_category[category])
        if len(apps) < 3:
            logger.warning(
                "category %r has %d app(s); assigning all to train", category, len(apps)
            )
            for app_id in apps:
                assignments[app_id] = "train"
            per_category[category] = {"train": len(apps), "val": 0, "test": 0}
            continue
        rng = random.Random(f"{seed}|{category}")
        rng.shuffle(apps)
        n_train, n_val, n_test = _largest_remainder_quotas(len(apps))
        for app_id in apps[:n_train]:
            assignments[app_id] = "train"
        for app_id in apps[n_train : n_train + n_val]:
            assignments[app_id] = "val"
        for app_id in apps[n_train + n_val :]:
            assignments[app_id] = "test"
        per_category[category] = {"train": n_train, "val": n_val, "test": n_test}
    return SplitManifest(assignments=assignments, seed=seed, per_category_counts=per_category)


# --- labeled samples and the dataset manifest ------------------------------


@dataclass
class LabeledSample:
    """One (button image, token sequence) pair ready for training or eval."""

    crop_ref: str
    token_ids: list[int]
    length: int
    words: list[str]
    app_id: str = ""
    app_category: str = "other"
    image: np.ndarray | None = None
    image_path: str | None = None

    def to_record(self) -> dict:
        return {
            "crop_ref": self.crop_ref,
            "app_id": self.app_id,
            "app_category": self.app_category,
            "image_path": self.image_path,
            "words": list(self.words),
            "token_ids": list(self.token_ids),
            "length": self.length,
        }

    @classmethod
    def from_record(cls, record: dict) -> "LabeledSample":
        return cls(
            crop_ref=record["crop_ref"],
            token_ids=list(record["token_ids"]),
            length=int(record["length"]),
            words=list(record["words"]),
            app_id=record.get("app_id", ""),
            app_category=record.get("app_category", "other"),
            image_path=record.get("image_path"),
        )


@dataclass
class CorpusBuild:
    """Everything the trainer needs: samples, vocabulary and splits."""

    samples: list[LabeledSample]
    vocab: Vocabulary
    splits: SplitManifest

    def samples_for(self, split: str) -> list[LabeledSample]:
        wanted = {a for a, s in self.splits.assignments.items() if s == split}
        return [s for s in self.samples if s.app_id in wanted]


def build_corpus(
    crops: Iterable[ElementCrop],
    seed: int,
    min_count: int = 5,
    clean_config: CleanConfig | None = None,
) -> CorpusBuild:
    """Clean crop labels, split apps per category, and encode every sample.

    The vocabulary is built from training-split sequences only, so words
    seen only in validation or test apps map to ``<unk>``.
    """
    clean_config = clean_config or CleanConfig()
    accepted: list[tuple[ElementCrop, tuple[str, ...]]] = []
    rejected = Counter()
    for crop in crops:
        if crop.raw_label is None:
            continue
        cleaned = clean_label(crop.raw_label, crop.app_name or crop.app_id, clean_config)
        if cleaned.accepted:
            accepted.append((crop, cleaned.words))
        else:
            rejected[cleaned.reason] += 1
    if rejected:
        logger.info("rejected labels by reason: %s", dict(rejected))
    if not accepted:
        raise ValueError("no crops with usable labels; cannot build a corpus")

    app_categories = {crop.app_id: crop.app_category for crop, _ in accepted}
    splits = split_dataset(app_categories, seed)
    train_apps = {a for a, s in splits.assignments.items() if s == "train"}
    vocab = build_vocab(
        (words for crop, words in accepted if crop.app_id in train_apps),
        min_count=min_count,
    )

    samples = []
    for crop, words in accepted:
        token_ids = encode_label(words, vocab)
        samples.append(
            LabeledSample(
                crop_ref=crop.crop_id,
                token_ids=token_ids,
                length=sequence_length(token_ids),
                words=list(words)[:MAX_LABEL_WORDS],
                app_id=crop.app_id,
                app_category=crop.app_category,
                image=crop.image if crop.image is not None and crop.image.size else None,
                image_path=crop.image_path,
            )
        )
    return CorpusBuild(samples=samples, vocab=vocab, splits=splits)


def write_dataset_manifest(samples: Iterable[LabeledSample], path: str | Path) -> Path:
    return write_jsonl(path, (s.to_record() for s in samples), kind="dataset-manifest")


def read_dataset_manifest(path: str | Path) -> list[LabeledSample]:
    return [LabeledSample.from_record(r) for r in read_jsonl(path, kind="dataset-manifest")]
