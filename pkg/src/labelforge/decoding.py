"""Autoregressive label generation over a frozen model.

Decoding starts from ``<start>`` and extends the prefix one token at a
time; validation and test labels are produced this way rather than by
teacher forcing, so each step conditions on previously predicted words.
Greedy argmax is the default, with ties broken toward the lowest token id
for reproducibility. Beam search sits behind the same interface via a
width flag.
"""

from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import END_ID, MAX_LABEL_WORDS, START_ID, Vocabulary, decode_ids
from .ingest import ElementCrop
from .model import LabelModel, image_batch

logger = logging.getLogger(__name__)


def _argmax_lowest_id(logits: torch.Tensor) -> int:
    """Index of the maximum logit; the lowest index wins ties."""
    return int(np.argmax(logits.detach().cpu().numpy()))


@torch.no_grad()
def greedy_decode_batch(
    images: Sequence[np.ndarray],
    model: LabelModel,
    vocab: Vocabulary,
    max_words: int = MAX_LABEL_WORDS,
) -> list[list[str]]:
    """Greedy-decode a batch of images in one pass; returns word lists."""
    model.eval()
    batch = image_batch(images, model.config.input_resolution)
    memory = model.encoder_forward(model.encode_image(batch))
    prefixes = torch.full((len(images), 1), START_ID, dtype=torch.long)
    finished = [False] * len(images)
    for _ in range(max_words):
        logits = model.decoder_forward(memory, prefixes)[:, -1, :]
        next_ids = [
            END_ID if finished[i] else _argmax_lowest_id(logits[i])
            for i in range(len(images))
        ]
        finished = [f or t == END_ID for f, t in zip(finished, next_ids)]
        prefixes = torch.cat([prefixes, torch.tensor(next_ids, dtype=torch.long)[:, None]], dim=1)
        if all(finished):
            break
    return [decode_ids(list(prefixes[i].tolist()) + [END_ID], vocab) for i in range(len(images))]


def greedy_decode(
    image: np.ndarray,
    model: LabelModel,
    vocab: Vocabulary,
    max_words: int = MAX_LABEL_WORDS,
) -> list[str]:
    """Greedy label for one image; never longer than ``max_words`` words."""
    return greedy_decode_batch([image], model, vocab, max_words=max_words)[0]


@torch.no_grad()
def beam_decode(
    image: np.ndarray,
    model: LabelModel,
    vocab: Vocabulary,
    beam_width: int,
    max_words: int = MAX_LABEL_WORDS,
) -> list[str]:
    """Beam-search label for one image.

    Hypotheses are ranked by total log probability with no length
    normalization; ordering ties fall back to token-id sequence so the
    result is deterministic.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    model.eval()
    batch = image_batch([image], model.config.input_resolution)
    memory = model.encoder_forward(model.encode_image(batch))

    beams: list[tuple[float, tuple[int, ...], bool]] = [(0.0, (START_ID,), False)]
    for _ in range(max_words):
        candidates: list[tuple[float, tuple[int, ...], bool]] = []
        for score, ids, done in beams:
            if done:
                candidates.append((score, ids, done))
                continue
            prefix = torch.tensor([ids], dtype=torch.long)
            logits = model.decoder_forward(memory, prefix)[0, -1, :]
            log_probs = torch.log_softmax(logits, dim=-1).cpu().numpy()
            top = np.argsort(-log_probs, kind="stable")[:beam_width]
            for token_id in top:
                token_id = int(token_id)
                candidates.append(
                    (score + float(log_probs[token_id]), ids + (token_id,), token_id == END_ID)
                )
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = candidates[:beam_width]
        if all(done for _, _, done in beams):
            break
    best = beams[0]
    return decode_ids(list(best[1]) + [END_ID], vocab)


def decode_label(
    image: np.ndarray,
    model: LabelModel,
    vocab: Vocabulary,
    beam_width: int = 0,
    max_words: int = MAX_LABEL_WORDS,
) -> list[str]:
    """Route to greedy (beam_width 0 or 1) or beam decoding."""
    if beam_width and beam_width > 1:
        return beam_decode(image, model, vocab, beam_width, max_words=max_words)
    return greedy_decode(image, model, vocab, max_words=max_words)


def batch_predict(
    crops: Iterable[ElementCrop],
    model: LabelModel,
    vocab: Vocabulary,
    beam_width: int = 0,
) -> list[dict]:
    """Predict a label per crop, in input order.

    An unreadable crop produces a record with an ``error`` field and
    processing continues.
    """
    records: list[dict] = []
    for crop in crops:
        base = {"crop_id": crop.crop_id, "app_id": crop.app_id}
        try:
            if crop.image is None or crop.image.size == 0:
                raise ValueError("crop has no image data")
            words = decode_label(crop.image, model, vocab, beam_width=beam_width)
        except Exception as exc:  # keep going; one bad crop must not kill the run
            logger.warning("prediction failed for crop %s: %s", crop.crop_id, exc)
            records.append({**base, "error": str(exc)})
            continue
        records.append({**base, "label": " ".join(words), "token_count": len(words)})
    return records
