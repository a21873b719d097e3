from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icons import ICON_LABELS, icon_dataset, make_icon  # noqa: E402

from labelforge.corpus import (  # noqa: E402
    CorpusBuild,
    LabeledSample,
    SplitManifest,
    build_vocab,
    encode_label,
    sequence_length,
)
from labelforge.model import ModelConfig  # noqa: E402


def hierarchy_xml(nodes: list[dict]) -> str:
    """Build a uiautomator-style hierarchy dump from node dicts."""
    lines = ["<hierarchy>"]
    for node in nodes:
        l, t, r, b = node["bounds"]
        attrs = [
            f'class="{node.get("cls", "android.widget.ImageButton")}"',
            f'bounds="[{l},{t}][{r},{b}]"',
            f'clickable="{"true" if node.get("clickable", True) else "false"}"',
        ]
        if node.get("desc") is not None:
            attrs.append(f'content-desc="{node["desc"]}"')
        if node.get("text") is not None:
            attrs.append(f'text="{node["text"]}"')
        lines.append(f"  <node {' '.join(attrs)}/>")
    lines.append("</hierarchy>")
    return "\n".join(lines)


def screenshot_array(width: int = 100, height: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def write_capture_app(
    root: Path,
    app_id: str,
    screens: list[tuple[str, np.ndarray, str]],
    category: str = "music",
    install_bucket: str = "1M - 5M",
) -> Path:
    """Write one app's capture directory: meta.json + png/hierarchy pairs."""
    from PIL import Image

    app_dir = root / app_id
    app_dir.mkdir(parents=True, exist_ok=True)
    (app_dir / "meta.json").write_text(
        json.dumps({"app_id": app_id, "category": category, "install_bucket": install_bucket})
    )
    for screen_id, screenshot, hierarchy in screens:
        Image.fromarray(screenshot).save(app_dir / f"{screen_id}.png")
        (app_dir / f"{screen_id}.hierarchy").write_text(hierarchy)
    return app_dir


def icon_corpus_build(n: int = 16, seed: int = 0) -> CorpusBuild:
    """In-memory 16-sample corpus over the synthetic icons, all in train."""
    pairs = icon_dataset(n)
    vocab = build_vocab([words for _, words in pairs], min_count=1)
    samples = []
    for i, (image, words) in enumerate(pairs):
        token_ids = encode_label(words, vocab)
        samples.append(
            LabeledSample(
                crop_ref=f"icon-{i:02d}",
                token_ids=token_ids,
                length=sequence_length(token_ids),
                words=words,
                app_id="com.toy.icons",
                image=image,
            )
        )
    return CorpusBuild(
        samples=samples,
        vocab=vocab,
        splits=SplitManifest(assignments={"com.toy.icons": "train"}, seed=seed),
    )


def tiny_model_config(vocab_size: int, **overrides) -> ModelConfig:
    """Small architectures for fast tests; override any field."""
    defaults = dict(
        vocab_size=vocab_size,
        encoder_layers=1,
        decoder_layers=1,
        d_model=16,
        d_k=16,
        d_v=16,
        d_ff=32,
        heads=2,
        input_resolution=16,
        cnn_channels=4,
        cnn_stages=1,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def write_icon_capture_dir(root: Path, n: int = 16, app_id: str = "com.toy.icons") -> Path:
    """Capture directory whose crops reproduce the synthetic icon corpus.

    Each screen is a 40x40 screenshot holding one 32x32 icon button at
    (4,4)-(36,36) whose content-desc is the icon's label.
    """
    screens = []
    for i in range(n):
        icon = make_icon(i)
        screenshot = np.full((40, 40, 3), 245, dtype=np.uint8)
        screenshot[4:36, 4:36] = icon
        label = " ".join(ICON_LABELS[i % len(ICON_LABELS)])
        hierarchy = hierarchy_xml([{"bounds": (4, 4, 36, 36), "desc": label}])
        screens.append((f"screen{i:02d}", screenshot, hierarchy))
    return write_capture_app(root, app_id, screens)


@pytest.fixture
def capture_root(tmp_path: Path) -> Path:
    root = tmp_path / "captures"
    root.mkdir()
    return root
