"""CNN + Transformer encoder-decoder mapping button images to token logits.

The visual front end is a small residual convolutional stack whose final
feature grid is flattened in raster order (left to right, top to bottom)
into a sequence. A fully-connected layer embeds the sequence, sinusoidal
position encodings are added, and a stack of self-attention + feed-forward
encoder layers produces the memory. The decoder mirrors the encoder with
an extra cross-attention sub-layer against the memory and a causal mask
over its own positions; a final linear projection yields vocabulary logits.

Every sub-layer is wrapped as ``LayerNorm(x + Sublayer(x))``. The
feed-forward transform is the plain affine composition
``W2 (W1 z + b1) + b2`` applied position-wise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .corpus import SEQUENCE_CAPACITY, Vocabulary

LOG_EPSILON = 1e-9


class ModelNumericsError(RuntimeError):
    """Raised when non-finite activations appear, naming the layer."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``d_k`` and ``d_v`` are the concatenated query/key and value widths
    across all heads (each head works in ``d_k // heads`` dimensions), so
    the defaults ``d_k = d_v = d_model = 512`` with 8 heads give 64-wide
    heads.
    """

    vocab_size: int
    encoder_layers: int = 3
    decoder_layers: int = 3
    d_model: int = 512
    d_k: int = 512
    d_v: int = 512
    d_ff: int = 2048
    heads: int = 8
    max_seq: int = SEQUENCE_CAPACITY
    input_resolution: int = 224
    cnn_channels: int = 32
    cnn_stages: int = 4
    stem_pool: bool = False
    dropout: float = 0.0  # stub; kept at 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "d_k", "d_v", "d_ff", "heads", "max_seq",
                     "input_resolution", "cnn_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 0 or self.cnn_stages < 0:
            raise ValueError("layer/stage counts must be >= 0")
        if self.d_k % self.heads or self.d_v % self.heads:
            raise ValueError("heads must divide d_k and d_v")
        if self.dropout != 0.0:
            raise ValueError("dropout is a config stub and must stay 0")

    @property
    def d_embed(self) -> int:
        return self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class FeatureSequence:
    """Raster-order CNN features: ``vectors`` is (batch, H'*W', d_embed)."""

    vectors: torch.Tensor
    grid_shape: tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.grid_shape
        if self.vectors.shape[-2] != h * w:
            raise ValueError(f"expected {h * w} positions, got {self.vectors.shape[-2]}")


# --- image preparation ------------------------------------------------------


def prepare_image(image: np.ndarray, resolution: int) -> np.ndarray:
    """Pad to square with edge replication, resize, scale to [0,1] CHW."""
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected HxWx{{1,3}} image, got shape {image.shape}")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty image")
    side = max(h, w)
    pad_h, pad_w = side - h, side - w
    padded = np.pad(
        image,
        ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2), (0, 0)),
        mode="edge",
    )
    if side != resolution:
        pil = Image.fromarray(padded.astype(np.uint8))
        padded = np.asarray(pil.resize((resolution, resolution), Image.BILINEAR))
    chw = padded.astype(np.float32).transpose(2, 0, 1) / 255.0
    return chw


def image_batch(images: Sequence[np.ndarray], resolution: int) -> torch.Tensor:
    """Stack prepared images into a (batch, 3, R, R) float tensor."""
    return torch.from_numpy(np.stack([prepare_image(im, resolution) for im in images]))


# --- convolution / pooling primitives --------------------------------------


def _as_nchw(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    if x.dim() == 2:
        return x[None, None], 2
    if x.dim() == 3:
        return x[None], 3
    if x.dim() == 4:
        return x, 4
    raise ValueError(f"expected 2-4 dims, got {x.dim()}")


def conv2d(x: torch.Tensor, kernels: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1) -> torch.Tensor:
    """Valid cross-correlation: sum of elementwise products per position."""
    nchw, rank = _as_nchw(x)
    out = F.conv2d(nchw, kernels, bias=bias, stride=stride)
    return out[0, 0] if rank == 2 else out[0] if rank == 3 else out


def max_pool(x: torch.Tensor, window: int, stride: int | None = None) -> torch.Tensor:
    """Max over each window; stride defaults to the window size."""
    nchw, rank = _as_nchw(x)
    out = F.max_pool2d(nchw, kernel_size=window, stride=stride or window)
    return out[0, 0] if rank == 2 else out[0] if rank == 3 else out


def avg_pool(x: torch.Tensor, window: int, stride: int | None = None) -> torch.Tensor:
    """Mean over each window; stride defaults to the window size."""
    nchw, rank = _as_nchw(x)
    out = F.avg_pool2d(nchw, kernel_size=window, stride=stride or window)
    return out[0, 0] if rank == 2 else out[0] if rank == 3 else out


def _group_norm(channels: int) -> nn.GroupNorm:
    # deterministic, batch-size independent normalization for the conv stack
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        # conv biases are cancelled by the following norm, so leave them out
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = _group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = _group_norm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x + self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x))))))


class SmallCnn(nn.Module):
    """Residual conv stack ending in a raster-ordered feature sequence.

    There is no global pooling at the end: the final grid is kept and
    flattened row-major so spatial layout survives into the encoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.cnn_channels
        self.config = config
        self.stem = nn.Conv2d(3, c, 3, stride=2, padding=1, bias=False)
        self.stem_norm = _group_norm(c)
        stages = []
        for _ in range(config.cnn_stages):
            stages.append(nn.Conv2d(c, min(2 * c, 512), 3, stride=2, padding=1, bias=False))
            c = min(2 * c, 512)
            stages.append(_group_norm(c))
            stages.append(nn.ReLU())
            stages.append(ResidualBlock(c))
        self.stages = nn.Sequential(*stages)
        self.project = nn.Conv2d(c, config.d_embed, 1)

    def forward(self, images: torch.Tensor) -> FeatureSequence:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.config.input_resolution or images.shape[3] != self.config.input_resolution:
            raise ValueError(
                f"expected {self.config.input_resolution}px square input, got {tuple(images.shape[2:])}"
            )
        x = F.relu(self.stem_norm(self.stem(images)))
        if self.config.stem_pool:
            x = F.max_pool2d(x, 2, 2)
        x = self.stages(x)
        x = self.project(x)
        batch, d, h, w = x.shape
        vectors = x.flatten(2).transpose(1, 2)  # row-major raster order
        return FeatureSequence(vectors=vectors, grid_shape=(h, w))


# --- attention --------------------------------------------------------------


def attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention: ``softmax(QK^T / sqrt(d_k)) V``.

    ``mask`` is boolean over score positions with True where attention is
    allowed; disallowed scores are forced to -inf before the softmax. A row
    with no allowed position has no defined distribution and raises.
    Returns (output, weights).
    """
    d_k = query.shape[-1]
    scores = query @ key.transpose(-2, -1) / math.sqrt(d_k)
    if mask is not None:
        if (~mask).all(dim=-1).any():
            raise ValueError("attention mask leaves a row with no attendable position")
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ value, weights


class MultiHeadAttention(nn.Module):
    """h parallel attention heads on projected Q/K/V, concatenated and mixed.

    The projection matrices carry no bias, matching the plain matrix form
    of the attention equations. Set ``store_weights`` to keep the latest
    attention weights on the module for inspection; the default leaves the
    forward pass free of module writes so frozen models can serve
    concurrent readers.
    """

    store_weights: bool = False

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.w_q = nn.Linear(config.d_model, config.d_k, bias=False)
        self.w_k = nn.Linear(config.d_model, config.d_k, bias=False)
        self.w_v = nn.Linear(config.d_model, config.d_v, bias=False)
        self.w_o = nn.Linear(config.d_v, config.d_model, bias=False)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, n, width = x.shape
        return x.view(batch, n, self.heads, width // self.heads).transpose(1, 2)

    def forward(
        self,
        query_source: torch.Tensor,
        key_value_source: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if key_value_source is None:
            key_value_source = query_source
        q = self._split(self.w_q(query_source))
        k = self._split(self.w_k(key_value_source))
        v = self._split(self.w_v(key_value_source))
        out, weights = attention(q, k, v, mask=mask)
        if self.store_weights:
            self.last_weights = weights
        batch, _, n, _ = out.shape
        return self.w_o(out.transpose(1, 2).reshape(batch, n, -1))


class FeedForward(nn.Module):
    """Position-wise two-layer affine transform ``W2 (W1 z + b1) + b2``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.w_1 = nn.Linear(config.d_model, config.d_ff)
        self.w_2 = nn.Linear(config.d_ff, config.d_model)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.w_2(self.w_1(z))


def sinusoidal_encoding(n_positions: int, d_model: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed sin/cos position table; position 0 is all (0, 1, 0, 1, ...)."""
    position = torch.arange(n_positions, dtype=dtype)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=dtype) * (-math.log(10000.0) / d_model))
    angles = position * div
    table = torch.zeros(n_positions, d_model, dtype=dtype)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : d_model // 2])
    return table


def causal_mask(length: int, device: torch.device | None = None) -> torch.Tensor:
    """Boolean (length, length) mask, True where position i may see j <= i."""
    return torch.tril(torch.ones(length, length, dtype=torch.bool, device=device))


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attention = MultiHeadAttention(config)
        self.feed_forward = FeedForward(config)
        self.norm1 = nn.LayerNorm(config.d_model)
        self.norm2 = nn.LayerNorm(config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.self_attention(x))
        return self.norm2(x + self.feed_forward(x))


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attention = MultiHeadAttention(config)
        self.cross_attention = MultiHeadAttention(config)
        self.feed_forward = FeedForward(config)
        self.norm1 = nn.LayerNorm(config.d_model)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.norm3 = nn.LayerNorm(config.d_model)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.self_attention(x, mask=mask))
        x = self.norm2(x + self.cross_attention(x, memory))
        return self.norm3(x + self.feed_forward(x))


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise ModelNumericsError(f"non-finite activations in {where}")


class LabelModel(nn.Module):
    """End-to-end button captioner: images in, per-position token logits out."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.cnn = SmallCnn(config)
        self.feature_embed = nn.Linear(config.d_embed, config.d_model)
        # keeps embedded features on the positional encoding's scale
        self.feature_norm = nn.LayerNorm(config.d_model)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.token_embed = nn.Embedding(config.vocab_size, config.d_model)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.decoder_layers))
        self.output_projection = nn.Linear(config.d_model, config.vocab_size)
        max_positions = max(config.max_seq, 4096)
        self.register_buffer("positional", sinusoidal_encoding(max_positions, config.d_model), persistent=False)

    def encode_image(self, images: torch.Tensor) -> FeatureSequence:
        return self.cnn(images)

    def embed_features(self, features: FeatureSequence) -> torch.Tensor:
        """Fully-connected embedding of CNN features, normalized to unit scale."""
        return self.feature_norm(self.feature_embed(features.vectors))

    def encoder_forward(self, features: FeatureSequence) -> torch.Tensor:
        """Embed CNN features, add position encodings, run the encoder stack."""
        x = self.embed_features(features)
        n = x.shape[-2]
        if n > self.positional.shape[0]:
            raise ValueError(f"feature sequence of {n} positions exceeds positional table")
        x = x + self.positional[:n].to(x.dtype)
        for i, layer in enumerate(self.encoder_layers):
            x = layer(x)
            _check_finite(x, f"encoder layer {i}")
        return x

    def decoder_forward(self, memory: torch.Tensor, prefix_ids: torch.Tensor) -> torch.Tensor:
        """Causally masked decoding of a target prefix against the memory.

        Returns (batch, prefix_len, vocab_size) logits; the logits at
        position t depend only on prefix positions <= t and the memory.
        """
        if prefix_ids.dim() == 1:
            prefix_ids = prefix_ids[None]
        length = prefix_ids.shape[1]
        if length > self.config.max_seq:
            raise ValueError(f"prefix of {length} tokens exceeds capacity {self.config.max_seq}")
        x = self.token_embed(prefix_ids) + self.positional[:length].to(self.token_embed.weight.dtype)
        mask = causal_mask(length, device=prefix_ids.device)
        for i, layer in enumerate(self.decoder_layers):
            x = layer(x, memory, mask)
            _check_finite(x, f"decoder layer {i}")
        return self.output_projection(x)

    def forward(self, images: torch.Tensor, prefix_ids: torch.Tensor) -> torch.Tensor:
        memory = self.encoder_forward(self.encode_image(images))
        return self.decoder_forward(memory, prefix_ids)


# --- loss --------------------------------------------------------------------


def kl_loss(
    predicted: torch.Tensor,
    reference: torch.Tensor,
    mask: torch.Tensor,
    eps: float = LOG_EPSILON,
) -> torch.Tensor:
    """Mean KL divergence between reference and predicted distributions.

    ``predicted`` and ``reference`` are (..., positions, vocab) probability
    rows; ``mask`` is True at positions that count (PAD positions excluded).
    For one-hot references this reduces to cross-entropy -log q[target].
    Zero predicted probabilities are clamped by ``eps`` before the log.
    """
    if not mask.any():
        raise ValueError("loss mask excludes every position")
    per_element = torch.xlogy(reference, reference) - reference * torch.log(predicted.clamp_min(eps))
    per_position = per_element.sum(dim=-1)
    return per_position[mask].mean()


def reference_distributions(
    targets: torch.Tensor,
    vocab_size: int,
    smoothing: float = 0.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """One-hot rows for target ids, optionally smoothed toward uniform."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    one_hot = F.one_hot(targets, num_classes=vocab_size).to(dtype)
    if smoothing:
        one_hot = (1.0 - smoothing) * one_hot + smoothing / vocab_size
    return one_hot


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.pt"


def save_checkpoint(directory: str | Path, model: LabelModel, vocab: Vocabulary,
                    meta: dict | None = None) -> Path:
    """Write a versioned checkpoint archive under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab_hash": vocab.content_hash(),
        "vocab": {"counts": vocab.counts, "min_count": vocab.min_count},
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    path = directory / CHECKPOINT_FILE
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[LabelModel, Vocabulary, dict]:
    """Load a checkpoint, validating version and parameter shapes."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["config"])
    vocab = Vocabulary(payload["vocab"]["counts"], payload["vocab"]["min_count"])
    if vocab.content_hash() != payload["vocab_hash"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    if len(vocab) != config.vocab_size:
        raise ValueError(f"{path}: vocab size {len(vocab)} != config {config.vocab_size}")
    for name, tensor in payload["state_dict"].items():
        if tensor.is_floating_point() and not torch.isfinite(tensor).all():
            raise ValueError(f"{path}: non-finite values in parameter {name!r}")
    model = LabelModel(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model, vocab, payload.get("meta", {})
