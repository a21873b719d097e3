"""Scikit-learn style estimator wrapping the captioning model.

``ButtonCaptioner`` exposes the train/decode cycle through the familiar
``fit(X, y)`` / ``predict(X)`` surface so the model composes with
pipelines, grid search and ``clone``. ``X`` is a sequence of HxWxC uint8
button images (or one stacked array) and ``y`` holds their labels, either
as strings or as pre-normalized word lists.

Defaults are desk-scale so ``fit`` finishes in minutes on a CPU; the
full-size architecture (d_model=512, 3+3 layers, 8 heads, d_ff=2048,
224px inputs) is one ``set_params`` away.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import (
    MAX_LABEL_WORDS,
    CorpusBuild,
    LabeledSample,
    SplitManifest,
    build_vocab,
    encode_label,
    normalize_label,
    sequence_length,
)
from .decoding import decode_label
from .model import ModelConfig
from .training import TrainConfig, train_loop


def check_image_list(X) -> list[np.ndarray]:
    """Validate a batch of button images into a list of HxWxC uint8 arrays."""
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            images = [X[i] for i in range(X.shape[0])]
        elif X.ndim == 3:
            images = [X]
        else:
            raise ValueError(f"expected (N,H,W,C) or (H,W,C) array, got shape {X.shape}")
    else:
        images = list(X)
    if not images:
        raise ValueError("no images given")
    checked = []
    for i, image in enumerate(images):
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image {i}: expected HxWxC with 1 or 3 channels, got {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"image {i}: empty image")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.floating) and arr.max(initial=0.0) <= 1.0:
                arr = (arr * 255).round()
            arr = np.clip(arr, 0, 255).astype(np.uint8)
        checked.append(arr)
    return checked


def check_label_list(y, n_images: int) -> list[list[str]]:
    """Validate labels: strings are normalized, word lists pass through."""
    labels = list(y)
    if len(labels) != n_images:
        raise ValueError(f"got {n_images} images but {len(labels)} labels")
    out = []
    for i, label in enumerate(labels):
        if isinstance(label, str):
            words = normalize_label(label)
        else:
            words = list(label)
            if not all(isinstance(w, str) for w in words):
                raise ValueError(f"label {i}: expected a string or a list of words")
        out.append(words[:MAX_LABEL_WORDS])
    return out


class ButtonCaptioner(BaseEstimator):
    """CNN + Transformer button captioner with an sklearn estimator API."""

    def __init__(
        self,
        d_model: int = 64,
        encoder_layers: int = 2,
        decoder_layers: int = 2,
        heads: int = 4,
        d_ff: int = 128,
        d_k: int | None = None,
        d_v: int | None = None,
        input_resolution: int = 32,
        cnn_channels: int = 16,
        cnn_stages: int = 2,
        stem_pool: bool = False,
        min_count: int = 1,
        batch_size: int = 16,
        max_steps: int = 600,
        warmup_steps: int = 150,
        eval_every: int = 100,
        label_smoothing: float = 0.0,
        grad_clip: float | None = None,
        patience: int | None = None,
        beam_width: int = 0,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.d_ff = d_ff
        self.d_k = d_k
        self.d_v = d_v
        self.input_resolution = input_resolution
        self.cnn_channels = cnn_channels
        self.cnn_stages = cnn_stages
        self.stem_pool = stem_pool
        self.min_count = min_count
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.warmup_steps = warmup_steps
        self.eval_every = eval_every
        self.label_smoothing = label_smoothing
        self.grad_clip = grad_clip
        self.patience = patience
        self.beam_width = beam_width
        self.seed = seed

    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            d_model=self.d_model,
            d_k=self.d_k if self.d_k is not None else self.d_model,
            d_v=self.d_v if self.d_v is not None else self.d_model,
            d_ff=self.d_ff,
            heads=self.heads,
            input_resolution=self.input_resolution,
            cnn_channels=self.cnn_channels,
            cnn_stages=self.cnn_stages,
            stem_pool=self.stem_pool,
        )

    def fit(self, X, y) -> "ButtonCaptioner":
        """Train on (image, label) pairs; returns self."""
        images = check_image_list(X)
        labels = check_label_list(y, len(images))
        vocab = build_vocab(labels, min_count=self.min_count)
        samples = []
        for i, (image, words) in enumerate(zip(images, labels)):
            token_ids = encode_label(words, vocab)
            samples.append(
                LabeledSample(
                    crop_ref=f"sample-{i:05d}",
                    token_ids=token_ids,
                    length=sequence_length(token_ids),
                    words=words,
                    app_id="fit",
                    image=image,
                )
            )
        build = CorpusBuild(
            samples=samples,
            vocab=vocab,
            splits=SplitManifest(assignments={"fit": "train"}, seed=self.seed),
        )
        train_config = TrainConfig(
            seed=self.seed,
            batch_size=min(self.batch_size, len(samples)),
            max_steps=self.max_steps,
            warmup_steps=self.warmup_steps,
            eval_every=self.eval_every,
            label_smoothing=self.label_smoothing,
            grad_clip=self.grad_clip,
            patience=self.patience,
        )
        result = train_loop(build, self._model_config(len(vocab)), train_config)
        self.model_ = result.model
        self.vocab_ = vocab
        self.train_score_ = result.best_score
        self.history_ = result.log
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this ButtonCaptioner is not fitted; call fit first")

    def predict_words(self, X) -> list[list[str]]:
        """Decoded word lists, one per image."""
        self._check_fitted()
        images = check_image_list(X)
        return [
            decode_label(image, self.model_, self.vocab_, beam_width=self.beam_width)
            for image in images
        ]

    def predict(self, X) -> list[str]:
        """Decoded labels as space-joined strings."""
        return [" ".join(words) for words in self.predict_words(X)]

    def score(self, X, y) -> float:
        """Exact-match rate of predictions against reference labels."""
        images = check_image_list(X)
        references = check_label_list(y, len(images))
        predictions = self.predict_words(images)
        return sum(p == r for p, r in zip(predictions, references)) / len(images)
