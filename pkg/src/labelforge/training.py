"""Optimizer, warmup learning-rate schedule and the teacher-forced loop.

Training follows the warmup-then-decay schedule
``lr = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`` with Adam
(beta1=0.9, beta2=0.98, eps=1e-9). Each step teacher-forces the decoder on
ground-truth prefixes, computes the KL loss against (optionally smoothed)
one-hot references with PAD positions masked out, and updates parameters.

Checkpoints are selected by validation exact match under greedy decoding;
ties keep the earlier step.
"""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .corpus import PAD_ID, CorpusBuild, LabeledSample, Vocabulary
from .decoding import greedy_decode_batch
from .jsonl import FORMAT_VERSION
from .model import (
    LabelModel,
    ModelConfig,
    image_batch,
    kl_loss,
    reference_distributions,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9


def lr_at(step: int, d_model: int, warmup_steps: int) -> float:
    """Warmup learning rate at a 1-based step.

    Rises linearly for ``warmup_steps`` steps, then decays as the inverse
    square root of the step; the two branches meet exactly at the warmup
    step.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    # step * warmup^-1.5 rewritten so both branches are bit-equal at warmup
    rising = step**-0.5 * (step / warmup_steps) ** 1.5
    return d_model**-0.5 * min(step**-0.5, rising)


@dataclass
class OptimizerState:
    """Adam accumulators keyed by parameter name."""

    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
) -> OptimizerState:
    """One bias-corrected Adam update, in place over ``params``.

    A non-finite gradient raises immediately, naming the parameter group.
    """
    state.step += 1
    t = state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if not torch.isfinite(grad).all():
            raise ValueError(f"non-finite gradient in parameter group {name!r}")
        m = state.first_moment.setdefault(name, torch.zeros_like(param))
        v = state.second_moment.setdefault(name, torch.zeros_like(param))
        m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        param.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    max_steps: int = 2000
    warmup_steps: int = 4000
    eval_every: int = 200
    selection_metric: str = "exact_match"
    label_smoothing: float = 0.0
    grad_clip: float | None = None
    patience: int | None = None
    bucket_factor: int = 4

    def __post_init__(self) -> None:
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, max_steps and eval_every must be >= 1")
        if self.selection_metric != "exact_match":
            raise ValueError(f"unsupported selection metric {self.selection_metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


def batch_tensors(
    samples: Sequence[LabeledSample], resolution: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a batch's images and padded token sequences into tensors."""
    missing = [s.crop_ref for s in samples if s.image is None]
    if missing:
        raise ValueError(f"samples without images: {missing[:3]}")
    images = image_batch([s.image for s in samples], resolution)
    token_ids = torch.tensor([s.token_ids for s in samples], dtype=torch.long)
    return images, token_ids


def train_step(
    model: LabelModel,
    batch: Sequence[LabeledSample],
    state: OptimizerState,
    lr: float,
    label_smoothing: float = 0.0,
    grad_clip: float | None = None,
) -> float:
    """One teacher-forced step; returns the loss before the update.

    The decoder sees prefix tokens ``y[0..L-2]`` and is scored against
    targets ``y[1..L-1]`` with PAD positions excluded from the loss.
    """
    if not batch:
        raise ValueError("empty batch")
    images, token_ids = batch_tensors(batch, model.config.input_resolution)
    inputs = token_ids[:, :-1]
    targets = token_ids[:, 1:]
    mask = targets != PAD_ID

    model.train()
    logits = model(images, inputs)
    predicted = torch.softmax(logits, dim=-1)
    reference = reference_distributions(
        targets, model.config.vocab_size, smoothing=label_smoothing, dtype=predicted.dtype
    )
    loss = kl_loss(predicted, reference, mask)

    model.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    params = dict(model.named_parameters())
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    adam_step(params, grads, state, lr)
    return float(loss.detach())


def exact_match_eval(model: LabelModel, samples: Sequence[LabeledSample], vocab: Vocabulary,
                     batch_size: int = 64) -> float:
    """Greedy-decode every sample and report the exact-match rate."""
    if not samples:
        raise ValueError("no samples to evaluate")
    hits = 0
    model.eval()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        decoded = greedy_decode_batch([s.image for s in chunk], model, vocab)
        hits += sum(words == list(s.words) for words, s in zip(decoded, chunk))
    return hits / len(samples)


def _batches(order: list[int], samples: Sequence[LabeledSample], config: TrainConfig) -> Iterable[list[LabeledSample]]:
    """Yield shuffled batches, sorting by true length only within a bucket."""
    bucket_size = config.batch_size * max(1, config.bucket_factor)
    for bucket_start in range(0, len(order), bucket_size):
        bucket = order[bucket_start : bucket_start + bucket_size]
        bucket.sort(key=lambda i: (-samples[i].length, i))
        for start in range(0, len(bucket), config.batch_size):
            yield [samples[i] for i in bucket[start : start + config.batch_size]]


@dataclass
class TrainResult:
    model: LabelModel
    best_step: int
    best_score: float
    eval_split: str
    log: list[dict]
    checkpoint_dir: Path | None = None
    log_path: Path | None = None


def train_loop(
    build: CorpusBuild,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train on the corpus and return the model at its best checkpoint.

    Validation runs every ``eval_every`` steps using greedy decoding; when
    the validation split is empty the training split is evaluated instead
    (and said so in the log). The best checkpoint wins on exact match with
    ties going to the earlier step. All shuffling derives from the seed.
    """
    train_samples = build.samples_for("train")
    if not train_samples:
        raise ValueError("training split is empty")
    eval_split = "val"
    eval_samples = build.samples_for("val")
    if not eval_samples:
        logger.warning("validation split is empty; evaluating on the training split")
        eval_split = "train"
        eval_samples = train_samples

    torch.manual_seed(config.seed)
    model = LabelModel(model_config)
    state = OptimizerState()
    rng = random.Random(config.seed)

    ckpt_root = None
    log_path = None
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_root = out_dir / "ckpt"
        ckpt_root.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_file = log_path.open("w", encoding="utf-8")
        log_file.write(json.dumps({"format_version": FORMAT_VERSION, "kind": "train-log"}) + "\n")

    log: list[dict] = []
    best_step = 0
    best_score = -1.0
    best_state: dict | None = None
    evals_since_best = 0
    step = 0

    def emit(record: dict) -> None:
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    try:
        stop = False
        while not stop:
            order = list(range(len(train_samples)))
            rng.shuffle(order)
            for batch in _batches(order, train_samples, config):
                step += 1
                lr = lr_at(step, model_config.d_model, config.warmup_steps)
                loss = train_step(
                    model, batch, state, lr,
                    label_smoothing=config.label_smoothing,
                    grad_clip=config.grad_clip,
                )
                record = {"step": step, "lr": lr, "loss": loss}
                if step % config.eval_every == 0 or step >= config.max_steps:
                    score = exact_match_eval(model, eval_samples, build.vocab)
                    record["val_exact_match"] = score
                    record["eval_split"] = eval_split
                    if ckpt_root is not None:
                        save_checkpoint(
                            ckpt_root / f"step-{step}", model, build.vocab,
                            meta={"step": step, "val_exact_match": score, "eval_split": eval_split},
                        )
                    if score > best_score:
                        best_score = score
                        best_step = step
                        best_state = copy.deepcopy(model.state_dict())
                        evals_since_best = 0
                        if ckpt_root is not None:
                            _write_best_pointer(ckpt_root, step, score)
                    else:
                        evals_since_best += 1
                emit(record)
                if step >= config.max_steps:
                    stop = True
                    break
                if config.patience is not None and evals_since_best >= config.patience:
                    logger.info("no improvement for %d evals; stopping at step %d", evals_since_best, step)
                    stop = True
                    break
    finally:
        if log_file is not None:
            log_file.close()

    assert best_state is not None  # the final step always evaluates
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        best_step=best_step,
        best_score=best_score,
        eval_split=eval_split,
        log=log,
        checkpoint_dir=ckpt_root,
        log_path=log_path,
    )


def _write_best_pointer(ckpt_root: Path, step: int, score: float) -> None:
    pointer = {
        "format_version": FORMAT_VERSION,
        "kind": "best-checkpoint",
        "step": step,
        "val_exact_match": score,
        "path": f"step-{step}",
    }
    (ckpt_root / "best.json").write_text(json.dumps(pointer, indent=2) + "\n", encoding="utf-8")
