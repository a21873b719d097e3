"""labelforge: mine image-based buttons from UI captures, train a
CNN + Transformer captioner for their accessibility labels, and audit apps
for missing labels."""

__version__ = "0.1.0"

from .audit import AuditReport, category_histogram, missing_stats, spearman
from .corpus import (
    CleanConfig,
    CorpusBuild,
    LabeledSample,
    SplitManifest,
    Vocabulary,
    build_corpus,
    build_vocab,
    clean_label,
    decode_ids,
    encode_label,
    normalize_label,
    split_dataset,
)
from .decoding import batch_predict, beam_decode, decode_label, greedy_decode
from .estimator import ButtonCaptioner
from .ingest import (
    AppMeta,
    Bounds,
    ElementCrop,
    ScreenCapture,
    UIElement,
    dedup_elements,
    dedup_screens,
    extract_buttons,
    load_capture_dir,
    mine_crops,
    parse_capture,
)
from .metrics import (
    MetricReport,
    bleu,
    cider_d,
    corpus_exact_match,
    evaluate_corpus,
    exact_match,
    meteor_lite,
    rouge_l,
)
from .model import (
    FeatureSequence,
    LabelModel,
    ModelConfig,
    attention,
    kl_loss,
    load_checkpoint,
    save_checkpoint,
)
from .training import OptimizerState, TrainConfig, adam_step, lr_at, train_loop, train_step

__all__ = [
    "AppMeta",
    "AuditReport",
    "Bounds",
    "ButtonCaptioner",
    "CleanConfig",
    "CorpusBuild",
    "ElementCrop",
    "FeatureSequence",
    "LabelModel",
    "LabeledSample",
    "MetricReport",
    "ModelConfig",
    "OptimizerState",
    "ScreenCapture",
    "SplitManifest",
    "TrainConfig",
    "UIElement",
    "Vocabulary",
    "adam_step",
    "attention",
    "batch_predict",
    "beam_decode",
    "bleu",
    "build_corpus",
    "build_vocab",
    "category_histogram",
    "cider_d",
    "clean_label",
    "corpus_exact_match",
    "decode_ids",
    "decode_label",
    "dedup_elements",
    "dedup_screens",
    "encode_label",
    "evaluate_corpus",
    "exact_match",
    "extract_buttons",
    "greedy_decode",
    "kl_loss",
    "load_capture_dir",
    "load_checkpoint",
    "lr_at",
    "meteor_lite",
    "mine_crops",
    "missing_stats",
    "normalize_label",
    "parse_capture",
    "rouge_l",
    "save_checkpoint",
    "spearman",
    "split_dataset",
    "train_loop",
    "train_step",
]
