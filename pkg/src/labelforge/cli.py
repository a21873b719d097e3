"""Command-line entry point wiring the full pipeline.

Commands: ``audit`` (missing-label report), ``preprocess`` (captures to
crops + corpus), ``train`` (corpus to checkpoints), ``predict``
(checkpoint + crops to labels), ``evaluate`` (predictions + references to
a metric report), ``inspect`` (checkpoint summary).

Exit codes: 0 success, 2 usage errors, 3 missing input paths, 1 anything
else; failures print one machine-parseable JSON line to stderr. Every
command resolves its configuration as flags > config file > defaults and
echoes the result into its output directory. Set ``LABELFORGE_LOG`` to
``debug``, ``info`` or ``warn`` to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .audit import missing_stats
from .corpus import (
    CleanConfig,
    CorpusBuild,
    SplitManifest,
    Vocabulary,
    build_corpus,
    normalize_label,
    read_dataset_manifest,
    write_dataset_manifest,
)
from .decoding import batch_predict
from .ingest import load_capture_dir, mine_crops, read_crop_store, write_crop_store
from .jsonl import read_jsonl, write_jsonl
from .metrics import evaluate_corpus
from .model import ModelConfig, load_checkpoint
from .training import TrainConfig, train_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3


class MissingInputError(FileNotFoundError):
    pass


def _require_path(value: str, what: str) -> Path:
    path = Path(value)
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _configure_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}.get(
        os.environ.get("LABELFORGE_LOG", "warn").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "labelforge_version": __version__, **resolved}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(_require_path(path, "config file").read_text(encoding="utf-8"))


# --- commands ---------------------------------------------------------------


def cmd_audit(args: argparse.Namespace) -> int:
    captures_dir = _require_path(args.captures, "capture directory")
    out_dir = Path(args.out)
    captures = load_capture_dir(captures_dir)
    report = missing_stats(captures)
    report.save(out_dir / "audit_report.json")
    report.write_per_app_csv(out_dir / "per_app_rates.csv")
    _echo_config(out_dir, "audit", {"captures": str(captures_dir)})
    total = report.rows["total"]
    print(json.dumps({
        "apps": total.apps.total,
        "apps_missing_rate": total.apps.rate,
        "elements_missing_rate": total.elements.rate,
        "report": str(out_dir / "audit_report.json"),
    }))
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace) -> int:
    captures_dir = _require_path(args.captures, "capture directory")
    out_dir = Path(args.out)
    clean_config = CleanConfig.from_file(args.config) if args.config else CleanConfig()
    captures = load_capture_dir(captures_dir)
    crops = mine_crops(captures)
    index_path = write_crop_store(crops, out_dir)
    build = build_corpus(crops, seed=args.seed, min_count=args.min_count, clean_config=clean_config)
    write_dataset_manifest(build.samples, out_dir / "dataset_manifest.jsonl")
    build.vocab.save(out_dir / "vocab.txt")
    build.splits.save(out_dir / "splits.json")
    _echo_config(out_dir, "preprocess", {
        "captures": str(captures_dir),
        "seed": args.seed,
        "min_count": args.min_count,
        "clean_config": args.config,
    })
    print(json.dumps({
        "crops": len(crops),
        "samples": len(build.samples),
        "vocab_size": len(build.vocab),
        "crop_index": str(index_path),
        "manifest": str(out_dir / "dataset_manifest.jsonl"),
    }))
    return EXIT_OK


def _load_corpus(manifest_path: Path) -> CorpusBuild:
    corpus_dir = manifest_path.parent
    samples = read_dataset_manifest(manifest_path)
    vocab = Vocabulary.load(_require_path(corpus_dir / "vocab.txt", "vocabulary file"))
    splits = SplitManifest.load(_require_path(corpus_dir / "splits.json", "split manifest"))
    crops = {
        c.crop_id: c
        for c in read_crop_store(_require_path(corpus_dir / "crops_index.jsonl", "crop index"))
    }
    for sample in samples:
        crop = crops.get(sample.crop_ref)
        if crop is not None:
            sample.image = crop.image
    return CorpusBuild(samples=samples, vocab=vocab, splits=splits)


def cmd_train(args: argparse.Namespace) -> int:
    manifest_path = _require_path(args.manifest, "dataset manifest")
    out_dir = Path(args.out)
    raw = _load_config_file(args.config)
    build = _load_corpus(manifest_path)

    train_raw = dict(raw.get("train", {}))
    if args.seed is not None:
        train_raw["seed"] = args.seed
    if args.warmup is not None:
        train_raw["warmup_steps"] = args.warmup
    train_config = TrainConfig.from_dict(train_raw)

    model_raw = dict(raw.get("model", {}))
    model_raw["vocab_size"] = len(build.vocab)
    model_config = ModelConfig.from_dict(model_raw)

    _echo_config(out_dir, "train", {
        "manifest": str(manifest_path),
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
    })
    result = train_loop(build, model_config, train_config, out_dir=out_dir)
    print(json.dumps({
        "final_val_exact_match": result.best_score,
        "best_step": result.best_step,
        "eval_split": result.eval_split,
        "checkpoint": str(result.checkpoint_dir / f"step-{result.best_step}"),
    }))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    checkpoint_path = _require_path(args.checkpoint, "checkpoint")
    index_path = _require_path(args.manifest, "crop index")
    model, vocab, _ = load_checkpoint(checkpoint_path)
    crops = read_crop_store(index_path)
    records = batch_predict(crops, model, vocab, beam_width=args.beam)
    out_path = Path(args.out)
    write_jsonl(out_path, records, kind="predictions")
    print(json.dumps({"predictions": len(records), "out": str(out_path)}))
    return EXIT_OK


def _words_from_record(record: dict, path: Path) -> tuple[str, list[str]]:
    key = record.get("crop_id") or record.get("crop_ref") or ""
    if "words" in record:
        return key, normalize_label(" ".join(record["words"]))
    if "label" in record:
        return key, normalize_label(record["label"])
    if "error" in record:
        return key, []
    raise ValueError(f"{path}: record without words or label: {record}")


def cmd_evaluate(args: argparse.Namespace) -> int:
    pred_path = _require_path(args.pred, "predictions file")
    refs_path = _require_path(args.refs, "references file")
    preds = [_words_from_record(r, pred_path) for r in read_jsonl(pred_path)]
    refs = [_words_from_record(r, refs_path) for r in read_jsonl(refs_path)]
    ref_by_key = {k: words for k, words in refs if k}
    if ref_by_key and all(k for k, _ in preds):
        missing = [k for k, _ in preds if k not in ref_by_key]
        if missing:
            raise ValueError(f"no reference for crop ids: {missing[:3]}")
        aligned = [(words, ref_by_key[k]) for k, words in preds]
    else:
        if len(preds) != len(refs):
            raise ValueError("prediction/reference length mismatch and no ids to join on")
        aligned = [(p[1], r[1]) for p, r in zip(preds, refs)]
    report = evaluate_corpus([p for p, _ in aligned], [r for _, r in aligned])
    if args.out:
        report.save(args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    checkpoint_path = _require_path(args.checkpoint, "checkpoint")
    model, vocab, meta = load_checkpoint(checkpoint_path)
    parameter_count = sum(p.numel() for p in model.parameters())
    print(json.dumps({
        "config": model.config.to_dict(),
        "vocab_size": len(vocab),
        "vocab_hash": vocab.content_hash(),
        "parameters": parameter_count,
        "meta": meta,
    }, sort_keys=True))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelforge",
        description="Mine image-based buttons, train a captioner, and audit accessibility labels.",
    )
    parser.add_argument("--version", action="version", version=f"labelforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_audit = sub.add_parser("audit", help="missing-label statistics for a capture directory")
    p_audit.add_argument("--captures", required=True)
    p_audit.add_argument("--out", required=True)
    p_audit.set_defaults(handler=cmd_audit)

    p_pre = sub.add_parser("preprocess", help="captures to crop store, corpus manifest, vocab and splits")
    p_pre.add_argument("--captures", required=True)
    p_pre.add_argument("--out", required=True)
    p_pre.add_argument("--seed", type=int, default=0)
    p_pre.add_argument("--min-count", type=int, default=5, dest="min_count")
    p_pre.add_argument("--config", help="JSON file with label-cleaning rule tables")
    p_pre.set_defaults(handler=cmd_preprocess)

    p_train = sub.add_parser("train", help="train the captioner on a preprocessed corpus")
    p_train.add_argument("--manifest", required=True, help="dataset manifest from preprocess")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", help="JSON file with model/train sections")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--warmup", type=int, default=None)
    p_train.set_defaults(handler=cmd_train)

    p_predict = sub.add_parser("predict", help="predict labels for a crop index")
    p_predict.add_argument("--checkpoint", required=True)
    p_predict.add_argument("--manifest", required=True, help="crop index JSONL")
    p_predict.add_argument("--out", required=True)
    p_predict.add_argument("--beam", type=int, default=0)
    p_predict.set_defaults(handler=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="score predictions against references")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--refs", required=True)
    p_eval.add_argument("--out")
    p_eval.set_defaults(handler=cmd_evaluate)

    p_inspect = sub.add_parser("inspect", help="summarize a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging()
    try:
        return args.handler(args)
    except MissingInputError as exc:
        print(json.dumps({"error": str(exc), "exit_code": EXIT_MISSING_INPUT}), file=sys.stderr)
        return EXIT_MISSING_INPUT
    except Exception as exc:  # one-line machine-parseable failure
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": str(exc), "exit_code": EXIT_ERROR}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
