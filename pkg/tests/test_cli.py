import json

import pytest

from conftest import hierarchy_xml, screenshot_array, write_capture_app, write_icon_capture_dir

from labelforge.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def small_captures(tmp_path):
    root = tmp_path / "captures"
    root.mkdir()
    write_icon_capture_dir(root, n=6)
    return root


class TestExitCodes:
    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["audit", "--captures", "x", "--out", "y", "--bogus"])
        assert excinfo.value.code == 2

    def test_unknown_command_exits_2(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        assert excinfo.value.code == 2

    def test_missing_input_path_exits_3(self, capsys, tmp_path):
        code, out, err = run_cli(
            capsys, "audit", "--captures", str(tmp_path / "nope"), "--out", str(tmp_path / "o")
        )
        assert code == 3
        payload = json.loads(err.strip())
        assert "not found" in payload["error"]

    def test_other_errors_exit_1_with_one_line_json(self, capsys, tmp_path):
        bad = tmp_path / "pred.jsonl"
        bad.write_text('{"nonsense": true}\n')
        code, out, err = run_cli(
            capsys, "evaluate", "--pred", str(bad), "--refs", str(bad)
        )
        assert code == 1
        assert len(err.strip().splitlines()) == 1
        assert "error" in json.loads(err.strip())


class TestAuditCommand:
    def test_writes_report_and_csv(self, capsys, tmp_path):
        root = tmp_path / "captures"
        root.mkdir()
        write_capture_app(
            root,
            "com.app.one",
            [("s0", screenshot_array(40, 40), hierarchy_xml([{"bounds": (0, 0, 8, 8)}]))],
        )
        out_dir = tmp_path / "audit"
        code, out, _ = run_cli(capsys, "audit", "--captures", str(root), "--out", str(out_dir))
        assert code == 0
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["apps"] == 1
        report = json.loads((out_dir / "audit_report.json").read_text())
        assert report["rows"]["total"]["elements"]["missing"] == 1
        assert (out_dir / "per_app_rates.csv").exists()


class TestPreprocessCommand:
    def test_deterministic_outputs(self, capsys, small_captures, tmp_path):
        outs = []
        for name in ("c1", "c2"):
            out_dir = tmp_path / name
            code, out, _ = run_cli(
                capsys, "preprocess", "--captures", str(small_captures),
                "--out", str(out_dir), "--seed", "7", "--min-count", "1",
            )
            assert code == 0
            outs.append(
                (
                    (out_dir / "dataset_manifest.jsonl").read_text(),
                    (out_dir / "vocab.txt").read_text(),
                    (out_dir / "splits.json").read_text(),
                )
            )
        assert outs[0] == outs[1]

    def test_resolved_config_echoed(self, capsys, small_captures, tmp_path):
        out_dir = tmp_path / "corpus"
        run_cli(
            capsys, "preprocess", "--captures", str(small_captures),
            "--out", str(out_dir), "--seed", "7", "--min-count", "1",
        )
        resolved = json.loads((out_dir / "resolved_config.json").read_text())
        assert resolved["command"] == "preprocess"
        assert resolved["seed"] == 7


class TestEvaluateCommand:
    def _write_predictions(self, path, rows):
        lines = [json.dumps({"format_version": 1, "kind": "predictions"})]
        lines += [json.dumps(r) for r in rows]
        path.write_text("\n".join(lines) + "\n")

    def test_identical_files_score_one(self, capsys, tmp_path):
        rows = [
            {"crop_id": "a", "app_id": "x", "label": "exchange origin and destination points", "token_count": 5},
            {"crop_id": "b", "app_id": "x", "label": "open in google maps today", "token_count": 5},
            {"crop_id": "c", "app_id": "x", "label": "cycle shuffle mode of player", "token_count": 5},
        ]
        pred = tmp_path / "pred.jsonl"
        self._write_predictions(pred, rows)
        out_path = tmp_path / "report.json"
        code, out, _ = run_cli(
            capsys, "evaluate", "--pred", str(pred), "--refs", str(pred), "--out", str(out_path)
        )
        assert code == 0
        report = json.loads(out.strip().splitlines()[-1])
        assert report["exact_match"] == 1.0
        assert report["bleu_4"] == 1.0
        assert report["rouge_l"] == 1.0
        assert report["cider_d"] >= 0.99
        assert json.loads(out_path.read_text())["exact_match"] == 1.0

    def test_alignment_by_crop_id(self, capsys, tmp_path):
        pred = tmp_path / "pred.jsonl"
        refs = tmp_path / "refs.jsonl"
        self._write_predictions(pred, [
            {"crop_id": "b", "label": "open menu"},
            {"crop_id": "a", "label": "back"},
        ])
        self._write_predictions(refs, [
            {"crop_id": "a", "label": "back"},
            {"crop_id": "b", "label": "open menu"},
        ])
        code, out, _ = run_cli(capsys, "evaluate", "--pred", str(pred), "--refs", str(refs))
        assert code == 0
        assert json.loads(out.strip().splitlines()[-1])["exact_match"] == 1.0

    def test_missing_reference_errors(self, capsys, tmp_path):
        pred = tmp_path / "pred.jsonl"
        refs = tmp_path / "refs.jsonl"
        self._write_predictions(pred, [{"crop_id": "a", "label": "x"}, {"crop_id": "zz", "label": "y"}])
        self._write_predictions(refs, [{"crop_id": "a", "label": "x"}, {"crop_id": "b", "label": "y"}])
        code, _, err = run_cli(capsys, "evaluate", "--pred", str(pred), "--refs", str(refs))
        assert code == 1
        assert "zz" in json.loads(err.strip())["error"]


class TestPipelineEndToEnd:
    def test_preprocess_train_predict_evaluate_inspect(self, capsys, small_captures, tmp_path):
        corpus_dir = tmp_path / "corpus"
        code, out, err = run_cli(
            capsys, "preprocess", "--captures", str(small_captures),
            "--out", str(corpus_dir), "--seed", "7", "--min-count", "1",
        )
        assert code == 0, err

        config_path = tmp_path / "toy.json"
        config_path.write_text(json.dumps({
            "model": {
                "encoder_layers": 1, "decoder_layers": 1, "d_model": 32,
                "d_k": 32, "d_v": 32, "d_ff": 64, "heads": 4,
                "input_resolution": 32, "cnn_channels": 8, "cnn_stages": 2,
            },
            "train": {"batch_size": 6, "max_steps": 40, "warmup_steps": 30, "eval_every": 20},
        }))
        train_dir = tmp_path / "run"
        code, out, err = run_cli(
            capsys, "train", "--manifest", str(corpus_dir / "dataset_manifest.jsonl"),
            "--out", str(train_dir), "--config", str(config_path), "--seed", "3",
        )
        assert code == 0, err
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["eval_split"] == "train"  # single-app toy corpus has no val apps
        checkpoint = summary["checkpoint"]

        pred_path = tmp_path / "pred.jsonl"
        code, out, err = run_cli(
            capsys, "predict", "--checkpoint", checkpoint,
            "--manifest", str(corpus_dir / "crops_index.jsonl"),
            "--out", str(pred_path),
        )
        assert code == 0, err
        first_bytes = pred_path.read_bytes()

        # determinism: same checkpoint, same output bytes
        code, out, err = run_cli(
            capsys, "predict", "--checkpoint", checkpoint,
            "--manifest", str(corpus_dir / "crops_index.jsonl"),
            "--out", str(pred_path),
        )
        assert code == 0 and pred_path.read_bytes() == first_bytes

        code, out, err = run_cli(
            capsys, "evaluate", "--pred", str(pred_path),
            "--refs", str(corpus_dir / "dataset_manifest.jsonl"),
            "--out", str(tmp_path / "report.json"),
        )
        assert code == 0, err
        report = json.loads(out.strip().splitlines()[-1])
        assert 0.0 <= report["exact_match"] <= 1.0

        code, out, err = run_cli(capsys, "inspect", "--checkpoint", checkpoint)
        assert code == 0, err
        info = json.loads(out.strip().splitlines()[-1])
        assert info["config"]["d_model"] == 32
        assert info["parameters"] > 0

    def test_train_on_16_sample_fixture_reaches_exact_match(self, capsys, tmp_path):
        root = tmp_path / "captures"
        root.mkdir()
        write_icon_capture_dir(root, n=16)
        corpus_dir = tmp_path / "corpus"
        code, out, err = run_cli(
            capsys, "preprocess", "--captures", str(root),
            "--out", str(corpus_dir), "--seed", "7", "--min-count", "1",
        )
        assert code == 0, err

        config_path = tmp_path / "toy.json"
        config_path.write_text(json.dumps({
            "model": {
                "encoder_layers": 2, "decoder_layers": 2, "d_model": 64,
                "d_k": 64, "d_v": 64, "d_ff": 128, "heads": 4,
                "input_resolution": 32, "cnn_channels": 16, "cnn_stages": 2,
            },
            "train": {"batch_size": 16, "max_steps": 2000, "warmup_steps": 200,
                      "eval_every": 100, "patience": 3, "seed": 0},
        }))
        code, out, err = run_cli(
            capsys, "train", "--manifest", str(corpus_dir / "dataset_manifest.jsonl"),
            "--out", str(tmp_path / "run"), "--config", str(config_path),
        )
        assert code == 0, err
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["final_val_exact_match"] >= 0.95

    def test_train_seed_flag_overrides_config(self, capsys, small_captures, tmp_path):
        corpus_dir = tmp_path / "corpus"
        run_cli(
            capsys, "preprocess", "--captures", str(small_captures),
            "--out", str(corpus_dir), "--seed", "7", "--min-count", "1",
        )
        config_path = tmp_path / "toy.json"
        config_path.write_text(json.dumps({
            "model": {
                "encoder_layers": 1, "decoder_layers": 1, "d_model": 16,
                "d_k": 16, "d_v": 16, "d_ff": 32, "heads": 2,
                "input_resolution": 32, "cnn_channels": 4, "cnn_stages": 2,
            },
            "train": {"batch_size": 6, "max_steps": 5, "warmup_steps": 30,
                      "eval_every": 5, "seed": 1},
        }))
        train_dir = tmp_path / "run"
        run_cli(
            capsys, "train", "--manifest", str(corpus_dir / "dataset_manifest.jsonl"),
            "--out", str(train_dir), "--config", str(config_path), "--seed", "99",
        )
        resolved = json.loads((train_dir / "resolved_config.json").read_text())
        assert resolved["train"]["seed"] == 99
