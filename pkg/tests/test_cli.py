import hashlib
import json
from pathlib import Path

import pytest

from detrefine.cli import main


def sha_tree(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def tiny_train_config(tmp_path) -> str:
    config = {
        "images_per_batch": 2,
        "boxes_per_image": 6,
        "crop_size": 16,
        "phase1_iterations": 4,
        "phase2_iterations": 3,
        "eval_every": 2,
        "bg_pool_per_source": 8,
        "extractor": {
            "input_size": 16,
            "channels": [8, 8],
            "embed_dim": 8,
            "attention_stage": 2,
        },
    }
    path = tmp_path / "train_config.json"
    path.write_text(json.dumps(config))
    return str(path)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    rc = main([
        "generate", "--out", str(root / "data"), "--classes", "4",
        "--images", "14", "--seed", "3",
        "--novel", "3", "--novel-frequency", "0.5",
    ])
    assert rc == 0
    rc = main([
        "simulate", "--manifest", str(root / "data" / "manifest.json"),
        "--out", str(root / "sim"), "--preset", "degraded",
        "--novel", "3", "--seed", "4",
    ])
    assert rc == 0
    rc = main([
        "split", "--manifest", str(root / "data" / "manifest.json"),
        "--out", str(root / "split"), "--novel", "3", "--k", "2", "--seed", "5",
    ])
    assert rc == 0
    return root


class TestGenerate:
    def test_writes_manifest_images_and_run_record(self, dataset_dir):
        data = dataset_dir / "data"
        assert (data / "manifest.json").exists()
        assert (data / "run_generate.json").exists()
        pngs = list((data / "images").glob("*.png"))
        assert len(pngs) == 14

    def test_idempotent_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            rc = main([
                "generate", "--out", str(tmp_path / sub), "--classes", "3",
                "--images", "4", "--seed", "9",
            ])
            assert rc == 0
        assert sha_tree(tmp_path / "a") == sha_tree(tmp_path / "b")

    def test_unwritable_out_fails_nonzero(self, tmp_path):
        blocked = tmp_path / "file"
        blocked.write_text("x")
        rc = main([
            "generate", "--out", str(blocked / "nested"), "--classes", "3",
            "--images", "1", "--seed", "0",
        ])
        assert rc != 0


class TestPipeline:
    def test_full_pipeline_and_stage_artifacts(self, dataset_dir, tmp_path):
        data = dataset_dir / "data"
        config = tiny_train_config(tmp_path)
        common = [
            "--manifest", str(data / "manifest.json"),
            "--images-dir", str(data),
            "--detections", str(dataset_dir / "sim" / "detections.json"),
            "--config", config,
        ]
        rc = main([
            "train", *common, "--phase", "1",
            "--split", str(dataset_dir / "split" / "split.json"),
            "--out", str(tmp_path / "p1"),
        ])
        assert rc == 0
        assert (tmp_path / "p1" / "checkpoint.pt").exists()
        assert (tmp_path / "p1" / "train_report.json").exists()

        rc = main([
            "imprint", *common,
            "--split", str(dataset_dir / "split" / "split.json"),
            "--checkpoint", str(tmp_path / "p1" / "checkpoint.pt"),
            "--out", str(tmp_path / "imp"),
        ])
        assert rc == 0

        rc = main([
            "train", *common, "--phase", "2",
            "--split", str(dataset_dir / "split" / "split.json"),
            "--checkpoint", str(tmp_path / "imp" / "checkpoint.pt"),
            "--out", str(tmp_path / "p2"),
        ])
        assert rc == 0

        rc = main([
            "refine",
            "--manifest", str(data / "manifest.json"),
            "--images-dir", str(data),
            "--detections", str(dataset_dir / "sim" / "detections.json"),
            "--checkpoint", str(tmp_path / "p2" / "checkpoint.pt"),
            "--out", str(tmp_path / "ref"),
        ])
        assert rc == 0
        refined = json.loads((tmp_path / "ref" / "refined.json").read_text())
        assert refined and "lscn_probs" in refined[0]

        rc = main([
            "evaluate",
            "--manifest", str(data / "manifest.json"),
            "--detections", str(tmp_path / "ref" / "refined.json"),
            "--split", str(dataset_dir / "split" / "split.json"),
            "--out", str(tmp_path / "eval"),
        ])
        assert rc == 0
        report = json.loads((tmp_path / "eval" / "eval_report.json").read_text())
        assert "0.5" in report["mean_ap"]

        rc = main([
            "analyze",
            "--manifest", str(data / "manifest.json"),
            "--detections", str(dataset_dir / "sim" / "detections.json"),
            "--split", str(dataset_dir / "split" / "split.json"),
            "--out", str(tmp_path / "ana"),
        ])
        assert rc == 0
        assert (tmp_path / "ana" / "iou_histogram.json").exists()
        assert (tmp_path / "ana" / "oracle_curve.json").exists()
        assert (tmp_path / "ana" / "analysis.png").exists()

    def test_refine_before_train_fails_cleanly(self, dataset_dir, tmp_path):
        data = dataset_dir / "data"
        rc = main([
            "refine",
            "--manifest", str(data / "manifest.json"),
            "--images-dir", str(data),
            "--detections", str(dataset_dir / "sim" / "detections.json"),
            "--checkpoint", str(tmp_path / "missing.pt"),
            "--out", str(tmp_path / "ref"),
        ])
        assert rc == 1

    def test_phase2_without_checkpoint_fails(self, dataset_dir, tmp_path):
        data = dataset_dir / "data"
        rc = main([
            "train", "--phase", "2",
            "--manifest", str(data / "manifest.json"),
            "--images-dir", str(data),
            "--detections", str(dataset_dir / "sim" / "detections.json"),
            "--split", str(dataset_dir / "split" / "split.json"),
            "--config", tiny_train_config(tmp_path),
            "--out", str(tmp_path / "p2"),
        ])
        assert rc == 1

    def test_evaluate_idempotent(self, dataset_dir, tmp_path):
        data = dataset_dir / "data"
        for sub in ("e1", "e2"):
            rc = main([
                "evaluate",
                "--manifest", str(data / "manifest.json"),
                "--detections", str(dataset_dir / "sim" / "detections.json"),
                "--out", str(tmp_path / sub),
            ])
            assert rc == 0
        assert sha_tree(tmp_path / "e1") == sha_tree(tmp_path / "e2")


class TestInterface:
    def test_help_lists_documented_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["refine", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--manifest", "--images-dir", "--detections",
                     "--checkpoint", "--out", "--batch-size", "--nms"):
            assert flag in text

    def test_validation_error_exits_one(self, tmp_path):
        rc = main([
            "split", "--manifest", str(tmp_path / "nope.json"),
            "--out", str(tmp_path), "--novel", "1", "--k", "1",
        ])
        assert rc == 1

    def test_run_records_carry_config_hash(self, dataset_dir):
        payload = json.loads((dataset_dir / "sim" / "run_simulate.json").read_text())
        assert payload["command"] == "simulate"
        assert len(payload["config_hash"]) == 64
        assert "torch" in payload["versions"]
