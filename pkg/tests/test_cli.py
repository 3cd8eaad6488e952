"""End-to-end command-line behavior on small fixtures."""

import json
from pathlib import Path

import pytest

from gridtrack.cli import main

TINY_YAML = """\
seed: 0
voxel:
  size: [0.4, 0.4, 0.4]
  extent: [[-1.6, 1.6], [-1.6, 1.6], [-1.6, 1.6]]
backbone:
  num_stages: 2
  base_channels: 2
head:
  hidden: [8]
train:
  epochs: 1
  lr: 0.01
synthetic:
  num_frames: 5
  points_per_frame: 24
"""


@pytest.fixture()
def cfg_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    return str(path)


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestSynth:
    def test_writes_dataset(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "data"
        rc = main(["synth", "--config", cfg_path, "--out", str(out),
                   "--sequences", "3", "--seed", "5"])
        assert rc == 0
        assert (out / "manifest.json").exists()
        assert sorted(p.name for p in out.iterdir() if p.is_dir()) == [
            "seq_0000", "seq_0001", "seq_0002"]

    def test_same_seed_writes_identical_files(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", cfg_path, "--out", str(a),
                     "--sequences", "2"]) == 0
        assert main(["synth", "--config", cfg_path, "--out", str(b),
                     "--sequences", "2"]) == 0
        for rel in ("seq_0000/frame_0000.bin", "seq_0000/gt.txt",
                    "seq_0001/frame_0003.bin", "manifest.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestUsageErrors:
    def test_unknown_flag_exits_2(self, capsys):
        assert main(["synth", "--does-not-exist", "x"]) == 2

    def test_unknown_subcommand_exits_2(self):
        assert main(["transmogrify"]) == 2

    def test_bad_config_value_exits_2(self, cfg_path, tmp_path):
        rc = main(["synth", "--config", cfg_path, "--out",
                   str(tmp_path / "d"), "--set", "loss.kind=huber"])
        assert rc == 2

    def test_track_without_checkpoint_exits_2(self, cfg_path, tmp_path):
        rc = main(["track", "--config", cfg_path, "--data",
                   str(tmp_path), "--out", str(tmp_path / "p.jsonl")])
        assert rc == 2


class TestPipelineCommands:
    @pytest.fixture()
    def dataset(self, cfg_path, tmp_path):
        out = tmp_path / "data"
        assert main(["synth", "--config", cfg_path, "--out", str(out),
                     "--sequences", "2"]) == 0
        return out

    def test_baseline_track_then_eval(self, cfg_path, dataset, tmp_path,
                                      capsys):
        preds = tmp_path / "preds.jsonl"
        assert main(["track", "--config", cfg_path, "--data", str(dataset),
                     "--baseline", "--out", str(preds)]) == 0
        records = read_jsonl(preds)
        assert len(records) == 2 * 4  # 2 sequences x (5 - 1) frames
        report = tmp_path / "report.jsonl"
        assert main(["eval", "--data", str(dataset), "--predictions",
                     str(preds), "--out", str(report)]) == 0
        recs = read_jsonl(report)
        agg = [r for r in recs if r["type"] == "aggregate"]
        assert len(agg) == 1
        assert 0 <= agg[0]["success"] <= 100

    def test_perfect_predictions_score_100(self, dataset, tmp_path):
        # hand-written predictions equal to the ground truth
        from gridtrack.synthetic import load_dataset
        preds = tmp_path / "perfect.jsonl"
        with open(preds, "w") as fh:
            for seq in load_dataset(dataset):
                for t, box in enumerate(seq.gt_boxes[1:], start=1):
                    fh.write(json.dumps({
                        "sequence": seq.metadata["name"], "frame": t,
                        "box": [*box.center.tolist(), *box.size.tolist(),
                                box.yaw],
                        "fallback": False}) + "\n")
        report = tmp_path / "report.jsonl"
        assert main(["eval", "--data", str(dataset), "--predictions",
                     str(preds), "--out", str(report)]) == 0
        agg = [r for r in read_jsonl(report) if r["type"] == "aggregate"][0]
        assert agg["success"] == pytest.approx(100.0)
        assert agg["precision"] == pytest.approx(100.0)

    def test_train_track_eval_round_trip(self, cfg_path, dataset, tmp_path):
        out_dir = tmp_path / "run"
        assert main(["train", "--config", cfg_path, "--data", str(dataset),
                     "--out", str(out_dir)]) == 0
        assert (out_dir / "model.ckpt").exists()
        assert (out_dir / "train.log").exists()
        preds = tmp_path / "preds.jsonl"
        assert main(["track", "--config", cfg_path, "--data", str(dataset),
                     "--checkpoint", str(out_dir / "model.ckpt"),
                     "--out", str(preds)]) == 0
        report = tmp_path / "report.jsonl"
        assert main(["eval", "--data", str(dataset), "--predictions",
                     str(preds), "--out", str(report),
                     "--bucket", "sparsity"]) == 0
        recs = read_jsonl(report)
        assert any(r["type"] == "bucket" for r in recs)

    def test_eval_plot_written(self, cfg_path, dataset, tmp_path):
        preds = tmp_path / "preds.jsonl"
        assert main(["track", "--config", cfg_path, "--data", str(dataset),
                     "--baseline", "--out", str(preds)]) == 0
        report = tmp_path / "report.jsonl"
        plot = tmp_path / "curves.png"
        assert main(["eval", "--data", str(dataset), "--predictions",
                     str(preds), "--out", str(report),
                     "--plot", str(plot)]) == 0
        assert plot.exists() and plot.stat().st_size > 0

    def test_missing_prediction_sequence_fails(self, cfg_path, dataset,
                                               tmp_path):
        preds = tmp_path / "partial.jsonl"
        preds.write_text("")
        rc = main(["eval", "--data", str(dataset), "--predictions",
                   str(preds), "--out", str(tmp_path / "r.jsonl")])
        assert rc == 1


class TestBench:
    def test_bench_reports_fps(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "bench.jsonl"
        rc = main(["bench", "--config", cfg_path, "--frames", "4",
                   "--out", str(out)])
        assert rc == 0
        rec = read_jsonl(out)[0]
        assert rec["type"] == "bench"
        assert rec["fps"] > 0
        assert rec["frames"] == 4
