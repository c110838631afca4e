import csv
import json
import time

import numpy as np
import pytest

from linewise import cli
from linewise.training import CHECKPOINT_NAME, LOSS_CSV_NAME

TINY = [
    "--set", "model.D=8", "--set", "model.L=1", "--set", "model.M=1", "--set", "model.heads=2",
    "--set", "data.maps.dim=8", "--set", "data.scene.n_lines=8",
]


def run(tmp_path, *args, extra=TINY):
    return cli.main(["--out", str(tmp_path), *extra, *args])


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert cli.main(["--out", str(out), *TINY, "--set", "data.count=4", "gen-data"]) == 0
    return out


class TestGenData:
    def test_ten_pairs_fast_and_reproducible(self, tmp_path, capsys):
        t0 = time.perf_counter()
        assert run(tmp_path / "a", "--set", "data.count=10", "gen-data", extra=[]) == 0
        assert time.perf_counter() - t0 < 5
        assert run(tmp_path / "b", "--set", "data.count=10", "gen-data", extra=[]) == 0
        assert (tmp_path / "a" / "dataset.lwds").read_bytes() == (tmp_path / "b" / "dataset.lwds").read_bytes()
        out = capsys.readouterr().out
        assert "effective_config" in out and '"pairs": 10' in out

    def test_seed_changes_output(self, tmp_path):
        run(tmp_path / "a", "--seed", "1", "--set", "data.count=2", "gen-data")
        run(tmp_path / "b", "--seed", "2", "--set", "data.count=2", "gen-data")
        assert (tmp_path / "a" / "dataset.lwds").read_bytes() != (tmp_path / "b" / "dataset.lwds").read_bytes()

    def test_invalid_spec(self, tmp_path, capsys):
        assert run(tmp_path, "--set", "data.scene.n_lines=0", "gen-data") != 0
        assert "invalid configuration" in capsys.readouterr().err
        assert not (tmp_path / "dataset.lwds").exists()

    def test_unknown_key(self, tmp_path):
        assert run(tmp_path, "--set", "model.depth=3", "gen-data") != 0

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"count": 2, "maps": {"dim": 4}}}))
        assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "gen-data"]) == 0
        echoed = json.loads(capsys.readouterr().out.splitlines()[0])["effective_config"]
        assert echoed["data"]["count"] == 2 and echoed["data"]["maps"]["dim"] == 4


class TestTrain:
    def test_train_and_resume(self, smoke, tmp_path, capsys):
        ds = str(smoke / "dataset.lwds")
        args = ["--set", "train.log_every=2", "--set", "train.checkpoint_every=2"]
        assert run(tmp_path, *args, "--set", "train.steps=4", "train", "--dataset", ds) == 0
        assert (tmp_path / CHECKPOINT_NAME).exists()
        assert "step 4 loss" in capsys.readouterr().out
        assert run(tmp_path, *args, "--set", "train.steps=6", "train", "--dataset", ds, "--resume") == 0
        with open(tmp_path / LOSS_CSV_NAME) as f:
            steps = [int(r["step"]) for r in csv.DictReader(f)]
        assert steps == sorted(steps) and steps[-1] == 5

    def test_loss_trends_down(self, smoke, tmp_path):
        ds = str(smoke / "dataset.lwds")
        assert run(tmp_path, "--set", "train.steps=120", "--set", "train.lr=0.003", "train", "--dataset", ds) == 0
        with open(tmp_path / LOSS_CSV_NAME) as f:
            loss = np.array([float(r["loss"]) for r in csv.DictReader(f)])
        assert loss[-30:].mean() < loss[:30].mean()

    def test_missing_dataset(self, tmp_path, capsys):
        assert run(tmp_path, "train", "--dataset", str(tmp_path / "none.lwds")) == 2
        assert "does not exist" in capsys.readouterr().err

    def test_resume_without_checkpoint(self, smoke, tmp_path):
        assert run(tmp_path, "train", "--dataset", str(smoke / "dataset.lwds"), "--resume") == 2


class TestEval:
    def test_eval_match_table(self, smoke, tmp_path, capsys):
        assert run(tmp_path, "eval-match", "--dataset", str(smoke / "dataset.lwds"), "--compare-untrained") == 0
        report = json.loads((tmp_path / "match_metrics.json").read_text())
        assert set(report) == {"model", "untrained"}
        counts = report["model"]["tercile_counts"]
        total = sum(counts.values())
        assert all(abs(c / total - 1 / 3) <= 0.01 + 1 / total for c in counts.values())
        assert "overall" in capsys.readouterr().out

    def test_eval_checkpoint_mismatch(self, smoke, tmp_path):
        ds = str(smoke / "dataset.lwds")
        assert run(tmp_path, "--set", "train.steps=1", "train", "--dataset", ds) == 0
        ck = str(tmp_path / CHECKPOINT_NAME)
        assert run(tmp_path, "--set", "model.D=16", "eval-match", "--dataset", ds, "--checkpoint", ck) == 2
        assert cli.main(["--out", str(tmp_path), "eval-match", "--dataset", ds, "--checkpoint", ck]) == 0

    def test_empty_dataset(self, tmp_path):
        from linewise.synthetic import save_dataset

        save_dataset(tmp_path / "empty.lwds", [])
        assert run(tmp_path, "eval-match", "--dataset", str(tmp_path / "empty.lwds")) == 2

    def test_homography_identity_clean(self, tmp_path):
        clean = [
            "--set", "data.count=3",
            "--set", 'data.homography={"max_rotation":0,"max_scale":0,"max_translation":0,"max_perspective":0}',
            "--set", 'data.noise={"descriptor_sigma":0,"jitter":0,"drop_prob":0,"split_prob":0}',
        ]
        assert run(tmp_path, *clean, "gen-data") == 0
        assert run(tmp_path, "eval-homography", "--dataset", str(tmp_path / "dataset.lwds")) == 0
        report = json.loads((tmp_path / "homography_auc.json").read_text())
        assert all(v == pytest.approx(1.0, abs=1e-6) for v in report["model"]["auc"].values())
        assert (tmp_path / "homography_curve.csv").read_text().startswith("corner_error_px")

    def test_homography_deterministic(self, smoke, tmp_path):
        ds = str(smoke / "dataset.lwds")
        run(tmp_path / "a", "eval-homography", "--dataset", ds)
        run(tmp_path / "b", "--threads", "2", "eval-homography", "--dataset", ds)
        a = (tmp_path / "a" / "homography_auc.json").read_text()
        assert a == (tmp_path / "b" / "homography_auc.json").read_text()


class TestDumpAttention:
    def test_rows_are_probabilities(self, smoke, tmp_path):
        from linewise.synthetic import load_dataset

        pair = load_dataset(smoke / "dataset.lwds")[0]
        line = max(pair.lines1, key=lambda l: l.length).id
        assert run(tmp_path, "dump-attention", "--dataset", str(smoke / "dataset.lwds"), "--pair", "0", "--line", str(line)) == 0
        rep = json.loads((tmp_path / f"attention_pair0_line{line}.json").read_text())
        for side in ("image1", "image2"):
            if rep[side] is None:
                continue
            for sub in rep[side]["sublines"]:
                for layer in sub["line_slot_attention"]:
                    for row in layer:
                        assert len(row) == sub["tokens"] + 1
                        assert abs(sum(row) - 1) < 1e-9 and min(row) >= 0
                for layer in sub["signature_attention"]:
                    for row in layer:
                        assert abs(sum(row) - 1) < 1e-9 and min(row) >= 0

    def test_unknown_ids(self, smoke, tmp_path):
        ds = str(smoke / "dataset.lwds")
        assert run(tmp_path, "dump-attention", "--dataset", ds, "--pair", "99", "--line", "0") == 2
        assert run(tmp_path, "dump-attention", "--dataset", ds, "--pair", "0", "--line", "999") == 2
