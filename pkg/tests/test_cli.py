import json

import numpy as np
import pytest

from leia.cli import main
from leia.data import read_dataset
from leia.heads import read_head
from leia.linalg import error_weighted_covariance, symmetric_eigendecomposition


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, "--seed", 0) == 0
    return out


class TestSynth:
    def test_default_sizes(self, synth_dir):
        # defaults: 2 known groups, ratio 0.1 -> 2100 examples, 60/20/20
        sizes = {name: read_dataset(synth_dir / f"{name}.lemb").n
                 for name in ("train", "val", "test")}
        assert sizes == {"train": 1260, "val": 420, "test": 420}
        ds = read_dataset(synth_dir / "train.lemb")
        assert ds.dim == 7 and ds.num_classes == 2 and ds.num_groups == 3

    def test_deterministic_bytes(self, synth_dir, tmp_path):
        again = tmp_path / "again"
        assert run("synth", "--out", again, "--seed", 0) == 0
        for name in ("train", "val", "test"):
            assert (again / f"{name}.lemb").read_bytes() == \
                (synth_dir / f"{name}.lemb").read_bytes()

    def test_tsv_format(self, tmp_path):
        out = tmp_path / "tsv"
        assert run("synth", "--out", out, "--format", "tsv",
                   "--samples-per-group", 50) == 0
        ds = read_dataset(out / "train.tsv", "tsv")
        assert ds.n == 63  # 60% of 105

    def test_degenerate_ratio_fails(self, tmp_path):
        code = run("synth", "--out", tmp_path / "x", "--rho", "0.0001")
        assert code == 2


class TestTrainCommands:
    def test_train_erm_outputs(self, synth_dir, tmp_path):
        out = tmp_path / "erm"
        assert run("train-erm", "--train", synth_dir / "train.lemb",
                   "--epochs", 20, "--out", out) == 0
        head = read_head(out / "head.tsv")
        assert head.num_classes == 2 and head.dim == 7
        lines = (out / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,criterion"
        assert len(lines) == 21

    def test_train_gdro_withholds_group_zero_by_default(self, synth_dir, tmp_path):
        out = tmp_path / "gdro"
        assert run("train-gdro", "--train", synth_dir / "train.lemb",
                   "--epochs", 10, "--out", out) == 0
        assert (out / "head.tsv").exists()

    def test_adapt_leia(self, synth_dir, tmp_path):
        erm_out = tmp_path / "erm"
        assert run("train-erm", "--train", synth_dir / "train.lemb",
                   "--epochs", 20, "--out", erm_out) == 0
        out = tmp_path / "leia"
        assert run("adapt-leia", "--adapt", synth_dir / "val.lemb",
                   "--head", erm_out / "head.tsv", "--rank", 1,
                   "--gamma", 100, "--out", out) == 0
        assert (out / "model.tsv").exists()


class TestEval:
    def test_summary_without_model(self, synth_dir, tmp_path):
        out = tmp_path / "summary.json"
        assert run("eval", "--data", synth_dir / "test.lemb", "--out", out) == 0
        summary = json.loads(out.read_text())
        assert summary == {"n": 420, "dim": 7, "num_classes": 2, "num_groups": 3}

    def test_metrics_with_head(self, synth_dir, tmp_path):
        erm_out = tmp_path / "erm"
        run("train-erm", "--train", synth_dir / "train.lemb",
            "--epochs", 20, "--out", erm_out)
        out = tmp_path / "metrics.json"
        assert run("eval", "--data", synth_dir / "test.lemb",
                   "--head", erm_out / "head.tsv", "--out", out) == 0
        metrics = json.loads(out.read_text())
        assert set(metrics) == {"wga", "avg_acc", "uga", "per_group",
                                "worst_group_id"}
        assert 0.0 <= metrics["wga"] <= metrics["avg_acc"] <= 1.0

    def test_metrics_with_adapted_model(self, synth_dir, tmp_path):
        erm_out, leia_out = tmp_path / "erm", tmp_path / "leia"
        run("train-erm", "--train", synth_dir / "train.lemb",
            "--epochs", 20, "--out", erm_out)
        run("adapt-leia", "--adapt", synth_dir / "val.lemb",
            "--head", erm_out / "head.tsv", "--rank", 1, "--out", leia_out)
        out = tmp_path / "metrics.json"
        assert run("eval", "--data", synth_dir / "test.lemb",
                   "--model", leia_out / "model.tsv", "--out", out) == 0
        metrics = json.loads(out.read_text())
        assert set(metrics) == {"wga", "avg_acc", "uga", "per_group",
                                "worst_group_id"}

    def test_head_and_model_exclusive(self, synth_dir, tmp_path):
        code = run("eval", "--data", synth_dir / "test.lemb",
                   "--head", "h.tsv", "--model", "m.tsv")
        assert code == 2


class TestPipeline:
    def test_outputs_and_determinism(self, synth_dir, tmp_path):
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        for out in (out1, out2):
            assert run("pipeline", "--train", synth_dir / "train.lemb",
                       "--test", synth_dir / "test.lemb",
                       "--erm-epochs", 10, "--leia-epochs", 30,
                       "--seed", 1, "--out", out) == 0
        for name in ("head.tsv", "model.tsv", "metrics_base.json",
                     "metrics_adapted.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        base = json.loads((out1 / "metrics_base.json").read_text())
        assert "wga" in base and "uga" in base

    def test_rank_exceeding_dim_fails(self, synth_dir, tmp_path):
        code = run("pipeline", "--train", synth_dir / "train.lemb",
                   "--test", synth_dir / "test.lemb", "--rank", 99,
                   "--out", tmp_path / "x")
        assert code == 2


class TestSweep:
    def test_single_cell_shape_and_single_seed_std(self, tmp_path):
        out = tmp_path / "sweep"
        assert run("sweep", "--n-known", "1", "--rho", "0.2", "--seeds", "0",
                   "--samples-per-group", 200, "--erm-epochs", 5,
                   "--leia-epochs", 20, "--out", out) == 0
        doc = json.loads((out / "sweep.json").read_text())
        assert len(doc["cells"]) == 1
        cell = doc["cells"][0]
        assert cell["n_known"] == 1 and cell["rho"] == pytest.approx(0.2)
        for key in ("erm_uga", "gdro_uga", "leia_uga", "harm"):
            assert cell[key]["std"] == 0.0
            assert len(cell[key]["per_seed"]) == 1
        csv_lines = (out / "sweep.csv").read_text().splitlines()
        assert csv_lines[0].startswith("n_known,rho,erm_uga_mean")
        assert len(csv_lines) == 2

    def test_deterministic_and_order_independent(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        common = ["--rho", "0.3", "--seeds", "0,1", "--samples-per-group", 200,
                  "--erm-epochs", 5, "--leia-epochs", 20]
        assert run("sweep", "--n-known", "1,2", *common, "--out", a) == 0
        assert run("sweep", "--n-known", "2,1", *common, "--out", b) == 0
        assert (a / "sweep.json").read_bytes() == (b / "sweep.json").read_bytes()
        assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()


class TestCev:
    def test_curve_shape(self, synth_dir, tmp_path):
        erm_out = tmp_path / "erm"
        run("train-erm", "--train", synth_dir / "train.lemb",
            "--epochs", 20, "--out", erm_out)
        out = tmp_path / "cev"
        assert run("cev", "--data", synth_dir / "val.lemb",
                   "--head", erm_out / "head.tsv", "--gamma", 100,
                   "--out", out) == 0
        lines = (out / "cev.csv").read_text().splitlines()
        assert lines[0] == "k,eigenvalue,cev"
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 7
        cevs = [float(r[2]) for r in rows]
        assert all(b >= a - 1e-12 for a, b in zip(cevs, cevs[1:]))
        assert cevs[-1] == pytest.approx(1.0)
        band = json.loads((out / "rank_band.json").read_text())
        assert band["candidates"]
        assert all(0.5 <= cevs[k - 1] <= 0.9 for k in band["candidates"])

    def test_planted_error_axis_dominates_cev(self):
        # one embedding axis carries almost all variance, so the first
        # explained-variance ratio must clear 0.5 by a wide margin
        from leia.data import EmbeddingDataset
        from leia.heads import LinearHead
        from leia.workflows import compute_cev_table

        rng = np.random.default_rng(6)
        n = 400
        emb = rng.standard_normal((n, 6)) * 0.1
        emb[:, 2] += rng.standard_normal(n) * 3.0
        ds = EmbeddingDataset(embeddings=emb, labels=rng.integers(0, 2, n),
                              num_classes=2)
        head = LinearHead(weight=np.zeros((2, 6)), bias=np.zeros(2))
        table = compute_cev_table(ds, head, gamma=0.0)
        assert table.cev[0] > 0.5

    def test_gamma_zero_matches_plain_covariance(self, synth_dir, tmp_path):
        erm_out = tmp_path / "erm"
        run("train-erm", "--train", synth_dir / "train.lemb",
            "--epochs", 5, "--out", erm_out)
        out = tmp_path / "cev0"
        assert run("cev", "--data", synth_dir / "val.lemb",
                   "--head", erm_out / "head.tsv", "--gamma", 0, "--out", out) == 0
        rows = (out / "cev.csv").read_text().splitlines()[1:]
        got = np.array([float(r.split(",")[1]) for r in rows])
        ds = read_dataset(synth_dir / "val.lemb")
        cov = error_weighted_covariance(ds.embeddings, np.full(ds.n, 1.0 / ds.n))
        expected = symmetric_eigendecomposition(cov).eigenvalues
        np.testing.assert_allclose(got, expected, rtol=1e-6)


class TestProject:
    def test_full_rotation_preserves_distances(self, synth_dir, tmp_path):
        erm_out = tmp_path / "erm"
        run("train-erm", "--train", synth_dir / "train.lemb",
            "--epochs", 5, "--out", erm_out)
        out = tmp_path / "proj"
        assert run("project", "--data", synth_dir / "val.lemb",
                   "--head", erm_out / "head.tsv", "--gamma", 100,
                   "--dims", 7, "--out", out) == 0
        lines = (out / "projection.csv").read_text().splitlines()
        assert lines[0] == "c1,c2,c3,c4,c5,c6,c7,label,group"
        ds = read_dataset(synth_dir / "val.lemb")
        assert len(lines) - 1 == ds.n
        coords = np.array([[float(v) for v in line.split(",")[:7]]
                           for line in lines[1:]])
        rng = np.random.default_rng(0)
        for _ in range(50):
            i, j = rng.integers(0, ds.n, 2)
            orig = np.linalg.norm(ds.embeddings[i] - ds.embeddings[j])
            proj = np.linalg.norm(coords[i] - coords[j])
            assert abs(orig - proj) <= 1e-6  # csv carries 9 significant digits

    def test_dims_exceeding_d_fails(self, synth_dir, tmp_path):
        erm_out = tmp_path / "erm"
        run("train-erm", "--train", synth_dir / "train.lemb",
            "--epochs", 5, "--out", erm_out)
        code = run("project", "--data", synth_dir / "val.lemb",
                   "--head", erm_out / "head.tsv", "--dims", 8,
                   "--out", tmp_path / "x")
        assert code == 2


class TestConfigAndExitCodes:
    def test_config_file_merge_and_flag_override(self, synth_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 5, "momentum": 0.0}))
        out = tmp_path / "erm"
        assert run("train-erm", "--config", cfg, "--train",
                   synth_dir / "train.lemb", "--epochs", 3, "--out", out) == 0
        lines = (out / "history.csv").read_text().splitlines()
        assert len(lines) == 4  # flag value 3 overrides config value 5

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate_typo": 1}))
        assert run("synth", "--config", cfg, "--out", tmp_path / "x") == 2

    def test_missing_required_flag(self):
        assert run("train-erm") == 2

    def test_missing_data_file(self, tmp_path):
        assert run("eval", "--data", tmp_path / "nope.lemb") == 3

    def test_corrupt_data_file(self, tmp_path):
        bad = tmp_path / "bad.lemb"
        bad.write_bytes(b"XXXX" + b"\x00" * 40)
        assert run("eval", "--data", bad) == 3

    def test_bad_format_value(self, synth_dir):
        assert run("eval", "--data", synth_dir / "test.lemb",
                   "--format", "xml") == 2
