"""End-to-end CLI pipeline: files, exit codes, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest

from infodpcca.cli import main
from infodpcca.data import SequencePairDataset, read_dataset, write_dataset
from infodpcca.models import read_latents

GEN = ["gen", "henon", "--t-len", "12", "--n-seq", "8", "--dx", "4",
       "--dy", "3", "--noise-std", "0.05", "--seed", "5"]
TRAIN_NET = ["--rnn-hidden", "6", "--mlp-hidden", "6", "--epochs", "4",
             "--batch-size", "4", "--dz1", "1", "--dz2", "1"]


@pytest.fixture(scope="module")
def ds_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "henon"
    assert main(GEN + ["--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt_dir(ds_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck") / "full"
    rc = main(["train", "--data", str(ds_dir), "--out", str(out),
               "--model", "infodpcca", "--stage", "both", "--seed", "1"]
              + TRAIN_NET)
    assert rc == 0
    return out


class TestGen:
    def test_writes_dataset_and_summary(self, ds_dir, capsys):
        for f in ("meta.json", "x1.bin", "x2.bin", "z.bin", "config.json"):
            assert (ds_dir / f).exists()
        ds = read_dataset(ds_dir)
        assert ds.x1.shape == (8, 12, 4)

    def test_rerun_identical_bytes(self, ds_dir, tmp_path):
        again = tmp_path / "again"
        assert main(GEN + ["--out", str(again)]) == 0
        for f in ("meta.json", "x1.bin", "x2.bin", "z.bin"):
            assert (ds_dir / f).read_bytes() == (again / f).read_bytes(), f

    def test_summary_json_on_stdout(self, tmp_path, capsys):
        assert main(GEN + ["--out", str(tmp_path / "d")]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["n_seq"] == 8 and not summary["has_labels"]

    def test_grouped_labels(self, tmp_path, capsys):
        out = tmp_path / "grp"
        rc = main(["gen", "grouped", "--out", str(out), "--t", "10",
                   "--n-per-group", "3", "--dx", "4", "--dy", "3",
                   "--seed", "2"])
        assert rc == 0
        ds = read_dataset(out)
        assert ds.labels is not None and ds.labels.sum() == 3

    def test_split_manifest(self, tmp_path):
        out = tmp_path / "sp"
        rc = main(GEN + ["--out", str(out), "--split-fraction", "0.75"])
        assert rc == 0
        manifest = json.loads((out / "split.json").read_text())
        assert len(manifest["train_indices"]) == 6
        assert len(manifest["test_indices"]) == 2

    def test_invalid_params_exit_2(self, tmp_path):
        rc = main(["gen", "henon", "--out", str(tmp_path / "x"),
                   "--t-len", "1"])
        assert rc == 2


class TestTrain:
    def test_checkpoint_layout(self, ckpt_dir):
        for f in ("manifest.json", "tensors.bin", "history.jsonl",
                  "config.json"):
            assert (ckpt_dir / f).exists()

    def test_history_lines_parse_and_totals_match(self, ckpt_dir):
        weights = {"shared_logq": None}
        for line in (ckpt_dir / "history.jsonl").read_text().splitlines():
            h = json.loads(line)
            if "total" not in h:
                continue
            if h["stage"] == "step1":
                a, b = h["alpha"], h["beta"]
                want = ((a + 2 * b) * h["shared_logq"]
                        + a * h["prior_cross_entropy"]
                        - h["recon1"] - h["recon2"]
                        + b * h["marginal1_cross_entropy"]
                        + b * h["marginal2_cross_entropy"])
            else:
                want = (h["recon1"] + h["recon2"] - h["kl_shared"]
                        - h["kl_private1"] - h["kl_private2"])
            assert h["total"] == pytest.approx(want, rel=1e-9, abs=1e-9)

    def test_step1_cmi_logged(self, ckpt_dir):
        lines = [json.loads(x) for x in
                 (ckpt_dir / "history.jsonl").read_text().splitlines()]
        step1 = [h for h in lines if h.get("stage") == "step1"]
        assert step1 and all("cmi" in h for h in step1)

    def test_stage2_requires_init(self, ds_dir, tmp_path):
        rc = main(["train", "--data", str(ds_dir), "--out",
                   str(tmp_path / "x"), "--stage", "2"] + TRAIN_NET)
        assert rc == 2

    def test_stage2_ablation_and_from_step1(self, ds_dir, tmp_path):
        s1 = tmp_path / "s1"
        rc = main(["train", "--data", str(ds_dir), "--out", str(s1),
                   "--stage", "1", "--seed", "3"] + TRAIN_NET)
        assert rc == 0
        assert json.loads((s1 / "manifest.json").read_text())["stage"] == "step1"

        s2 = tmp_path / "s2"
        rc = main(["train", "--data", str(ds_dir), "--out", str(s2),
                   "--stage", "2", "--init-from", str(s1), "--seed", "3"]
                  + TRAIN_NET)
        assert rc == 0
        assert json.loads((s2 / "manifest.json").read_text())["stage"] == "step2"

        abl = tmp_path / "abl"
        rc = main(["train", "--data", str(ds_dir), "--out", str(abl),
                   "--stage", "2", "--init-random", "--seed", "3"] + TRAIN_NET)
        assert rc == 0
        man = json.loads((abl / "manifest.json").read_text())
        assert man["stage"] == "step2" and man["frozen"] == []

    def test_baselines_train(self, ds_dir, tmp_path):
        for model in ("dvib", "dpcca"):
            rc = main(["train", "--data", str(ds_dir), "--out",
                       str(tmp_path / model), "--model", model, "--seed", "2"]
                      + TRAIN_NET)
            assert rc == 0

    def test_baseline_rejects_stage(self, ds_dir, tmp_path):
        rc = main(["train", "--data", str(ds_dir), "--out", str(tmp_path / "x"),
                   "--model", "dvib", "--stage", "1"] + TRAIN_NET)
        assert rc == 2

    def test_missing_dataset_exit_3(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--out",
                   str(tmp_path / "x")] + TRAIN_NET)
        assert rc == 3

    def test_train_deterministic_bytes(self, ds_dir, tmp_path):
        outs = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            rc = main(["train", "--data", str(ds_dir), "--out", str(out),
                       "--stage", "1", "--seed", "7"] + TRAIN_NET)
            assert rc == 0
            outs.append(out)
        for f in ("manifest.json", "tensors.bin", "history.jsonl"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


class TestExtract:
    def test_step1_and_step2(self, ds_dir, ckpt_dir, tmp_path):
        for stage in ("step1", "step2"):
            out = tmp_path / stage
            rc = main(["extract", "--ckpt", str(ckpt_dir), "--data",
                       str(ds_dir), "--out", str(out), "--stage", stage])
            assert rc == 0
            ext = read_latents(out)
            assert ext.z0_mean.shape == (8, 11, 2)

    def test_stage_mismatch_exit_5(self, ds_dir, tmp_path):
        s1 = tmp_path / "s1"
        assert main(["train", "--data", str(ds_dir), "--out", str(s1),
                     "--stage", "1", "--seed", "3"] + TRAIN_NET) == 0
        rc = main(["extract", "--ckpt", str(s1), "--data", str(ds_dir),
                   "--out", str(tmp_path / "x"), "--stage", "step2"])
        assert rc == 5

    def test_deterministic(self, ds_dir, ckpt_dir, tmp_path):
        blobs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["extract", "--ckpt", str(ckpt_dir), "--data",
                         str(ds_dir), "--out", str(out),
                         "--stage", "step1"]) == 0
            blobs.append((out / "z0_mean.bin").read_bytes())
        assert blobs[0] == blobs[1]


class TestEval:
    def test_corr_perfect_latents(self, ds_dir, tmp_path, capsys):
        from infodpcca.models import LatentExtraction, write_latents
        ds = read_dataset(ds_dir)
        lat = tmp_path / "lat"
        z = ds.z_true[:, :-1].astype(np.float64)
        write_latents(LatentExtraction(stage="step1_prior", z0_mean=z,
                                       z0_std=np.ones_like(z)), lat)
        out = tmp_path / "corr.json"
        rc = main(["eval", "corr", "--latents", str(lat), "--data",
                   str(ds_dir), "--out", str(out)])
        assert rc == 0
        rep = json.loads(out.read_text())
        assert rep["rho_hat"] == pytest.approx(1.0, abs=1e-6)

    def test_corr_missing_truth_exit_6(self, ds_dir, ckpt_dir, tmp_path):
        ds = read_dataset(ds_dir)
        bare = tmp_path / "bare"
        write_dataset(SequencePairDataset(ds.x1, ds.x2, meta={}), bare)
        lat = tmp_path / "lat"
        assert main(["extract", "--ckpt", str(ckpt_dir), "--data", str(bare),
                     "--out", str(lat), "--stage", "step1"]) == 0
        rc = main(["eval", "corr", "--latents", str(lat), "--data", str(bare),
                   "--out", str(tmp_path / "x.json")])
        assert rc == 6

    def test_cluster_on_grouped(self, tmp_path):
        grp = tmp_path / "grp"
        assert main(["gen", "grouped", "--out", str(grp), "--t", "12",
                     "--n-per-group", "4", "--dx", "4", "--dy", "3",
                     "--seed", "2"]) == 0
        ck = tmp_path / "ck"
        assert main(["train", "--data", str(grp), "--out", str(ck),
                     "--stage", "1", "--seed", "0"] + TRAIN_NET) == 0
        lat = tmp_path / "lat"
        assert main(["extract", "--ckpt", str(ck), "--data", str(grp),
                     "--out", str(lat), "--stage", "step1"]) == 0
        out = tmp_path / "cluster.json"
        rc = main(["eval", "cluster", "--latents", str(lat), "--data",
                   str(grp), "--out", str(out), "--k", "2"])
        assert rc == 0
        rep = json.loads(out.read_text())
        assert 0.0 <= rep["nmi"] <= 1.0
        assert -1.0 <= rep["silhouette"] <= 1.0

    def test_cluster_missing_labels_exit_6(self, ds_dir, ckpt_dir, tmp_path):
        lat = tmp_path / "lat"
        assert main(["extract", "--ckpt", str(ckpt_dir), "--data", str(ds_dir),
                     "--out", str(lat), "--stage", "step1"]) == 0
        rc = main(["eval", "cluster", "--latents", str(lat), "--data",
                   str(ds_dir), "--out", str(tmp_path / "x.json")])
        assert rc == 6

    def test_recon_csv(self, ds_dir, ckpt_dir, tmp_path):
        out = tmp_path / "recon.csv"
        rc = main(["eval", "recon", "--ckpt", str(ckpt_dir), "--data",
                   str(ds_dir), "--seq", "0", "--dims", "0,1",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "t,dim,actual,mean,std"
        assert len(lines) - 1 == 11 * 2
        summary = json.loads(Path(str(out) + ".json").read_text())
        assert 0.0 <= summary["coverage_2std"] <= 1.0

    def test_recon_bad_dim_exit_2(self, ds_dir, ckpt_dir, tmp_path):
        rc = main(["eval", "recon", "--ckpt", str(ckpt_dir), "--data",
                   str(ds_dir), "--seq", "0", "--dims", "99",
                   "--out", str(tmp_path / "x.csv")])
        assert rc == 2


class TestConfigFile:
    def test_config_defaults_and_cli_override(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"t_len": 15, "n_seq": 4, "dx": 3,
                                   "dy": 3, "seed": 9}))
        out = tmp_path / "d"
        rc = main(["--config", str(cfg), "gen", "henon", "--out", str(out),
                   "--n-seq", "5"])
        assert rc == 0
        ds = read_dataset(out)
        assert ds.t_len == 15      # from config file
        assert ds.n_seq == 5       # CLI flag wins
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["t_len"] == 15 and echoed["n_seq"] == 5

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"frobnicate": 1}))
        rc = main(["--config", str(cfg), "gen", "henon",
                   "--out", str(tmp_path / "d")])
        assert rc == 2


class TestHelp:
    @pytest.mark.parametrize("cmd", [
        [], ["gen"], ["gen", "henon"], ["gen", "grouped"], ["train"],
        ["extract"], ["eval"], ["eval", "corr"], ["eval", "cluster"],
        ["eval", "recon"],
    ])
    def test_help_exits_zero(self, cmd):
        with pytest.raises(SystemExit) as ei:
            main(cmd + ["--help"])
        assert ei.value.code == 0
