"""CLI surface: subcommands, exit codes, artifacts, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from kindiff.cli import main
from kindiff.config import ConfigError, RunConfig, config_hash, load_config
from kindiff.data import read_jsonl

TOY_TOML = """
seed = 7

[schedule]
n_grid = 200

[net]
n_layers = 1
hidden_dim = 12
time_embed_dim = 8
n_freq = 3
num_species = 1

[train]
batch_size = 8
n_steps = 40
eval_every = 20
log_every = 20
val_size = 6
n_mc_lambda = 1000

[sampler]
scheme = "em"
n_steps = 40

[toy]
family = "ring-1d"
k = 4
jitter = 0.01
count = 60
seed = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.toml"
    cfg.write_text(TOY_TOML)
    return root


class TestConfigLoading:
    def test_round_trip_defaults(self, workdir):
        cfg = load_config(workdir / "toy.toml")
        assert cfg.seed == 7
        assert cfg.net.hidden_dim == 12
        assert cfg.toy.family == "ring-1d"

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[net]\nhidden_size = 64\n")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[model]\nhidden_dim = 64\n")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_hash_stable_and_sensitive(self, workdir):
        a = load_config(workdir / "toy.toml")
        b = load_config(workdir / "toy.toml")
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(RunConfig())


class TestVerifyCommands:
    def test_verify_kernel_small(self, workdir):
        out = workdir / "vk"
        code = main(["verify-kernel", "--t", "0.5", "--n", "20000", "--dt", "0.002",
                     "--seed", "7", "--out", str(out), "--no-plots"])
        assert code == 0
        report = json.loads((out / "verify_kernel.json").read_text())
        assert report["passed"]
        assert "config_hash" in report
        assert (out / "verify_kernel.csv").read_text().startswith("# config_hash:")
        manifest = json.loads((out / "verify-kernel_manifest.json").read_text())
        assert manifest["config_hash"] == report["config_hash"]

    def test_verify_score_small(self, workdir):
        out = workdir / "vs"
        code = main(["verify-score", "--n", "60", "--seed", "1",
                     "--out", str(out), "--no-plots"])
        assert code == 0
        report = json.loads((out / "verify_score.json").read_text())
        assert report["kinetic_max"] < 1e-4
        assert report["wn_max"] < 1e-5


class TestPipeline:
    def test_gen_train_sample_match(self, workdir):
        cfg = str(workdir / "toy.toml")
        data = workdir / "data"
        assert main(["gen-data", "--config", cfg, "--test-count", "8",
                     "--out", str(data), "--no-plots"]) == 0
        assert len(read_jsonl(data / "train.jsonl")) == 60
        assert len(read_jsonl(data / "test.jsonl")) == 8

        run = workdir / "run"
        assert main(["train", "--config", cfg, "--data", str(data / "train.jsonl"),
                     "--out", str(run), "--no-plots"]) == 0
        assert (run / "model.ckpt").exists()
        metrics = (run / "metrics.csv").read_text().splitlines()
        assert metrics[0].startswith("# config_hash:")
        assert metrics[1] == "step,t_mean,loss_total,loss_v,loss_l,loss_a,val_metric"

        samp = workdir / "samp"
        assert main(["sample", "--config", cfg, "--checkpoint", str(run / "model.ckpt"),
                     "--ref", str(data / "test.jsonl"), "--out", str(samp),
                     "--no-plots"]) == 0
        samples = read_jsonl(samp / "samples.jsonl")
        assert len(samples) == 8

        ev = workdir / "ev"
        assert main(["match", "--pred", str(samp / "samples.jsonl"),
                     "--ref", str(data / "test.jsonl"), "--tol", "0.05",
                     "--out", str(ev), "--no-plots"]) == 0
        rep = json.loads((ev / "match.json").read_text())
        assert set(rep) >= {"match_rate", "rmse_mean", "site_tol", "config_hash"}

    def test_train_reproducible_metrics(self, workdir):
        cfg = str(workdir / "toy.toml")
        data = workdir / "data"
        outs = []
        for name in ("r1", "r2"):
            out = workdir / name
            assert main(["train", "--config", cfg, "--data", str(data / "train.jsonl"),
                         "--out", str(out), "--no-plots"]) == 0
            outs.append(out)
        assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
        assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()

    def test_sample_reproducible(self, workdir):
        cfg = str(workdir / "toy.toml")
        run = workdir / "run"
        data = workdir / "data"
        outs = []
        for name in ("s1", "s2"):
            out = workdir / name
            assert main(["sample", "--config", cfg, "--checkpoint", str(run / "model.ckpt"),
                         "--ref", str(data / "test.jsonl"), "--out", str(out),
                         "--no-plots"]) == 0
            outs.append(out)
        assert (outs[0] / "samples.jsonl").read_bytes() == (outs[1] / "samples.jsonl").read_bytes()


class TestFrechetDiag:
    def test_report(self, workdir):
        out = workdir / "fd"
        code = main(["frechet-diag", "--k", "10", "--sigma2", "0.1,0.7", "--n", "200",
                     "--seed", "5", "--out", str(out), "--no-plots"])
        assert code == 0
        rep = json.loads((out / "frechet_diag.json").read_text())
        assert len(rep["entries"]) == 2
        assert rep["entries"][0]["preserved_frac"] >= 0.95
        assert rep["entries"][1]["quantized_frac"] == 1.0


class TestUsageErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        out = tmp_path / "x"
        code = main(["gen-data", "--config", str(tmp_path / "nope.toml"),
                     "--out", str(out), "--no-plots"])
        assert code == 2
        assert "error:" in capsys.readouterr().err
        assert not (out / "train.jsonl").exists()

    def test_missing_checkpoint(self, tmp_path):
        out = tmp_path / "y"
        code = main(["sample", "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--n", "1", "--composition", "0", "--out", str(out)])
        assert code == 2
        assert not (out / "samples.jsonl").exists()

    def test_mismatched_match_inputs(self, workdir, tmp_path):
        data = workdir / "data"
        short = tmp_path / "short.jsonl"
        lines = (data / "test.jsonl").read_text().splitlines()
        short.write_text("\n".join(lines[:3]) + "\n")
        out = tmp_path / "m"
        code = main(["match", "--pred", str(short), "--ref", str(data / "test.jsonl"),
                     "--out", str(out)])
        assert code == 2
        assert not (out / "match.json").exists()

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2


class TestFigures:
    def test_plots_written(self, workdir):
        out = workdir / "figs"
        assert main(["frechet-diag", "--k", "6", "--sigma2", "0.1", "--n", "50",
                     "--seed", "2", "--out", str(out)]) == 0
        png = out / "frechet_diag.png"
        assert png.exists() and png.stat().st_size > 1000
