import math

import pytest
import yaml

from crossimpute.cli import main
from crossimpute.config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, apply_overrides, load_config
from crossimpute.training import learning_rate

MINIMAL = {
    "seed": 3,
    "output_dir": "runs/x",
    "data": {"synthetic": {"n_features": 2, "window_len": 8, "n_windows": 10}},
    "align": {"tau_l": 0.05, "tau_h": 0.5, "mu_align": 1.0},
}


def write_cfg(tmp_path, payload, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(payload), encoding="utf-8")
    return path


class TestConfig:
    def test_minimal_with_defaults(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, MINIMAL))
        assert cfg.seed == 3
        assert cfg.optim.batch_size == 16
        assert cfg.optim.epochs == 200
        assert cfg.optim.lr == 1e-3
        assert cfg.schedule.steps == 50
        assert cfg.schedule.beta_start == 1e-4 and cfg.schedule.beta_end == 0.5
        assert cfg.eval.n_samples == 100
        assert cfg.fmixup.alpha == 0.003
        assert cfg.model.channels == 64

    def test_align_keys_mandatory_when_enabled(self, tmp_path):
        payload = dict(MINIMAL, align={"tau_l": 0.05, "tau_h": 0.5})
        with pytest.raises(ConfigError, match="mu_align"):
            load_config(write_cfg(tmp_path, payload))

    def test_align_keys_optional_when_disabled(self, tmp_path):
        payload = dict(MINIMAL, align={}, cdca_enabled=False)
        cfg = load_config(write_cfg(tmp_path, payload))
        assert not cfg.cdca_enabled

    def test_unknown_key_rejected(self, tmp_path):
        payload = dict(MINIMAL, optim={"learning_rate_typo": 1.0})
        with pytest.raises(ConfigError, match="learning_rate_typo"):
            load_config(write_cfg(tmp_path, payload))

    def test_missing_file_reference(self, tmp_path):
        payload = dict(MINIMAL, data={"source_csv": "nope.csv", "target_csv": "nope2.csv", "window_len": 8})
        with pytest.raises(ConfigError, match="not found"):
            load_config(write_cfg(tmp_path, payload))

    def test_milestone_validation(self, tmp_path):
        payload = dict(MINIMAL, optim={"decay_milestones": [0.9, 0.75]})
        with pytest.raises(ConfigError, match="milestones"):
            load_config(write_cfg(tmp_path, payload))

    def test_overrides(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, MINIMAL), ["optim.epochs=7", "fmixup.mode=zero", "seed=9"])
        assert cfg.optim.epochs == 7
        assert cfg.fmixup.mode == "zero"
        assert cfg.seed == 9

    def test_override_list_value(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, MINIMAL), ["fmixup.lambda_range=[0.2, 0.8]"])
        assert cfg.fmixup.lambda_range == (0.2, 0.8)

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["no_equals_sign"])

    def test_env_output_root(self, tmp_path, monkeypatch):
        cfg = load_config(write_cfg(tmp_path, MINIMAL))
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        assert cfg.resolved_output_dir() == tmp_path / "root" / "runs" / "x"
        monkeypatch.delenv(OUTPUT_ROOT_ENV)
        assert str(cfg.resolved_output_dir()) == "runs/x"

    def test_round_trip_through_dict(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, MINIMAL))
        again = RunConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_resolved_copy_written(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, MINIMAL))
        out = cfg.write_resolved(tmp_path / "out")
        loaded = yaml.safe_load(out.read_text())
        assert loaded["seed"] == 3


class TestLearningRateSchedule:
    @pytest.mark.parametrize("total", [200, 10, 37])
    def test_piecewise_exact(self, total):
        m1 = math.ceil(0.75 * total)
        m2 = math.ceil(0.90 * total)
        for epoch in range(1, total + 1):
            rate = learning_rate(epoch, total, 1e-3, (1e-4, 1e-5), (0.75, 0.90))
            if epoch < m1:
                assert rate == 1e-3
            elif epoch <= m2:
                assert rate == 1e-4
            else:
                assert rate == 1e-5


class TestCli:
    def test_missing_subcommand_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_evaluate_requires_checkpoint(self, capsys):
        assert main(["evaluate", "--config", "whatever.yaml"]) == 2
        err = capsys.readouterr().err
        assert "--checkpoint" in err

    def test_runtime_failure_is_exit_one(self, tmp_path, capsys):
        missing = tmp_path / "absent.yaml"
        assert main(["train", "--config", str(missing)]) == 1
        capsys.readouterr()

    def test_synth_deterministic(self, tmp_path, capsys):
        args = ["synth", "--seed", "7", "--features", "2", "--window-len", "8", "--windows", "4"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()
        assert (tmp_path / "a" / "target.csv").read_bytes() == (tmp_path / "b" / "target.csv").read_bytes()
        assert (tmp_path / "a" / "source.csv").read_bytes() == (tmp_path / "b" / "source.csv").read_bytes()

    def test_prepare_writes_manifest(self, tmp_path, capsys):
        cfg = dict(MINIMAL, output_dir=str(tmp_path / "prep"))
        path = write_cfg(tmp_path, cfg)
        assert main(["prepare", "--config", str(path)]) == 0
        capsys.readouterr()
        assert (tmp_path / "prep" / "manifest.json").exists()
        assert (tmp_path / "prep" / "resolved_config.yaml").exists()


class TestCliEndToEnd:
    def test_synth_train_evaluate_impute(self, tmp_path, capsys):
        data_dir = tmp_path / "data"
        assert (
            main(
                [
                    "synth",
                    "--out",
                    str(data_dir),
                    "--seed",
                    "3",
                    "--features",
                    "3",
                    "--window-len",
                    "16",
                    "--windows",
                    "30",
                    "--missing-rate",
                    "0.3",
                ]
            )
            == 0
        )
        run_dir = tmp_path / "run"
        payload = {
            "seed": 1,
            "output_dir": str(run_dir),
            "data": {
                "source_csv": str(data_dir / "source.csv"),
                "target_csv": str(data_dir / "target.csv"),
                "window_len": 16,
            },
            "fmixup": {"alpha": 0.1},
            "schedule": {"steps": 6},
            "model": {
                "channels": 8,
                "n_layers": 1,
                "n_heads": 2,
                "time_emb_dim": 16,
                "feat_emb_dim": 4,
                "diffusion_emb_dim": 16,
            },
            "align": {"tau_l": 0.05, "tau_h": 0.5, "mu_align": 1.0},
            "optim": {"batch_size": 8, "epochs": 2, "val_interval": 2, "val_t_stride": 3},
            "eval": {"n_samples": 2},
        }
        cfg_path = write_cfg(tmp_path, payload)
        assert main(["train", "--config", str(cfg_path)]) == 0
        ckpt = run_dir / "best.ckpt"
        assert ckpt.exists()

        eval_dir = tmp_path / "eval"
        assert (
            main(
                ["evaluate", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--eval-output", str(eval_dir)]
            )
            == 0
        )
        assert (eval_dir / "metrics.json").exists()

        impute_dir = tmp_path / "imputed"
        assert (
            main(
                [
                    "impute",
                    "--checkpoint",
                    str(ckpt),
                    "--input",
                    str(data_dir / "target.csv"),
                    "--out",
                    str(impute_dir),
                ]
            )
            == 0
        )
        capsys.readouterr()
        assert (impute_dir / "imputations.csv").exists()
        assert (impute_dir / "samples.npy").exists()
        lines = (impute_dir / "imputations.csv").read_text().strip().splitlines()
        assert len(lines) > 1  # imputed the original holes
        assert lines[1].split(",")[3] == ""  # original missing: no truth column
