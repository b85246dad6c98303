import json
from pathlib import Path

import pytest

from airknow.config import RunConfig
from airknow.errors import ConfigError
from airknow.harness import (VARIANTS, run_pipeline, run_sweep, run_variant,
                             variant_config)


def small_config(tmp_path, name="run", sigma=0.5) -> RunConfig:
    cfg = RunConfig()
    cfg.seed = 5
    cfg.out = str(tmp_path / name)
    cfg.world.dim = 16
    cfg.world.concepts = 8
    cfg.world.intra_noise = 0.02
    cfg.world.train_size = 120
    cfg.world.val_size = 30
    cfg.world.detect_size = 40
    cfg.noise.sigma = sigma
    cfg.epa.anchor_size = 80
    cfg.epa.clean_accuracy = 1.0
    cfg.epa.noisy_accuracy = 1.0
    cfg.eki.hidden = [16, 8]
    cfg.eki.batch_size = 32
    cfg.eki.mc_passes = 4
    cfg.dsr.learning_rate = 0.5
    cfg.dsr.epochs = 2
    cfg.dsr.batch_size = 32
    cfg.eval.ks = [1, 5]
    return cfg.validate()


ARTIFACTS = ("config.toml", "train.jsonl", "val.jsonl", "detect.jsonl",
             "anchor.jsonl", "proxy.json", "heads_compose.json",
             "heads_project.json", "train_report.csv", "metrics.csv",
             "summary.json")


class TestPipeline:
    def test_full_run_writes_everything(self, tmp_path):
        cfg = small_config(tmp_path)
        summary = run_pipeline(cfg)
        out = Path(cfg.out)
        for name in ARTIFACTS:
            assert (out / name).exists(), name
        assert set(summary) >= {"r_at_1", "r_at_5", "rsub_at_1",
                                "detection_accuracy", "detection_auc"}

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        cfg_a = small_config(tmp_path, "a")
        cfg_b = small_config(tmp_path, "b")
        run_pipeline(cfg_a)
        run_pipeline(cfg_b)
        for name in ARTIFACTS:
            if name == "config.toml":
                continue  # carries the differing out path
            a, b = Path(cfg_a.out) / name, Path(cfg_b.out) / name
            assert a.read_bytes() == b.read_bytes(), name

    def test_train_report_has_oracle_split_columns(self, tmp_path):
        cfg = small_config(tmp_path, "rep")
        run_pipeline(cfg)
        lines = (Path(cfg.out) / "train_report.csv").read_text().splitlines()
        assert lines[0] == ("epoch,l_align,l_recon,l_total,"
                            "mean_c_hat_clean,mean_c_hat_noisy")
        assert len(lines) == 1 + cfg.dsr.epochs
        first = lines[1].split(",")
        assert float(first[4]) > float(first[5])  # clean scores above noisy

    def test_rerunning_from_effective_config_reproduces_bytes(self, tmp_path):
        from airknow.config import load_config
        cfg = small_config(tmp_path, "echo")
        run_pipeline(cfg)
        out = Path(cfg.out)
        snapshot = {name: (out / name).read_bytes() for name in ARTIFACTS}
        refed = load_config(out / "config.toml")
        run_pipeline(refed)
        for name, blob in snapshot.items():
            assert (out / name).read_bytes() == blob, name


class TestVariants:
    def test_unknown_variant_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            variant_config(small_config(tmp_path), "D99")

    def test_variant_table_is_complete(self):
        assert VARIANTS == ("full", "D3", "D4", "D5", "D6", "D7", "D8", "D9",
                            "D10", "D11", "D12", "D13")

    def test_d13_skips_proxy_and_anchor(self, tmp_path):
        cfg = small_config(tmp_path, "d13")
        run_variant(cfg, "D13")
        out = Path(cfg.out) / "variants" / "D13"
        assert (out / "summary.json").exists()
        assert not (out / "proxy.json").exists()
        assert not (out / "anchor.jsonl").exists()

    def test_d8_disables_dropout(self, tmp_path):
        cfg = variant_config(small_config(tmp_path), "D8")
        assert cfg.eki.dropout == 0.0 and cfg.eki.mc_passes == 1

    def test_d11_runs_reconciliation_only(self, tmp_path):
        cfg = small_config(tmp_path, "d11")
        run_variant(cfg, "D11")
        out = Path(cfg.out) / "variants" / "D11"
        report = (out / "train_report.csv").read_text().splitlines()
        row = report[1].split(",")
        assert row[1] == "nan"          # no alignment stream
        assert float(row[4]) == 0.0     # every sample diverted at full weight

    def test_gdv_variants_map_to_config(self, tmp_path):
        base = small_config(tmp_path)
        assert variant_config(base, "D3").eki.gdv_variant == "triplet_raw"
        assert variant_config(base, "D5").eki.gdv_variant == "no_hadamard"
        assert variant_config(base, "D7").eki.gdv_variant == "no_basic"
        assert variant_config(base, "D9").eki.dropout == 0.0
        assert variant_config(base, "D12").dsr.recon is False


class TestSweep:
    def test_lambda_sweep_emits_plot_data(self, tmp_path):
        cfg = small_config(tmp_path, "sw")
        cfg.dsr.epochs = 1
        summary = run_sweep(cfg, "lambda", values=[0.1, 0.5])
        sweep_dir = Path(cfg.out) / "sweep_lambda"
        csv = (sweep_dir / "sweep_lambda.csv").read_text().splitlines()
        assert csv[0] == "lambda,r_at_1"
        assert len(csv) == 3
        assert summary["peak_value"] in (0.1, 0.5)

    def test_p_sweep_touches_dropout(self, tmp_path):
        cfg = small_config(tmp_path, "swp")
        cfg.dsr.epochs = 1
        summary = run_sweep(cfg, "p", values=[0.05, 0.1])
        assert (Path(cfg.out) / "sweep_p" / "sweep_p.csv").exists()
        assert summary["param"] == "p"

    def test_unknown_parameter_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run_sweep(small_config(tmp_path), "tau")
