import json
from pathlib import Path

import pytest

from airknow.cli import main
from airknow.config import RunConfig, apply_override, load_config, to_toml, \
    write_config
from airknow.errors import ConfigError

SMALL = """\
seed = 3
out = "{out}"

[world]
dim = 16
concepts = 8
intra_noise = 0.02
train_size = 120
val_size = 30
detect_size = 40

[noise]
sigma = 0.5

[epa]
anchor_size = 80
clean_accuracy = 1.0
noisy_accuracy = 1.0

[eki]
hidden = [16, 8]
batch_size = 32
epochs = 2
mc_passes = 4

[dsr]
learning_rate = 0.5
epochs = 2
batch_size = 32

[eval]
ks = [1, 5]
subset_ks = [1, 2, 3]
distractors = 5
"""


def write_small(tmp_path, **overrides) -> Path:
    out = tmp_path / "run"
    text = SMALL.format(out=str(out).replace("\\", "\\\\"))
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "c.toml"
        write_config(cfg, path)
        again = load_config(path)
        assert to_toml(again) == to_toml(cfg)

    def test_file_values_survive(self, tmp_path):
        cfg = load_config(write_small(tmp_path))
        assert cfg.seed == 3
        assert cfg.world.dim == 16
        assert cfg.noise.sigma == 0.5
        assert cfg.eki.hidden == [16, 8]

    def test_unknown_key_is_an_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[dsr]\nalpha_typo = 0.7\n')
        with pytest.raises(ConfigError, match="dsr.alpha_typo"):
            load_config(path)

    def test_type_mismatch_names_the_key(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[world]\ndim = "big"\n')
        with pytest.raises(ConfigError, match="world.dim"):
            load_config(path)

    def test_missing_file_names_the_path(self, tmp_path):
        with pytest.raises(ConfigError, match="no-such-file"):
            load_config(tmp_path / "no-such-file.toml")

    def test_override_matches_defaults(self, tmp_path):
        cfg = load_config(write_small(tmp_path), {"eki.dropout": "0.1"})
        assert cfg.eki.dropout == 0.1

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="dsr.alpha_typo"):
            apply_override(RunConfig(), "dsr.alpha_typo", "0.7")

    def test_anchor_capacity_validated(self, tmp_path):
        with pytest.raises(ConfigError, match="anchor_size"):
            load_config(write_small(tmp_path), {"epa.anchor_size": "121"})


class TestCli:
    def run_stages(self, tmp_path):
        config = write_small(tmp_path)
        for command in ("gen", "arbitrate", "train-eki", "train", "eval"):
            rc = main([command, "--config", str(config)])
            assert rc == 0, command
        return tmp_path / "run"

    def test_staged_pipeline_produces_artifacts(self, tmp_path):
        out = self.run_stages(tmp_path)
        for name in ("train.jsonl", "val.jsonl", "detect.jsonl", "anchor.jsonl",
                     "proxy.json", "heads_compose.json", "heads_project.json",
                     "train_report.csv", "metrics.csv", "summary.json"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert "r_at_1" in summary and "detection_accuracy" in summary

    def test_train_builds_missing_prerequisites(self, tmp_path):
        config = write_small(tmp_path)
        assert main(["train", "--config", str(config)]) == 0
        out = tmp_path / "run"
        for name in ("train.jsonl", "anchor.jsonl", "proxy.json",
                     "heads_compose.json"):
            assert (out / name).exists(), name

    def test_missing_config_exits_one(self, tmp_path, capsys):
        rc = main(["gen", "--config", str(tmp_path / "missing.toml")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "missing.toml" in err

    def test_unknown_flag_exits_one(self, tmp_path, capsys):
        rc = main(["gen", "--config", "x.toml", "--bogus"])
        assert rc == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_variant_exits_one(self, tmp_path):
        config = write_small(tmp_path)
        rc = main(["ablate", "--config", str(config), "--variant", "D99"])
        assert rc == 1

    def test_sigma_shorthand_applies(self, tmp_path):
        config = write_small(tmp_path)
        out = tmp_path / "alt"
        rc = main(["gen", "--config", str(config), "--sigma", "1.0",
                   "--out", str(out)])
        assert rc == 0
        header, first = (out / "train.jsonl").read_text().splitlines()[:2]
        assert json.loads(header)["sigma"] == 1.0
        assert json.loads(first)["oracle_corruption"] != "none"

    def test_ablate_and_report(self, tmp_path, capsys):
        config = write_small(tmp_path)
        rc = main(["ablate", "--config", str(config), "--variant", "D13"])
        assert rc == 0
        out = tmp_path / "run" / "variants" / "D13"
        assert (out / "summary.json").exists()
        assert not (out / "proxy.json").exists()  # eki skipped entirely
        rc = main(["report", "--config", str(config), "--out", str(out)])
        assert rc == 0
        assert "r_at_1" in capsys.readouterr().out
