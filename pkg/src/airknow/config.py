"""Run configuration: TOML files, dotted overrides, strict validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .eki import EkiHyper, GDV_VARIANTS
from .dsr import DsrHyper, HEAD_INIT_MODES


@dataclass
class WorldConfig:
    dim: int = 256
    concepts: int = 32
    intra_noise: float = 0.05
    train_size: int = 12800     # holds the default 40x256 anchor draw
    val_size: int = 500
    detect_size: int = 1000


@dataclass
class NoiseConfig:
    sigma: float = 0.2
    ref_weight: float = 1.0
    mod_weight: float = 1.0
    tar_weight: float = 1.0

    def kind_mix(self) -> dict:
        return {"ref_shuffle": self.ref_weight, "mod_shuffle": self.mod_weight,
                "tar_shuffle": self.tar_weight}


@dataclass
class EpaConfig:
    arbiter: str = "oracle"
    clean_accuracy: float = 0.8516
    noisy_accuracy: float = 0.8516
    anchor_size: int = 10240


@dataclass
class EkiConfig:
    dropout: float = 0.1
    l2: float = 1e-4
    learning_rate: float = 5e-4
    epochs: int = 2
    batch_size: int = 256
    mc_passes: int = 16
    gdv_variant: str = "full"
    class_weight: str = "balanced"
    optimizer: str = "adam"
    hidden: list = field(default_factory=lambda: [512, 256])

    def hyper(self) -> EkiHyper:
        return EkiHyper(
            dropout=self.dropout, l2=self.l2, class_weight=self.class_weight,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, mc_passes=self.mc_passes,
            gdv_variant=self.gdv_variant, hidden=tuple(self.hidden),
            optimizer=self.optimizer,
        )


@dataclass
class DsrConfig:
    temperature: float = 0.07
    margin: float = 0.7
    tradeoff: float = 0.5
    learning_rate: float = 2e-5
    epochs: int = 10
    batch_size: int = 256
    loss_mode: str = "airknow"
    align: bool = True
    recon: bool = True
    exclusive_denominator: bool = False
    confidence_cache: bool = False
    head_init: str = "pretrained"

    def hyper(self, confidence_override=None) -> DsrHyper:
        return DsrHyper(
            temperature=self.temperature, margin=self.margin,
            tradeoff=self.tradeoff, learning_rate=self.learning_rate,
            epochs=self.epochs, batch_size=self.batch_size,
            align_enabled=self.align, recon_enabled=self.recon,
            loss_mode=self.loss_mode,
            exclusive_denominator=self.exclusive_denominator,
            confidence_override=confidence_override,
            confidence_cache=self.confidence_cache,
        )


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 5, 10, 50])
    subset_ks: list = field(default_factory=lambda: [1, 2, 3])
    distractors: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/run"
    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    epa: EpaConfig = field(default_factory=EpaConfig)
    eki: EkiConfig = field(default_factory=EkiConfig)
    dsr: DsrConfig = field(default_factory=DsrConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        w, n, e = self.world, self.noise, self.epa
        if w.dim < 2 or w.concepts < 2:
            raise ConfigError("world.dim and world.concepts must be at least 2")
        if min(w.train_size, w.val_size, w.detect_size) < 2:
            raise ConfigError("dataset sizes must be at least 2")
        if not 0.0 <= n.sigma <= 1.0:
            raise ConfigError(f"noise.sigma {n.sigma} outside [0, 1]")
        if min(n.ref_weight, n.mod_weight, n.tar_weight) < 0 or \
                n.ref_weight + n.mod_weight + n.tar_weight == 0:
            raise ConfigError("noise kind weights must be nonnegative, not all zero")
        if e.arbiter not in ("oracle", "remote"):
            raise ConfigError(f"unknown arbiter kind {e.arbiter!r}")
        for name in ("clean_accuracy", "noisy_accuracy"):
            p = getattr(e, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"epa.{name} {p} outside [0, 1]")
        if e.anchor_size < 1:
            raise ConfigError("epa.anchor_size must be positive")
        if e.anchor_size > w.train_size:
            raise ConfigError(
                f"epa.anchor_size {e.anchor_size} exceeds world.train_size "
                f"{w.train_size}")
        if self.eki.gdv_variant not in GDV_VARIANTS:
            raise ConfigError(f"unknown eki.gdv_variant {self.eki.gdv_variant!r}")
        if self.dsr.head_init not in HEAD_INIT_MODES:
            raise ConfigError(f"unknown dsr.head_init {self.dsr.head_init!r}")
        self.eki.hyper()
        self.dsr.hyper()
        if any(k < 1 for k in self.eval.ks) or any(k < 1 for k in self.eval.subset_ks):
            raise ConfigError("eval ks must be positive")
        if max(self.eval.ks) > self.world.val_size:
            raise ConfigError("eval.ks exceed the validation gallery size")
        if max(self.eval.subset_ks) > self.eval.distractors + 1:
            raise ConfigError("eval.subset_ks exceed distractors + 1")
        if self.eval.distractors + 1 > self.world.val_size:
            raise ConfigError("eval.distractors exceed the validation gallery")
        return self


_SECTION_TYPES = {"world": WorldConfig, "noise": NoiseConfig, "epa": EpaConfig,
                  "eki": EkiConfig, "dsr": DsrConfig, "eval": EvalConfig}


def _coerce(value, target, key):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(target, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected an array, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported config type")


def _apply_section(section_obj, data, section_name):
    valid = {f.name for f in fields(section_obj)}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        current = getattr(section_obj, key)
        setattr(section_obj, key, _coerce(value, current, f"{section_name}.{key}"))


def _parse_override_value(raw, target, key):
    if isinstance(target, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(target, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    if isinstance(target, list):
        items = [p.strip() for p in raw.split(",") if p.strip()]
        try:
            return [int(p) for p in items]
        except ValueError:
            try:
                return [float(p) for p in items]
            except ValueError as exc:
                raise ConfigError(f"{key}: expected a numeric list") from exc
    return raw


def apply_override(cfg: RunConfig, key: str, raw_value: str):
    """Set one dotted key (e.g. ``eki.dropout=0.2``) from its string form."""
    parts = key.split(".")
    if len(parts) == 1:
        if key == "seed":
            cfg.seed = int(raw_value)
            return
        if key == "out":
            cfg.out = raw_value
            return
        raise ConfigError(f"unknown config key {key}")
    if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
        raise ConfigError(f"unknown config key {key}")
    section = getattr(cfg, parts[0])
    valid = {f.name for f in fields(section)}
    if parts[1] not in valid:
        raise ConfigError(f"unknown config key {key}")
    current = getattr(section, parts[1])
    setattr(section, parts[1], _parse_override_value(raw_value, current, key))


def load_config(path, overrides=None) -> RunConfig:
    """Parse a TOML run file, apply overrides, validate.

    Unknown keys are errors; values must match the field's type.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    cfg = RunConfig()
    for key, value in data.items():
        if key == "seed":
            cfg.seed = _coerce(value, cfg.seed, "seed")
        elif key == "out":
            cfg.out = _coerce(value, cfg.out, "out")
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section [{key}] must be a table")
            _apply_section(getattr(cfg, key), value, key)
        else:
            raise ConfigError(f"unknown config key {key}")
    for okey, ovalue in (overrides or {}).items():
        apply_override(cfg, okey, ovalue)
    return cfg.validate()


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def to_toml(cfg: RunConfig) -> str:
    """Deterministic TOML text that reloads to an identical configuration."""
    lines = [f"seed = {cfg.seed}", f"out = {_toml_value(cfg.out)}", ""]
    for section_name in ("world", "noise", "epa", "eki", "dsr", "eval"):
        section = getattr(cfg, section_name)
        lines.append(f"[{section_name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(to_toml(cfg))
