"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataio import SynthConfig
from .losses import LossConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathConfig:
    data_dir: str = ""
    out_dir: str = ""
    n_train: int = 200
    n_val: int = 50


# keys owned by each section; TrainConfig.seed is set per run from --seeds
SECTIONS = {
    "synth": (SynthConfig, {f.name for f in fields(SynthConfig)}),
    "loss": (LossConfig, {f.name for f in fields(LossConfig)}),
    "train": (TrainConfig, {f.name for f in fields(TrainConfig)} - {"loss", "seed", "deal", "isl", "fsl", "widths"}),
    "paths": (PathConfig, {f.name for f in fields(PathConfig)}),
}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, loss=self.loss)

    def to_text(self) -> str:
        lines = []
        for section, (_, keys) in SECTIONS.items():
            obj = getattr(self, section)
            lines.append(f"# {section}")
            lines += [f"{k} = {_render(getattr(obj, k))}" for k in sorted(keys)]
        return "\n".join(lines) + "\n"


def _render(v) -> str:
    return "" if v is None else str(v)


def _field_type(cls, name: str) -> str:
    for f in fields(cls):
        if f.name == name:
            return str(f.type)
    raise KeyError(name)


def _coerce(raw: str, type_name: str, key: str):
    t = type_name.replace(" ", "")
    try:
        if raw == "" and "None" in t:
            return None
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def build_config(values: dict[str, str | int | float | None], base: RunConfig | None = None) -> RunConfig:
    """Apply flat overrides to ``base``; unknown keys raise :class:`ConfigError`."""
    base = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        for section, (cls, keys) in SECTIONS.items():
            if key in keys:
                value = raw if not isinstance(raw, str) else _coerce(raw, _field_type(cls, key), key)
                updates[section][key] = value
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        loss = replace(base.loss, **updates["loss"])
        if "sigma" in updates["loss"] and "fsl_radius" not in updates["loss"]:
            loss = replace(loss, fsl_radius=None)
        return RunConfig(
            synth=replace(base.synth, **updates["synth"]),
            loss=loss,
            train=replace(base.train, **updates["train"], loss=loss),
            paths=replace(base.paths, **updates["paths"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        values.update(parse_config_text(text, str(p)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)
