"""Run configuration: an INI file with one section per component.

Unknown sections and keys are rejected. ``write_config`` emits the fully
resolved configuration, which reproduces the run when fed back in.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SyntheticCorpusSpec
from .dsp import MelConfig
from .errors import UserError
from .models import EncoderConfig
from .trainer import MctSchedule

_CONV = re.compile(r"^\s*(\d+)x(\d+)s(\d+)\s*$")

DEFAULT_TEACHER = EncoderConfig(conv_layers=((3, 64, 2), (3, 64, 2)), ff_layers=(128,), latent_dim=32)
DEFAULT_STUDENT = EncoderConfig(conv_layers=((3, 32, 2), (3, 32, 2)), ff_layers=(64,), latent_dim=32)


@dataclass
class TeacherTraining:
    epochs: int = 40
    lr: float = 1e-3
    patience: int = 8
    batch_size: int = 32
    seed: int = 0


@dataclass
class Ablation:
    seeds: tuple[int, ...] = (0, 1, 2)
    bits: tuple[int, ...] = (16, 4)


@dataclass
class Paths:
    corpus: str = ""
    teacher: str = ""
    student_checkpoint: str = ""
    run_dir: str = ""


@dataclass
class RunConfig:
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    mel: MelConfig = field(default_factory=MelConfig)
    teacher: EncoderConfig = DEFAULT_TEACHER
    student: EncoderConfig = DEFAULT_STUDENT
    teacher_training: TeacherTraining = field(default_factory=TeacherTraining)
    schedule: MctSchedule = field(default_factory=MctSchedule)
    ablation: Ablation = field(default_factory=Ablation)
    paths: Paths = field(default_factory=Paths)
    energy: dict[int, float] = field(default_factory=dict)

    def replace(self, section: str, **changes) -> "RunConfig":
        current = getattr(self, section)
        try:
            updated = dataclasses.replace(current, **changes)
        except (TypeError, ValueError) as exc:
            raise UserError(f"[{section}] {exc}") from None
        return dataclasses.replace(self, **{section: updated})


SECTIONS = ("corpus", "mel", "teacher", "student", "teacher_training", "schedule", "ablation", "paths", "energy")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ", ".join(f"{k}x{c}s{s}" for k, c, s in value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _parse(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "conv_layers":
            specs = []
            for part in filter(None, (p.strip() for p in raw.split(","))):
                m = _CONV.match(part)
                if not m:
                    raise ValueError(f"expected KxCsS like 3x32s2, got {part!r}")
                specs.append(tuple(int(g) for g in m.groups()))
            return tuple(specs)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            if raw == "" and default is None:
                return None
            return float(raw)
        return raw
    except ValueError as exc:
        raise UserError(f"[{section}] {key}: {exc}") from None


def apply_setting(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    if section not in SECTIONS:
        raise UserError(f"unknown config section [{section}]")
    if section == "energy":
        try:
            return dataclasses.replace(cfg, energy={**cfg.energy, int(key): float(raw)})
        except ValueError:
            raise UserError(f"[energy] entries map an integer bit length to energy per MAC, got {key} = {raw}") from None
    current = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(current)}
    if key not in names:
        raise UserError(f"unknown key {key!r} in section [{section}] (valid keys: {', '.join(sorted(names))})")
    value = _parse(section, key, raw, getattr(current, key))
    return cfg.replace(section, **{key: value})


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        p = Path(path)
        if not p.is_file():
            raise UserError(f"config file not found: {p}")
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise UserError(f"{p}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg = apply_setting(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UserError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        cfg = apply_setting(cfg, section.strip(), key.strip(), raw)
    return cfg


def config_text(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        if section == "energy":
            lines += [f"{k} = {v!r}" for k, v in sorted(cfg.energy.items())]
        else:
            obj = getattr(cfg, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_text(cfg), encoding="utf-8")
