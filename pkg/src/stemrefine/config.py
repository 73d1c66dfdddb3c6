"""Declarative run configuration: one INI file with a section per module.

Every field has a default; unknown sections or keys are rejected so typos
fail loudly before any work starts. `stemrefine print-config` emits the
defaults in the accepted format.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .classifier import ClassifierConfig
from .errors import DataError
from .separator import SeparatorConfig


@dataclass
class CorpusConfig:
    songs: int = 20
    test_songs: int = 8
    duration_s: float = 10.0


@dataclass
class CorruptionConfig:
    swap_rate: float = 0.2
    bleed_rate: float = 0.1


@dataclass
class EvalConfig:
    n_mixtures: int = 500
    sdr_frame_s: float = 1.0


@dataclass
class PipelineStages:
    iters: int = 2
    conditions: tuple[str, ...] = ("clean", "noisy", "x1", "x2")


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/out"
    jobs: int = 1
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pipeline: PipelineStages = field(default_factory=PipelineStages)

    def to_json(self) -> dict:
        out = {"seed": self.seed, "out_dir": self.out_dir, "jobs": self.jobs}
        for name in _SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: _to_text(getattr(section, f.name)) for f in fields(section)}
        return out


_SECTIONS = ("corpus", "corruption", "classifier", "separator", "eval", "pipeline")


def _to_text(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _from_text(name: str, raw: str, default):
    raw = raw.strip()
    if name == "segment_s" and raw == "auto":
        return None
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise DataError(f"{name}: expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    if isinstance(default, tuple):
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(v) for v in items)
        return tuple(items)
    return raw


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {
        "seed": str(cfg.seed),
        "out_dir": cfg.out_dir,
        "jobs": str(cfg.jobs),
    }
    for name in _SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _to_text(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise DataError(f"bad config file: {exc}") from exc
    cfg = RunConfig()
    for section_name in parser.sections():
        if section_name == "run":
            for key, raw in parser["run"].items():
                if key not in ("seed", "out_dir", "jobs"):
                    raise DataError(f"unknown key [run] {key}")
                setattr(cfg, key, _from_text(key, raw, getattr(cfg, key)))
            continue
        if section_name not in _SECTIONS:
            raise DataError(f"unknown config section [{section_name}]")
        section = getattr(cfg, section_name)
        known = {f.name for f in fields(section)}
        for key, raw in parser[section_name].items():
            if key not in known:
                raise DataError(f"unknown key [{section_name}] {key}")
            try:
                setattr(section, key, _from_text(key, raw, getattr(section, key)))
            except ValueError as exc:
                raise DataError(f"bad value for [{section_name}] {key}: {exc}") from exc
    try:  # re-run dataclass validation after raw field assignment
        cfg.classifier.__post_init__()
        cfg.separator.__post_init__()
    except ValueError as exc:
        raise DataError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return from_ini(fh.read())
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
