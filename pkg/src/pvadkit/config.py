"""Run configuration: defaults, TOML files, and flag overrides.

One section per pipeline stage. Every key has a default; unknown keys
are rejected so typos fail loudly instead of silently running with
defaults. Flags always win over the file.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import ConfigError, FormatError
from .apc import ApcConfig
from .data import MtrConfig, TEST_NOISE_TYPES, TRAIN_NOISE_TYPES
from .features import FeatureConfig
from .pipeline import PIPELINE_FEATURES
from .pvad import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class EvalSettings:
    """Report-side conventions: which test noises count as seen, and the
    cutoff for the low-SNR summary column."""
    seen_noise_types: tuple = tuple(t for t in TEST_NOISE_TYPES
                                    if t in TRAIN_NOISE_TYPES)
    low_snr_max_db: float = 5.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    # features default to the normalized pipeline scaling; raw log-mel
    # output needs an explicit norm_shift = 0, norm_scale = 1
    feature: FeatureConfig = PIPELINE_FEATURES
    apc: ApcConfig = ApcConfig()
    train: TrainConfig = TrainConfig()
    mtr: MtrConfig = MtrConfig()
    eval: EvalSettings = EvalSettings()


_SECTIONS = {"feature": "feature", "apc": "apc", "train": "train",
             "mtr": "mtr", "eval": "eval"}


def _replace_checked(obj, table: dict, where: str):
    allowed = {f.name: f for f in fields(obj)}
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{where}]")
    coerced = {}
    for key, value in table.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return dataclasses.replace(obj, **coerced)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{where}]: {exc}") from exc


def load_config(path=None, base: RunConfig = RunConfig()) -> RunConfig:
    """RunConfig from a TOML file layered over the defaults."""
    if path is None:
        return base
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: bad TOML: {exc}") from exc

    top_unknown = sorted(set(doc) - set(_SECTIONS) - {"seed", "threads"})
    if top_unknown:
        raise ConfigError(f"unknown top-level key(s) {top_unknown} in {path}")

    cfg = base
    if "seed" in doc:
        cfg = dataclasses.replace(cfg, seed=int(doc["seed"]))
    if "threads" in doc:
        cfg = dataclasses.replace(cfg, threads=int(doc["threads"]))
    for section, attr in _SECTIONS.items():
        if section in doc:
            table = doc[section]
            if not isinstance(table, dict):
                raise ConfigError(f"[{section}] must be a table in {path}")
            cfg = dataclasses.replace(
                cfg, **{attr: _replace_checked(getattr(cfg, attr),
                                               table, section)})
    if cfg.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg.threads}")
    return cfg


def override(cfg: RunConfig, **top_level) -> RunConfig:
    """Apply flag-level overrides (None values are ignored)."""
    updates = {k: v for k, v in top_level.items() if v is not None}
    return dataclasses.replace(cfg, **updates) if updates else cfg


def override_section(cfg: RunConfig, section: str, **kwargs) -> RunConfig:
    updates = {k: v for k, v in kwargs.items() if v is not None}
    if not updates:
        return cfg
    sub = dataclasses.replace(getattr(cfg, section), **updates)
    return dataclasses.replace(cfg, **{section: sub})


def config_json(cfg: RunConfig, extra: dict | None = None) -> str:
    """Deterministic JSON snapshot written next to every run's outputs."""
    doc = dataclasses.asdict(cfg)
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1, default=list) + "\n"


def write_run_json(out_path, cfg: RunConfig, extra: dict | None = None) -> None:
    """run config lands at <dir>/run.json or <file>.run.json."""
    out = Path(out_path)
    target = out / "run.json" if out.is_dir() else out.with_suffix(
        out.suffix + ".run.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(config_json(cfg, extra))
