"""Run configuration: line-oriented ``key = value`` files with # comments."""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields
from typing import Optional

import numpy as np

from .forward import Vocab
from .oracle import MarkovSource, favored_next_source, uniform_source
from .schedule import NoiseSchedule


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or inconsistent settings."""


def _parse_steps_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.lower() == "none" else float(text)


@dataclass
class RunConfig:
    """Schedule, model, training, sampling and data-source settings."""

    # schedule
    kind: str = "gidd_aligned"
    p_u: float = 0.2
    t_peak: float = 0.5
    shape: float = 1.0
    T: int = 1000
    # model dims
    K: int = 16
    L: int = 8
    d: int = 32
    h: int = 64
    # training
    steps: int = 20000
    batch: int = 64
    lr: float = 3e-3
    warmup: int = 200
    seed: int = 0
    mc_passes: int = 4
    log_every: int = 500
    # sampling
    sample_steps: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    nucleus_p: Optional[float] = None
    sample_count: int = 16
    # source
    source_kind: str = "favored_next"
    source_strength: float = 2.0
    source_path: str = ""
    # evaluation / ablation
    eval_count: int = 128
    ablate_steps: int = 1500
    ablate_traces: int = 128

    def validate(self) -> None:
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(f"bad schedule: {exc}") from exc
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.K < 2 or self.L < 1 or self.d < 1 or self.h < 1:
            raise ConfigError("bad model dimensions")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.warmup < 0:
            raise ConfigError("bad training settings")
        if self.mc_passes < 1:
            raise ConfigError("mc_passes must be >= 1")
        if not self.sample_steps or any(n < 1 for n in self.sample_steps):
            raise ConfigError("sample_steps must be positive integers")
        if self.nucleus_p is not None and not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError("nucleus_p must lie in (0, 1]")
        if self.sample_count < 1 or self.eval_count < 1:
            raise ConfigError("sample_count and eval_count must be >= 1")
        if self.source_kind not in ("uniform", "favored_next", "file"):
            raise ConfigError(f"unknown source_kind {self.source_kind!r}")
        if self.source_kind == "file" and not self.source_path:
            raise ConfigError("source_kind = file requires source_path")
        if self.ablate_steps < 1 or self.ablate_traces < 1:
            raise ConfigError("bad ablation settings")

    def schedule(self, **overrides) -> NoiseSchedule:
        spec = dict(kind=self.kind, p_u=self.p_u, t_peak=self.t_peak,
                    shape=self.shape)
        spec.update(overrides)
        if spec["kind"] == "mask_only":
            return NoiseSchedule(kind="mask_only")
        if spec["kind"] == "gidd_aligned":
            spec["t_peak"] = 0.5
        return NoiseSchedule(**spec)

    def vocab(self) -> Vocab:
        return Vocab(self.K)

    def source(self) -> MarkovSource:
        if self.source_kind == "uniform":
            return uniform_source(self.K)
        if self.source_kind == "favored_next":
            return favored_next_source(self.K, self.source_strength)
        return load_source(self.source_path, self.K)


def load_source(path: str, K: int) -> MarkovSource:
    """Read a chain spec: one init row then K transition rows, whitespace split."""
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.split()])
    if len(rows) != K + 1:
        raise ConfigError(f"source file must hold 1 + K rows, got {len(rows)}")
    return MarkovSource(K=K, init=np.array(rows[0]), trans=np.array(rows[1:]))


_PARSERS = {
    "kind": str,
    "p_u": float,
    "t_peak": float,
    "shape": float,
    "T": int,
    "K": int,
    "L": int,
    "d": int,
    "h": int,
    "steps": int,
    "batch": int,
    "lr": float,
    "warmup": int,
    "seed": int,
    "mc_passes": int,
    "log_every": int,
    "sample_steps": _parse_steps_list,
    "nucleus_p": _parse_optional_float,
    "sample_count": int,
    "source_kind": str,
    "source_strength": float,
    "source_path": str,
    "eval_count": int,
    "ablate_steps": int,
    "ablate_traces": int,
}

assert set(_PARSERS) == {f.name for f in dataclass_fields(RunConfig)}


def parse_config(path) -> RunConfig:
    """Parse and validate a config file; unknown keys are rejected."""
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _PARSERS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                setattr(cfg, key, _PARSERS[key](value))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for "
                                  f"{key!r}: {exc}") from exc
    cfg.validate()
    return cfg
