"""Versioned text checkpoints with bit-exact float64 round-trips.

Values are written as decimal text with 17 significant digits, which is
enough to reproduce any finite double exactly; the format is diffable and
endian-free, and desk-scale tensors keep it small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserParams, OptimizerState
from .schedule import MASK_ONLY, NoiseSchedule, linear_alpha

HEADER = "SCDD-CKPT v1"


class CheckpointError(ValueError):
    """Raised for malformed or version-mismatched checkpoint files."""


@dataclass
class Checkpoint:
    """Schedule spec, step count, and all named tensors of a training run."""

    schedule: NoiseSchedule
    T: int
    step_count: int
    params: DenoiserParams
    ema: DenoiserParams
    m1: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]

    @staticmethod
    def from_training(schedule: NoiseSchedule, T: int, params: DenoiserParams,
                      state: OptimizerState) -> "Checkpoint":
        return Checkpoint(schedule=schedule, T=T, step_count=state.step_count,
                          params=params, ema=state.ema, m1=state.m1,
                          m2=state.m2)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, group in (("params", self.params.tensors()),
                              ("ema", self.ema.tensors()),
                              ("m1", self.m1), ("m2", self.m2)):
            for name, tensor in group.items():
                out[f"{prefix}.{name}"] = tensor
        return out


def _format_value(v: float) -> str:
    return format(float(v), ".17g")


def save(ckpt: Checkpoint, path) -> None:
    sched = ckpt.schedule
    if sched.kind == MASK_ONLY and sched.mask_alpha is not linear_alpha:
        raise ValueError("only the default linear masking survival is "
                         "serializable")
    lines = [HEADER,
             f"kind {sched.kind}",
             f"p_u {_format_value(sched.p_u)}",
             f"t_peak {_format_value(sched.t_peak)}",
             f"shape {_format_value(sched.shape)}",
             f"T {ckpt.T}",
             f"step_count {ckpt.step_count}"]
    for name, tensor in ckpt.named_tensors().items():
        dims = " ".join(str(n) for n in tensor.shape)
        lines.append(f"tensor {name} {dims}")
        flat = tensor.reshape(-1) if tensor.ndim > 1 else tensor
        if tensor.ndim == 2:
            for row in tensor:
                lines.append(" ".join(_format_value(v) for v in row))
        else:
            lines.append(" ".join(_format_value(v) for v in flat))
    lines.append("end")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path) -> Checkpoint:
    with open(path, "r", encoding="ascii") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"unsupported checkpoint header "
                              f"{lines[0]!r}" if lines else "empty checkpoint")
    fields: dict[str, str] = {}
    pos = 1
    while pos < len(lines) and not lines[pos].startswith("tensor "):
        if lines[pos] == "end":
            break
        key, _, value = lines[pos].partition(" ")
        fields[key] = value
        pos += 1
    try:
        schedule = NoiseSchedule(kind=fields["kind"],
                                 p_u=float(fields["p_u"]),
                                 t_peak=float(fields["t_peak"]),
                                 shape=float(fields["shape"]))
        T = int(fields["T"])
        step_count = int(fields["step_count"])
    except KeyError as exc:
        raise CheckpointError(f"missing checkpoint field {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while pos < len(lines) and lines[pos] != "end":
        head = lines[pos].split()
        if head[0] != "tensor":
            raise CheckpointError(f"unexpected line {lines[pos]!r}")
        name = head[1]
        shape = tuple(int(n) for n in head[2:])
        pos += 1
        if len(shape) == 2:
            rows = []
            for _ in range(shape[0]):
                rows.append([float(v) for v in lines[pos].split()])
                pos += 1
            tensors[name] = np.array(rows, dtype=np.float64).reshape(shape)
        else:
            tensors[name] = np.array([float(v) for v in lines[pos].split()],
                                     dtype=np.float64).reshape(shape)
            pos += 1
    if pos >= len(lines) or lines[pos] != "end":
        raise CheckpointError("truncated checkpoint")

    def group(prefix: str) -> dict[str, np.ndarray]:
        names = ("embed", "w1", "b1", "w2", "b2")
        try:
            return {n: tensors[f"{prefix}.{n}"] for n in names}
        except KeyError as exc:
            raise CheckpointError(f"missing tensor {exc}") from exc

    return Checkpoint(schedule=schedule, T=T, step_count=step_count,
                      params=DenoiserParams(**group("params")),
                      ema=DenoiserParams(**group("ema")),
                      m1=group("m1"), m2=group("m2"))
