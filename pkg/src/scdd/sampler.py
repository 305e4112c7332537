"""Ancestral backward sampling with full trace and correction accounting.

Generation starts from an all-mask sequence at t = 1 and walks the grid
backwards, sampling every position in parallel from the model's backward
kernel (one denoiser call per step, shared across positions). Because the
kernel puts zero mass on [mask] for unmasked states, a token is never
remasked; a "correction" is a direct rewrite of one real token into
another. All categorical draws run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardStep, model_backward
from .forward import Vocab
from .schedule import TimeGrid


@dataclass
class SampleTrace:
    """Complete record of one backward trajectory.

    ``steps`` holds (t, snapshot) pairs starting with the all-mask state at
    t = 1; ``corrections`` holds (step, position, from_token, to_token) for
    every real-to-real rewrite, where step counts backward transitions
    starting at 1. ``num_steps`` is the denoising step count of the run.
    """

    L: int
    num_steps: int
    steps: list[tuple[float, np.ndarray]] = field(repr=False)
    corrections: list[tuple[int, int, int, int]]
    unmaskings: int
    final_seq: np.ndarray


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Truncate to the smallest top-probability set with mass >= p, renormalize.

    Applied to predictor rows before the backward kernel is formed; the
    [mask] slot carries zero mass and stays zero.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"nucleus parameter must lie in (0, 1], got {p}")
    flat = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-flat, kind="stable")
    sorted_p = flat[order]
    before = np.cumsum(sorted_p) - sorted_p
    keep_sorted = before < p
    keep = np.zeros_like(flat, dtype=bool)
    keep[order] = keep_sorted
    out = np.where(keep, flat, 0.0)
    total = out.sum()
    if total <= 0.0:
        raise ValueError("nucleus filter removed all mass")
    return out / total


def _nucleus_filter_batch(probs: np.ndarray, p: float) -> np.ndarray:
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    keep_sorted = before < p
    keep = np.zeros_like(probs, dtype=bool)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def _backward_dist_batch(point_s, point_t, z: np.ndarray, preds: np.ndarray,
                         vocab: Vocab) -> np.ndarray:
    """Vectorized backward kernel rows for a (n, L) state block."""
    n, L = z.shape
    K = vocab.K
    rho_s, rho_t = point_s.rho, point_t.rho
    gamma_s, gamma_t = point_s.gamma, point_t.gamma
    masked = z == vocab.mask_id
    z_real = np.where(masked, 0, z)
    z_onehot = np.zeros((n, L, K))
    np.put_along_axis(z_onehot, z_real[..., None], 1.0, axis=-1)

    smoothed = rho_s * preds[..., :K] + (1.0 - rho_s) / K
    dist = np.zeros((n, L, vocab.size))

    weight = (gamma_s - gamma_t) / (1.0 - gamma_t)
    dist_masked = np.zeros_like(dist)
    dist_masked[..., :K] = weight * smoothed
    dist_masked[..., K] = (1.0 - gamma_s) / (1.0 - gamma_t)

    if rho_s > 0.0:
        rho_ts = rho_t / rho_s
        p_z = np.take_along_axis(preds[..., :K], z_real[..., None],
                                 axis=-1)[..., 0]
        denom = np.maximum(rho_t * p_z + (1.0 - rho_t) / K, 1e-300)
        trans = rho_ts * z_onehot + (1.0 - rho_ts) / K
        dist_real = np.zeros_like(dist)
        dist_real[..., :K] = ((rho_s * preds[..., :K] + (1.0 - rho_s) / K)
                              / denom[..., None] * trans)
    else:
        dist_real = np.zeros_like(dist)
        dist_real[..., :K] = 1.0 / K

    dist[:] = np.where(masked[..., None], dist_masked, dist_real)
    return dist


def _categorical_batch(dist: np.ndarray, rng: np.random.Generator
                       ) -> np.ndarray:
    cdf = np.cumsum(dist, axis=-1)
    # normalize away float slack so zero-mass tail slots are unreachable
    cdf /= cdf[..., -1:]
    u = rng.random(dist.shape[:-1])[..., None]
    idx = (cdf < u).sum(axis=-1)
    return np.minimum(idx, dist.shape[-1] - 1).astype(np.int64)


def sample_batch(denoiser, grid: TimeGrid, L: int, n: int,
                 rng: np.random.Generator,
                 nucleus_p: float | None = None) -> list[SampleTrace]:
    """Draw ``n`` independent trajectories with shared batched denoiser calls."""
    if L < 1 or n < 1:
        raise ValueError("L and n must be >= 1")
    if nucleus_p is not None and not 0.0 < nucleus_p <= 1.0:
        raise ValueError(f"nucleus parameter must lie in (0, 1], got {nucleus_p}")
    vocab = denoiser.vocab
    T = grid.T
    z = np.full((n, L), vocab.mask_id, dtype=np.int64)
    snapshots = [(grid.point(T).t, z.copy())]
    corrections: list[list[tuple[int, int, int, int]]] = [[] for _ in range(n)]
    unmaskings = np.zeros(n, dtype=np.int64)

    for i in range(T, 0, -1):
        point_s, point_t = grid.point(i - 1), grid.point(i)
        t_vec = np.full(n, point_t.t)
        preds = denoiser.predict_batch(z, t_vec)
        if nucleus_p is not None:
            preds = _nucleus_filter_batch(preds, nucleus_p)
        dist = _backward_dist_batch(point_s, point_t, z, preds, vocab)
        z_new = _categorical_batch(dist, rng)
        step = T - i + 1
        was_real = z != vocab.mask_id
        if (was_real & (z_new == vocab.mask_id)).any():
            raise AssertionError("remasking event: backward kernel violated")
        changed = was_real & (z_new != z)
        for trace_i, pos in zip(*np.nonzero(changed)):
            corrections[trace_i].append(
                (step, int(pos), int(z[trace_i, pos]), int(z_new[trace_i, pos])))
        unmaskings += ((~was_real) & (z_new != vocab.mask_id)).sum(axis=1)
        z = z_new
        snapshots.append((point_s.t, z.copy()))

    still_masked = z == vocab.mask_id
    if still_masked.any():
        preds = denoiser.predict_batch(z, np.zeros(n))
        if nucleus_p is not None:
            preds = _nucleus_filter_batch(preds, nucleus_p)
        draws = _categorical_batch(preds, rng)
        z = np.where(still_masked, draws, z)
        unmaskings += still_masked.sum(axis=1)
        snapshots.append((0.0, z.copy()))

    traces = []
    for k in range(n):
        traces.append(SampleTrace(
            L=L,
            num_steps=T,
            steps=[(t, snap[k].copy()) for t, snap in snapshots],
            corrections=corrections[k],
            unmaskings=int(unmaskings[k]),
            final_seq=z[k].copy(),
        ))
    return traces


def sample(denoiser, grid: TimeGrid, L: int, rng: np.random.Generator,
           nucleus_p: float | None = None) -> SampleTrace:
    """Draw one trajectory, position by position through the scalar kernel."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if nucleus_p is not None and not 0.0 < nucleus_p <= 1.0:
        raise ValueError(f"nucleus parameter must lie in (0, 1], got {nucleus_p}")
    vocab = denoiser.vocab
    T = grid.T
    z = np.full(L, vocab.mask_id, dtype=np.int64)
    steps = [(grid.point(T).t, z.copy())]
    corrections: list[tuple[int, int, int, int]] = []
    unmaskings = 0

    for i in range(T, 0, -1):
        point_s, point_t = grid.point(i - 1), grid.point(i)
        preds = denoiser.predict(z, point_t.t)
        z_new = z.copy()
        for pos in range(L):
            row = preds[pos]
            if nucleus_p is not None:
                row = nucleus_filter(row, nucleus_p)
            dist = model_backward(
                BackwardStep(point_s, point_t, int(z[pos]), row), vocab)
            z_new[pos] = _categorical_batch(dist[None, :], rng)[0]
        step = T - i + 1
        for pos in range(L):
            old, new = int(z[pos]), int(z_new[pos])
            if old != vocab.mask_id and new == vocab.mask_id:
                raise AssertionError("remasking event: backward kernel violated")
            if old != vocab.mask_id and new != old:
                corrections.append((step, pos, old, new))
            if old == vocab.mask_id and new != vocab.mask_id:
                unmaskings += 1
        z = z_new
        steps.append((point_s.t, z.copy()))

    if (z == vocab.mask_id).any():
        preds = denoiser.predict(z, 0.0)
        for pos in range(L):
            if z[pos] == vocab.mask_id:
                row = preds[pos]
                if nucleus_p is not None:
                    row = nucleus_filter(row, nucleus_p)
                z[pos] = _categorical_batch(row[None, :], rng)[0]
                unmaskings += 1
        steps.append((0.0, z.copy()))

    return SampleTrace(L=L, num_steps=T, steps=steps, corrections=corrections,
                       unmaskings=unmaskings, final_seq=z.copy())


def correction_rate(trace: SampleTrace) -> float:
    """Total corrections divided by sequence length; repeats count each time."""
    return len(trace.corrections) / trace.L


def correction_rate_per_step(trace: SampleTrace, N: int) -> float:
    """Correction rate additionally normalized by the denoising step count."""
    if N != trace.num_steps:
        raise ValueError(f"N = {N} does not match the trace's "
                         f"{trace.num_steps} denoising steps")
    return correction_rate(trace) / N


def cumulative_correction_curve(trace: SampleTrace) -> list[tuple[int, float]]:
    """Fraction of all corrections that occurred up to each step.

    Non-decreasing and ends at 1.0; identically zero when the trace has no
    corrections.
    """
    total = len(trace.corrections)
    curve = []
    done = 0
    by_step: dict[int, int] = {}
    for step, _, _, _ in trace.corrections:
        by_step[step] = by_step.get(step, 0) + 1
    for step in range(1, trace.num_steps + 1):
        done += by_step.get(step, 0)
        frac = done / total if total else 0.0
        curve.append((step, frac))
    return curve


def format_trace(trace: SampleTrace) -> str:
    """Line-oriented trace text: one snapshot per line, then correction
    comments of the form ``# step pos from to``."""
    lines = [" ".join(str(int(v)) for v in snap) for _, snap in trace.steps]
    for step, pos, old, new in trace.corrections:
        lines.append(f"# {step} {pos} {old} {new}")
    return "\n".join(lines) + "\n"


def write_trace(trace: SampleTrace, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_trace(trace))
