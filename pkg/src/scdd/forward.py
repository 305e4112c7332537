"""Forward corruption process: marginals, Markov kernel, sampling, rates.

Token convention: real tokens occupy indices 0..K-1 and index K is [mask].
All distributions are length K+1 float64 vectors. [mask] is absorbing under
the forward kernel, which is what later rules out remasking in the backward
direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .schedule import SchedulePoint


@dataclass(frozen=True)
class Vocab:
    """Token alphabet: indices 0..K-1 are real tokens, index K is [mask]."""

    K: int

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("vocabulary needs at least one real token")

    @property
    def mask_id(self) -> int:
        return self.K

    @property
    def size(self) -> int:
        return self.K + 1


class ChannelTag(IntEnum):
    """Which mixture component produced a corrupted token."""

    RETAIN = 0
    UNIFORM = 1
    MASKED = 2


def _ratio(num: float, den: float) -> float:
    """num / den with the degenerate-schedule convention 0 / 0 = 0."""
    return num / den if den > 0.0 else 0.0


def marginal(point: SchedulePoint, x: int, vocab: Vocab) -> np.ndarray:
    """Corruption marginal of a clean token x at the given schedule point.

    Mass gamma*rho stays on x, gamma*(1-rho) spreads uniformly over all K
    real tokens (x included), and 1-gamma lands on [mask].
    """
    if not 0 <= x < vocab.K:
        raise ValueError(f"clean token {x} must be a real (non-mask) token")
    rho, gamma = point.rho, point.gamma
    probs = np.full(vocab.size, gamma * (1.0 - rho) / vocab.K)
    probs[x] += gamma * rho
    probs[vocab.mask_id] = 1.0 - gamma
    return probs


def kernel(point_s: SchedulePoint, point_t: SchedulePoint, z_s: int,
           vocab: Vocab) -> np.ndarray:
    """Forward transition distribution from state z_s at s to time t > s.

    Valid between any two (not necessarily adjacent) points of one monotone
    schedule; ratios with zero denominators use the 0/0 = 0 convention.
    """
    if point_s.t >= point_t.t:
        raise ValueError("kernel requires point_s.t < point_t.t")
    if not 0 <= z_s <= vocab.mask_id:
        raise ValueError(f"token {z_s} out of range")
    probs = np.zeros(vocab.size)
    if z_s == vocab.mask_id:
        probs[vocab.mask_id] = 1.0
        return probs
    rho_ts = _ratio(point_t.rho, point_s.rho)
    gamma_ts = _ratio(point_t.gamma, point_s.gamma)
    probs[:] = (1.0 - rho_ts) * gamma_ts / vocab.K
    probs[z_s] += rho_ts * gamma_ts
    probs[vocab.mask_id] = 1.0 - gamma_ts
    return probs


def sample_forward(x_seq: np.ndarray, point: SchedulePoint,
                   rng: np.random.Generator, vocab: Vocab
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a clean sequence position-wise; also report channel tags.

    The tag records which mixture component fired, so a UNIFORM draw that
    happens to reproduce the clean token is still tagged UNIFORM.
    """
    x_seq = np.asarray(x_seq, dtype=np.int64)
    if x_seq.size == 0:
        raise ValueError("empty sequence")
    if (x_seq < 0).any() or (x_seq >= vocab.K).any():
        raise ValueError("clean data must contain real (non-mask) tokens only")
    retain_p = point.gamma * point.rho
    uniform_p = point.gamma * (1.0 - point.rho)
    u = rng.random(x_seq.shape)
    uniform_draw = rng.integers(0, vocab.K, size=x_seq.shape)
    z = np.where(u < retain_p, x_seq,
                 np.where(u < retain_p + uniform_p, uniform_draw,
                          vocab.mask_id))
    tags = np.where(u < retain_p, int(ChannelTag.RETAIN),
                    np.where(u < retain_p + uniform_p,
                             int(ChannelTag.UNIFORM), int(ChannelTag.MASKED)))
    return z.astype(np.int64), tags.astype(np.int64)


def forward_rate(point: SchedulePoint, z_s: int, vocab: Vocab) -> np.ndarray:
    """Instantaneous forward generator row for state z_s at an interior time.

    Off-diagonal mass flows to each other real token at -(rho'/rho)/K and to
    [mask] at -gamma'/gamma; the diagonal balances the row to zero. The mask
    state is absorbing, so its row is identically zero.
    """
    if not 0.0 < point.t < 1.0:
        raise ValueError("forward rate is defined for interior times only")
    rho_prime, gamma_prime = point.require_derivatives()
    row = np.zeros(vocab.size)
    if z_s == vocab.mask_id:
        return row
    rr = rho_prime / point.rho
    gr = gamma_prime / point.gamma
    row[:vocab.K] = -rr / vocab.K
    row[vocab.mask_id] = -gr
    row[z_s] = (gr + rr) - rr / vocab.K
    return row
