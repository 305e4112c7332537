"""Backward denoising process: true posterior, model kernel, backward rate.

The backward kernel never moves an unmasked token back to [mask]; a token is
either unmasked once or rewritten directly into another real token. The
parameterized kernel is the true posterior with the clean one-hot replaced
by a predicted distribution that carries zero mass on [mask].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import Vocab
from .schedule import SchedulePoint

_SIMPLEX_TOL = 1e-9


@dataclass
class BackwardStep:
    """One backward transition request: time pair, current state, predictor."""

    point_s: SchedulePoint
    point_t: SchedulePoint
    z_t: int
    predictor: np.ndarray


def validate_predictor(predictor: np.ndarray, vocab: Vocab) -> np.ndarray:
    """Check the predicted clean-token distribution contract.

    Must be a simplex over the K+1 slots (within 1e-9) with exactly zero
    mass on [mask]. Violations raise rather than being silently repaired.
    """
    predictor = np.asarray(predictor, dtype=np.float64)
    if predictor.shape != (vocab.size,):
        raise ValueError(f"predictor must have shape ({vocab.size},)")
    if (predictor < 0.0).any():
        raise ValueError("predictor has negative entries")
    if abs(predictor.sum() - 1.0) > _SIMPLEX_TOL:
        raise ValueError("predictor does not sum to 1")
    if predictor[vocab.mask_id] != 0.0:
        raise ValueError("predictor must put zero mass on [mask]")
    return predictor


def _posterior_given_clean_dist(point_s: SchedulePoint, point_t: SchedulePoint,
                                z_t: int, clean: np.ndarray,
                                vocab: Vocab) -> np.ndarray:
    """Backward distribution with the clean token replaced by ``clean``.

    ``clean`` is either a one-hot (true posterior) or a predicted simplex.
    """
    if point_s.t >= point_t.t:
        raise ValueError("backward step requires point_s.t < point_t.t")
    if not 0 <= z_t <= vocab.mask_id:
        raise ValueError(f"token {z_t} out of range")
    K = vocab.K
    rho_s, rho_t = point_s.rho, point_t.rho
    gamma_s, gamma_t = point_s.gamma, point_t.gamma
    probs = np.zeros(vocab.size)
    if z_t == vocab.mask_id:
        if gamma_t >= 1.0:
            raise ValueError("conditioning on [mask] at gamma = 1, "
                             "a zero-probability state")
        weight = (gamma_s - gamma_t) / (1.0 - gamma_t)
        probs[:K] = weight * (rho_s * clean[:K] + (1.0 - rho_s) / K)
        probs[vocab.mask_id] = (1.0 - gamma_s) / (1.0 - gamma_t)
        return probs
    if rho_s == 0.0:
        # Degenerate tail: with rho_t/rho_s read as 0 the posterior collapses
        # to the uniform distribution over real tokens.
        probs[:K] = 1.0 / K
        return probs
    denom = rho_t * clean[z_t] + (1.0 - rho_t) / K
    if denom <= 0.0:
        raise ValueError("conditioning on a state the clean-token "
                         "distribution gives zero forward probability")
    rho_ts = rho_t / rho_s
    trans = np.full(K, (1.0 - rho_ts) / K)
    trans[z_t] += rho_ts
    probs[:K] = (rho_s * clean[:K] + (1.0 - rho_s) / K) / denom * trans
    return probs


def true_posterior(point_s: SchedulePoint, point_t: SchedulePoint,
                   z_t: int, x: int, vocab: Vocab) -> np.ndarray:
    """Exact backward posterior of z_s given z_t and the clean token x."""
    if not 0 <= x < vocab.K:
        raise ValueError(f"clean token {x} must be a real (non-mask) token")
    clean = np.zeros(vocab.size)
    clean[x] = 1.0
    return _posterior_given_clean_dist(point_s, point_t, z_t, clean, vocab)


def model_backward(step: BackwardStep, vocab: Vocab) -> np.ndarray:
    """Parameterized backward distribution for one position.

    Equals the true posterior with the clean one-hot swapped for the
    predictor; the result is a valid distribution for any simplex predictor,
    and puts zero mass on [mask] whenever the current state is unmasked.
    """
    predictor = validate_predictor(step.predictor, vocab)
    return _posterior_given_clean_dist(step.point_s, step.point_t,
                                       step.z_t, predictor, vocab)


def backward_rate(point: SchedulePoint, z_t: int, predictor: np.ndarray,
                  vocab: Vocab) -> np.ndarray:
    """Instantaneous backward generator row for state z_t at an interior time.

    Row index is the current (later-time) state; columns are the earlier-time
    states. The [mask] column is zero for every unmasked state.
    """
    if not 0.0 < point.t < 1.0:
        raise ValueError("backward rate is defined for interior times only")
    rho_prime, gamma_prime = point.require_derivatives()
    predictor = validate_predictor(predictor, vocab)
    K = vocab.K
    rho, gamma = point.rho, point.gamma
    row = np.zeros(vocab.size)
    if z_t == vocab.mask_id:
        if gamma >= 1.0:
            raise ValueError("backward rate undefined for [mask] at gamma = 1")
        scale = gamma_prime / (1.0 - gamma)
        row[:K] = -scale * (rho * predictor[:K] + (1.0 - rho) / K)
        row[vocab.mask_id] = scale
        return row
    smoothed = rho * predictor[:K] + (1.0 - rho) / K
    denom = smoothed[z_t]
    if denom <= 0.0:
        raise ValueError("backward rate undefined: model gives the current "
                         "state zero probability")
    rr = rho_prime / rho
    row[:K] = -(rr / K) * smoothed / denom
    row[z_t] = (rr / K) * (1.0 - denom) / denom
    row[vocab.mask_id] = 0.0
    return row
