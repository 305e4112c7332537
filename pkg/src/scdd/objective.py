"""Variational training objective: discrete and continuous diffusion losses.

The discrete loss is the per-draw cross-entropy integrand of the T-step
bound, with additive terms that do not depend on the predictor dropped. The
continuous loss is its large-T limit, implemented for verification. The
smoothing ``rho_s * p + (1 - rho_s) / K`` keeps every logarithm finite as
long as ``rho_s < 1``; the only divergent configuration (an exactly-zero
smoothed probability with positive weight) returns an infinite sentinel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backward import BackwardStep, model_backward, validate_predictor
from .forward import Vocab, sample_forward
from .schedule import SchedulePoint, TimeGrid

logger = logging.getLogger(__name__)

_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LossBreakdown:
    """Variational bound split into its three components, in nats."""

    reconstruction: float
    prior: float
    diffusion: float
    total: float

    @staticmethod
    def build(reconstruction: float, diffusion: float) -> "LossBreakdown":
        # The prior term is identically zero: the corruption endpoint and the
        # generative prior are both the all-mask point mass.
        return LossBreakdown(reconstruction=reconstruction, prior=0.0,
                             diffusion=diffusion,
                             total=reconstruction + diffusion)


def _safe_log(q: float) -> float:
    return float(np.log(max(q, _LOG_FLOOR)))


def diffusion_term_discrete(point_s: SchedulePoint, point_t: SchedulePoint,
                            z_t: int, x: int, predictor: np.ndarray,
                            T: int, vocab: Vocab) -> float:
    """Single-draw discrete diffusion loss term, including the factor T.

    Averaging this over a uniform grid-time draw and the corruption draw of
    z_t gives the diffusion component of the T-step bound (up to dropped
    predictor-independent constants).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 <= x < vocab.K:
        raise ValueError("clean token must be a real (non-mask) token")
    if point_s.t >= point_t.t:
        raise ValueError("requires point_s.t < point_t.t")
    predictor = validate_predictor(predictor, vocab)
    K = vocab.K
    rho_s, rho_t = point_s.rho, point_t.rho
    gamma_s, gamma_t = point_s.gamma, point_t.gamma
    smoothed = rho_s * predictor[:K] + (1.0 - rho_s) / K

    if z_t == vocab.mask_id:
        weight = (gamma_s - gamma_t) / (1.0 - gamma_t)
        target = np.full(K, (1.0 - rho_s) / K)
        target[x] += rho_s
        total = 0.0
        for v in range(K):
            coef = weight * target[v]
            if coef == 0.0:
                continue
            if smoothed[v] == 0.0:
                logger.warning(
                    "diffusion term diverged: predictor gives token %d zero "
                    "smoothed probability under a positive posterior weight", v)
                return float("inf")
            total += coef * _safe_log(smoothed[v])
        return -T * total

    if rho_s == 0.0:
        # Degenerate tail where the posterior and the model kernel are both
        # the uniform distribution; nothing depends on the predictor.
        return 0.0
    denom_x = rho_t * (1.0 if z_t == x else 0.0) + (1.0 - rho_t) / K
    if denom_x <= 0.0:
        raise ValueError("z_t has zero forward probability given x")
    rho_ts = rho_t / rho_s
    target = np.full(K, (1.0 - rho_s) / K)
    target[x] += rho_s
    trans = np.full(K, (1.0 - rho_ts) / K)
    trans[z_t] += rho_ts
    posterior = target * trans / denom_x
    current = rho_t * predictor[z_t] + (1.0 - rho_t) / K
    if current == 0.0:
        logger.warning("diffusion term diverged: predictor gives the current "
                       "state zero smoothed probability")
        return float("inf")
    total = 0.0
    for v in range(K):
        if posterior[v] == 0.0:
            continue
        if smoothed[v] == 0.0:
            logger.warning(
                "diffusion term diverged: predictor gives token %d zero "
                "smoothed probability under a positive posterior weight", v)
            return float("inf")
        total += posterior[v] * _safe_log(smoothed[v])
    return -T * (total - _safe_log(current))


def diffusion_term_continuous(point: SchedulePoint, z_t: int, x: int,
                              predictor: np.ndarray, vocab: Vocab) -> float:
    """Large-T limit of the diffusion loss at one draw, in nats per unit time."""
    if not 0.0 < point.t < 1.0:
        raise ValueError("continuous loss is defined for interior times only")
    if not 0 <= x < vocab.K:
        raise ValueError("clean token must be a real (non-mask) token")
    rho_prime, gamma_prime = point.require_derivatives()
    predictor = validate_predictor(predictor, vocab)
    K = vocab.K
    rho, gamma = point.rho, point.gamma
    smoothed = rho * predictor[:K] + (1.0 - rho) / K
    target = np.full(K, (1.0 - rho) / K)
    target[x] += rho

    if z_t == vocab.mask_id:
        scale = gamma_prime / (1.0 - gamma)
        total = 0.0
        for v in range(K):
            coef = scale * target[v]
            if coef == 0.0:
                continue
            if smoothed[v] == 0.0:
                logger.warning("continuous loss diverged at token %d", v)
                return float("inf")
            total += coef * _safe_log(smoothed[v])
        return total

    current = smoothed[z_t]
    if current == 0.0:
        logger.warning("continuous loss diverged: zero mass on current state")
        return float("inf")
    log_current = _safe_log(current)
    total = 0.0
    for v in range(K):
        if v == z_t:
            continue
        coef = target[v] * (rho_prime / rho) / K / target[z_t]
        if coef == 0.0:
            continue
        if smoothed[v] == 0.0:
            logger.warning("continuous loss diverged at token %d", v)
            return float("inf")
        total += coef * (_safe_log(smoothed[v]) - log_current)
    total -= rho_prime * (1.0 / K - predictor[z_t]) / current
    return total


def reconstruction_term(grid: TimeGrid, z_0: int, x: int,
                        predictor: np.ndarray, vocab: Vocab) -> float:
    """Negative log-probability of recovering x from the first latent."""
    step = BackwardStep(point_s=grid.point(-1), point_t=grid.point(0),
                        z_t=int(z_0), predictor=predictor)
    probs = model_backward(step, vocab)
    if probs[x] == 0.0:
        return float("inf")
    return -_safe_log(probs[x])


def sequence_nelbo(denoiser, grid: TimeGrid, x_seq: np.ndarray,
                   num_mc: int, rng: np.random.Generator) -> LossBreakdown:
    """Monte-Carlo estimate of the sequence-level variational bound.

    Each pass draws one grid time uniformly from {t_1..t_T} for the whole
    sequence, corrupts every position independently, runs the denoiser once,
    and sums per-position diffusion terms. The reconstruction component is
    estimated at t_0 the same way. Values are summed over positions and
    averaged over passes.
    """
    if num_mc < 1:
        raise ValueError("num_mc must be >= 1")
    x_seq = np.asarray(x_seq, dtype=np.int64)
    if x_seq.size == 0:
        raise ValueError("empty sequence")
    vocab = denoiser.vocab
    diff_total = 0.0
    rec_total = 0.0
    for _ in range(num_mc):
        i = int(rng.integers(1, grid.T + 1))
        point_s, point_t = grid.point(i - 1), grid.point(i)
        z_seq, _ = sample_forward(x_seq, point_t, rng, vocab)
        preds = denoiser.predict(z_seq, point_t.t)
        for l, (z, x) in enumerate(zip(z_seq, x_seq)):
            diff_total += diffusion_term_discrete(
                point_s, point_t, int(z), int(x), preds[l], grid.T, vocab)
        z0_seq, _ = sample_forward(x_seq, grid.point(0), rng, vocab)
        preds0 = denoiser.predict(z0_seq, grid.point(0).t)
        for l, (z0, x) in enumerate(zip(z0_seq, x_seq)):
            rec_total += reconstruction_term(grid, int(z0), int(x),
                                             preds0[l], vocab)
    return LossBreakdown.build(rec_total / num_mc, diff_total / num_mc)


def validation_perplexity(denoiser, grid: TimeGrid, corpus, num_mc: int,
                          rng: np.random.Generator) -> float:
    """exp(mean per-token bound) over a corpus of clean sequences."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    total_nats = 0.0
    total_tokens = 0
    for x_seq in corpus:
        breakdown = sequence_nelbo(denoiser, grid, x_seq, num_mc, rng)
        total_nats += breakdown.total
        total_tokens += len(x_seq)
    return float(np.exp(total_nats / total_tokens))
