"""Dual-SNR noise schedules for the masked + uniform corruption process.

A schedule tracks two survival probabilities over diffusion time t in [0, 1]:

* ``gamma``: probability that a token has not yet been absorbed into [mask];
* ``rho``:   probability that a still-unmasked token carries its clean value
  rather than a uniform resample.

Both start at 1, decrease monotonically, and vanish at t = 1. The product
``gamma * (1 - rho)`` is the marginal mass of the uniform-noise channel; the
peaked schedule families place its maximum value ``p_u`` at a chosen time.

Closed forms for the peaked families, with ``a = shape * t_peak`` and
``b = shape * (1 - t_peak)``::

    c(t)     = B * t**a * (1 - t)**b,   B = p_u / (1 - p_u) / (t_peak**a * (1 - t_peak)**b)
    gamma(t) = (1 + c - t) / (1 + c)
    rho(t)   = (1 - t) / (1 + c - t)

``rho`` at t = 1 is a 0/0 form; its analytic limit is 0 on the supported
parameter range (``shape`` in (0, 2) and ``shape * (1 - t_peak) < 1``), and
that limit is used as the endpoint value. For ``p_u = 0`` the uniform channel
is off and the t = 1 value of ``rho`` is irrelevant (everything is masked);
it is likewise defined as 0 so the boundary convention is uniform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

GIDD_ALIGNED = "gidd_aligned"
PEAK_SHIFTED = "peak_shifted"
MASK_ONLY = "mask_only"

_KINDS = (GIDD_ALIGNED, PEAK_SHIFTED, MASK_ONLY)

_DIFF_STEP = 1e-6
_MONOTONE_SLACK = 1e-12


def linear_alpha(t: float) -> float:
    """Default masking survival for mask-only schedules."""
    return 1.0 - t


@dataclass(frozen=True)
class SchedulePoint:
    """Schedule evaluated at one time: values and derivatives.

    Derivatives are ``None`` on convention points that are never used for
    rate or loss computations (e.g. the pre-grid point at t < 0).
    """

    t: float
    rho: float
    gamma: float
    rho_prime: Optional[float] = None
    gamma_prime: Optional[float] = None

    def require_derivatives(self) -> tuple[float, float]:
        if self.rho_prime is None or self.gamma_prime is None:
            raise ValueError("schedule point carries no derivatives")
        return self.rho_prime, self.gamma_prime


@dataclass(frozen=True)
class NoiseSchedule:
    """Schedule family selector plus its parameters.

    kind:       one of "gidd_aligned", "peak_shifted", "mask_only".
    p_u:        maximum uniform-transition marginal ratio, in [0, 1).
    t_peak:     time of the maximum uniform ratio (0.5 for gidd_aligned).
    shape:      exponent of the bump c(t); supported range (0, 2) with the
                additional peak-shifted constraint shape * (1 - t_peak) < 1.
    mask_alpha: masking survival function for mask_only schedules (must be
                monotone with alpha(0) = 1, alpha(1) = 0); defaults to 1 - t.
    """

    kind: str
    p_u: float = 0.2
    t_peak: float = 0.5
    shape: float = 1.0
    mask_alpha: Optional[Callable[[float], float]] = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == MASK_ONLY:
            alpha = self.mask_alpha if self.mask_alpha is not None else linear_alpha
            object.__setattr__(self, "mask_alpha", alpha)
            _validate_alpha(alpha)
            return
        if not 0.0 <= self.p_u < 1.0:
            raise ValueError(f"p_u must lie in [0, 1), got {self.p_u}")
        if self.kind == GIDD_ALIGNED and self.t_peak != 0.5:
            raise ValueError("gidd_aligned schedules peak at t = 0.5")
        if not 0.0 < self.t_peak < 1.0:
            raise ValueError(f"t_peak must lie in (0, 1), got {self.t_peak}")
        if not 0.0 < self.shape < 2.0:
            raise ValueError(f"shape must lie in (0, 2), got {self.shape}")
        if self.shape * (1.0 - self.t_peak) >= 1.0:
            raise ValueError(
                "shape * (1 - t_peak) must be < 1 so the unmasked survival "
                "stays monotone and vanishes at t = 1"
            )

    @property
    def is_mask_only(self) -> bool:
        return self.kind == MASK_ONLY


def _validate_alpha(alpha: Callable[[float], float]) -> None:
    if abs(alpha(0.0) - 1.0) > 1e-12 or abs(alpha(1.0)) > 1e-12:
        raise ValueError("mask_alpha must satisfy alpha(0) = 1 and alpha(1) = 0")
    prev = 1.0
    for i in range(1, 257):
        v = float(alpha(i / 256.0))
        if not 0.0 <= v <= 1.0 + 1e-12:
            raise ValueError("mask_alpha must map [0, 1] into [0, 1]")
        if v > prev + _MONOTONE_SLACK:
            raise ValueError("mask_alpha must be non-increasing")
        prev = v


def _bump_params(schedule: NoiseSchedule) -> tuple[float, float, float]:
    a = schedule.shape * schedule.t_peak
    b = schedule.shape * (1.0 - schedule.t_peak)
    scale = schedule.t_peak**a * (1.0 - schedule.t_peak) ** b
    B = schedule.p_u / (1.0 - schedule.p_u) / scale
    return B, a, b


def _bump(schedule: NoiseSchedule, t: float) -> float:
    if t <= 0.0 or t >= 1.0:
        return 0.0
    B, a, b = _bump_params(schedule)
    return B * t**a * (1.0 - t) ** b


def _rho_gamma(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    if schedule.is_mask_only:
        return 1.0, float(schedule.mask_alpha(t))
    if t == 0.0:
        return 1.0, 1.0
    if t == 1.0:
        return 0.0, 0.0
    c = _bump(schedule, t)
    gamma = (1.0 + c - t) / (1.0 + c)
    rho = (1.0 - t) / (1.0 + c - t)
    return rho, gamma


def _central_diff(f: Callable[[float], float], t: float) -> float:
    lo = max(0.0, t - _DIFF_STEP)
    hi = min(1.0, t + _DIFF_STEP)
    return (f(hi) - f(lo)) / (hi - lo)


def _derivatives(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    if schedule.is_mask_only:
        gamma_prime = _central_diff(schedule.mask_alpha, t)
        return 0.0, min(gamma_prime, 0.0)
    if t == 0.0 or t == 1.0:
        # Closed forms degenerate at the endpoints; fall back to a clamped
        # one-sided difference so the reported values stay finite.
        rp = _central_diff(lambda u: _rho_gamma(schedule, u)[0], t)
        gp = _central_diff(lambda u: _rho_gamma(schedule, u)[1], t)
        return min(rp, 0.0), min(gp, 0.0)
    B, a, b = _bump_params(schedule)
    c = B * t**a * (1.0 - t) ** b
    c_prime = c * (a / t - b / (1.0 - t))
    gamma_prime = -((1.0 + c) - t * c_prime) / (1.0 + c) ** 2
    rho_prime = -(c + (1.0 - t) * c_prime) / (1.0 + c - t) ** 2
    return min(rho_prime, 0.0), min(gamma_prime, 0.0)


def eval_schedule(schedule: NoiseSchedule, t: float) -> SchedulePoint:
    """Evaluate rho, gamma and their time derivatives at ``t`` in [0, 1].

    Endpoint values are continuity limits; endpoint derivatives use a
    difference quotient clamped inside [0, 1] with step 1e-6.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    rho, gamma = _rho_gamma(schedule, t)
    rho_prime, gamma_prime = _derivatives(schedule, t)
    return SchedulePoint(t=float(t), rho=rho, gamma=gamma,
                         rho_prime=rho_prime, gamma_prime=gamma_prime)


def uniform_mass(schedule: NoiseSchedule, t: float) -> float:
    """Marginal probability gamma * (1 - rho) of the uniform channel at t."""
    rho, gamma = _rho_gamma(schedule, t)
    return gamma * (1.0 - rho)


@dataclass
class TimeGrid:
    """Equal-spaced schedule discretization t_i = i / T for i = 0..T.

    ``points`` additionally holds a leading convention point at index 0
    (addressed as ``point(-1)``) with rho = gamma = 1, standing in for the
    clean data one step before the grid.
    """

    schedule: NoiseSchedule
    T: int
    points: list[SchedulePoint] = field(repr=False)

    def point(self, i: int) -> SchedulePoint:
        """Grid point for i in -1..T; i = -1 is the convention point."""
        if not -1 <= i <= self.T:
            raise IndexError(f"grid index {i} outside -1..{self.T}")
        return self.points[i + 1]

    def pairs(self):
        """Yield adjacent (point(i-1), point(i)) pairs for i = 1..T."""
        for i in range(1, self.T + 1):
            yield self.points[i], self.points[i + 1]

    @cached_property
    def rhos(self) -> np.ndarray:
        """rho at indices -1..T, aligned with ``points``."""
        return np.array([p.rho for p in self.points])

    @cached_property
    def gammas(self) -> np.ndarray:
        """gamma at indices -1..T, aligned with ``points``."""
        return np.array([p.gamma for p in self.points])


def discretize(schedule: NoiseSchedule, T: int) -> TimeGrid:
    """Evaluate the schedule on the equal-spaced T-step grid."""
    if T < 1:
        raise ValueError(f"step count must be >= 1, got {T}")
    convention = SchedulePoint(t=-1.0 / T, rho=1.0, gamma=1.0)
    points = [convention] + [eval_schedule(schedule, i / T) for i in range(T + 1)]
    for earlier, later in zip(points, points[1:]):
        if later.rho > earlier.rho + _MONOTONE_SLACK:
            raise ValueError("rho is not non-increasing on the grid")
        if later.gamma > earlier.gamma + _MONOTONE_SLACK:
            raise ValueError("gamma is not non-increasing on the grid")
    return TimeGrid(schedule=schedule, T=T, points=points)
