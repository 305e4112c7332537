"""Self-certification suite: every closed form against an independent route.

Each check returns a CheckResult whose ``deviation`` must not exceed
``tolerance``; for order-of-convergence checks the deviation is the
shortfall below the required order, so the same pass rule applies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .backward import BackwardStep, backward_rate, model_backward, true_posterior
from .denoiser import Denoiser, DenoiserParams
from .forward import Vocab, forward_rate, kernel, marginal
from .objective import diffusion_term_continuous, diffusion_term_discrete
from .oracle import (backward_chain_matrices, brute_posterior,
                     exact_single_token_nll, exhaustive_single_token_nelbo,
                     gidd_equivalence_check, max_gradient_error,
                     mdlm_equivalence_check, random_table_predictor)
from .sampler import sample_batch
from .schedule import (GIDD_ALIGNED, MASK_ONLY, PEAK_SHIFTED, NoiseSchedule,
                       discretize, eval_schedule)

PROB_TOL = 1e-12
LOSS_TOL = 1e-10
ORDER_REQUIRED = 1.9
CONVERGENCE_ORDER_REQUIRED = 0.8
GRAD_TOL = 1e-4
BOUND_SLACK = 1e-9


@dataclass
class CheckResult:
    name: str
    deviation: float
    tolerance: float
    passed: bool
    note: str = ""


def _result(name: str, deviation: float, tolerance: float,
            note: str = "") -> CheckResult:
    return CheckResult(name=name, deviation=float(deviation),
                       tolerance=float(tolerance),
                       passed=bool(deviation <= tolerance), note=note)


def _random_schedules(rng: np.random.Generator, count: int = 3
                      ) -> list[NoiseSchedule]:
    out = []
    for i in range(count):
        if i % 3 == 2:
            out.append(NoiseSchedule(kind=MASK_ONLY))
            continue
        kind = GIDD_ALIGNED if i % 3 == 0 else PEAK_SHIFTED
        p_u = float(rng.uniform(0.05, 0.5))
        if kind == GIDD_ALIGNED:
            out.append(NoiseSchedule(kind=kind, p_u=p_u,
                                     shape=float(rng.uniform(0.5, 1.5))))
        else:
            t_peak = float(rng.uniform(0.3, 0.8))
            shape = float(rng.uniform(0.5, min(1.8, 0.95 / (1.0 - t_peak))))
            out.append(NoiseSchedule(kind=kind, p_u=p_u, t_peak=t_peak,
                                     shape=shape))
    return out


def _random_pair(schedule: NoiseSchedule, rng: np.random.Generator):
    s = float(rng.uniform(0.0, 0.9))
    t = float(rng.uniform(s + 0.02, 0.98))
    return eval_schedule(schedule, s), eval_schedule(schedule, t)


def _random_predictor(vocab: Vocab, rng: np.random.Generator) -> np.ndarray:
    raw = rng.random(vocab.K) + 1e-3
    pred = np.zeros(vocab.size)
    pred[:vocab.K] = raw / raw.sum()
    return pred


# ---------------------------------------------------------------------------


def check_schedule_monotonicity(schedule: NoiseSchedule,
                                rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for sched in [schedule] + _random_schedules(rng):
        grid = discretize(sched, 1000)
        worst = max(worst, float(np.diff(grid.rhos).max()),
                    float(np.diff(grid.gammas).max()))
    return _result("schedule_monotonicity", max(worst, 0.0), PROB_TOL)


def check_schedule_derivatives(schedule: NoiseSchedule,
                               rng: np.random.Generator) -> CheckResult:
    """Analytic derivatives against central differences at interior times."""
    h = 1e-6
    worst = 0.0
    for sched in [schedule] + _random_schedules(rng):
        for _ in range(100):
            t = float(rng.uniform(0.05, 0.95))
            point = eval_schedule(sched, t)
            lo, hi = eval_schedule(sched, t - h), eval_schedule(sched, t + h)
            for value, fd in ((point.rho_prime, (hi.rho - lo.rho) / (2 * h)),
                              (point.gamma_prime,
                               (hi.gamma - lo.gamma) / (2 * h))):
                denom = max(abs(value), abs(fd), 1e-9)
                worst = max(worst, abs(value - fd) / denom)
    return _result("schedule_derivatives", worst, 1e-6)


def check_peak_uniform_mass(rng: np.random.Generator) -> CheckResult:
    """The uniform-channel marginal mass peaks at p_u at the nominal time."""
    worst = 0.0
    for _ in range(5):
        p_u = float(rng.uniform(0.01, 0.6))
        shape = float(rng.uniform(0.3, 1.9))
        sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=p_u, shape=shape)
        point = eval_schedule(sched, 0.5)
        worst = max(worst, abs(point.gamma * (1.0 - point.rho) - p_u))
    return _result("peak_uniform_mass", worst, PROB_TOL)


def check_marginal_composition(schedule: NoiseSchedule,
                               rng: np.random.Generator) -> CheckResult:
    """Kernel applied to an earlier marginal reproduces the later marginal."""
    vocab = Vocab(6)
    worst = 0.0
    for sched in [schedule] + _random_schedules(rng)[:2]:
        for _ in range(50):
            point_s, point_t = _random_pair(sched, rng)
            for x in range(vocab.K):
                marg_s = marginal(point_s, x, vocab)
                composed = np.zeros(vocab.size)
                for z_s in range(vocab.size):
                    composed += marg_s[z_s] * kernel(point_s, point_t, z_s,
                                                     vocab)
                worst = max(worst, float(np.abs(
                    composed - marginal(point_t, x, vocab)).max()))
    return _result("marginal_composition", worst, PROB_TOL)


def check_kernel_stochasticity(schedule: NoiseSchedule,
                               rng: np.random.Generator) -> CheckResult:
    vocab = Vocab(6)
    worst = 0.0
    for sched in [schedule] + _random_schedules(rng):
        for _ in range(50):
            point_s, point_t = _random_pair(sched, rng)
            for z_s in range(vocab.size):
                probs = kernel(point_s, point_t, z_s, vocab)
                worst = max(worst, abs(probs.sum() - 1.0),
                            float(max(0.0, -probs.min())))
            for x in range(vocab.K):
                probs = marginal(point_t, x, vocab)
                worst = max(worst, abs(probs.sum() - 1.0),
                            float(max(0.0, -probs.min())))
    return _result("kernel_stochasticity", worst, PROB_TOL)


def check_posterior_bayes(schedule: NoiseSchedule,
                          rng: np.random.Generator) -> CheckResult:
    """Closed-form posterior equals enumeration, exhaustively over (z_t, x)."""
    vocab = Vocab(6)
    worst = 0.0
    for sched in [schedule] + _random_schedules(rng)[:1]:
        for _ in range(50):
            point_s, point_t = _random_pair(sched, rng)
            for x in range(vocab.K):
                for z_t in range(vocab.size):
                    if marginal(point_t, x, vocab)[z_t] <= 0.0:
                        continue
                    closed = true_posterior(point_s, point_t, z_t, x, vocab)
                    brute = brute_posterior(point_s, point_t, z_t, x, vocab)
                    worst = max(worst, float(np.abs(closed - brute).max()))
    return _result("posterior_bayes", worst, PROB_TOL)


def check_backward_validity(schedule: NoiseSchedule, rng: np.random.Generator,
                            trials: int = 10000) -> CheckResult:
    """Arbitrary simplex predictors give normalized, never-remasking kernels."""
    vocab = Vocab(6)
    schedules = [schedule] + _random_schedules(rng)
    worst = 0.0
    for k in range(trials):
        sched = schedules[k % len(schedules)]
        point_s, point_t = _random_pair(sched, rng)
        z_t = int(rng.integers(0, vocab.size))
        pred = _random_predictor(vocab, rng)
        probs = model_backward(BackwardStep(point_s, point_t, z_t, pred),
                               vocab)
        worst = max(worst, abs(probs.sum() - 1.0),
                    float(max(0.0, -probs.min())))
        if z_t != vocab.mask_id:
            worst = max(worst, abs(probs[vocab.mask_id]))
    return _result("backward_validity", worst, PROB_TOL)


def check_onehot_equivalence(schedule: NoiseSchedule,
                             rng: np.random.Generator) -> CheckResult:
    """One-hot predictors reproduce the true posterior exactly."""
    vocab = Vocab(6)
    worst = 0.0
    for _ in range(200):
        point_s, point_t = _random_pair(schedule, rng)
        x = int(rng.integers(0, vocab.K))
        z_t = int(rng.integers(0, vocab.size))
        if marginal(point_t, x, vocab)[z_t] <= 0.0:
            continue
        onehot = np.zeros(vocab.size)
        onehot[x] = 1.0
        diff = (model_backward(BackwardStep(point_s, point_t, z_t, onehot),
                               vocab)
                - true_posterior(point_s, point_t, z_t, x, vocab))
        worst = max(worst, float(np.abs(diff).max()))
    return _result("onehot_equivalence", worst, 0.0)


def _empirical_orders(errors: list[float]) -> float:
    orders = [np.log2(a / b) for a, b in zip(errors, errors[1:])]
    return float(min(orders))


def check_forward_rate_consistency(schedule: NoiseSchedule,
                                   rng: np.random.Generator) -> CheckResult:
    """Kernel over a shrinking step matches identity + step * rate."""
    vocab = Vocab(6)
    sched = schedule if schedule.kind != MASK_ONLY else \
        NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    min_order = np.inf
    for t in (0.35, 0.6, 0.85):
        point_t = eval_schedule(sched, t)
        errors = []
        for dt in (1e-2, 5e-3, 2.5e-3):
            point_s = eval_schedule(sched, t - dt)
            err = 0.0
            for z_s in range(vocab.size):
                probs = kernel(point_s, point_t, z_s, vocab)
                expected = np.zeros(vocab.size)
                expected[z_s] = 1.0
                expected += dt * forward_rate(point_t, z_s, vocab)
                err = max(err, float(np.abs(probs - expected).max()))
            errors.append(err)
        min_order = min(min_order, _empirical_orders(errors))
    return _result("forward_rate_consistency", ORDER_REQUIRED - min_order,
                   0.0, note=f"min order {min_order:.3f}")


def check_backward_rate_consistency(schedule: NoiseSchedule,
                                    rng: np.random.Generator) -> CheckResult:
    vocab = Vocab(6)
    sched = schedule if schedule.kind != MASK_ONLY else \
        NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    min_order = np.inf
    for t in (0.35, 0.6, 0.85):
        point_t = eval_schedule(sched, t)
        pred = _random_predictor(vocab, rng)
        errors = []
        for dt in (1e-2, 5e-3, 2.5e-3):
            point_s = eval_schedule(sched, t - dt)
            err = 0.0
            for z_t in range(vocab.size):
                probs = model_backward(BackwardStep(point_s, point_t, z_t,
                                                    pred), vocab)
                expected = np.zeros(vocab.size)
                expected[z_t] = 1.0
                expected += dt * backward_rate(point_t, z_t, pred, vocab)
                err = max(err, float(np.abs(probs - expected).max()))
            errors.append(err)
        min_order = min(min_order, _empirical_orders(errors))
    return _result("backward_rate_consistency", ORDER_REQUIRED - min_order,
                   0.0, note=f"min order {min_order:.3f}")


def check_rate_rows(schedule: NoiseSchedule,
                    rng: np.random.Generator) -> CheckResult:
    """Generator rows sum to zero with non-negative off-diagonal entries."""
    vocab = Vocab(6)
    sched = schedule if schedule.kind != MASK_ONLY else \
        NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    worst = 0.0
    for _ in range(100):
        t = float(rng.uniform(0.05, 0.95))
        point = eval_schedule(sched, t)
        pred = _random_predictor(vocab, rng)
        for z in range(vocab.size):
            fwd = forward_rate(point, z, vocab)
            bwd = backward_rate(point, z, pred, vocab)
            worst = max(worst, abs(fwd.sum()), abs(bwd.sum()))
            off_f = np.delete(fwd, z)
            off_b = np.delete(bwd, z)
            worst = max(worst, float(max(0.0, -off_f.min())),
                        float(max(0.0, -off_b.min())))
    return _result("rate_rows", worst, PROB_TOL)


def check_mdlm_reduction(rng: np.random.Generator,
                         trials: int = 10000) -> CheckResult:
    dev = mdlm_equivalence_check(NoiseSchedule(kind=MASK_ONLY), trials, rng)
    return _result("mdlm_reduction", dev, LOSS_TOL)


def check_gidd_equivalence(schedule: NoiseSchedule,
                           rng: np.random.Generator) -> CheckResult:
    dev = gidd_equivalence_check(schedule, 1000, rng)
    note = "degenerate coincidence (uniform channel off)" \
        if schedule.kind == MASK_ONLY else ""
    return _result("gidd_equivalence", dev, PROB_TOL, note=note)


def check_gidd_rate_difference(schedule: NoiseSchedule,
                               rng: np.random.Generator) -> CheckResult:
    """Absorbing vs interpolating generator rows: the mask entry differs by
    exactly (1 - gamma) * rho'/rho, the remainder by its uniform spread."""
    from .oracle import gidd_rate
    vocab = Vocab(4)
    sched = schedule if schedule.kind != MASK_ONLY else \
        NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    worst = 0.0
    for _ in range(100):
        t = float(rng.uniform(0.05, 0.95))
        point = eval_schedule(sched, t)
        rho_prime, _ = point.require_derivatives()
        expected_mask = (1.0 - point.gamma) * rho_prime / point.rho
        for z_s in range(vocab.K):
            diff = (forward_rate(point, z_s, vocab)
                    - gidd_rate(point, z_s, vocab))
            worst = max(worst, abs(diff[vocab.mask_id] - expected_mask))
            expected = np.full(vocab.size, -expected_mask / vocab.K)
            expected[vocab.mask_id] = expected_mask
            worst = max(worst, float(np.abs(diff - expected).max()))
    return _result("gidd_rate_difference", worst, PROB_TOL)


def check_elbo_bound(rng: np.random.Generator) -> CheckResult:
    """Exhaustive single-token bound dominates the exact chained likelihood."""
    vocab = Vocab(4)
    sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    min_gap = np.inf
    worst_conservation = 0.0
    for T in (2, 4, 8, 16):
        grid = discretize(sched, T)
        for _ in range(5):
            predict = random_table_predictor(grid, vocab, rng)
            mats, recovery = backward_chain_matrices(predict, grid, vocab)
            total_mass = 0.0
            for x in range(vocab.K):
                nll = exact_single_token_nll(mats, recovery, x)
                nelbo = exhaustive_single_token_nelbo(predict, grid, vocab, x,
                                                      include_constants=True)
                min_gap = min(min_gap, nelbo - nll)
                total_mass += np.exp(-nll)
            worst_conservation = max(worst_conservation,
                                     abs(total_mass - 1.0))
    deviation = max(-min_gap, worst_conservation - 1e-10)
    return _result("elbo_bound", deviation, BOUND_SLACK,
                   note=f"min gap {min_gap:.3e}")


def check_kl_nonnegativity(schedule: NoiseSchedule,
                           rng: np.random.Generator) -> CheckResult:
    """Full per-step KL (constants reconstituted) is never negative."""
    vocab = Vocab(6)
    worst = 0.0
    for _ in range(2000):
        point_s, point_t = _random_pair(schedule, rng)
        x = int(rng.integers(0, vocab.K))
        z_t = int(rng.integers(0, vocab.size))
        if marginal(point_t, x, vocab)[z_t] <= 0.0:
            continue
        q = true_posterior(point_s, point_t, z_t, x, vocab)
        pred = _random_predictor(vocab, rng)
        p = model_backward(BackwardStep(point_s, point_t, z_t, pred), vocab)
        kl = sum(qv * (np.log(qv) - np.log(pv))
                 for qv, pv in zip(q, p) if qv > 0.0)
        worst = max(worst, -kl)
    return _result("kl_nonnegativity", worst, PROB_TOL)


def check_discrete_continuous(rng: np.random.Generator) -> CheckResult:
    """T-step loss terms approach the continuous integrand at rate 1/T."""
    vocab = Vocab(4)
    sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    T_values = (64, 128, 256, 512)
    sums = np.zeros(len(T_values))
    for _ in range(20):
        t = float(rng.uniform(0.2, 0.9))
        x = int(rng.integers(0, vocab.K))
        z_t = int(rng.integers(0, vocab.size))
        pred = _random_predictor(vocab, rng)
        point_t = eval_schedule(sched, t)
        cont = diffusion_term_continuous(point_t, z_t, x, pred, vocab)
        for j, T in enumerate(T_values):
            point_s = eval_schedule(sched, t - 1.0 / T)
            disc = diffusion_term_discrete(point_s, point_t, z_t, x, pred, T,
                                           vocab)
            sums[j] += abs(disc - cont)
    slope = -np.polyfit(np.log(T_values), np.log(sums / 20), 1)[0]
    return _result("discrete_continuous",
                   CONVERGENCE_ORDER_REQUIRED - slope, 0.0,
                   note=f"order {slope:.3f}")


def check_gradients(rng: np.random.Generator,
                    coords_per_group: int = 50) -> CheckResult:
    vocab = Vocab(6)
    sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    grid = discretize(sched, 16)
    params = DenoiserParams.init(vocab, 8, 12, rng)
    batch = rng.integers(0, vocab.K, size=(4, 5))
    worst = max_gradient_error(params, grid, batch, vocab, epsilon=1e-5,
                               coords_per_group=coords_per_group,
                               loss_seed=int(rng.integers(0, 2**31)), rng=rng)
    return _result("gradient_check", worst, GRAD_TOL)


def check_no_remasking(rng: np.random.Generator,
                       denoisers=None) -> CheckResult:
    """At least 1e5 sampled position-steps without a single remask event;
    mask-only schedules additionally show zero corrections."""
    vocab = Vocab(8)
    if denoisers is None:
        denoisers = []
    denoisers = list(denoisers) + [
        Denoiser(DenoiserParams.init(vocab, 8, 16, rng), vocab)]
    position_steps = 0
    corrections_mask_only = 0
    masked_finals = 0
    for den in denoisers:
        grid = discretize(NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2), 48)
        traces = sample_batch(den, grid, L=16, n=140, rng=rng)
        position_steps += 140 * 48 * 16
        masked_finals += sum((tr.final_seq == den.vocab.mask_id).sum()
                             for tr in traces)
        grid_mask = discretize(NoiseSchedule(kind=MASK_ONLY), 16)
        traces = sample_batch(den, grid_mask, L=16, n=32, rng=rng)
        position_steps += 32 * 16 * 16
        corrections_mask_only += sum(len(tr.corrections) for tr in traces)
        masked_finals += sum((tr.final_seq == den.vocab.mask_id).sum()
                             for tr in traces)
    deviation = float(corrections_mask_only + masked_finals)
    return _result("no_remasking", deviation, 0.0,
                   note=f"{position_steps} position-steps")


# ---------------------------------------------------------------------------


def run_all_checks(schedule: NoiseSchedule, seed: int = 0
                   ) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_schedule_monotonicity(schedule, rng),
        check_schedule_derivatives(schedule, rng),
        check_peak_uniform_mass(rng),
        check_marginal_composition(schedule, rng),
        check_kernel_stochasticity(schedule, rng),
        check_posterior_bayes(schedule, rng),
        check_backward_validity(schedule, rng),
        check_onehot_equivalence(schedule, rng),
        check_forward_rate_consistency(schedule, rng),
        check_backward_rate_consistency(schedule, rng),
        check_rate_rows(schedule, rng),
        check_mdlm_reduction(rng),
        check_gidd_equivalence(schedule, rng),
        check_gidd_rate_difference(schedule, rng),
        check_elbo_bound(rng),
        check_kl_nonnegativity(schedule, rng),
        check_discrete_continuous(rng),
        check_gradients(rng),
        check_no_remasking(rng),
    ]


def write_report(results: list[CheckResult], path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "max_deviation", "tolerance", "pass"])
        for r in results:
            writer.writerow([r.name, f"{r.deviation:.6e}",
                             f"{r.tolerance:.6e}",
                             "pass" if r.passed else "fail"])


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.note})" if r.note else ""
        lines.append(f"{status}  {r.name:<28} deviation {r.deviation:.3e} "
                     f"tolerance {r.tolerance:.3e}{extra}")
    return "\n".join(lines)
