"""Brute-force and independently coded reference implementations.

Everything here certifies a closed form elsewhere in the package: the Bayes
posterior by direct enumeration, exact single-token likelihood by chaining
stochastic matrices, the mask-only and interpolating-kernel reductions by
coding the other side's formulas from scratch, gradients by central
differences, and an exactly scorable Markov text source standing in for a
judge model.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .backward import BackwardStep, model_backward, true_posterior
from .denoiser import DenoiserParams, loss_and_grad
from .forward import Vocab, forward_rate, kernel, marginal
from .objective import diffusion_term_discrete, sequence_nelbo
from .schedule import (MASK_ONLY, NoiseSchedule, SchedulePoint, TimeGrid,
                       eval_schedule)

# ---------------------------------------------------------------------------
# Markov text source


@dataclass
class MarkovSource:
    """Order-1 Markov chain over the real tokens, exactly scorable."""

    K: int
    init: np.ndarray    # (K,)
    trans: np.ndarray   # (K, K) row-stochastic

    def __post_init__(self) -> None:
        self.init = np.asarray(self.init, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.init.shape != (self.K,) or self.trans.shape != (self.K, self.K):
            raise ValueError("source shapes do not match K")
        if abs(self.init.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution does not sum to 1")
        if np.abs(self.trans.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition rows do not sum to 1")
        if (self.init < 0).any() or (self.trans < 0).any():
            raise ValueError("negative probabilities")

    @cached_property
    def stationary(self) -> np.ndarray:
        """Stationary distribution via the lazy chain (I + P) / 2."""
        pi = np.full(self.K, 1.0 / self.K)
        for _ in range(200000):
            nxt = 0.5 * pi + 0.5 * (pi @ self.trans)
            if np.abs(nxt - pi).max() < 1e-15:
                return nxt
            pi = nxt
        return pi

    @cached_property
    def entropy_rate(self) -> float:
        """Stationary-weighted mean row entropy, in nats."""
        rows = self.trans
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(rows > 0, rows * np.log(rows), 0.0)
        return float(-(self.stationary * plogp.sum(axis=1)).sum())


def uniform_source(K: int) -> MarkovSource:
    """Independent uniform tokens."""
    return MarkovSource(K=K, init=np.full(K, 1.0 / K),
                        trans=np.full((K, K), 1.0 / K))


def favored_next_source(K: int, strength: float = 2.0) -> MarkovSource:
    """Doubly stochastic chain with a mild preference for the next token.

    Row i puts weight (1 + strength) on token (i + 1) mod K and weight 1 on
    everything else; the stationary distribution is uniform, so the unigram
    entropy exceeds the entropy rate by only a small margin.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    trans = np.ones((K, K))
    for i in range(K):
        trans[i, (i + 1) % K] += strength
    trans /= K + strength
    return MarkovSource(K=K, init=np.full(K, 1.0 / K), trans=trans)


def generate_corpus(source: MarkovSource, L: int, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` length-L sequences from the chain."""
    if L < 1 or count < 1:
        raise ValueError("L and count must be >= 1")
    out = np.empty((count, L), dtype=np.int64)
    cdf_init = np.cumsum(source.init)
    out[:, 0] = np.searchsorted(cdf_init, rng.random(count), side="right")
    cdf_rows = np.cumsum(source.trans, axis=1)
    for l in range(1, L):
        u = rng.random(count)
        rows = cdf_rows[out[:, l - 1]]
        out[:, l] = (rows < u[:, None]).sum(axis=1)
    return np.minimum(out, source.K - 1)


def exact_oracle_ppl(source: MarkovSource, sequences) -> float:
    """Perplexity of sequences under the chain's exact log-probabilities."""
    total = 0.0
    tokens = 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if (seq < 0).any() or (seq >= source.K).any():
            raise ValueError("token out of range for the source")
        logp = np.log(source.init[seq[0]])
        if len(seq) > 1:
            logp += np.log(source.trans[seq[:-1], seq[1:]]).sum()
        total -= logp
        tokens += len(seq)
    return float(np.exp(total / tokens))


# ---------------------------------------------------------------------------
# Posterior by enumeration


def brute_posterior(point_s: SchedulePoint, point_t: SchedulePoint, z_t: int,
                    x: int, vocab: Vocab) -> np.ndarray:
    """Bayes posterior computed from the kernel and marginal, no closed forms."""
    weights = np.empty(vocab.size)
    marg = marginal(point_s, x, vocab)
    for z_s in range(vocab.size):
        weights[z_s] = marg[z_s] * kernel(point_s, point_t, z_s, vocab)[z_t]
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("conditioning on a zero-probability state")
    return weights / total


# ---------------------------------------------------------------------------
# Exact single-token likelihood and exhaustive bound


def backward_chain_matrices(predict_fn, grid: TimeGrid, vocab: Vocab):
    """Backward transition matrices (for i = T..1) plus the final recovery matrix.

    ``predict_fn(z, t)`` must return the predicted clean-token distribution
    for the single-token state z at time t; under sequence length one the
    backward process is then an inhomogeneous Markov chain.
    """
    mats = []
    for i in range(grid.T, 0, -1):
        point_s, point_t = grid.point(i - 1), grid.point(i)
        M = np.zeros((vocab.size, vocab.size))
        for z_t in range(vocab.size):
            step = BackwardStep(point_s, point_t, z_t,
                                predict_fn(z_t, point_t.t))
            M[z_t] = model_backward(step, vocab)
        mats.append(M)
    point_first, point0 = grid.point(-1), grid.point(0)
    recovery = np.zeros((vocab.size, vocab.size))
    for z0 in range(vocab.size):
        pred = predict_fn(z0, point0.t)
        if z0 == vocab.mask_id and point0.gamma >= 1.0:
            # The masked state carries zero chain mass at gamma = 1; the
            # limiting recovery row samples straight from the predictor,
            # matching the sampler's residual-mask rule.
            recovery[z0] = pred
            continue
        step = BackwardStep(point_first, point0, z0, pred)
        recovery[z0] = model_backward(step, vocab)
    return mats, recovery


def exact_single_token_nll(backward_matrices, reconstruction_matrix,
                           x: int) -> float:
    """-ln of the chained backward probability of emitting token x.

    Multiplies the all-mask start vector through the given row-stochastic
    matrices (ordered from t = 1 down) and the final recovery matrix.
    """
    size = reconstruction_matrix.shape[0]
    for M in list(backward_matrices) + [reconstruction_matrix]:
        if M.shape != (size, size):
            raise ValueError("matrix shapes disagree")
        if np.abs(M.sum(axis=1) - 1.0).max() > 1e-10 or (M < -1e-15).any():
            raise ValueError("matrix is not row-stochastic")
    v = np.zeros(size)
    v[size - 1] = 1.0  # all-mask start
    for M in backward_matrices:
        v = v @ M
    v = v @ reconstruction_matrix
    return float(-np.log(v[x]))


def exhaustive_single_token_nelbo(predict_fn, grid: TimeGrid, vocab: Vocab,
                                  x: int, include_constants: bool) -> float:
    """Exact expectation of the single-token bound over all (t, z_t).

    With ``include_constants`` the per-step terms are full KL divergences
    (the quantity that upper-bounds the negative log-likelihood); without,
    they are the training integrand with predictor-independent constants
    dropped, matching the Monte-Carlo estimator.
    """
    diffusion = 0.0
    for i in range(1, grid.T + 1):
        point_s, point_t = grid.point(i - 1), grid.point(i)
        marg = marginal(point_t, x, vocab)
        for z_t in range(vocab.size):
            if marg[z_t] <= 0.0:
                continue
            pred = predict_fn(z_t, point_t.t)
            if include_constants:
                q = true_posterior(point_s, point_t, z_t, x, vocab)
                p = model_backward(
                    BackwardStep(point_s, point_t, z_t, pred), vocab)
                kl = 0.0
                for v in range(vocab.size):
                    if q[v] > 0.0:
                        kl += q[v] * (np.log(q[v]) - np.log(p[v]))
                diffusion += marg[z_t] * kl
            else:
                term = diffusion_term_discrete(point_s, point_t, z_t, x,
                                               pred, grid.T, vocab)
                diffusion += marg[z_t] * term / grid.T
    recon = 0.0
    marg0 = marginal(grid.point(0), x, vocab)
    for z0 in range(vocab.size):
        if marg0[z0] <= 0.0:
            continue
        pred = predict_fn(z0, grid.point(0).t)
        p = model_backward(
            BackwardStep(grid.point(-1), grid.point(0), z0, pred), vocab)
        recon += marg0[z0] * -np.log(p[x])
    return float(recon + diffusion)


def random_table_predictor(grid: TimeGrid, vocab: Vocab,
                           rng: np.random.Generator):
    """Random but fixed single-token predictor (z, t) -> strictly positive simplex."""
    table: dict[tuple[int, float], np.ndarray] = {}
    times = [grid.point(i).t for i in range(0, grid.T + 1)]
    for t in times:
        for z in range(vocab.size):
            raw = rng.random(vocab.K) + 1e-3
            probs = np.zeros(vocab.size)
            probs[:vocab.K] = raw / raw.sum()
            table[(z, t)] = probs

    def predict(z: int, t: float) -> np.ndarray:
        return table[(z, t)]

    return predict


# ---------------------------------------------------------------------------
# Mask-only reduction, coded independently


def _mdlm_marginal(alpha_t: float, x: int, vocab: Vocab) -> np.ndarray:
    probs = np.zeros(vocab.size)
    probs[x] = alpha_t
    probs[vocab.mask_id] = 1.0 - alpha_t
    return probs


def _mdlm_kernel(alpha_s: float, alpha_t: float, z_s: int,
                 vocab: Vocab) -> np.ndarray:
    probs = np.zeros(vocab.size)
    if z_s == vocab.mask_id:
        probs[vocab.mask_id] = 1.0
        return probs
    ratio = alpha_t / alpha_s if alpha_s > 0 else 0.0
    probs[z_s] = ratio
    probs[vocab.mask_id] = 1.0 - ratio
    return probs


def _mdlm_posterior(alpha_s: float, alpha_t: float, z_t: int,
                    clean: np.ndarray, vocab: Vocab) -> np.ndarray:
    probs = np.zeros(vocab.size)
    if z_t != vocab.mask_id:
        probs[z_t] = 1.0
        return probs
    probs[:vocab.K] = (alpha_s - alpha_t) / (1.0 - alpha_t) * clean[:vocab.K]
    probs[vocab.mask_id] = (1.0 - alpha_s) / (1.0 - alpha_t)
    return probs


def mdlm_equivalence_check(schedule: NoiseSchedule, trials: int,
                           rng: np.random.Generator, K: int = 6) -> float:
    """Max deviation between this model at rho = 1 and mask-only formulas.

    Compares marginal, kernel, posterior (true and parameterized) and the
    discrete loss on random configurations; also requires the continuous
    loss to vanish identically on unmasked states.
    """
    if schedule.kind != MASK_ONLY:
        raise ValueError("reduction check requires a mask-only schedule")
    from .objective import diffusion_term_continuous
    vocab = Vocab(K)
    max_dev = 0.0
    for _ in range(trials):
        s = rng.uniform(0.0, 0.98)
        t = rng.uniform(s + 0.01, 1.0)
        point_s = eval_schedule(schedule, s)
        point_t = eval_schedule(schedule, t)
        alpha_s, alpha_t = point_s.gamma, point_t.gamma
        x = int(rng.integers(0, K))
        raw = rng.random(K) + 1e-3
        pred = np.zeros(vocab.size)
        pred[:K] = raw / raw.sum()
        clean = np.zeros(vocab.size)
        clean[x] = 1.0
        T = int(rng.integers(1, 1001))

        dev = np.abs(marginal(point_t, x, vocab)
                     - _mdlm_marginal(alpha_t, x, vocab)).max()
        max_dev = max(max_dev, dev)
        for z_s in (x, vocab.mask_id):
            dev = np.abs(kernel(point_s, point_t, z_s, vocab)
                         - _mdlm_kernel(alpha_s, alpha_t, z_s, vocab)).max()
            max_dev = max(max_dev, dev)
        for z_t in (x, vocab.mask_id):
            dev = np.abs(true_posterior(point_s, point_t, z_t, x, vocab)
                         - _mdlm_posterior(alpha_s, alpha_t, z_t, clean,
                                           vocab)).max()
            max_dev = max(max_dev, dev)
            dev = np.abs(model_backward(BackwardStep(point_s, point_t, z_t,
                                                     pred), vocab)
                         - _mdlm_posterior(alpha_s, alpha_t, z_t, pred,
                                           vocab)).max()
            max_dev = max(max_dev, dev)
        loss_masked = diffusion_term_discrete(point_s, point_t, vocab.mask_id,
                                              x, pred, T, vocab)
        mdlm_loss = -T * (alpha_s - alpha_t) / (1.0 - alpha_t) * np.log(pred[x])
        max_dev = max(max_dev, abs(loss_masked - mdlm_loss))
        loss_unmasked = diffusion_term_discrete(point_s, point_t, x, x, pred,
                                                T, vocab)
        max_dev = max(max_dev, abs(loss_unmasked))
        if 0.0 < t < 1.0:
            cont = diffusion_term_continuous(point_t, x, x, pred, vocab)
            max_dev = max(max_dev, abs(cont))
    return float(max_dev)


# ---------------------------------------------------------------------------
# Interpolating-kernel (non-absorbing) reduction, coded independently


@dataclass(frozen=True)
class GiddParams:
    """Interpolating-kernel parameters obtained from (rho, gamma).

    ``alpha_g`` scales the carried state; the noise part splits into a
    uniform mass and a mask mass whose sum with alpha_g is 1.
    """

    alpha_g: float
    u_mass: float
    m_mass: float

    def __post_init__(self) -> None:
        if abs(self.alpha_g + self.u_mass + self.m_mass - 1.0) > 1e-12:
            raise ValueError("masses must sum to 1")

    def noise_vector(self, vocab: Vocab) -> np.ndarray:
        vec = np.full(vocab.size, self.u_mass / vocab.K)
        vec[vocab.mask_id] = self.m_mass
        return vec


def gidd_translate(point: SchedulePoint) -> GiddParams:
    """Parameter translation from (rho, gamma) to the interpolating form."""
    return GiddParams(alpha_g=point.rho * point.gamma,
                      u_mass=point.gamma * (1.0 - point.rho),
                      m_mass=1.0 - point.gamma)


def relaxed_kernel(point_s: SchedulePoint, point_t: SchedulePoint, z_s: int,
                   vocab: Vocab) -> np.ndarray:
    """Non-absorbing forward kernel that induces the same marginals.

    Unlike the absorbing kernel, a masked state may re-emit real tokens;
    composing these one-step kernels still reproduces the mixture marginal.
    """
    if point_s.t >= point_t.t:
        raise ValueError("kernel requires point_s.t < point_t.t")
    rho_ts = point_t.rho / point_s.rho if point_s.rho > 0 else 0.0
    gamma_ts = point_t.gamma / point_s.gamma if point_s.gamma > 0 else 0.0
    probs = np.full(vocab.size, point_t.gamma * (1.0 - rho_ts) / vocab.K)
    probs[vocab.mask_id] = ((1.0 - point_t.gamma)
                            - gamma_ts * rho_ts * (1.0 - point_s.gamma))
    probs[z_s] += gamma_ts * rho_ts
    return probs


def gidd_kernel(point_s: SchedulePoint, point_t: SchedulePoint, z_s: int,
                vocab: Vocab) -> np.ndarray:
    """Interpolating kernel built purely from the translated parameters."""
    ps, pt = gidd_translate(point_s), gidd_translate(point_t)
    alpha_ts = pt.alpha_g / ps.alpha_g if ps.alpha_g > 0 else 0.0
    residual = pt.noise_vector(vocab) - alpha_ts * ps.noise_vector(vocab)
    probs = residual.copy()
    probs[z_s] += alpha_ts
    return probs


def gidd_rate(point: SchedulePoint, z_s: int, vocab: Vocab) -> np.ndarray:
    """Forward generator row of the interpolating kernel for a real state."""
    rho_prime, gamma_prime = point.require_derivatives()
    rho, gamma = point.rho, point.gamma
    alpha_log_deriv = rho_prime / rho + gamma_prime / gamma
    u_mass_prime = gamma_prime * (1.0 - rho) - gamma * rho_prime
    m_mass_prime = -gamma_prime
    vec = np.full(vocab.size,
                  (u_mass_prime - alpha_log_deriv * gamma * (1.0 - rho))
                  / vocab.K)
    vec[vocab.mask_id] = m_mass_prime - alpha_log_deriv * (1.0 - gamma)
    row = vec.copy()
    row[z_s] += alpha_log_deriv
    return row


def gidd_equivalence_check(schedule: NoiseSchedule, trials: int,
                           rng: np.random.Generator, K: int = 4,
                           grid_T: int = 32) -> float:
    """Max deviation across the three interpolating-kernel statements.

    (a) composing one-step relaxed kernels reproduces the mixture marginal;
    (b) the relaxed kernel equals the translated interpolating kernel
    entrywise; (c) the absorbing and interpolating generator rows differ by
    exactly (1 - gamma) * (rho'/rho) * (mask_onehot - uniform).
    """
    from .schedule import discretize
    vocab = Vocab(K)
    max_dev = 0.0

    grid = discretize(schedule, grid_T)
    for x in range(K):
        carried = np.zeros(vocab.size)
        carried[x] = 1.0
        for i in range(0, grid_T + 1):
            point_s, point_t = grid.point(i - 1), grid.point(i)
            step_matrix = np.stack([relaxed_kernel(point_s, point_t, z, vocab)
                                    for z in range(vocab.size)])
            carried = carried @ step_matrix
            dev = np.abs(carried - marginal(point_t, x, vocab)).max()
            max_dev = max(max_dev, dev)

    for _ in range(trials):
        s = rng.uniform(0.0, 0.98)
        t = rng.uniform(s + 0.01, 1.0)
        point_s = eval_schedule(schedule, s)
        point_t = eval_schedule(schedule, t)
        for z_s in range(vocab.size):
            dev = np.abs(relaxed_kernel(point_s, point_t, z_s, vocab)
                         - gidd_kernel(point_s, point_t, z_s, vocab)).max()
            max_dev = max(max_dev, dev)

    for _ in range(max(1, trials // 10)):
        t = rng.uniform(0.05, 0.95)
        point = eval_schedule(schedule, t)
        rho_prime, _ = point.require_derivatives()
        expected = np.full(vocab.size, -(1.0 - point.gamma)
                           * rho_prime / point.rho / vocab.K)
        expected[vocab.mask_id] = (1.0 - point.gamma) * rho_prime / point.rho
        for z_s in range(K):
            diff = (forward_rate(point, z_s, vocab)
                    - gidd_rate(point, z_s, vocab))
            max_dev = max(max_dev, float(np.abs(diff - expected).max()))
    return float(max_dev)


# ---------------------------------------------------------------------------
# Finite-difference gradients


def finite_diff_grad(params: DenoiserParams, grid: TimeGrid,
                     batch: np.ndarray, vocab: Vocab, epsilon: float,
                     coords_per_group: int, loss_seed: int,
                     rng: np.random.Generator) -> dict[str, list]:
    """Central-difference gradient estimates on sampled coordinates.

    Every loss evaluation re-seeds the corruption stream with ``loss_seed``,
    so the estimates target the same draw the analytic gradient saw.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon outside the supported window")

    def loss_at(p: DenoiserParams) -> float:
        value, _ = loss_and_grad(p, grid, batch, np.random.default_rng(loss_seed),
                                 vocab)
        return value

    estimates: dict[str, list] = {}
    for name, tensor in params.tensors().items():
        flat_size = tensor.size
        n = min(coords_per_group, flat_size)
        coords = rng.choice(flat_size, size=n, replace=False)
        pairs = []
        for c in coords:
            work = params.copy()
            work.tensors()[name].flat[c] += epsilon
            hi = loss_at(work)
            work.tensors()[name].flat[c] -= 2 * epsilon
            lo = loss_at(work)
            pairs.append((int(c), (hi - lo) / (2 * epsilon)))
        estimates[name] = pairs
    return estimates


def max_gradient_error(params: DenoiserParams, grid: TimeGrid,
                       batch: np.ndarray, vocab: Vocab, epsilon: float,
                       coords_per_group: int, loss_seed: int,
                       rng: np.random.Generator) -> float:
    """Worst relative disagreement between analytic and numeric gradients."""
    _, analytic = loss_and_grad(params, grid, batch,
                                np.random.default_rng(loss_seed), vocab)
    numeric = finite_diff_grad(params, grid, batch, vocab, epsilon,
                               coords_per_group, loss_seed, rng)
    worst = 0.0
    for name, pairs in numeric.items():
        for c, fd in pairs:
            an = analytic[name].flat[c]
            denom = max(abs(an), abs(fd))
            if denom < 1e-10:
                continue  # both effectively zero (e.g. the unused mask row)
            worst = max(worst, abs(an - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# Bound-based candidate ranking


def rank_by_elbo(denoiser, grid: TimeGrid, prompt, candidates, num_passes: int,
                 rng: np.random.Generator) -> int:
    """Pick the candidate whose prompt-joined sequence has the best mean bound.

    Scores are negated bound totals averaged over ``num_passes`` corruption
    draws. Every candidate is scored under the same draw stream (common
    random numbers), so identical candidates tie exactly and the argmax
    deterministically breaks toward the lowest index.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    prompt = np.asarray(prompt, dtype=np.int64)
    shared_seed = int(rng.integers(0, 2**63))
    scores = []
    for cand in candidates:
        seq = np.concatenate([prompt, np.asarray(cand, dtype=np.int64)])
        breakdown = sequence_nelbo(denoiser, grid, seq, num_passes,
                                   np.random.default_rng(shared_seed))
        scores.append(-breakdown.total)
    return int(np.argmax(scores))
