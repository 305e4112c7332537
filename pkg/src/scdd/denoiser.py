"""Clean-data predictor: a small hand-differentiated network plus training.

Per position l the network sees the position's own token embedding, the
mean embedding of the whole sequence, and the pair (t, 1 - t); one tanh
hidden layer produces logits over the K+1 slots. The [mask] logit is
excluded from the softmax, so the predicted distribution carries exactly
zero mass on [mask] by construction and its gradient stays exact. There is
deliberately no projection that would force the prediction back onto an
already-visible token, so unmasked tokens can be revised downstream.

Gradients are reverse-mode by hand; the optimizer is the decoupled
weight-decay adaptive-moment update (beta1 = 0.9, beta2 = 0.999,
eps = 1e-9) with bias correction and a 0.9999-decay parameter average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .forward import Vocab
from .schedule import NoiseSchedule, TimeGrid, discretize

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-9
EMA_DECAY = 0.9999

_INIT_SPAN = 0.05
_FLOOR = 1e-300


@dataclass
class DenoiserParams:
    """Weights of the predictor network, all float64."""

    embed: np.ndarray   # (K+1, d) token embeddings
    w1: np.ndarray      # (h, 2d+2) hidden layer
    b1: np.ndarray      # (h,)
    w2: np.ndarray      # (K+1, h) output projection
    b2: np.ndarray      # (K+1,)

    @staticmethod
    def init(vocab: Vocab, d: int, h: int,
             rng: np.random.Generator) -> "DenoiserParams":
        """Seeded uniform(-0.05, 0.05) weights, zero biases."""
        def u(*shape):
            return rng.uniform(-_INIT_SPAN, _INIT_SPAN, size=shape)

        return DenoiserParams(
            embed=u(vocab.size, d),
            w1=u(h, 2 * d + 2),
            b1=np.zeros(h),
            w2=u(vocab.size, h),
            b2=np.zeros(vocab.size),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {"embed": self.embed, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2}

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(**{k: v.copy() for k, v in self.tensors().items()})

    @property
    def dims(self) -> tuple[int, int, int]:
        """(K, d, h) recovered from tensor shapes."""
        return self.embed.shape[0] - 1, self.embed.shape[1], self.w1.shape[0]


@dataclass
class OptimizerState:
    """First/second moment accumulators, step counter, parameter average."""

    m1: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]
    step_count: int
    ema: DenoiserParams

    @staticmethod
    def init(params: DenoiserParams) -> "OptimizerState":
        return OptimizerState(
            m1={k: np.zeros_like(v) for k, v in params.tensors().items()},
            m2={k: np.zeros_like(v) for k, v in params.tensors().items()},
            step_count=0,
            ema=params.copy(),
        )


class Denoiser:
    """Parameter bundle with the prediction interface used everywhere else."""

    def __init__(self, params: DenoiserParams, vocab: Vocab):
        K, _, _ = params.dims
        if K != vocab.K:
            raise ValueError("parameter shapes do not match the vocabulary")
        self.params = params
        self.vocab = vocab

    def predict(self, z_seq: np.ndarray, t: float) -> np.ndarray:
        """Per-position clean-token distributions for one sequence."""
        z = np.asarray(z_seq, dtype=np.int64)[None, :]
        probs, _ = _forward(self.params, self.vocab, z, np.array([float(t)]))
        return probs[0]

    def predict_batch(self, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Batched prediction; ``t`` is one time per sequence."""
        probs, _ = _forward(self.params, self.vocab,
                            np.asarray(z, dtype=np.int64),
                            np.asarray(t, dtype=np.float64))
        return probs


def _forward(params: DenoiserParams, vocab: Vocab, z: np.ndarray,
             t: np.ndarray):
    if z.size == 0:
        raise ValueError("empty sequence")
    if (z < 0).any() or (z > vocab.mask_id).any():
        raise ValueError("token index out of range")
    B, L = z.shape
    d = params.embed.shape[1]
    emb = params.embed[z]                           # (B, L, d)
    mean_emb = emb.mean(axis=1)                     # (B, d)
    feats = np.empty((B, L, 2 * d + 2))
    feats[:, :, :d] = emb
    feats[:, :, d:2 * d] = mean_emb[:, None, :]
    feats[:, :, 2 * d] = t[:, None]
    feats[:, :, 2 * d + 1] = 1.0 - t[:, None]
    pre = feats @ params.w1.T + params.b1
    hidden = np.tanh(pre)
    logits = hidden @ params.w2.T + params.b2
    real = logits[..., :vocab.K]
    real = real - real.max(axis=-1, keepdims=True)
    expd = np.exp(real)
    probs = np.zeros((B, L, vocab.size))
    probs[..., :vocab.K] = expd / expd.sum(axis=-1, keepdims=True)
    return probs, (z, feats, hidden, probs)


def _backward(params: DenoiserParams, vocab: Vocab, cache,
              dprobs: np.ndarray) -> dict[str, np.ndarray]:
    z, feats, hidden, probs = cache
    B, L = z.shape
    d = params.embed.shape[1]
    p = probs[..., :vocab.K]
    g = dprobs[..., :vocab.K]
    inner = (g * p).sum(axis=-1, keepdims=True)
    dlogits = np.zeros_like(dprobs)
    dlogits[..., :vocab.K] = p * (g - inner)
    dw2 = np.einsum("blk,blh->kh", dlogits, hidden)
    db2 = dlogits.sum(axis=(0, 1))
    dhidden = dlogits @ params.w2
    dpre = dhidden * (1.0 - hidden * hidden)
    dw1 = np.einsum("blh,blf->hf", dpre, feats)
    db1 = dpre.sum(axis=(0, 1))
    dfeats = dpre @ params.w1
    demb_own = dfeats[..., :d]
    dmean = dfeats[..., d:2 * d].sum(axis=1) / L    # (B, d)
    dembed = np.zeros_like(params.embed)
    contrib = demb_own + dmean[:, None, :]
    np.add.at(dembed, z.reshape(-1), contrib.reshape(B * L, d))
    return {"embed": dembed, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def _draw_corruption(grid: TimeGrid, x: np.ndarray, rng: np.random.Generator,
                     vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """One uniform grid index per sequence, then position-wise corruption."""
    B, L = x.shape
    idx = rng.integers(1, grid.T + 1, size=B)
    gam = grid.gammas[idx + 1][:, None]
    rho = grid.rhos[idx + 1][:, None]
    retain_p = gam * rho
    uniform_p = gam * (1.0 - rho)
    u = rng.random((B, L))
    uniform_draw = rng.integers(0, vocab.K, size=(B, L))
    z = np.where(u < retain_p, x,
                 np.where(u < retain_p + uniform_p, uniform_draw,
                          vocab.mask_id))
    return idx, z.astype(np.int64)


def _diffusion_loss_and_dprobs(z: np.ndarray, x: np.ndarray, probs: np.ndarray,
                               idx: np.ndarray, grid: TimeGrid, vocab: Vocab
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Per-position discrete diffusion loss and its gradient in the probs.

    Vectorized twin of the scalar term in :mod:`scdd.objective`; both
    branches are evaluated everywhere (divisions floored against the
    discarded branch's degenerate values) and selected by the mask state.
    """
    B, L = z.shape
    K = vocab.K
    T = grid.T
    rho_s = grid.rhos[idx][:, None]                 # (B, 1)
    rho_t = grid.rhos[idx + 1][:, None]
    gamma_s = grid.gammas[idx][:, None]
    gamma_t = grid.gammas[idx + 1][:, None]

    x_onehot = np.zeros((B, L, K))
    np.put_along_axis(x_onehot, x[..., None], 1.0, axis=-1)
    masked = z == vocab.mask_id
    z_real = np.where(masked, 0, z)
    z_onehot = np.zeros((B, L, K))
    np.put_along_axis(z_onehot, z_real[..., None], 1.0, axis=-1)

    rs = rho_s[..., None]
    smoothed = np.maximum(rs * probs[..., :K] + (1.0 - rs) / K, _FLOOR)
    log_smoothed = np.log(smoothed)
    target = rs * x_onehot + (1.0 - rs) / K

    weight = (gamma_s - gamma_t) / np.maximum(1.0 - gamma_t, _FLOOR)
    loss_masked = -T * weight * (target * log_smoothed).sum(axis=-1)
    dprobs_masked = -T * weight[..., None] * target * rs / smoothed

    denom = np.maximum(rho_t * (z_real == x) + (1.0 - rho_t) / K, _FLOOR)
    rho_ts = rho_t / rho_s
    trans = rho_ts[..., None] * z_onehot + (1.0 - rho_ts[..., None]) / K
    posterior = target * trans / denom[..., None]
    p_z = np.take_along_axis(probs[..., :K], z_real[..., None], axis=-1)[..., 0]
    current = np.maximum(rho_t * p_z + (1.0 - rho_t) / K, _FLOOR)
    loss_unmasked = -T * ((posterior * log_smoothed).sum(axis=-1)
                          - np.log(current))
    dprobs_unmasked = (-T * posterior * rs / smoothed
                       + z_onehot * (T * rho_t / current)[..., None])

    loss = np.where(masked, loss_masked, loss_unmasked)
    dprobs = np.zeros((B, L, vocab.size))
    dprobs[..., :K] = np.where(masked[..., None], dprobs_masked,
                               dprobs_unmasked)
    return loss, dprobs


def loss_and_grad(params: DenoiserParams, grid: TimeGrid, batch: np.ndarray,
                  rng: np.random.Generator, vocab: Vocab
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-sequence bound over a batch and its exact parameter gradient.

    One time draw per sequence. All randomness is consumed before any
    parameter-dependent computation, so re-evaluating with an identically
    seeded generator sees the same corruption (the contract the
    finite-difference oracle relies on). The reconstruction component is
    identically zero here because every supported grid starts at
    rho = gamma = 1, where the first latent equals the clean data.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a nonempty (B, L) array")
    if (batch < 0).any() or (batch >= vocab.K).any():
        raise ValueError("clean data must contain real (non-mask) tokens only")
    p0 = grid.point(0)
    if not (p0.rho == 1.0 and p0.gamma == 1.0):
        raise ValueError("training requires a grid starting at rho = gamma = 1")
    B = batch.shape[0]
    idx, z = _draw_corruption(grid, batch, rng, vocab)
    t_vec = idx.astype(np.float64) / grid.T
    probs, cache = _forward(params, vocab, z, t_vec)
    loss_bl, dprobs = _diffusion_loss_and_dprobs(z, batch, probs, idx, grid,
                                                 vocab)
    loss = float(loss_bl.sum() / B)
    grads = _backward(params, vocab, cache, dprobs / B)
    return loss, grads


def optimizer_step(params: DenoiserParams, state: OptimizerState,
                   grads: dict[str, np.ndarray], lr: float,
                   weight_decay: float = 0.0,
                   ema_decay: float = EMA_DECAY
                   ) -> tuple[DenoiserParams, OptimizerState]:
    """Bias-corrected adaptive-moment update with decoupled weight decay.

    Mutates ``params`` and ``state`` in place and returns them; callers that
    need the previous values must copy first.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    ema_tensors = state.ema.tensors()
    for name, p in params.tensors().items():
        g = grads[name]
        m1 = state.m1[name]
        m2 = state.m2[name]
        m1 *= ADAM_BETA1
        m1 += (1.0 - ADAM_BETA1) * g
        m2 *= ADAM_BETA2
        m2 += (1.0 - ADAM_BETA2) * g * g
        update = (m1 / c1) / (np.sqrt(m2 / c2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update
        ema = ema_tensors[name]
        ema *= ema_decay
        ema += (1.0 - ema_decay) * p
    return params, state


def lr_at(step: int, peak: float, warmup: int, total: int,
          start_ratio: float = 1.0 / 500.0, floor_ratio: float = 0.1) -> float:
    """Linear warmup to the peak rate, then cosine decay to a floor."""
    if warmup > 0 and step < warmup:
        frac = step / warmup
        return peak * (start_ratio + (1.0 - start_ratio) * frac)
    if total <= warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    floor = peak * floor_ratio
    return float(floor + 0.5 * (peak - floor) * (1.0 + np.cos(np.pi * progress)))


@dataclass
class TrainConfig:
    """Everything the training loop needs besides the dataset."""

    schedule: NoiseSchedule
    T: int = 1000
    K: int = 16
    L: int = 8
    d: int = 32
    h: int = 64
    steps: int = 20000
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 200
    weight_decay: float = 0.0
    ema_decay: float = EMA_DECAY
    log_every: int = 500

    def validate(self) -> None:
        if self.T < 1 or self.K < 1 or self.L < 1:
            raise ValueError("T, K and L must be positive")
        if self.d < 1 or self.h < 1:
            raise ValueError("model dimensions must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("bad step or batch count")
        if self.lr <= 0.0 or self.warmup < 0:
            raise ValueError("bad learning-rate settings")


def train(config: TrainConfig, dataset: np.ndarray, rng: np.random.Generator,
          log: Optional[Callable[[int, object], None]] = None):
    """Run the optimization loop; returns (params, opt_state, history).

    ``history`` holds (step, reconstruction, diffusion, total, ppl) rows of
    per-token values, appended every ``log_every`` steps and after the final
    step. Zero steps return the untouched initialization.
    """
    from .objective import LossBreakdown  # local import to avoid a cycle

    config.validate()
    dataset = np.asarray(dataset, dtype=np.int64)
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, L) array")
    if dataset.shape[1] != config.L:
        raise ValueError("dataset length does not match config.L")
    if (dataset < 0).any() or (dataset >= config.K).any():
        raise ValueError("dataset tokens out of range")

    vocab = Vocab(config.K)
    grid = discretize(config.schedule, config.T)
    params = DenoiserParams.init(vocab, config.d, config.h, rng)
    state = OptimizerState.init(params)
    history: list[tuple[int, float, float, float, float]] = []

    def record(step: int, loss_per_seq: float) -> None:
        per_token = loss_per_seq / config.L
        breakdown = LossBreakdown.build(0.0, per_token)
        history.append((step, breakdown.reconstruction, breakdown.diffusion,
                        breakdown.total, float(np.exp(breakdown.total))))
        if log is not None:
            log(step, breakdown)

    last_loss = None
    for step in range(config.steps):
        rows = rng.integers(0, dataset.shape[0], size=config.batch_size)
        loss, grads = loss_and_grad(params, grid, dataset[rows], rng, vocab)
        lr = lr_at(step, config.lr, config.warmup, config.steps)
        optimizer_step(params, state, grads, lr,
                       weight_decay=config.weight_decay,
                       ema_decay=config.ema_decay)
        last_loss = loss
        if config.log_every and (step + 1) % config.log_every == 0:
            record(step + 1, loss)
    if config.steps > 0 and (not history or history[-1][0] != config.steps):
        record(config.steps, last_loss)
    return params, state, history
