import numpy as np
import pytest

from scdd.forward import Vocab


class FnDenoiser:
    """Test double: per-token predictor function (z, t) -> distribution."""

    def __init__(self, vocab: Vocab, fn):
        self.vocab = vocab
        self._fn = fn

    def predict(self, z_seq, t):
        return np.stack([self._fn(int(z), float(t))
                         for z in np.asarray(z_seq)])

    def predict_batch(self, z, t):
        return np.stack([self.predict(row, tv)
                         for row, tv in zip(np.asarray(z), np.asarray(t))])


def uniform_denoiser(K: int) -> FnDenoiser:
    vocab = Vocab(K)
    probs = np.zeros(vocab.size)
    probs[:K] = 1.0 / K

    return FnDenoiser(vocab, lambda z, t: probs.copy())


def onehot_denoiser(K: int, token: int) -> FnDenoiser:
    vocab = Vocab(K)
    probs = np.zeros(vocab.size)
    probs[token] = 1.0
    return FnDenoiser(vocab, lambda z, t: probs.copy())


def random_simplex(vocab: Vocab, rng) -> np.ndarray:
    raw = rng.random(vocab.K) + 1e-3
    pred = np.zeros(vocab.size)
    pred[:vocab.K] = raw / raw.sum()
    return pred


@pytest.fixture
def rng():
    return np.random.default_rng(0)
