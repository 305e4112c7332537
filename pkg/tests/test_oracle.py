import numpy as np
import pytest

from conftest import FnDenoiser, uniform_denoiser
from scdd.forward import Vocab
from scdd.oracle import (MarkovSource, backward_chain_matrices,
                         brute_posterior, exact_oracle_ppl,
                         exact_single_token_nll,
                         exhaustive_single_token_nelbo, favored_next_source,
                         finite_diff_grad, generate_corpus,
                         gidd_equivalence_check, mdlm_equivalence_check,
                         random_table_predictor, rank_by_elbo,
                         uniform_source)
from scdd.backward import true_posterior
from scdd.denoiser import DenoiserParams
from scdd.schedule import (GIDD_ALIGNED, MASK_ONLY, NoiseSchedule, discretize,
                           eval_schedule)

V4 = Vocab(4)


def test_brute_posterior_matches_closed_form(rng):
    vocab = Vocab(6)
    sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.3)
    for _ in range(50):
        s = float(rng.uniform(0.0, 0.9))
        t = float(rng.uniform(s + 0.02, 0.98))
        point_s, point_t = eval_schedule(sched, s), eval_schedule(sched, t)
        for x in range(vocab.K):
            for z_t in range(vocab.size):
                closed = true_posterior(point_s, point_t, z_t, x, vocab)
                brute = brute_posterior(point_s, point_t, z_t, x, vocab)
                assert np.abs(closed - brute).max() <= 1e-12


def test_brute_posterior_mask_branch_example():
    from scdd.schedule import SchedulePoint
    ps = SchedulePoint(0.2, 1.0, 0.6)
    pt = SchedulePoint(0.5, 1.0, 0.4)
    probs = brute_posterior(ps, pt, V4.mask_id, 0, V4)
    assert np.allclose(probs, [1 / 3, 0, 0, 0, 2 / 3], atol=1e-12)


def test_brute_posterior_null_event_raises():
    from scdd.schedule import SchedulePoint
    ps = SchedulePoint(0.2, 1.0, 0.9)
    pt = SchedulePoint(0.5, 1.0, 0.6)
    with pytest.raises(ValueError):
        brute_posterior(ps, pt, 2, 0, V4)  # foreign token under mask-only


def test_exact_nll_uniform_denoiser_symmetry():
    den = uniform_denoiser(4)
    grid = discretize(NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2), 8)
    predict = lambda z, t: den.predict(np.array([z]), t)[0]
    mats, recovery = backward_chain_matrices(predict, grid, V4)
    total = 0.0
    for x in range(4):
        nll = exact_single_token_nll(mats, recovery, x)
        assert abs(nll - np.log(4.0)) <= 1e-10
        total += np.exp(-nll)
    assert abs(total - 1.0) <= 1e-10


def test_exact_nll_single_step_hand_product():
    # one-step mask-only chain: the emitted token is drawn straight from the
    # predictor at the all-mask state, so the chained probability is its mass
    vocab = V4
    grid = discretize(NoiseSchedule(kind=MASK_ONLY), 1)
    mask_row = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
    other = np.array([0.25, 0.25, 0.25, 0.25, 0.0])

    def predict(z, t):
        return mask_row.copy() if z == vocab.mask_id else other.copy()

    mats, recovery = backward_chain_matrices(predict, grid, vocab)
    # independent by-hand chain: start at [mask], one backward step, recover
    start = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
    by_hand = start @ mats[0] @ recovery
    for x in range(4):
        nll = exact_single_token_nll(mats, recovery, x)
        assert abs(nll - (-np.log(mask_row[x]))) <= 1e-12
        assert abs(by_hand[x] - mask_row[x]) <= 1e-12


def test_exact_nll_rejects_nonstochastic_matrix():
    bad = np.eye(5)
    bad[0, 0] = 0.7
    with pytest.raises(ValueError):
        exact_single_token_nll([bad], np.eye(5), 0)


def test_exhaustive_nelbo_bounds_exact_nll(rng):
    vocab = V4
    sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    for T in (2, 4):
        grid = discretize(sched, T)
        for _ in range(5):
            predict = random_table_predictor(grid, vocab, rng)
            mats, recovery = backward_chain_matrices(predict, grid, vocab)
            for x in range(vocab.K):
                nelbo = exhaustive_single_token_nelbo(predict, grid, vocab,
                                                      x, True)
                nll = exact_single_token_nll(mats, recovery, x)
                assert nelbo - nll >= -1e-9


def test_mdlm_equivalence_small():
    rng = np.random.default_rng(1)
    dev = mdlm_equivalence_check(NoiseSchedule(kind=MASK_ONLY), 2000, rng)
    assert dev <= 1e-10


def test_mdlm_equivalence_posterior_single_config_exact():
    from scdd.schedule import SchedulePoint
    from scdd.oracle import _mdlm_posterior
    ps = SchedulePoint(0.2, 1.0, 0.6)
    pt = SchedulePoint(0.5, 1.0, 0.4)
    clean = np.zeros(5)
    clean[0] = 1.0
    ours = true_posterior(ps, pt, V4.mask_id, 0, V4)
    theirs = _mdlm_posterior(0.6, 0.4, V4.mask_id, clean, V4)
    assert np.array_equal(ours, theirs)


def test_mdlm_equivalence_requires_mask_only():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        mdlm_equivalence_check(NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.1),
                               10, rng)


def test_gidd_equivalence_small():
    rng = np.random.default_rng(2)
    dev = gidd_equivalence_check(NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2),
                                 200, rng)
    assert dev <= 1e-12


def test_gidd_equivalence_mask_only_degenerates_to_zero():
    rng = np.random.default_rng(2)
    dev = gidd_equivalence_check(NoiseSchedule(kind=MASK_ONLY), 50, rng)
    assert dev <= 1e-15


def test_markov_source_validation():
    with pytest.raises(ValueError):
        MarkovSource(K=2, init=np.array([0.6, 0.6]),
                     trans=np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        MarkovSource(K=2, init=np.array([0.5, 0.5]),
                     trans=np.array([[0.9, 0.2], [0.5, 0.5]]))


def test_markov_source_entropy_known_chain():
    trans = np.array([[0.9, 0.1], [0.2, 0.8]])
    src = MarkovSource(K=2, init=np.array([0.5, 0.5]), trans=trans)
    pi = np.array([2 / 3, 1 / 3])
    assert np.abs(src.stationary - pi).max() <= 1e-10
    def h(row):
        return -(row * np.log(row)).sum()
    expected = pi[0] * h(trans[0]) + pi[1] * h(trans[1])
    assert abs(src.entropy_rate - expected) <= 1e-10


def test_deterministic_chain_scores_itself_perfectly(rng):
    K = 3
    trans = np.zeros((K, K))
    for i in range(K):
        trans[i, (i + 1) % K] = 1.0
    src = MarkovSource(K=K, init=np.array([1.0, 0.0, 0.0]), trans=trans)
    seqs = generate_corpus(src, 6, 20, rng)
    assert exact_oracle_ppl(src, seqs) == pytest.approx(1.0)


def test_uniform_source_ppl_is_vocab_size(rng):
    src = uniform_source(4)
    seqs = generate_corpus(src, 5, 50, rng)
    assert exact_oracle_ppl(src, seqs) == pytest.approx(4.0)


def test_generic_source_ppl_concentrates(rng):
    src = favored_next_source(8, 3.0)
    L = 16
    seqs = generate_corpus(src, L, 10000, rng)
    per_seq = []
    for seq in seqs:
        logp = np.log(src.init[seq[0]])
        logp += np.log(src.trans[seq[:-1], seq[1:]]).sum()
        per_seq.append(-logp / L)
    expected = (-(src.init * np.log(src.init)).sum()
                + (L - 1) * src.entropy_rate) / L
    mean = float(np.mean(per_seq))
    sem = float(np.std(per_seq, ddof=1) / np.sqrt(len(per_seq)))
    assert abs(mean - expected) <= 3 * sem
    assert abs(np.log(exact_oracle_ppl(src, seqs)) - mean) <= 1e-12


def test_exact_oracle_ppl_rejects_out_of_range():
    src = uniform_source(4)
    with pytest.raises(ValueError):
        exact_oracle_ppl(src, [np.array([0, 4])])


def test_finite_diff_richardson_consistency(rng):
    vocab = Vocab(4)
    sched = NoiseSchedule(kind=GIDD_ALIGNED, p_u=0.2)
    grid = discretize(sched, 8)
    params = DenoiserParams.init(vocab, 4, 6, rng)
    batch = rng.integers(0, 4, size=(3, 4))
    coarse = finite_diff_grad(params, grid, batch, vocab, 1e-5, 5, 99,
                              np.random.default_rng(1))
    fine = finite_diff_grad(params, grid, batch, vocab, 1e-6, 5, 99,
                            np.random.default_rng(1))
    for name in coarse:
        for (c1, v1), (c2, v2) in zip(coarse[name], fine[name]):
            assert c1 == c2
            assert abs(v1 - v2) <= 1e-5


def test_finite_diff_epsilon_window():
    vocab = Vocab(4)
    grid = discretize(NoiseSchedule(kind=MASK_ONLY), 4)
    params = DenoiserParams.init(vocab, 4, 6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        finite_diff_grad(params, grid, np.zeros((1, 2), dtype=np.int64),
                         vocab, 1e-2, 2, 0, np.random.default_rng(0))


def test_rank_by_elbo_trivial_cases(rng):
    den = uniform_denoiser(4)
    grid = discretize(NoiseSchedule(kind=MASK_ONLY), 8)
    prompt = np.array([1])
    assert rank_by_elbo(den, grid, prompt, [np.array([2])], 4, rng) == 0
    assert rank_by_elbo(den, grid, prompt,
                        [np.array([2]), np.array([2])], 4, rng) == 0
    with pytest.raises(ValueError):
        rank_by_elbo(den, grid, prompt, [], 4, rng)


def test_rank_by_elbo_prefers_well_modeled_candidate(rng):
    # the predictor loves token 2 and nothing else: a candidate made of 2s
    # scores a far better bound than one made of 0s
    vocab = Vocab(4)
    peaked = np.array([0.01, 0.01, 0.97, 0.01, 0.0])
    den = FnDenoiser(vocab, lambda z, t: peaked.copy())
    grid = discretize(NoiseSchedule(kind=MASK_ONLY), 16)
    prompt = np.array([2, 2])
    good = np.array([2, 2, 2])
    bad = np.array([0, 0, 0])
    assert rank_by_elbo(den, grid, prompt, [bad, good], 10, rng) == 1
    assert rank_by_elbo(den, grid, prompt, [good, bad], 10, rng) == 0
