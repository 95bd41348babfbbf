import math

import numpy as np
import pytest

from conftest import brute_gamma, brute_loglik, random_model
from hmmtopo.core import Gaussian, GmmEmission, HmmModel, gmm_log_density, validate_model
from hmmtopo.corpus import FeatureSequence, SyntheticSpec, Utterance, sample_corpus
from hmmtopo.training import (
    AlignmentInfeasible,
    ModelIndex,
    TrainingConfig,
    accumulate,
    baum_welch_train,
    flat_init,
    floor_weights,
    forward_backward,
    left_to_right_skeleton,
    maximize,
    split_mixtures,
    train_baseline,
    variance_floor,
)


def _lr(n, self_loop=0.5, dim=1, means=None):
    trans = np.zeros((n + 2, n + 2))
    trans[0, 1] = 1.0
    for i in range(1, n + 1):
        trans[i, i] = self_loop
        trans[i, i + 1] = 1 - self_loop
    means = np.zeros((n, dim)) if means is None else np.asarray(means, float)
    return HmmModel("lr", trans, [GmmEmission.single(Gaussian(mu, np.ones(dim))) for mu in means])


def test_flat_init_uses_global_statistics():
    frames = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]])
    m = flat_init(frames, left_to_right_skeleton(3), "x")
    for e in m.emissions:
        assert np.allclose(e.means[0], [2.0, 4.0])
        assert np.allclose(e.variances[0], frames.var(axis=0))
    assert np.allclose(m.trans[1, 1:3], [0.5, 0.5])
    assert m.trans[0, 1] == 1.0
    one = flat_init(frames, left_to_right_skeleton(1), "y")
    assert one.trans[1, 1] == 0.5 and one.trans[1, 2] == 0.5


def test_single_state_gamma_is_one():
    m = _lr(1)
    post, _ = forward_backward(m, np.random.default_rng(0).normal(size=(7, 1)))
    assert np.allclose(post.gamma, 1.0)


def test_two_state_left_to_right_with_two_frames_is_forced():
    m = _lr(2)
    post, ll = forward_backward(m, np.array([[0.3], [-0.2]]))
    assert np.allclose(post.gamma, np.eye(2))
    expected = math.log(0.5) * 2 + sum(gmm_log_density(e, [x]) for e, x in zip(m.emissions, [0.3, -0.2]))
    assert ll == pytest.approx(expected, abs=1e-12)


def test_forward_backward_matches_enumeration(rng):
    for _ in range(15):
        m = random_model(rng, n_states=int(rng.integers(1, 4)), n_comp=2, dim=2)
        x = rng.normal(size=(int(rng.integers(1, 5)), 2))
        try:
            post, ll = forward_backward(m, x)
        except AlignmentInfeasible:
            assert not math.isfinite(brute_loglik(m, x))
            continue
        assert ll == pytest.approx(brute_loglik(m, x), abs=1e-9)
        assert np.allclose(post.gamma, brute_gamma(m, x), atol=1e-9)


def test_posteriors_are_consistent(rng):
    m = random_model(rng, n_states=4, n_comp=2, dim=3)
    x = rng.normal(size=(30, 3))
    post, _ = forward_backward(m, x)
    assert np.allclose(post.gamma.sum(axis=1), 1.0, atol=1e-8)
    T, S = post.gamma.shape
    out_marg = np.zeros((T - 1, S))
    in_marg = np.zeros((T - 1, S))
    np.add.at(out_marg, (slice(None), post.edge_src), post.xi)
    np.add.at(in_marg, (slice(None), post.edge_dst), post.xi)
    # every composite state either continues or leaves through the exit at the last frame only
    assert np.allclose(out_marg, post.gamma[:-1], atol=1e-8)
    assert np.allclose(in_marg, post.gamma[1:], atol=1e-8)


def test_word_sequence_posteriors():
    a, b = _lr(2, means=[[0.0], [0.0]]), _lr(1, means=[[5.0]])
    b = b.replace(label="b")
    post, _ = forward_backward([a, b], np.array([[0.0], [0.0], [5.0]]))
    assert post.states == [(0, "lr", 1), (0, "lr", 2), (1, "b", 1)]
    assert np.allclose(post.gamma, np.eye(3))


def test_too_short_utterance_is_infeasible():
    with pytest.raises(AlignmentInfeasible):
        forward_backward(_lr(3), np.zeros((2, 1)))


def _corpus(seed=0, n=60, **kw):
    return sample_corpus(SyntheticSpec(vocab_size=3, n_utterances=n, seed=seed, **kw)).utterances


def test_em_is_monotone():
    utts = _corpus(n=80)
    res = train_baseline(utts, TrainingConfig(max_iterations=8, tolerance=1e-9, mix_schedule=(1, 2)))
    for stage in {r.stage for r in res.trace}:
        lls = [r.log_likelihood for r in res.trace if r.stage == stage]
        for a, b in zip(lls, lls[1:]):
            assert b >= a - 1e-6 * abs(a)


def test_single_utterance_single_state_mean_is_closed_form():
    x = np.array([[1.0, 2.0], [3.0, -2.0], [5.0, 3.0]])
    u = Utterance("u", FeatureSequence(x), ("lr",))
    res = baum_welch_train({"lr": _lr(1, dim=2)}, [u], TrainingConfig(max_iterations=1))
    e = res.models["lr"].emissions[0]
    assert np.allclose(e.means[0], x.mean(axis=0))
    assert np.allclose(e.variances[0], x.var(axis=0))
    assert res.models["lr"].trans[1, 1] == pytest.approx(2 / 3)


def test_split_mixtures():
    m = _lr(1, dim=2).replace(emissions=[GmmEmission.single(Gaussian([1.0, -1.0], [4.0, 1.0]))])
    s = split_mixtures(m, 2)
    e = s.emissions[0]
    assert np.allclose(e.weights, [0.5, 0.5])
    assert np.allclose(e.means, [[1.4, -0.8], [0.6, -1.2]])
    assert np.allclose(e.variances, [[4.0, 1.0], [4.0, 1.0]])
    assert abs(gmm_log_density(e, [1.0, -1.0]) - gmm_log_density(m.emissions[0], [1.0, -1.0])) < math.log(2)
    four = split_mixtures(m, 4).emissions[0]
    assert four.n_components == 4 and np.allclose(four.weights.sum(), 1.0)
    assert split_mixtures(m, 1).emissions[0].n_components == 1


def test_split_heaviest_first():
    e = GmmEmission([0.3, 0.7], [[0.0], [10.0]], [[1.0], [1.0]])
    s = split_mixtures(_lr(1).replace(emissions=[e]), 3).emissions[0]
    assert np.allclose(s.weights, [0.3, 0.35, 0.35])
    assert np.allclose(s.means[:, 0], [0.0, 10.2, 9.8])


def test_floor_weights():
    w = floor_weights(np.array([1e-9, 0.5, 0.5]), 1e-6)
    assert w[0] == 1e-6 and w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(floor_weights(np.array([0.25, 0.75]), 1e-6), [0.25, 0.75])


def test_accumulator_merge_is_bit_exact():
    utts = _corpus(n=30)
    models = train_baseline(utts, TrainingConfig(max_iterations=2)).models
    index = ModelIndex(models)
    whole = accumulate(index, utts).totals()
    a = accumulate(index, utts[:13], keys=range(13))
    b = accumulate(index, utts[13:], keys=range(13, 30))
    for merged in (a.merge(b).totals(), b.merge(a).totals()):
        assert merged.ll == whole.ll
        for f in ("occ", "sum1", "sum2", "trans"):
            assert np.array_equal(getattr(merged, f), getattr(whole, f))
    threaded = accumulate(index, utts, jobs=4).totals()
    assert threaded.ll == whole.ll and np.array_equal(threaded.trans, whole.trans)
    with pytest.raises(ValueError):
        a.merge(a)


def test_m_step_output_is_valid(rng):
    utts = _corpus(n=40, seed=5)
    floor = variance_floor(utts, 1e-4)
    labels = sorted({w for u in utts for w in u.transcript})
    # start from arbitrary non-left-to-right topologies
    models = {w: random_model(rng, n_states=3, n_comp=2, dim=4, label=w, density=0.8) for w in labels}
    index = ModelIndex(models)
    acc = accumulate(index, utts)
    if acc.parts:
        for m in maximize(index, acc.totals(), floor).values():
            assert validate_model(m, floor) == []


def test_skipped_utterances_are_counted():
    utts = _corpus(n=10)
    short = Utterance("short", FeatureSequence(np.zeros((1, 4))), ("w0",))
    res = baum_welch_train(train_baseline(utts, TrainingConfig(max_iterations=1)).models, utts + [short],
                           TrainingConfig(max_iterations=2))
    assert res.skipped == 1 and all(r.skipped == 1 for r in res.trace)


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(mix_schedule=(2, 1))
    with pytest.raises(ValueError):
        TrainingConfig(tolerance=0)


def test_training_on_own_samples_is_near_stationary():
    corpus = sample_corpus(SyntheticSpec(vocab_size=2, n_utterances=300, seed=8))
    res = baum_welch_train(corpus.models, corpus.utterances, TrainingConfig(max_iterations=3, tolerance=1e-12))
    lls = [r.log_likelihood for r in res.trace]
    assert all(b >= a - 1e-6 * abs(a) for a, b in zip(lls, lls[1:]))
    for w, m in res.models.items():
        g = corpus.models[w]
        for e, ge in zip(m.emissions, g.emissions):
            assert np.all(np.abs(e.means - ge.means) < 0.2)
        assert np.max(np.abs(m.trans - g.trans)) < 0.1
