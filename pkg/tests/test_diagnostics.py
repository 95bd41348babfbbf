import math

import numpy as np
import pytest

from conftest import brute_gamma, random_model
from hmmtopo.core import GmmEmission, HmmModel
from hmmtopo.corpus import FeatureSequence, SyntheticSpec, Utterance, sample_corpus
from hmmtopo.diagnostics import DiagnosticError, ideal_path, imbalance_coefficients, std_ratio
from hmmtopo.training import TrainingConfig, train_baseline


def _full(n, emissions, label="f"):
    trans = np.zeros((n + 2, n + 2))
    trans[0, 1:n + 1] = 1 / n
    trans[1:n + 1, 1:n + 2] = 1 / (n + 1)
    return HmmModel(label, trans, emissions)


def test_equiprobable_rows_give_zero_alpha(rng):
    ems = [GmmEmission([1.0], [[float(k)]], [[1.0]]) for k in range(3)]
    u = Utterance("u", FeatureSequence(rng.normal(size=(20, 1))), ("f",))
    rep = imbalance_coefficients({"f": _full(3, ems)}, [u])
    assert np.all(rep.ln_alpha == 0.0) and rep.var_ln_alpha == 0.0
    assert rep.var_ln_beta > 0


def test_shared_emission_gives_zero_beta(rng):
    m = random_model(rng, n_states=4, density=0.9)
    e = m.emissions[0]
    m = m.replace(emissions=[e] * 4)
    u = Utterance("u", FeatureSequence(rng.normal(size=(15, 2))), ("m",))
    rep = imbalance_coefficients({"m": m}, [u])
    assert np.all(rep.ln_beta == 0.0)


def test_ideal_path_staircase():
    trans = np.zeros((5, 5))
    trans[0, 1] = 1
    for i in (1, 2, 3):
        trans[i, i] = trans[i, i + 1] = 0.5
    m = HmmModel("s", trans, [GmmEmission([1.0], [[10.0 * k]], [[1.0]]) for k in range(3)])
    x = np.array([[0.0], [0.0], [10.0], [20.0], [20.0]])
    path = ideal_path({"s": m}, Utterance("u", FeatureSequence(x), ("s",)))
    assert [p[2] for p in path] == [1, 1, 2, 3, 3]
    assert {p[1] for p in path} == {"s"}


def test_single_state_path_is_constant(rng):
    trans = np.zeros((3, 3))
    trans[0, 1] = 1.0
    trans[1, 1:] = 0.5
    m = HmmModel("one", trans, [GmmEmission([1.0], [[0.0]], [[1.0]])])
    path = ideal_path({"one": m}, Utterance("u", FeatureSequence(rng.normal(size=(6, 1))), ("one",)))
    assert path == [(0, "one", 1)] * 6


def test_samples_stay_on_support_and_ignore_order(rng):
    models = {f"m{k}": random_model(rng, n_states=3, label=f"m{k}", density=0.9) for k in range(2)}
    utts = [Utterance(f"u{k}", FeatureSequence(rng.normal(size=(12, 2))), (f"m{k % 2}", f"m{(k + 1) % 2}"))
            for k in range(6)]
    a = imbalance_coefficients(models, utts)
    b = imbalance_coefficients(models, utts[::-1])
    assert np.all(np.isfinite(a.ln_alpha)) and np.all(np.isfinite(a.ln_beta))
    assert a.var_ln_alpha == pytest.approx(b.var_ln_alpha, rel=1e-12)
    assert a.var_ln_beta == pytest.approx(b.var_ln_beta, rel=1e-12)


def test_ideal_path_is_posterior_argmax(rng):
    for _ in range(10):
        m = random_model(rng, n_states=3)
        x = rng.normal(size=(5, 2))
        if not math.isfinite(m.min_path_length()) or m.min_path_length() > 5:
            continue
        try:
            path = ideal_path({"m": m}, Utterance("u", FeatureSequence(x), ("m",)))
        except Exception:
            continue
        g = brute_gamma(m, x)
        for t, (_, _, s) in enumerate(path):
            assert g[t, s - 1] == pytest.approx(g[t].max(), abs=1e-9)


def test_reference_magnitudes():
    # 0.80 vs 193.24 are the published variances on a real speech task
    assert std_ratio(0.80, 193.24) == pytest.approx(4.4e5, rel=0.02)
    assert std_ratio(1.0, 1.0) == 1.0


def test_no_competitors_is_an_error():
    trans = np.zeros((3, 3))
    trans[0, 1] = trans[1, 2] = 1.0
    m = HmmModel("one", trans, [GmmEmission([1.0], [[0.0]], [[1.0]])])
    with pytest.raises(DiagnosticError):
        imbalance_coefficients({"one": m}, [Utterance("u", FeatureSequence([[0.0]]), ("one",))])


def test_trained_system_is_imbalanced():
    corpus = sample_corpus(SyntheticSpec(vocab_size=3, n_utterances=60, seed=1))
    models = train_baseline(corpus.utterances, TrainingConfig(max_iterations=5)).models
    rep = imbalance_coefficients(models, corpus.utterances)
    assert rep.var_ln_beta > 10 * rep.var_ln_alpha
    assert rep.n_samples == rep.ln_alpha.size == rep.ln_beta.size
    assert rep.samples_csv().count("\n") == rep.n_samples + 1
