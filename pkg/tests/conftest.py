import itertools
import math

import numpy as np
import pytest

from hmmtopo.core import GmmEmission, HmmModel, gmm_log_density, log_sum_exp


def random_model(rng, n_states=3, n_comp=1, dim=2, label="m", density=0.6, spread=1.5):
    """Random valid model with an arbitrary (not left-to-right) support."""
    n = n_states
    while True:
        mask = rng.random((n + 2, n + 2)) < density
        mask[:, 0] = False
        mask[n + 1, :] = False
        mask[0, 0] = mask[0, n + 1] = False
        mask[0, 1 + rng.integers(n)] = True
        for i in range(1, n + 1):
            if not mask[i].any():
                mask[i, 1 + rng.integers(n + 1)] = True
        probs = np.where(mask, rng.uniform(0.05, 1.0, mask.shape), 0.0)
        rows = probs.sum(axis=1) > 0
        probs[rows] /= probs[rows].sum(axis=1, keepdims=True)
        ems = []
        for _ in range(n):
            m = int(rng.integers(1, n_comp + 1))
            w = rng.uniform(0.2, 1.0, m)
            ems.append(GmmEmission(w / w.sum(), rng.normal(0, spread, (m, dim)), rng.uniform(0.3, 2.0, (m, dim))))
        model = HmmModel(label, probs, ems)
        if math.isfinite(model.min_path_length()):
            return model


def path_scores(model, frames):
    """Every emitting-state path of len(frames) with its joint log score,
    evaluated term by term from the model parameters."""
    T = len(frames)
    lt = model.log_trans
    dens = [[gmm_log_density(e, x) for e in model.emissions] for x in frames]
    out = []
    for path in itertools.product(range(1, model.n_states + 1), repeat=T):
        s = lt[0, path[0]] + dens[0][path[0] - 1]
        for t in range(1, T):
            s += lt[path[t - 1], path[t]] + dens[t][path[t] - 1]
        s += lt[path[-1], model.exit]
        out.append((path, s))
    return out


def brute_loglik(model, frames):
    return log_sum_exp([s for _, s in path_scores(model, frames)])


def brute_gamma(model, frames):
    scores = path_scores(model, frames)
    ll = log_sum_exp([s for _, s in scores])
    gamma = np.zeros((len(frames), model.n_states))
    for path, s in scores:
        if math.isfinite(s):
            p = math.exp(s - ll)
            for t, k in enumerate(path):
                gamma[t, k - 1] += p
    return gamma


def brute_viterbi(model, frames):
    """Best path; among paths within 1e-12 of the best score the one that is
    smallest when compared from the last frame backwards."""
    scores = path_scores(model, frames)
    best = max(s for _, s in scores)
    if not math.isfinite(best):
        return None, best
    tied = [p for p, s in scores if s >= best - 1e-12]
    return min(tied, key=lambda p: p[::-1]), best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
