import math

import numpy as np
import pytest

from conftest import brute_viterbi, random_model
from hmmtopo.core import GmmEmission, HmmModel, UsageError
from hmmtopo.corpus import SyntheticSpec, sample_corpus
from hmmtopo.decoding import (
    ClassificationError,
    DecodeResult,
    RecognitionNetwork,
    build_network,
    classify_isolated,
    decode_corpus,
    rescore_path,
    token_decode,
    write_decodes,
)
from hmmtopo.topology import prune


def _lr(label, means, self_loop=0.6):
    n = len(means)
    trans = np.zeros((n + 2, n + 2))
    trans[0, 1] = 1.0
    for i in range(1, n + 1):
        trans[i, i] = self_loop
        trans[i, i + 1] = 1 - self_loop
    return HmmModel(label, trans, [GmmEmission([1.0], [[m]], [[1.0]]) for m in means])


def test_network_shapes():
    a, b = _lr("a", [0.0, 1.0]), _lr("b", [5.0])
    iso = RecognitionNetwork([a, b])
    assert iso.n_states == 3 and list(iso.state_model) == [0, 0, 1]
    assert not iso.is_loop.any()
    loop = RecognitionNetwork([a, b], "loop", insertion_penalty=-2.0)
    # exits: a.2 and b.1; starts: a.1 and b.1
    assert loop.is_loop.sum() == 4
    k = np.flatnonzero(loop.is_loop & (loop.graph.src == 1) & (loop.graph.dst == 2))
    assert loop.graph.lp[k[0]] == pytest.approx(math.log(0.4) - 2.0 + 0.0)
    with pytest.raises(UsageError):
        RecognitionNetwork([a, a])
    with pytest.raises(UsageError):
        RecognitionNetwork([a], "grammar")


def test_token_decode_matches_enumeration(rng):
    for _ in range(60):
        m = random_model(rng, n_states=int(rng.integers(1, 5)), n_comp=2, dim=2)
        x = rng.normal(size=(int(rng.integers(1, 7)), 2))
        path, best = brute_viterbi(m, x)
        r = token_decode(RecognitionNetwork([m]), x)
        if path is None:
            assert r.failed and r.score == -math.inf
            continue
        assert r.score == pytest.approx(best, abs=1e-10)
        assert tuple(int(s) for s in r.path[:, 1]) == path


def test_tie_rule_on_symmetric_model():
    # two identical branches: every path ties, the rule picks the smallest from the last frame back
    trans = np.zeros((4, 4))
    trans[0, [1, 2]] = 0.5
    trans[1, [1, 2, 3]] = 1 / 3
    trans[2, [1, 2, 3]] = 1 / 3
    em = GmmEmission([1.0], [[0.0]], [[1.0]])
    m = HmmModel("s", trans, [em, em])
    r = token_decode(RecognitionNetwork([m]), np.zeros((4, 1)))
    assert tuple(r.path[:, 1]) == brute_viterbi(m, np.zeros((4, 1)))[0] == (1, 1, 1, 1)


def test_well_separated_path():
    m = _lr("a", [0.0, 10.0, 20.0])
    x = np.array([[0.1], [-0.2], [9.8], [20.3], [19.9]])
    r = token_decode(RecognitionNetwork([m]), x)
    assert list(r.path[:, 1]) == [1, 1, 2, 3, 3]
    assert r.transcript == ("a",) and r.word_starts == (0,)


def test_loop_decode_segments_words():
    a, b = _lr("a", [0.0]), _lr("b", [10.0])
    x = np.array([[0.0], [0.1], [10.0], [9.9], [0.2]])
    r = token_decode(RecognitionNetwork([a, b], "loop"), x)
    assert r.transcript == ("a", "b", "a") and r.word_starts == (0, 2, 4)
    assert rescore_path(RecognitionNetwork([a, b], "loop"), r, x) == pytest.approx(r.score, abs=1e-9)


def test_loop_with_one_model_repeats_words():
    a = _lr("a", [0.0])
    net = RecognitionNetwork([a], "loop")
    assert net.is_loop.sum() == 1 and net.graph.src[net.is_loop][0] == net.graph.dst[net.is_loop][0]
    r = token_decode(RecognitionNetwork([a], "loop", insertion_penalty=5.0), np.zeros((3, 1)))
    assert r.transcript == ("a", "a", "a")


def test_isolated_decode_picks_the_generating_model():
    corpus = sample_corpus(SyntheticSpec(vocab_size=2, n_utterances=20, words_min=1, words_max=1, spread=8, seed=1))
    net = RecognitionNetwork(list(corpus.models.values()))
    for u in corpus.utterances:
        assert token_decode(net, u.features).transcript == u.transcript


def test_infeasible_decode_fails_cleanly():
    r = token_decode(RecognitionNetwork([_lr("a", [0.0, 1.0, 2.0])]), np.zeros((2, 1)))
    assert r.failed and r.path is None and r.transcript == ()


def test_score_decomposes_over_path(rng):
    for _ in range(20):
        ms = [random_model(rng, n_states=3, n_comp=2, dim=2, label=f"m{k}") for k in range(3)]
        net = RecognitionNetwork(ms, "loop", insertion_penalty=-1.5)
        x = rng.normal(size=(12, 2))
        r = token_decode(net, x)
        assert rescore_path(net, r, x) == pytest.approx(r.score, abs=1e-9)


def test_rescore_rejects_pruned_edges():
    m = _lr("a", [0.0, 1.0])
    fake = DecodeResult(("a",), np.array([[0, 2], [0, 1]]), (0,), 0.0)
    with pytest.raises(ValueError):
        rescore_path(RecognitionNetwork([m]), fake, np.zeros((2, 1)))


def test_pruned_models_decode_inside_support():
    corpus = sample_corpus(SyntheticSpec(vocab_size=3, topology="sparse", n_utterances=30, seed=9))
    for eps in (0.1, 0.3, 0.5):
        models = [prune(m, eps) for m in corpus.models.values()]
        net = RecognitionNetwork(models, "loop")
        for u, r in zip(corpus.utterances, decode_corpus(net, corpus.utterances)):
            if not r.failed:
                rescore_path(net, r, u.features.frames)


def test_classify_isolated():
    a = _lr("a", [0.0, 1.0])
    x = np.zeros((3, 1))
    label, scores = classify_isolated([a], x)
    assert label == "a" and set(scores) == {"a"}
    twin = a.replace(label="0twin")
    assert classify_isolated([a, twin], x)[0] == "0twin"
    assert classify_isolated([twin, a], x)[0] == "0twin"
    with pytest.raises(ClassificationError):
        classify_isolated([_lr("c", [0.0] * 5)], x)


def test_classify_is_permutation_invariant(rng):
    ms = [random_model(rng, n_states=3, label=f"m{k}") for k in range(4)]
    x = rng.normal(size=(8, 2))
    assert classify_isolated(ms, x) == classify_isolated(ms[::-1], x)


def test_classify_separated_classes():
    corpus = sample_corpus(SyntheticSpec(vocab_size=5, n_utterances=500, words_min=1, words_max=1, spread=6, seed=4))
    models = corpus.models
    hits = sum(classify_isolated(models, u.features)[0] == u.transcript[0] for u in corpus.utterances)
    assert hits / 500 >= 0.99


def test_decode_corpus_is_deterministic():
    corpus = sample_corpus(SyntheticSpec(vocab_size=3, n_utterances=40, seed=2, noise=0.5))
    net = build_network(corpus.models, "loop")
    a = decode_corpus(net, corpus.utterances)
    b = decode_corpus(net, corpus.utterances, jobs=4)
    assert [r.key() for r in a] == [r.key() for r in b]


def test_write_decodes(tmp_path):
    a = _lr("a", [0.0])
    net = RecognitionNetwork([a])
    r = token_decode(net, np.zeros((2, 1)))
    write_decodes(tmp_path / "d.tsv", ["u1"], [r], net, dump_path=True)
    line = (tmp_path / "d.tsv").read_text().strip().split("\t")
    assert line[:2] == ["u1", "a"] and float(line[2]) == r.score
    assert (tmp_path / "d.tsv.path").read_text() == "u1\ta:1 a:1\n"
