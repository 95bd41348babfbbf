import functools
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmtopo.core import UsageError
from hmmtopo.scoring import AlignmentCounts, accuracy, align, report_csv, score_corpus, wer


def edit_distance(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j - 1) + (a[i - 1] != b[j - 1]), d(i - 1, j) + 1, d(i, j - 1) + 1)

    return d(len(a), len(b))


def test_examples():
    assert align("abc", "abc") == AlignmentCounts(0, 0, 0, 3)
    assert align("abc", "axc") == AlignmentCounts(1, 0, 0, 3)
    assert align("abc", "ac") == AlignmentCounts(0, 1, 0, 3)
    assert align("ac", "abc") == AlignmentCounts(0, 0, 1, 2)
    assert align("", "ab") == AlignmentCounts(0, 0, 2, 0)
    assert align("ab", "") == AlignmentCounts(0, 2, 0, 2)
    assert align(["one", "two"], ["two"]).errors == 1


def test_exhaustive_small_alphabet():
    seqs = [s for n in range(4) for s in itertools.product("abc", repeat=n)]
    for a in seqs:
        for b in seqs:
            c = align(a, b)
            assert c.errors == edit_distance(a, b)
            assert len(a) - c.deletions == len(b) - c.insertions


labels = st.lists(st.sampled_from("abcd"), max_size=8)


@given(labels, labels)
@settings(max_examples=200, deadline=None)
def test_swapping_roles_swaps_insertions_and_deletions(a, b):
    x, y = align(a, b), align(b, a)
    assert x.errors == y.errors
    # equal-cost alignments may split S/D/I differently, but totals agree
    assert x.errors == edit_distance(a, b)
    assert x.substitutions + x.deletions <= len(a) and x.substitutions + x.insertions <= len(b)


@given(labels)
def test_identity_has_no_errors(a):
    assert align(a, a).errors == 0


def test_wer():
    assert wer(align("abc", "abd")) == pytest.approx(1 / 3)
    assert wer(align("a", "abb")) == 2.0
    assert wer(align("a", "bcd")) == 3.0
    with pytest.raises(UsageError):
        wer(AlignmentCounts())
    pooled = score_corpus([("ab", "ab"), ("abcd", "")])
    assert wer(pooled) == pytest.approx(4 / 6)
    assert accuracy(pooled) == pytest.approx(1 - 4 / 6)


def test_report_csv():
    text = report_csv(align("abc", "abd"))
    assert text.splitlines()[0] == "N,S,D,I,wer,accuracy"
    assert text.splitlines()[1].startswith("3,1,0,0,")
