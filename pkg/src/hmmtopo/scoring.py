"""Levenshtein alignment of label sequences and corpus word error rate."""
from __future__ import annotations

import csv
import io
import itertools
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import _kernels
from .core import UsageError


class AlignmentCounts(NamedTuple):
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    def __add__(self, other: AlignmentCounts) -> AlignmentCounts:  # type: ignore[override]
        return AlignmentCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_length + other.ref_length,
        )

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(ref: Sequence, hyp: Sequence) -> AlignmentCounts:
    """Minimum edit distance alignment with unit costs.

    Among equal-cost alignments the traceback prefers, at every cell,
    match/substitution, then insertion, then deletion.
    """
    codes: dict = {}
    seq = [codes.setdefault(x, len(codes)) for x in itertools.chain(ref, hyp)]
    # bytes are the cheapest buffer to hand to the kernel
    buf = bytes(seq) if len(codes) <= 256 else np.array(seq, dtype=np.int64)
    s, dl, ins = _kernels.edit_counts(buf, len(ref))
    return AlignmentCounts(s, dl, ins, len(ref))


def wer(counts) -> float:
    """(S + D + I) / N over an ``AlignmentCounts`` or pooled over (ref, hyp) pairs."""
    if not isinstance(counts, AlignmentCounts):
        counts = score_corpus(counts)
    if counts.ref_length == 0:
        raise UsageError("WER is undefined for an empty reference")
    return counts.errors / counts.ref_length


def score_corpus(pairs: Iterable[tuple[Sequence, Sequence]]) -> AlignmentCounts:
    total = AlignmentCounts()
    for ref, hyp in pairs:
        total = total + align(ref, hyp)
    return total


def accuracy(counts: AlignmentCounts) -> float:
    return 1.0 - wer(counts)


def report_text(counts: AlignmentCounts) -> str:
    return (
        f"N={counts.ref_length} S={counts.substitutions} D={counts.deletions} I={counts.insertions}\n"
        f"WER={wer(counts):.6f} accuracy={accuracy(counts):.6f}\n"
    )


def report_csv(counts: AlignmentCounts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "S", "D", "I", "wer", "accuracy"])
    w.writerow([counts.ref_length, counts.substitutions, counts.deletions, counts.insertions,
                repr(wer(counts)), repr(accuracy(counts))])
    return buf.getvalue()
