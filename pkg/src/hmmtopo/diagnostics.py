"""Transition vs. emission discriminability along forward-backward paths.

For every step s(t) -> s(t+1) = i of an utterance's ideal path and every
competitor k != i reachable from s(t), two log ratios are recorded::

    ln alpha = ln a(s(t) -> k) - ln a(s(t) -> i)      transition ratio
    ln beta  = ln b_i(O_t+1)   - ln b_k(O_t+1)        emission ratio

State i is preferred over k when ln beta > ln alpha, so the spread of
each quantity measures how much it can sway the decision.  Variances are
population variances.  The linear-domain standard-deviation ratio is
reported as exp(sd(ln beta) - sd(ln alpha)): the ratio of the typical
multiplicative deviations of beta and alpha.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import HmmError, HmmModel
from .corpus import Utterance
from .training import AlignmentInfeasible, Composite, ModelIndex, _frames, _run_forward_backward


class DiagnosticError(HmmError):
    pass


@dataclass
class ImbalanceReport:
    ln_alpha: np.ndarray
    ln_beta: np.ndarray
    var_ln_alpha: float
    var_ln_beta: float
    std_ratio: float
    n_samples: int
    infeasible_steps: int = 0
    skipped_utterances: int = 0

    def text(self) -> str:
        return (
            f"samples: {self.n_samples}\n"
            f"variance ln(alpha): {self.var_ln_alpha:.6f}\n"
            f"variance ln(beta): {self.var_ln_beta:.6f}\n"
            f"linear std ratio exp(sd ln beta - sd ln alpha): {self.std_ratio:.6g}\n"
            f"infeasible path steps skipped: {self.infeasible_steps}\n"
            f"utterances skipped: {self.skipped_utterances}\n"
        )

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ln_alpha", "ln_beta"])
        for a, b in zip(self.ln_alpha, self.ln_beta):
            w.writerow([repr(float(a)), repr(float(b))])
        return buf.getvalue()


def std_ratio(var_ln_alpha: float, var_ln_beta: float) -> float:
    return math.exp(math.sqrt(var_ln_beta) - math.sqrt(var_ln_alpha))


def _ideal(index: ModelIndex, transcript, frames):
    comp = Composite(index, transcript)
    x = _frames(frames)
    log_b = index.table.log_densities(x)[:, comp.table_state]
    gamma, _, _ = _run_forward_backward(comp, log_b)
    return comp, log_b, np.argmax(gamma, axis=1)


def ideal_path(models: Mapping[str, HmmModel], utterance: Utterance) -> list[tuple[int, str, int]]:
    """Per-frame argmax of the state posterior (ties: lowest state), as
    (word position, label, 1-based state)."""
    index = ModelIndex(dict(models))
    comp, _, path = _ideal(index, utterance.transcript, utterance.features.frames)
    return [(int(comp.position[s]), utterance.transcript[comp.position[s]], int(comp.local[s])) for s in path]


def imbalance_coefficients(models: Mapping[str, HmmModel], utterances: Sequence[Utterance]) -> ImbalanceReport:
    index = ModelIndex(dict(models))
    la, lb = [], []
    infeasible = skipped = 0
    for u in utterances:
        try:
            comp, log_b, path = _ideal(index, u.transcript, u.features.frames)
        except AlignmentInfeasible:
            skipped += 1
            continue
        g = comp.graph
        for t in range(len(path) - 1):
            s, i = path[t], path[t + 1]
            lo, hi = g.out_ptr[s], g.out_ptr[s + 1]
            targets, lps = g.out_dst[lo:hi], g.out_lp[lo:hi]
            hit = np.flatnonzero(targets == i)
            if hit.size == 0:
                infeasible += 1
                continue
            lp_i = lps[hit[0]]
            rivals = targets != i
            la.append(lps[rivals] - lp_i)
            lb.append(log_b[t + 1, i] - log_b[t + 1, targets[rivals]])
    ln_alpha = np.concatenate(la) if la else np.zeros(0)
    ln_beta = np.concatenate(lb) if lb else np.zeros(0)
    if ln_alpha.size == 0:
        raise DiagnosticError("no path step had a competing transition")
    va, vb = float(np.var(ln_alpha)), float(np.var(ln_beta))
    return ImbalanceReport(ln_alpha, ln_beta, va, vb, std_ratio(va, vb), ln_alpha.size, infeasible, skipped)
