"""Flat initialisation, forward-backward and embedded Baum-Welch training."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .core import (
    WEIGHT_FLOOR,
    GmmEmission,
    HmmError,
    HmmModel,
    UsageError,
    log_sum_exp_rows,
    validate_model,
)
from .corpus import Utterance, global_stats
from .graph import EdgeGraph, EmissionTable

log = logging.getLogger(__name__)


class AlignmentInfeasible(HmmError):
    """No state path of the concatenated model can explain the utterance."""


class TrainingError(HmmError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    max_iterations: int = 20
    tolerance: float = 1e-4
    mix_schedule: tuple[int, ...] = (1,)
    var_floor_scale: float = 1e-4
    weight_floor: float = WEIGHT_FLOOR
    split_perturbation: float = 0.2
    baseline_states: int = 3

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.mix_schedule or any(m < 1 for m in self.mix_schedule):
            raise ValueError("mix_schedule must list component counts >= 1")
        if any(b < a for a, b in zip(self.mix_schedule, self.mix_schedule[1:])):
            raise ValueError("mix_schedule must be non-decreasing")
        if self.baseline_states < 1:
            raise ValueError("baseline_states must be >= 1")


def left_to_right_skeleton(n: int) -> np.ndarray:
    """Allowed-edge mask: entry->1, i->i, i->i+1, N->exit."""
    sk = np.zeros((n + 2, n + 2), dtype=bool)
    sk[0, 1] = True
    for i in range(1, n + 1):
        sk[i, i] = True
        sk[i, i + 1] = True
    return sk


def equiprobable(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1, keepdims=True)
    return np.where(mask, 1.0 / np.maximum(counts, 1), 0.0)


def flat_init(corpus, skeleton: np.ndarray, label: str) -> HmmModel:
    """Every emitting state gets the corpus-global mean and variance;
    transitions are uniform over each row of ``skeleton``."""
    if isinstance(corpus, np.ndarray):
        if corpus.ndim != 2 or corpus.shape[0] == 0:
            raise UsageError("flat_init needs a non-empty T x D frame matrix")
        mean, var = corpus.mean(axis=0), corpus.var(axis=0)
    else:
        mean, var = global_stats(list(corpus))
    skeleton = np.asarray(skeleton, dtype=bool)
    n = skeleton.shape[0] - 2
    em = GmmEmission([1.0], mean[None, :], var[None, :])
    return HmmModel(label, equiprobable(skeleton), [em] * n)


# ---------------------------------------------------------------------------
# concatenated utterance models


class ModelIndex:
    """Flat numbering of every state, component and transition slot of a model set."""

    def __init__(self, models: Mapping[str, HmmModel]):
        self.models = dict(models)
        self.labels = list(self.models)
        self.state_offset, self.slot_offset = {}, {}
        ems, s_off, t_off = [], 0, 0
        for label, m in self.models.items():
            self.state_offset[label] = s_off
            self.slot_offset[label] = t_off
            ems.extend(m.emissions)
            s_off += m.n_states
            t_off += (m.n_states + 2) ** 2
        self.table = EmissionTable(ems)
        self.n_slots = t_off

    def slot(self, label: str, i, j):
        n2 = self.models[label].n_states + 2
        return self.slot_offset[label] + np.asarray(i) * n2 + np.asarray(j)


class Composite:
    """Emitting-state graph of a transcript: word models joined exit-to-entry."""

    def __init__(self, index: ModelIndex, transcript: Sequence[str]):
        missing = [w for w in transcript if w not in index.models]
        if missing:
            raise UsageError(f"no model for labels {sorted(set(missing))}")
        if not transcript:
            raise UsageError("empty transcript")
        self.transcript = tuple(transcript)
        models = [index.models[w] for w in transcript]
        offs = np.concatenate([[0], np.cumsum([m.n_states for m in models])])
        S = int(offs[-1])
        self.n_states = S
        self.position = np.repeat(np.arange(len(models)), [m.n_states for m in models])
        self.local = np.concatenate([np.arange(1, m.n_states + 1) for m in models])
        self.table_state = np.concatenate(
            [index.state_offset[w] + np.arange(m.n_states) for w, m in zip(transcript, models)]
        )
        src, dst, lp, slot1, slot2 = [], [], [], [], []
        for p, (w, m) in enumerate(zip(transcript, models)):
            n = m.n_states
            inner = m.trans[1:n + 1, 1:n + 1] > 0
            ii, jj = np.nonzero(inner)
            src.append(offs[p] + ii)
            dst.append(offs[p] + jj)
            lp.append(m.log_trans[ii + 1, jj + 1])
            slot1.append(index.slot(w, ii + 1, jj + 1))
            slot2.append(np.full(ii.size, -1))
            if p + 1 < len(models):
                w2, m2 = transcript[p + 1], models[p + 1]
                outs = np.flatnonzero(m.trans[1:n + 1, n + 1] > 0) + 1
                ins = np.flatnonzero(m2.trans[0, 1:m2.n_states + 1] > 0) + 1
                oi, ij = np.repeat(outs, ins.size), np.tile(ins, outs.size)
                src.append(offs[p] + oi - 1)
                dst.append(offs[p + 1] + ij - 1)
                lp.append(m.log_trans[oi, n + 1] + m2.log_trans[0, ij])
                slot1.append(index.slot(w, oi, n + 1))
                slot2.append(index.slot(w2, 0, ij))
        self.graph = EdgeGraph(S, np.concatenate(src), np.concatenate(dst), np.concatenate(lp))
        self.slot1 = np.concatenate(slot1)
        self.slot2 = np.concatenate(slot2)

        first, last = models[0], models[-1]
        self.init = np.full(S, -np.inf)
        self.init[: first.n_states] = first.log_trans[0, 1:first.n_states + 1]
        self.init_slot = index.slot(transcript[0], 0, np.arange(1, first.n_states + 1))
        self.fin = np.full(S, -np.inf)
        self.fin[S - last.n_states:] = last.log_trans[1:last.n_states + 1, last.exit]
        self.fin_slot = index.slot(transcript[-1], np.arange(1, last.n_states + 1), last.exit)
        self.min_length = sum(m.min_path_length() for m in models)

        # composite-level view of mixture components
        tab = index.table
        counts = tab.ptr[self.table_state + 1] - tab.ptr[self.table_state]
        self.comp_state = np.repeat(np.arange(S), counts)
        self.comp_table = np.concatenate([np.arange(tab.ptr[s], tab.ptr[s + 1]) for s in self.table_state])


@dataclass
class Posteriors:
    """State and edge posteriors of one utterance.

    ``gamma[t, s]`` is the posterior of composite state s at frame t and
    ``xi[t, e]`` that of edge e (``edge_src[e] -> edge_dst[e]``) between
    frames t and t+1.  ``states[s]`` names each composite state as
    (word position, label, 1-based model state).
    """

    gamma: np.ndarray
    xi: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    states: list[tuple[int, str, int]]


def _run_forward_backward(comp: Composite, log_b: np.ndarray):
    T = log_b.shape[0]
    if T < comp.min_length:
        raise AlignmentInfeasible(
            f"utterance of {T} frames is shorter than the shortest path ({comp.min_length:g}) through {' '.join(comp.transcript)}"
        )
    g = comp.graph
    alpha = _kernels.forward(log_b, comp.init, g.in_ptr, g.in_src, g.in_lp)
    ll = float(log_sum_exp_rows(alpha[-1] + comp.fin))
    if not math.isfinite(ll):
        raise AlignmentInfeasible(f"no feasible alignment for {' '.join(comp.transcript)}")
    beta = _kernels.backward(log_b, comp.fin, g.out_ptr, g.out_dst, g.out_lp)
    gamma = np.exp(alpha + beta - ll)
    xi = np.exp(alpha[:-1, g.src] + g.lp[None, :] + (log_b + beta)[1:, g.dst] - ll)
    return gamma, xi, ll


def forward_backward(model, frames) -> tuple[Posteriors, float]:
    """Exact posteriors of a model, or of a word sequence of models
    concatenated exit-to-entry, given T x D frames."""
    seq = [model] if isinstance(model, HmmModel) else list(model)
    models = {}
    for m in seq:
        if models.setdefault(m.label, m) is not m:
            raise UsageError(f"two different models labelled {m.label!r}")
    index = ModelIndex(models)
    comp = Composite(index, [m.label for m in seq])
    x = _frames(frames)
    log_b = index.table.log_densities(x)[:, comp.table_state]
    gamma, xi, ll = _run_forward_backward(comp, log_b)
    states = [(int(p), seq[p].label, int(k)) for p, k in zip(comp.position, comp.local)]
    return Posteriors(gamma, xi, comp.graph.src, comp.graph.dst, states), ll


def _frames(frames) -> np.ndarray:
    x = getattr(frames, "frames", frames)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError(f"expected a non-empty T x D frame matrix, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# accumulation


@dataclass
class UttStats:
    ll: float
    occ: np.ndarray
    sum1: np.ndarray
    sum2: np.ndarray
    trans: np.ndarray

    def __add__(self, other: UttStats) -> UttStats:
        return UttStats(
            self.ll + other.ll,
            self.occ + other.occ,
            self.sum1 + other.sum1,
            self.sum2 + other.sum2,
            self.trans + other.trans,
        )


def utterance_stats(index: ModelIndex, transcript: Sequence[str], frames) -> UttStats:
    """E-step sufficient statistics of one utterance over the whole model set."""
    comp = Composite(index, transcript)
    x = _frames(frames)
    tab = index.table
    cscore = tab.component_scores(x)
    sscore = tab.state_scores(cscore)
    gamma, xi, ll = _run_forward_backward(comp, sscore[:, comp.table_state])

    ct = comp.comp_table
    post = gamma[:, comp.comp_state] * np.exp(cscore[:, ct] - sscore[:, tab.owner[ct]])
    C, D = tab.means.shape
    occ = np.zeros(C)
    sum1 = np.zeros((C, D))
    sum2 = np.zeros((C, D))
    np.add.at(occ, ct, post.sum(axis=0))
    np.add.at(sum1, ct, post.T @ x)
    np.add.at(sum2, ct, post.T @ (x * x))

    trans = np.zeros(index.n_slots)
    flow = xi.sum(axis=0)
    np.add.at(trans, comp.slot1, flow)
    cross = comp.slot2 >= 0
    np.add.at(trans, comp.slot2[cross], flow[cross])
    first = comp.init_slot.size
    np.add.at(trans, comp.init_slot, gamma[0, :first])
    np.add.at(trans, comp.fin_slot, gamma[-1, comp.n_states - comp.fin_slot.size:])
    return UttStats(ll, occ, sum1, sum2, trans)


class Accumulators:
    """Per-utterance E-step statistics keyed by utterance number.

    Totals are always summed in key order, so merging accumulators built on
    disjoint utterance sets gives bit-for-bit the same M-step input as
    accumulating their union directly, whatever the merge order.
    """

    def __init__(self):
        self.parts: dict[int, UttStats] = {}
        self.skipped: set[int] = set()

    def add(self, key: int, stats: UttStats) -> None:
        if key in self.parts or key in self.skipped:
            raise UsageError(f"utterance {key} accumulated twice")
        self.parts[key] = stats

    def skip(self, key: int) -> None:
        if key in self.parts or key in self.skipped:
            raise UsageError(f"utterance {key} accumulated twice")
        self.skipped.add(key)

    def merge(self, other: Accumulators) -> Accumulators:
        out = Accumulators()
        for acc in (self, other):
            for k, v in acc.parts.items():
                out.add(k, v)
            for k in acc.skipped:
                out.skip(k)
        return out

    def totals(self) -> UttStats:
        if not self.parts:
            raise TrainingError("no utterance could be aligned")
        keys = sorted(self.parts)
        total = self.parts[keys[0]]
        for k in keys[1:]:
            total = total + self.parts[k]
        return total

    @property
    def log_likelihood(self) -> float:
        return self.totals().ll


def accumulate(index: ModelIndex, utterances: Sequence[Utterance], jobs: int = 1,
               keys: Sequence[int] | None = None) -> Accumulators:
    keys = list(range(len(utterances))) if keys is None else list(keys)

    def work(u: Utterance):
        try:
            return utterance_stats(index, u.transcript, u.features.frames)
        except AlignmentInfeasible:
            return None

    if jobs > 1 and len(utterances) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, utterances))
    else:
        results = [work(u) for u in utterances]
    acc = Accumulators()
    for k, r in zip(keys, results):
        if r is None:
            acc.skip(k)
        else:
            acc.add(k, r)
    return acc


# ---------------------------------------------------------------------------
# M-step


def floor_weights(w: np.ndarray, floor: float) -> np.ndarray:
    """Raise weights below ``floor`` to exactly ``floor`` and rescale the rest."""
    w = np.asarray(w, dtype=np.float64) / np.sum(w)
    fixed = np.zeros(w.size, dtype=bool)
    while True:
        low = (w < floor) & ~fixed
        if not low.any():
            return w
        fixed |= low
        free = ~fixed
        if not free.any():
            return np.full(w.size, 1.0 / w.size)
        w = w.copy()
        w[fixed] = floor
        w[free] *= (1.0 - floor * fixed.sum()) / w[free].sum()


MIN_OCCUPANCY = 1e-8


def maximize(index: ModelIndex, totals: UttStats, var_floor: np.ndarray,
             weight_floor: float = WEIGHT_FLOOR) -> dict[str, HmmModel]:
    """Re-estimate every model from pooled statistics.

    Rows or components that received (almost) no posterior mass keep their
    previous parameters; the support of a row can only shrink.
    """
    out = {}
    tab = index.table
    s_global = 0
    for label, m in index.models.items():
        n2 = m.n_states + 2
        off = index.slot_offset[label]
        counts = totals.trans[off:off + n2 * n2].reshape(n2, n2)
        trans = np.array(m.trans)
        for i in range(n2 - 1):
            total = counts[i].sum()
            if total > MIN_OCCUPANCY:
                trans[i] = np.where(m.trans[i] > 0, counts[i], 0.0) / total
                trans[i] /= trans[i].sum()
        ems = []
        for k, e in enumerate(m.emissions):
            lo, hi = tab.ptr[s_global + k], tab.ptr[s_global + k + 1]
            occ = totals.occ[lo:hi]
            if occ.sum() <= MIN_OCCUPANCY:
                ems.append(e)
                continue
            means = np.array(e.means)
            var = np.array(e.variances)
            live = occ > MIN_OCCUPANCY
            means[live] = totals.sum1[lo:hi][live] / occ[live, None]
            var[live] = totals.sum2[lo:hi][live] / occ[live, None] - means[live] ** 2
            var = np.maximum(var, var_floor[None, :])
            ems.append(GmmEmission(floor_weights(occ, weight_floor), means, var))
        s_global += m.n_states
        out[label] = m.replace(trans=trans, emissions=ems)
    return out


# ---------------------------------------------------------------------------
# mixture splitting


def split_mixtures(model: HmmModel, target: int, perturbation: float = 0.2) -> HmmModel:
    """Grow every state's mixture to ``target`` components by repeatedly
    splitting its heaviest component into two half-weight copies with means
    shifted by +/- ``perturbation`` standard deviations."""
    ems = []
    for e in model.emissions:
        w, mu, var = list(e.weights), list(e.means), list(e.variances)
        while len(w) < target:
            k = int(np.argmax(w))
            shift = perturbation * np.sqrt(var[k])
            w[k] /= 2.0
            w.append(w[k])
            mu.append(mu[k] - shift)
            mu[k] = mu[k] + shift
            var.append(var[k])
        ems.append(GmmEmission(w, mu, var))
    return model.replace(emissions=ems)


# ---------------------------------------------------------------------------
# Baum-Welch driver


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    log_likelihood: float
    skipped: int
    stage: int


@dataclass
class TrainResult:
    models: dict[str, HmmModel]
    trace: list[TraceRow] = field(default_factory=list)
    skipped: int = 0


def variance_floor(utterances: Sequence[Utterance], scale: float) -> np.ndarray:
    return scale * global_stats(utterances)[1]


def baum_welch_train(models: Mapping[str, HmmModel], utterances: Sequence[Utterance], config: TrainingConfig,
                     allow_splitting: bool = False, jobs: int = 1, var_floor: np.ndarray | None = None,
                     stage_offset: int = 0) -> TrainResult:
    """Embedded re-estimation over concatenated transcript models.

    Each stage runs EM until the relative log-likelihood gain drops below
    ``config.tolerance`` or ``config.max_iterations`` is reached.  With
    ``allow_splitting`` the stages follow ``config.mix_schedule``: before
    each stage every mixture is split up to the stage's component count.
    """
    models = dict(sorted(models.items()))
    need = {w for u in utterances for w in u.transcript}
    if need - set(models):
        raise UsageError(f"no model for labels {sorted(need - set(models))}")
    if var_floor is None:
        var_floor = variance_floor(utterances, config.var_floor_scale)

    result = TrainResult(models)
    schedule = config.mix_schedule if allow_splitting else (None,)
    for stage, target in enumerate(schedule, start=stage_offset):
        if target is not None:
            models = {k: split_mixtures(m, target, config.split_perturbation) for k, m in models.items()}
        prev = None
        for _ in range(config.max_iterations):
            index = ModelIndex(models)
            acc = accumulate(index, utterances, jobs)
            if not acc.parts:
                raise TrainingError("every utterance is alignment-infeasible")
            totals = acc.totals()
            result.skipped = len(acc.skipped)
            result.trace.append(TraceRow(len(result.trace), totals.ll, len(acc.skipped), stage))
            log.debug("stage %d iter %d ll %.6f skipped %d", stage, len(result.trace), totals.ll, len(acc.skipped))
            if prev is not None and totals.ll - prev < config.tolerance * abs(prev):
                break
            models = maximize(index, totals, var_floor, config.weight_floor)
            for m in models.values():
                bad = validate_model(m, var_floor)
                if bad:
                    raise TrainingError(f"M-step produced an invalid model {m.label}: {bad[0]}")
            prev = totals.ll
        if result.skipped:
            log.warning("%d utterance(s) skipped as alignment-infeasible", result.skipped)
    result.models = models
    return result


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "total_log_likelihood", "skipped", "stage"])
        for r in trace:
            w.writerow([r.iteration, repr(r.log_likelihood), r.skipped, r.stage])


def train_baseline(utterances: Sequence[Utterance], config: TrainingConfig, labels: Sequence[str] | None = None,
                   jobs: int = 1) -> TrainResult:
    """Flat left-to-right start, then training with mixture splitting."""
    labels = sorted({w for u in utterances for w in u.transcript}) if labels is None else list(labels)
    sk = left_to_right_skeleton(config.baseline_states)
    models = {w: flat_init(utterances, sk, w) for w in labels}
    return baum_welch_train(models, utterances, config, allow_splitting=True, jobs=jobs)
