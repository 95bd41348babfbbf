"""Topology learning: flattening, threshold pruning, threshold sweep with
keep-best selection, emission feedback and the end-to-end pipeline."""
from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import HmmError, HmmModel, UsageError, reachable_from, validate_model
from .corpus import Utterance
from .decoding import MODES, build_network, decode_corpus
from .scoring import AlignmentCounts, accuracy, score_corpus
from .training import (
    TrainingConfig,
    TrainResult,
    baum_welch_train,
    equiprobable,
    train_baseline,
    variance_floor,
)

log = logging.getLogger(__name__)

FLATTEN_MODES = ("equiprobable", "weight-preserving")


class FeedbackMappingError(HmmError):
    pass


def flatten_model(m: HmmModel, mode: str = "equiprobable") -> HmmModel:
    """Replace every mixture state by one single-Gaussian state per component.

    State (i, k) of the result carries component k of state i and has id
    ``"<id_i>.<k>"``.  Every original edge i->j becomes the full set of
    edges from the components of i to the components of j.  In
    ``equiprobable`` mode each row is uniform over its edges; in
    ``weight-preserving`` mode the edge into component k of j gets
    a(i->j) * w(j, k), which leaves the model's likelihood unchanged.
    """
    if mode not in FLATTEN_MODES:
        raise UsageError(f"flatten mode must be one of {FLATTEN_MODES}")
    n = m.n_states
    counts = [e.n_components for e in m.emissions]
    offs = np.concatenate([[0], np.cumsum(counts)])
    nf = int(offs[-1])

    def members(i):
        if i == 0:
            return np.array([0]), np.array([1.0])
        if i == n + 1:
            return np.array([nf + 1]), np.array([1.0])
        return np.arange(offs[i - 1], offs[i]) + 1, m.emissions[i - 1].weights

    trans = np.zeros((nf + 2, nf + 2))
    for i, j in zip(*np.nonzero(m.trans > 0)):
        rows, _ = members(i)
        cols, w = members(j)
        trans[np.ix_(rows, cols)] = m.trans[i, j] * w[None, :]
    if mode == "equiprobable":
        trans = equiprobable(trans > 0)
    else:
        live = trans.sum(axis=1) > 0
        trans[live] /= trans[live].sum(axis=1, keepdims=True)
    ids, ems = [], []
    for sid, e in zip(m.state_ids, m.emissions):
        for k in range(e.n_components):
            ids.append(f"{sid}.{k + 1}")
            ems.append(type(e)([1.0], e.means[k:k + 1], e.variances[k:k + 1]))
    return HmmModel(m.label, trans, ems, ids)


def exit_backbone(trans: np.ndarray) -> np.ndarray:
    """For every state, the next hop on its most probable path to exit
    (-1 when exit is unreachable).  Ties go to the lowest column."""
    n2 = trans.shape[0]
    exit_ = n2 - 1
    with np.errstate(divide="ignore"):
        cost = -np.log(trans)
    dist = np.full(n2, math.inf)
    dist[exit_] = 0.0
    heap = [(0.0, exit_)]
    while heap:
        d, j = heapq.heappop(heap)
        if d > dist[j]:
            continue
        for i in np.flatnonzero(trans[:, j] > 0):
            nd = d + cost[i, j]
            if nd < dist[i]:
                dist[i] = nd
                heapq.heappush(heap, (nd, i))
    nxt = np.full(n2, -1)
    for i in range(n2 - 1):
        if math.isinf(dist[i]):
            continue
        total = cost[i] + dist
        total[trans[i] <= 0] = math.inf
        nxt[i] = int(np.argmin(total))
    return nxt


def prune(m: HmmModel, eps: float) -> HmmModel:
    """Zero every transition with probability <= ``eps`` and renormalise.

    Two edge sets survive regardless of ``eps``: the maximum-probability
    edge of each row, and each state's first hop on its most probable path
    to exit.  Both depend only on the input model, so raising ``eps`` can
    only remove edges, and exit stays reachable.  States no longer
    reachable from entry are dropped.
    """
    if not 0.0 < eps < 1.0:
        raise UsageError(f"pruning threshold must lie in (0, 1), got {eps}")
    t = m.trans
    keep = t > eps
    live = np.flatnonzero(t.sum(axis=1) > 0)
    keep[live, np.argmax(t[live], axis=1)] = True
    hop = exit_backbone(t)
    has = hop >= 0
    keep[np.flatnonzero(has), hop[has]] = True
    keep &= t > 0

    new = np.where(keep, t, 0.0)
    rows = new.sum(axis=1) > 0
    new[rows] /= new[rows].sum(axis=1, keepdims=True)
    alive = reachable_from(new > 0, 0)
    alive[0] = alive[-1] = True
    idx = np.flatnonzero(alive)
    sub = new[np.ix_(idx, idx)]
    emitting = idx[1:-1] - 1
    return m.replace(trans=sub, emissions=[m.emissions[k] for k in emitting],
                     state_ids=[m.state_ids[k] for k in emitting])


def feedback_emissions(trained_pruned: HmmModel, fresh_flat: HmmModel) -> HmmModel:
    """Give the trained emissions back to the flattened model they came from.

    The result has ``fresh_flat``'s full support with equiprobable rows; each
    state present in ``trained_pruned`` (matched by state id) takes its
    trained emission, pruned-away states keep their initial one.
    """
    index = {sid: k for k, sid in enumerate(fresh_flat.state_ids)}
    unknown = [s for s in trained_pruned.state_ids if s not in index]
    if unknown:
        raise FeedbackMappingError(f"{trained_pruned.label}: states {unknown} do not exist in the flattened model")
    if trained_pruned.dim != fresh_flat.dim:
        raise FeedbackMappingError("feature dimensions differ")
    ems = list(fresh_flat.emissions)
    for sid, e in zip(trained_pruned.state_ids, trained_pruned.emissions):
        ems[index[sid]] = e
    return fresh_flat.replace(trans=equiprobable(fresh_flat.trans > 0), emissions=ems)


# ---------------------------------------------------------------------------
# threshold sweep

DEFAULT_GRID = (0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4)


@dataclass(frozen=True)
class SweepConfig:
    epsilons: tuple[float, ...] = DEFAULT_GRID
    decode_mode: str = "loop"
    insertion_penalty: float = 0.0
    retrain_after_prune: bool = False
    feedback_iterations: int = 0

    def __post_init__(self):
        eps = self.epsilons
        if not eps:
            raise ValueError("epsilon grid is empty")
        if any(not 0.0 < e < 1.0 for e in eps):
            raise ValueError("every epsilon must lie in (0, 1)")
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon grid must be strictly ascending")
        if self.decode_mode not in MODES:
            raise ValueError(f"decode_mode must be one of {MODES}")
        if self.feedback_iterations < 0:
            raise ValueError("feedback_iterations must be >= 0")


@dataclass
class SweepRecord:
    epsilon: float
    accuracy: float
    edges_kept: int
    counts: AlignmentCounts
    models: dict[str, HmmModel]


@dataclass
class SweepResult:
    records: list[SweepRecord]
    kept_index: int
    tie_note: str = ""

    @property
    def kept(self) -> SweepRecord:
        return self.records[self.kept_index]


def evaluate(models: Mapping[str, HmmModel], utterances: Sequence[Utterance], mode: str = "loop",
             insertion_penalty: float = 0.0, jobs: int = 1) -> AlignmentCounts:
    """Decode a corpus and pool the alignment counts; failed decodes count
    as empty hypotheses."""
    net = build_network(dict(sorted(models.items())), mode, insertion_penalty)
    results = decode_corpus(net, utterances, jobs)
    return score_corpus((u.transcript, r.transcript) for u, r in zip(utterances, results))


def sweep_threshold(models: Mapping[str, HmmModel], utterances: Sequence[Utterance], config: SweepConfig,
                    train_config: TrainingConfig | None = None, jobs: int = 1,
                    var_floor: np.ndarray | None = None) -> SweepResult:
    """Prune all class models at each epsilon (one shared threshold), decode
    the training set and keep the most accurate model set (ties: smallest
    epsilon)."""
    models = dict(sorted(models.items()))
    records = []
    for eps in config.epsilons:
        pruned = {k: prune(m, eps) for k, m in models.items()}
        if config.retrain_after_prune:
            pruned = baum_welch_train(pruned, utterances, train_config or TrainingConfig(),
                                      jobs=jobs, var_floor=var_floor).models
        counts = evaluate(pruned, utterances, config.decode_mode, config.insertion_penalty, jobs)
        edges = sum(m.n_edges for m in pruned.values())
        records.append(SweepRecord(eps, accuracy(counts), edges, counts, pruned))
        log.info("eps %g: accuracy %.4f, %d edges", eps, records[-1].accuracy, edges)
    best = max(r.accuracy for r in records)
    tied = [i for i, r in enumerate(records) if r.accuracy == best]
    note = ""
    if len(tied) > 1:
        note = (f"accuracy {best!r} tied at epsilon " + ", ".join(repr(records[i].epsilon) for i in tied)
                + "; kept the smallest")
    return SweepResult(records, tied[0], note)


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class PipelineResult:
    baseline: TrainResult
    flat: dict[str, HmmModel]
    flat_trained: TrainResult
    sweeps: list[SweepResult]
    kept_iteration: int
    final: dict[str, HmmModel]
    provenance: dict = field(default_factory=dict)

    @property
    def kept(self) -> SweepRecord:
        return self.sweeps[self.kept_iteration].kept


def gaussian_budget(baseline: Mapping[str, HmmModel], flat: Mapping[str, HmmModel],
                    final: Mapping[str, HmmModel]) -> dict[str, dict[str, int]]:
    return {
        w: {"baseline": baseline[w].n_gaussians, "flattened": flat[w].n_gaussians, "final": final[w].n_gaussians}
        for w in sorted(baseline)
    }


def run_pipeline(utterances: Sequence[Utterance], train_config: TrainingConfig, sweep_config: SweepConfig,
                 jobs: int = 1) -> PipelineResult:
    """Flat start, GMM-HMM training with splitting, flattening, training of
    the flattened models, threshold sweep, then optional rounds of emission
    feedback + retraining + sweep.  The most accurate model set on the
    training data over all rounds is kept (ties: earliest round)."""
    baseline = train_baseline(utterances, train_config, jobs=jobs)
    var_floor = variance_floor(utterances, train_config.var_floor_scale)
    flat = {w: flatten_model(m, "equiprobable") for w, m in baseline.models.items()}
    flat_trained = baum_welch_train(flat, utterances, train_config, jobs=jobs, var_floor=var_floor)
    sweeps = [sweep_threshold(flat_trained.models, utterances, sweep_config, train_config, jobs, var_floor)]
    kept_iter = 0
    traces = [flat_trained.trace]
    for it in range(1, sweep_config.feedback_iterations + 1):
        seeded = {w: feedback_emissions(sweeps[-1].kept.models[w], flat[w]) for w in flat}
        retrained = baum_welch_train(seeded, utterances, train_config, jobs=jobs, var_floor=var_floor)
        traces.append(retrained.trace)
        sweeps.append(sweep_threshold(retrained.models, utterances, sweep_config, train_config, jobs, var_floor))
        if sweeps[-1].kept.accuracy > sweeps[kept_iter].kept.accuracy:
            kept_iter = it
    final = sweeps[kept_iter].kept.models
    for m in final.values():
        bad = validate_model(m, var_floor)
        if bad:
            raise HmmError(f"pipeline produced an invalid model {m.label}: {bad[0]}")

    base_counts = evaluate(baseline.models, utterances, sweep_config.decode_mode, sweep_config.insertion_penalty, jobs)
    budget = gaussian_budget(baseline.models, flat, final)
    running = []
    for s in sweeps:
        running.append(max([s.kept.accuracy] + running[-1:]))
    provenance = {
        "baseline": {
            "train_accuracy": accuracy(base_counts),
            "final_log_likelihood": baseline.trace[-1].log_likelihood,
            "iterations": len(baseline.trace),
            "skipped": baseline.skipped,
        },
        "flattened": {
            w: {"states": m.n_states, "edges": m.n_edges} for w, m in sorted(flat.items())
        },
        "rounds": [
            {
                "feedback_iteration": i,
                "train_iterations": len(traces[i]),
                "final_log_likelihood": traces[i][-1].log_likelihood,
                "sweep": [
                    {"epsilon": r.epsilon, "accuracy": r.accuracy, "edges_kept": r.edges_kept}
                    for r in s.records
                ],
                "kept_epsilon": s.kept.epsilon,
                "kept_accuracy": s.kept.accuracy,
                "running_best_accuracy": running[i],
                "tie_note": s.tie_note,
            }
            for i, s in enumerate(sweeps)
        ],
        "kept": {
            "feedback_iteration": kept_iter,
            "epsilon": sweeps[kept_iter].kept.epsilon,
            "train_accuracy": sweeps[kept_iter].kept.accuracy,
            "edges": {w: m.n_edges for w, m in sorted(final.items())},
            "states": {w: m.n_states for w, m in sorted(final.items())},
        },
        "gaussian_budget": budget,
        "budget_matched": all(b["flattened"] == b["baseline"] and b["final"] <= b["baseline"] for b in budget.values()),
    }
    return PipelineResult(baseline, flat, flat_trained, sweeps, kept_iter, final, provenance)


def sweep_csv(sweeps: Sequence[SweepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feedback_iteration", "epsilon", "accuracy", "edges_kept", "kept"])
    for i, s in enumerate(sweeps):
        for k, r in enumerate(s.records):
            w.writerow([i, repr(r.epsilon), repr(r.accuracy), r.edges_kept, int(k == s.kept_index)])
    return buf.getvalue()


def provenance_text(p: dict) -> str:
    lines = ["flatten-prune pipeline report", ""]
    b = p["baseline"]
    lines.append(f"baseline: train accuracy {b['train_accuracy']:.6f}, {b['iterations']} EM iterations, "
                 f"final log-likelihood {b['final_log_likelihood']:.6f}")
    for r in p["rounds"]:
        lines.append(f"round {r['feedback_iteration']}: {r['train_iterations']} EM iterations, "
                     f"kept epsilon {r['kept_epsilon']:g} accuracy {r['kept_accuracy']:.6f} "
                     f"(running best {r['running_best_accuracy']:.6f})")
        for s in r["sweep"]:
            lines.append(f"  epsilon {s['epsilon']:<8g} accuracy {s['accuracy']:.6f} edges {s['edges_kept']}")
        if r["tie_note"]:
            lines.append(f"  note: {r['tie_note']}")
    k = p["kept"]
    lines.append(f"kept: round {k['feedback_iteration']}, epsilon {k['epsilon']:g}, train accuracy {k['train_accuracy']:.6f}")
    lines.append("gaussian budget (baseline / flattened / final):")
    for w, c in p["gaussian_budget"].items():
        lines.append(f"  {w}: {c['baseline']} / {c['flattened']} / {c['final']}")
    lines.append(f"budget matched: {'yes' if p['budget_matched'] else 'NO'}")
    return "\n".join(lines) + "\n"


def provenance_json(p: dict) -> str:
    return json.dumps(p, indent=2, sort_keys=True) + "\n"
