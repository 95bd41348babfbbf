"""Token-passing Viterbi decoding over isolated-word and word-loop networks."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .core import HmmError, HmmModel, UsageError, gmm_log_density
from .graph import EdgeGraph, EmissionTable

MODES = ("isolated", "loop")


class ClassificationError(HmmError):
    pass


class RecognitionNetwork:
    """All class models compiled into one graph of emitting states.

    Global state g belongs to model ``state_model[g]`` (index into
    ``labels``) with 1-based local index ``state_local[g]``.  Besides each
    model's own emitting edges, loop mode adds an edge from every state
    that can exit a model to every state that can start a model, weighted
    ln a(i->exit) + insertion_penalty + ln a(entry->j).
    """

    def __init__(self, models: Sequence[HmmModel], mode: str = "isolated", insertion_penalty: float = 0.0):
        if mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}")
        if not models:
            raise UsageError("cannot build a network from an empty model set")
        self.models = list(models)
        self.labels = [m.label for m in self.models]
        if len(set(self.labels)) != len(self.labels):
            raise UsageError("duplicate model labels")
        self.mode = mode
        self.insertion_penalty = float(insertion_penalty)
        offs = np.concatenate([[0], np.cumsum([m.n_states for m in self.models])])
        self.offsets = offs
        G = int(offs[-1])
        self.state_model = np.repeat(np.arange(len(self.models)), [m.n_states for m in self.models])
        self.state_local = np.concatenate([np.arange(1, m.n_states + 1) for m in self.models])
        self.init = np.full(G, -np.inf)
        self.fin = np.full(G, -np.inf)
        src, dst, lp, loop = [], [], [], []
        for mi, m in enumerate(self.models):
            n, o = m.n_states, offs[mi]
            self.init[o:o + n] = m.log_trans[0, 1:n + 1]
            self.fin[o:o + n] = m.log_trans[1:n + 1, n + 1]
            ii, jj = np.nonzero(m.trans[1:n + 1, 1:n + 1] > 0)
            src.append(o + ii)
            dst.append(o + jj)
            lp.append(m.log_trans[ii + 1, jj + 1])
            loop.append(np.zeros(ii.size, dtype=np.int64))
        if mode == "loop":
            exits = np.flatnonzero(np.isfinite(self.fin))
            starts = np.flatnonzero(np.isfinite(self.init))
            src.append(np.repeat(exits, starts.size))
            dst.append(np.tile(starts, exits.size))
            lp.append(np.repeat(self.fin[exits], starts.size) + self.insertion_penalty + np.tile(self.init[starts], exits.size))
            loop.append(np.ones(exits.size * starts.size, dtype=np.int64))
        loop = np.concatenate(loop)
        self.graph = EdgeGraph(G, np.concatenate(src), np.concatenate(dst), np.concatenate(lp), tiebreak=loop)
        self.is_loop = loop.astype(bool)
        self.in_is_loop = self.is_loop[self.graph.in_order]
        self.table = EmissionTable([e for m in self.models for e in m.emissions])

    @property
    def n_states(self) -> int:
        return self.graph.n_states


def build_network(models, mode: str = "isolated", insertion_penalty: float = 0.0) -> RecognitionNetwork:
    if isinstance(models, Mapping):
        models = list(models.values())
    return RecognitionNetwork(list(models), mode, insertion_penalty)


@dataclass(frozen=True, eq=False)
class DecodeResult:
    """Best path of one utterance.

    ``path[t] = (model index, 1-based state)``; ``word_starts`` lists the
    frames at which a model is entered.  A failed decode has an empty
    transcript, ``score = -inf`` and ``path = None``.
    """

    transcript: tuple[str, ...]
    path: np.ndarray | None
    word_starts: tuple[int, ...]
    score: float
    failed: bool = False

    def key(self) -> bytes:
        """Canonical bytes, for determinism checks."""
        p = b"" if self.path is None else self.path.tobytes()
        return repr((self.transcript, self.word_starts, self.score, self.failed)).encode() + p


def token_decode(network: RecognitionNetwork, features) -> DecodeResult:
    x = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError(f"expected a non-empty T x D frame matrix, got shape {x.shape}")
    log_b = network.table.log_densities(x)
    g = network.graph
    best, last, bp = _kernels.viterbi(log_b, network.init, network.fin, g.in_ptr, g.in_src, g.in_lp)
    if last < 0 or not math.isfinite(best):
        return DecodeResult((), None, (), -math.inf, failed=True)
    T = x.shape[0]
    states = np.empty(T, dtype=np.int64)
    states[-1] = last
    starts = [0]
    for t in range(T - 1, 0, -1):
        k = bp[t, states[t]]
        states[t - 1] = g.in_src[k]
        if network.in_is_loop[k]:
            starts.append(t)
    starts.sort()
    path = np.stack([network.state_model[states], network.state_local[states]], axis=1)
    transcript = tuple(network.labels[path[t, 0]] for t in starts)
    return DecodeResult(transcript, path, tuple(starts), float(best))


def rescore_path(network: RecognitionNetwork, result: DecodeResult, features) -> float:
    """Recompute a decoded path's score directly from the model parameters.

    Raises ``ValueError`` if the path uses a transition outside a model's
    support or an edge the network does not have.
    """
    x = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    path, starts = result.path, set(result.word_starts)
    if network.mode == "isolated" and len(starts) != 1:
        raise ValueError("isolated network decoded more than one word")
    total = 0.0
    for t, (mi, s) in enumerate(path):
        m = network.models[mi]
        if t == 0 or t in starts:
            if m.trans[0, s] <= 0:
                raise ValueError(f"frame {t}: {m.label} cannot start in state {s}")
            total += math.log(m.trans[0, s])
            if t > 0:
                pm, ps = network.models[path[t - 1, 0]], path[t - 1, 1]
                if pm.trans[ps, pm.exit] <= 0:
                    raise ValueError(f"frame {t}: {pm.label} cannot exit from state {ps}")
                total += math.log(pm.trans[ps, pm.exit]) + network.insertion_penalty
        else:
            pm, ps = path[t - 1]
            if pm != mi or m.trans[ps, s] <= 0:
                raise ValueError(f"frame {t}: transition {ps}->{s} is not in the support of {m.label}")
            total += math.log(m.trans[ps, s])
        total += gmm_log_density(m.emissions[s - 1], x[t])
    mi, s = path[-1]
    m = network.models[mi]
    if m.trans[s, m.exit] <= 0:
        raise ValueError(f"last frame: {m.label} cannot exit from state {s}")
    return total + math.log(m.trans[s, m.exit])


def decode_corpus(network: RecognitionNetwork, utterances, jobs: int = 1) -> list[DecodeResult]:
    def work(u):
        return token_decode(network, u.features.frames)

    if jobs > 1 and len(utterances) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, utterances))
    return [work(u) for u in utterances]


def classify_isolated(models, features) -> tuple[str, dict[str, float]]:
    """Best-scoring single model; ties go to the lexicographically smallest label."""
    if isinstance(models, Mapping):
        models = list(models.values())
    if not models:
        raise UsageError("no models")
    scores = {m.label: token_decode(RecognitionNetwork([m]), features).score for m in models}
    best = max(scores.values())
    if not math.isfinite(best):
        raise ClassificationError("no model can explain the utterance")
    label = min(k for k, v in scores.items() if v == best)
    return label, scores


def write_decodes(path, uids: Sequence[str], results: Sequence[DecodeResult], network: RecognitionNetwork | None = None,
                  dump_path: bool = False) -> None:
    """Tab-separated ``uid, transcript, score`` lines; with ``dump_path`` a
    sibling ``<path>.path`` file lists per-frame ``label:state_id`` tokens."""
    lines = [f"{u}\t{' '.join(r.transcript)}\t{r.score!r}" for u, r in zip(uids, results)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    if dump_path:
        if network is None:
            raise UsageError("dumping paths needs the network")
        rows = []
        for u, r in zip(uids, results):
            toks = [] if r.path is None else [
                f"{network.labels[mi]}:{network.models[mi].state_ids[s - 1]}" for mi, s in r.path
            ]
            rows.append(f"{u}\t{' '.join(toks)}")
        Path(str(path) + ".path").write_text("\n".join(rows) + "\n", encoding="utf-8")
