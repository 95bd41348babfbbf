"""Model types, log-domain arithmetic and diagonal Gaussian densities.

State numbering convention used everywhere in the package: row/column 0 of
a transition matrix is the non-emitting entry state, 1..N are the emitting
states and N+1 is the non-emitting exit state.  ``model.emissions[k]`` is
the emission of state ``k + 1``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

LOG_ZERO = -math.inf
LOG_2PI = math.log(2.0 * math.pi)
WEIGHT_FLOOR = 1e-6
ROW_TOLERANCE = 1e-10


class HmmError(Exception):
    """Base class for all errors raised by the toolkit."""


class UsageError(HmmError, ValueError):
    """Caller passed arguments that violate an operation's precondition."""


def _readonly(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise UsageError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def log_sum_exp(values: Iterable[float]) -> float:
    """Stable ``ln(sum(exp(values)))`` with a max shift.

    Returns ``-inf`` exactly when every input is ``-inf``.
    """
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                      dtype=np.float64).ravel()
    if vals.size == 0:
        raise UsageError("log_sum_exp of an empty list")
    if np.isnan(vals).any():
        raise UsageError("log_sum_exp got NaN")
    m = vals.max()
    if math.isinf(m):
        return float(m)
    return float(m + math.log(np.exp(vals - m).sum()))


def log_sum_exp_rows(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vectorised ``log_sum_exp`` along ``axis``; all ``-inf`` slices give ``-inf``."""
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Diagonal-covariance Gaussian."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = _readonly(self.mean, 1)
        var = _readonly(self.var, 1)
        if mean.shape != var.shape:
            raise UsageError(f"mean has dimension {mean.size}, variance {var.size}")
        if mean.size == 0:
            raise UsageError("Gaussian of dimension 0")
        if not (np.all(np.isfinite(var)) and np.all(var > 0)):
            raise UsageError("variances must be finite and strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_log_density(g: Gaussian, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != g.dim:
        raise UsageError(f"feature dimension {x.size} does not match Gaussian dimension {g.dim}")
    diff = x - g.mean
    return float(np.sum(-0.5 * (LOG_2PI + np.log(g.var)) - 0.5 * diff * diff / g.var))


class GmmEmission:
    """Weighted mixture of diagonal Gaussians, stored as stacked arrays.

    ``weights`` has shape (M,), ``means`` and ``variances`` shape (M, D).
    """

    __slots__ = ("weights", "means", "variances")

    def __init__(self, weights, means, variances):
        w = _readonly(weights, 1)
        mu = _readonly(means, 2)
        var = _readonly(variances, 2)
        if w.size == 0:
            raise UsageError("a mixture needs at least one component")
        if mu.shape != var.shape or mu.shape[0] != w.size:
            raise UsageError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}"
            )
        if mu.shape[1] == 0:
            raise UsageError("mixture of dimension 0")
        if not (np.all(np.isfinite(var)) and np.all(var > 0)):
            raise UsageError("variances must be finite and strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    def __setattr__(self, name, value):
        raise AttributeError("GmmEmission is immutable")

    @classmethod
    def from_components(cls, weights: Sequence[float], components: Sequence[Gaussian]) -> GmmEmission:
        return cls(weights, [g.mean for g in components], [g.var for g in components])

    @classmethod
    def single(cls, g: Gaussian) -> GmmEmission:
        return cls([1.0], g.mean[None, :], g.var[None, :])

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[Gaussian]:
        return [Gaussian(m, v) for m, v in zip(self.means, self.variances)]

    def component_log_densities(self, frames: np.ndarray) -> np.ndarray:
        """Per-component log densities, shape (T, M), weights not included."""
        diff = frames[:, None, :] - self.means[None, :, :]
        const = -0.5 * np.sum(LOG_2PI + np.log(self.variances), axis=1)
        return const[None, :] - 0.5 * np.sum(diff * diff / self.variances[None, :, :], axis=2)

    def log_densities(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.dim:
            raise UsageError(f"frames of shape {frames.shape} do not match dimension {self.dim}")
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return log_sum_exp_rows(self.component_log_densities(frames) + logw[None, :], axis=1)

    def __repr__(self):
        return f"GmmEmission(M={self.n_components}, D={self.dim})"


def gmm_log_density(e: GmmEmission, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != e.dim:
        raise UsageError(f"feature dimension {x.size} does not match mixture dimension {e.dim}")
    with np.errstate(divide="ignore"):
        terms = [math.log(w) if w > 0 else LOG_ZERO for w in e.weights]
    terms = [lw + gaussian_log_density(g, x) for lw, g in zip(terms, e.components)]
    return log_sum_exp(terms)


def _as_emission(e) -> GmmEmission:
    if isinstance(e, GmmEmission):
        return e
    if isinstance(e, Gaussian):
        return GmmEmission.single(e)
    raise UsageError(f"unsupported emission type {type(e).__name__}")


class HmmModel:
    """One class model: labelled states, transitions in linear probability
    and one emission per emitting state.

    ``trans`` is stored in the linear domain so that printing and parsing a
    model is bit-stable; ``log_trans`` is the log-domain view used by every
    algorithm (``-inf`` marks a transition outside the support).
    """

    def __init__(self, label: str, trans, emissions: Sequence, state_ids: Sequence[str] | None = None):
        t = _readonly(trans, 2)
        ems = tuple(_as_emission(e) for e in emissions)
        n = len(ems)
        if t.shape != (n + 2, n + 2):
            raise UsageError(f"transition matrix shape {t.shape} does not fit {n} emitting states")
        if n == 0:
            raise UsageError("a model needs at least one emitting state")
        if state_ids is None:
            state_ids = [str(i) for i in range(1, n + 1)]
        ids = tuple(str(s) for s in state_ids)
        if len(ids) != n or len(set(ids)) != n:
            raise UsageError("state ids must be unique, one per emitting state")
        if any(not s or any(c.isspace() for c in s) for s in ids) or not label or any(c.isspace() for c in label):
            raise UsageError("labels and state ids must be non-empty and contain no whitespace")
        self.label = label
        self.trans = t
        self.emissions = ems
        self.state_ids = ids

    @property
    def n_states(self) -> int:
        """Number of emitting states."""
        return len(self.emissions)

    @property
    def dim(self) -> int:
        return self.emissions[0].dim

    @property
    def exit(self) -> int:
        return self.n_states + 1

    @cached_property
    def log_trans(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            lt = np.log(self.trans)
        lt.flags.writeable = False
        return lt

    def support(self, i: int) -> np.ndarray:
        """Columns reachable from row ``i`` with non-zero probability."""
        return np.flatnonzero(self.trans[i] > 0)

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.trans > 0))

    @property
    def n_gaussians(self) -> int:
        return sum(e.n_components for e in self.emissions)

    def edge_set(self) -> set[tuple[str, str]]:
        """Support edges named by state id, with 'entry'/'exit' for the ends."""
        names = ("entry",) + self.state_ids + ("exit",)
        rows, cols = np.nonzero(self.trans > 0)
        return {(names[i], names[j]) for i, j in zip(rows, cols)}

    def min_path_length(self) -> float:
        """Fewest emitting states on any entry-to-exit path (inf if none)."""
        dist = _bfs(self.trans > 0, 0)
        return float(dist[self.exit] - 1) if math.isfinite(dist[self.exit]) else math.inf

    def replace(self, *, label=None, trans=None, emissions=None, state_ids=None) -> HmmModel:
        return HmmModel(
            self.label if label is None else label,
            self.trans if trans is None else trans,
            self.emissions if emissions is None else emissions,
            self.state_ids if state_ids is None else state_ids,
        )

    def __repr__(self):
        return f"HmmModel({self.label!r}, N={self.n_states}, edges={self.n_edges}, gaussians={self.n_gaussians})"


def _bfs(adj: np.ndarray, start: int) -> np.ndarray:
    dist = np.full(adj.shape[0], math.inf)
    dist[start] = 0
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if math.isinf(dist[j]):
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist


def reachable_from(adj: np.ndarray, start: int) -> np.ndarray:
    return np.isfinite(_bfs(adj, start))


def reaches(adj: np.ndarray, target: int) -> np.ndarray:
    return np.isfinite(_bfs(adj.T, target))


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    message: str

    def __str__(self):
        return f"{self.kind} at {self.where}: {self.message}"


def validate_model(m: HmmModel, var_floor=None) -> list[Violation]:
    """Check every model invariant; one ``Violation`` per defect found.

    ``var_floor`` (scalar or per-dimension array), when given, is also
    enforced on every Gaussian variance.
    """
    out: list[Violation] = []
    n = m.n_states
    t = m.trans
    names = ["entry"] + [f"state {s}" for s in m.state_ids] + ["exit"]

    if len(m.emissions) != n or t.shape != (n + 2, n + 2):
        out.append(Violation("shape", "model", "emission count does not match transition matrix"))
        return out
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        out.append(Violation("probability", "transitions", "negative or non-finite transition probability"))
        return out
    if t[0, 0] > 0:
        out.append(Violation("entry-self-loop", "entry", "entry state has a self-loop"))
    if np.any(t[:, 0] > 0):
        out.append(Violation("into-entry", "entry", "transition into the entry state"))
    if np.any(t[n + 1] > 0):
        out.append(Violation("out-of-exit", "exit", "transition out of the exit state"))
    if t[0, n + 1] > 0:
        out.append(Violation("tee", "entry", "entry connects directly to exit (no emitting state)"))
    for i in range(n + 1):
        s = t[i].sum()
        if s > 0 and abs(s - 1.0) > ROW_TOLERANCE:
            out.append(Violation("row-stochastic", names[i], f"row sums to {s!r}"))
    if not reachable_from(t > 0, 0)[n + 1]:
        out.append(Violation("reachability", "exit", "exit state unreachable from entry"))

    dim = m.emissions[0].dim
    floor = None if var_floor is None else np.broadcast_to(np.asarray(var_floor, dtype=float), (dim,))
    for k, e in enumerate(m.emissions):
        where = names[k + 1]
        if e.dim != dim:
            out.append(Violation("dimension", where, f"dimension {e.dim} differs from {dim}"))
            continue
        if abs(e.weights.sum() - 1.0) > ROW_TOLERANCE:
            out.append(Violation("weights", where, f"mixture weights sum to {e.weights.sum()!r}"))
        if np.any(e.weights < WEIGHT_FLOOR * (1 - 1e-9)):
            out.append(Violation("weight-floor", where, "mixture weight below floor"))
        if not np.all(np.isfinite(e.means)):
            out.append(Violation("mean", where, "non-finite mean"))
        if floor is not None and np.any(e.variances < floor[None, :] * (1 - 1e-12)):
            out.append(Violation("variance-floor", where, "variance below floor"))
    return out
