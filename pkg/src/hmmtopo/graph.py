"""Shared machinery: stacked emission evaluation and sparse edge graphs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import LOG_2PI, GmmEmission, UsageError


class EmissionTable:
    """All mixture components of a list of emissions, evaluated in one shot."""

    def __init__(self, emissions: Sequence[GmmEmission]):
        if not emissions:
            raise UsageError("no emissions")
        dims = {e.dim for e in emissions}
        if len(dims) != 1:
            raise UsageError(f"emissions disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()
        counts = np.array([e.n_components for e in emissions])
        self.ptr = np.concatenate([[0], np.cumsum(counts)])
        self.owner = np.repeat(np.arange(len(emissions)), counts)
        with np.errstate(divide="ignore"):
            self.logw = np.log(np.concatenate([e.weights for e in emissions]))
        self.means = np.concatenate([e.means for e in emissions])
        self.variances = np.concatenate([e.variances for e in emissions])
        self._const = -0.5 * np.sum(LOG_2PI + np.log(self.variances), axis=1)
        self._prec = 1.0 / self.variances

    @property
    def n_states(self) -> int:
        return self.ptr.size - 1

    def component_scores(self, frames: np.ndarray) -> np.ndarray:
        """ln(weight) + ln N(x_t; component), shape (T, C)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.dim:
            raise UsageError(f"frames of shape {frames.shape} do not match model dimension {self.dim}")
        diff = frames[:, None, :] - self.means[None, :, :]
        quad = np.einsum("tcd,tcd,cd->tc", diff, diff, self._prec)
        return self.logw[None, :] + self._const[None, :] - 0.5 * quad

    def state_scores(self, comp: np.ndarray) -> np.ndarray:
        """Per-emission log density from component scores, shape (T, S)."""
        starts = self.ptr[:-1]
        m = np.maximum.reduceat(comp, starts, axis=1)
        safe = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            return np.log(np.add.reduceat(np.exp(comp - safe[:, self.owner]), starts, axis=1)) + safe

    def log_densities(self, frames: np.ndarray) -> np.ndarray:
        return self.state_scores(self.component_scores(frames))


class EdgeGraph:
    """Weighted edge list with CSR views by destination and by source.

    In-edges of each destination are ordered by ``(src, tiebreak)``, which
    fixes how the Viterbi kernel resolves equal scores.
    """

    def __init__(self, n_states: int, src, dst, lp, tiebreak=None):
        self.n_states = n_states
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.lp = np.asarray(lp, dtype=np.float64)
        tb = np.zeros_like(self.src) if tiebreak is None else np.asarray(tiebreak, dtype=np.int64)
        self.in_order = np.lexsort((tb, self.src, self.dst))
        self.in_ptr = np.searchsorted(self.dst[self.in_order], np.arange(n_states + 1)).astype(np.int64)
        self.in_src = self.src[self.in_order]
        self.in_lp = self.lp[self.in_order]
        self.out_order = np.lexsort((self.dst, self.src))
        self.out_ptr = np.searchsorted(self.src[self.out_order], np.arange(n_states + 1)).astype(np.int64)
        self.out_dst = self.dst[self.out_order]
        self.out_lp = self.lp[self.out_order]

    @property
    def n_edges(self) -> int:
        return self.src.size
