"""Boundary-enforcing fields: GP posterior mean with a neural mean function.

A field is ``m(x) + W^T (y - m(X))`` where ``W = K(X, X)^-1 K(X, x)`` comes from
a fixed Gaussian kernel.  Kernel inputs are normalized to [0, 1] per axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import torch

from .neural import DTYPE, Pgcan

log = logging.getLogger(__name__)


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    phi: float | tuple = 0.5
    s2: float = 1.0
    jitter: float = 1e-5

    def __post_init__(self):
        if np.any(np.asarray(self.phi) <= 0) or self.jitter <= 0 or self.s2 <= 0:
            raise ConditioningError("kernel parameters must be positive")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        phi = np.broadcast_to(np.asarray(self.phi, dtype=float), (a.shape[1],))
        d2 = np.zeros((len(a), len(b)))
        for k in range(a.shape[1]):
            d2 += phi[k] * (a[:, k, None] - b[None, :, k]) ** 2
        c = self.s2 * np.exp(-d2)
        # nugget only where the points coincide exactly
        c += self.jitter * np.all(a[:, None, :] == b[None, :, :], axis=2)
        return c


@dataclass
class GpConditioner:
    """Conditioning data for one scalar field on every grid of a family.

    ``X[g]`` and ``y[g]`` hold the (normalized) conditioning points and values
    used on grid ``g``; ``W[(g, kind)]`` is the cached ``K^-1 c(X, queries)``.
    """

    kernel: Kernel
    X: dict = field(default_factory=dict)
    y: dict = field(default_factory=dict)
    W: dict = field(default_factory=dict)
    factor: dict = field(default_factory=dict)

    def n_points(self, g: int) -> int:
        return len(self.X[g])

    def weights(self, g: int, kind: str) -> torch.Tensor:
        return self.W[(g, kind)]

    def direct(self, g: int, xq: np.ndarray) -> np.ndarray:
        """Uncached ``K^-1 c(X, xq)``, for checking the caches."""
        return sla.cho_solve(self.factor[g], self.kernel(self.X[g], xq))


def thin(idx: np.ndarray, cap: int) -> np.ndarray:
    """Uniformly thin an index set down to at most ``cap`` entries (keeps ends)."""
    if cap <= 0 or len(idx) <= cap:
        return idx
    pick = np.unique(np.round(np.linspace(0, len(idx) - 1, cap)).astype(int))
    return idx[pick]


def _factor(kernel: Kernel, X: np.ndarray):
    K = kernel(X, X)
    try:
        return sla.cho_factor(K, lower=True)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(K)
        raise ConditioningError(f"covariance not positive definite (condition number {cond:.3e})") from exc


def build_conditioner(kernel: Kernel, X_cond, y_cond, family, query_kind: str | Sequence[str] = "nodes",
                      normalize=None) -> GpConditioner:
    """Factor the kernel matrix and cache W for every grid's query set.

    ``X_cond``/``y_cond`` may be single arrays shared by all grids or dicts keyed
    by grid index.  ``normalize`` maps physical coordinates to [0, 1]^dims.
    """
    kinds = [query_kind] if isinstance(query_kind, str) else list(query_kind)
    lengths = np.asarray(family[0].domain.lengths)
    norm = normalize or (lambda x: np.asarray(x, dtype=float) / lengths)
    cond = GpConditioner(kernel)
    for g, grid in enumerate(family):
        Xg = X_cond[g] if isinstance(X_cond, dict) else X_cond
        yg = y_cond[g] if isinstance(y_cond, dict) else y_cond
        Xg = norm(np.atleast_2d(Xg))
        yg = np.broadcast_to(np.asarray(yg, dtype=float), (len(Xg),)).copy()
        if len(Xg) == 0:
            raise ConditioningError("conditioning set is empty")
        if len(np.unique(Xg, axis=0)) != len(Xg):
            raise ConditioningError("conditioning points must be distinct")
        fac = _factor(kernel, Xg)
        cond.X[g], cond.y[g], cond.factor[g] = Xg, yg, fac
        for kind in kinds:
            xq = grid.nodes if kind == "nodes" else grid.centers
            W = sla.cho_solve(fac, kernel(Xg, norm(xq)))
            cond.W[(g, kind)] = torch.as_tensor(W, dtype=DTYPE)
    return cond


def evaluate_field(cond: GpConditioner | None, m_cond: torch.Tensor | None, m_query: torch.Tensor,
                   g: int = 0, kind: str = "nodes") -> torch.Tensor:
    """m(x*) + W^T (y - m(X)); with no conditioner the mean passes through."""
    if cond is None:
        return m_query
    r = torch.as_tensor(cond.y[g], dtype=DTYPE) - m_cond
    return m_query + cond.weights(g, kind).T @ r


# ---------------------------------------------------------------- fields


class GpField:
    """A vector field whose components share one neural mean.

    Each component has its own conditioner (or ``None`` when unconstrained).
    The neural mean is evaluated on the query points and on the conditioning
    points of the same grid in one pass so both terms carry gradients.
    """

    def __init__(self, name: str, net: Pgcan, conditioners: Sequence[GpConditioner | None], lengths):
        if len(conditioners) != net.n_out:
            raise ValueError(f"{name}: {len(conditioners)} conditioners for {net.n_out} outputs")
        self.name = name
        self.net = net
        self.conditioners = list(conditioners)
        self.lengths = np.asarray(lengths, dtype=float)
        self._layout: dict = {}

    @property
    def n_comp(self) -> int:
        return self.net.n_out

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) / self.lengths

    def _query_layout(self, grid, kind: str):
        key = (grid.index, kind)
        lay = self._layout.get(key)
        if lay is None:
            xq = self.normalize(grid.nodes if kind == "nodes" else grid.centers)
            pts, spans = [xq], []
            start = len(xq)
            for c in self.conditioners:
                if c is None:
                    spans.append(None)
                    continue
                pts.append(c.X[grid.index])
                spans.append((start, start + len(c.X[grid.index])))
                start += len(c.X[grid.index])
            allx = np.concatenate(pts)
            lay = self._layout[key] = (len(xq), spans, self.net.plan(allx))
        return lay

    def evaluate(self, grid, kind: str = "nodes", fmap: torch.Tensor | None = None) -> torch.Tensor:
        """Field values at the grid's nodes or centers, shape (n_query, n_comp)."""
        n_q, spans, plan = self._query_layout(grid, kind)
        m = self.net(plan=plan, fmap=fmap)
        cols = []
        for j, (c, span) in enumerate(zip(self.conditioners, spans)):
            mq = m[:n_q, j]
            if c is None:
                cols.append(mq)
            else:
                cols.append(evaluate_field(c, m[span[0]:span[1], j], mq, grid.index, kind))
        return torch.stack(cols, dim=1)

    def evaluate_points(self, x: np.ndarray, g: int) -> torch.Tensor:
        """Off-grid evaluation using grid ``g``'s conditioning data (no caching)."""
        xq = self.normalize(x)
        m = self.net(xq)
        cols = []
        for j, c in enumerate(self.conditioners):
            if c is None:
                cols.append(m[:, j])
                continue
            mc = self.net(c.X[g])[:, j]
            W = torch.as_tensor(c.direct(g, xq), dtype=DTYPE)
            cols.append(m[:, j] + W.T @ (torch.as_tensor(c.y[g], dtype=DTYPE) - mc))
        return torch.stack(cols, dim=1)
