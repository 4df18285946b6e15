"""Structured collocation grids, masks and boundary tagging.

Nodes are numbered x-fastest: ``idx = i + nx * j (+ nx * ny * k)``.  Quad
elements list their nodes counter-clockwise starting at the lower-left
corner; hex elements list the bottom face (z = k) then the top face.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

MASKS = ("none", "lshape")
KINDS = (
    "dirichlet-displacement",
    "dirichlet-temperature",
    "dirichlet-density",
    "point-load",
    "point-spring",
    "flux",
)
POINT_KINDS = ("point-load", "point-spring")


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    lengths: tuple[float, ...]
    mask: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        if len(self.lengths) not in (2, 3):
            raise GridError(f"domain must be 2D or 3D, got {len(self.lengths)} lengths")
        if any(not (v > 0) for v in self.lengths):
            raise GridError(f"domain lengths must be strictly positive: {self.lengths}")
        if self.mask not in MASKS:
            raise GridError(f"unknown mask {self.mask!r}; expected one of {MASKS}")

    @property
    def dims(self) -> int:
        return len(self.lengths)

    @property
    def volume(self) -> float:
        v = math.prod(self.lengths)
        if self.mask == "lshape":
            v *= 0.75
        return v

    def removed(self, points: np.ndarray) -> np.ndarray:
        """True where a point (an element center) lies in the masked-out region."""
        if self.mask == "lshape":
            L, H = self.lengths[0], self.lengths[1]
            return (points[:, 0] > 0.5 * L) & (points[:, 1] > 0.5 * H)
        return np.zeros(len(points), dtype=bool)


@dataclass(frozen=True)
class BoundaryData:
    """One boundary condition attached to a named region.

    ``selector`` picks nodes: ``{"edge": "x0"}`` (x0/x1/y0/y1/z0/z1),
    ``{"box": [[lo...], [hi...]]}`` restricted to boundary nodes, or
    ``{"point": [x, y(, z)]}`` snapped to the nearest node.  ``components``
    lists the displacement components a Dirichlet condition constrains.
    """

    region: str
    kind: str
    selector: dict
    values: tuple[float, ...] = (0.0,)
    components: tuple[int, ...] = ()
    direction: tuple[float, ...] | None = None
    stiffness: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GridError(f"{self.region}: unknown boundary kind {self.kind!r}")
        if self.direction is not None:
            d = np.asarray(self.direction, dtype=float)
            n = np.linalg.norm(d)
            if n == 0:
                raise GridError(f"{self.region}: zero direction vector")
            object.__setattr__(self, "direction", tuple(float(v) for v in d / n))
        object.__setattr__(self, "values", tuple(float(v) for v in np.atleast_1d(self.values)))
        object.__setattr__(self, "components", tuple(int(c) for c in self.components))
        if self.kind in POINT_KINDS and "point" not in self.selector:
            raise GridError(f"{self.region}: {self.kind} needs a point selector")


@dataclass(frozen=True)
class CollocationGrid:
    domain: Domain
    shape: tuple[int, ...]
    nodes: np.ndarray
    elements: np.ndarray
    centers: np.ndarray
    boundary: np.ndarray
    boundary_tags: dict = field(default_factory=dict)
    snap_distance: dict = field(default_factory=dict)
    index: int = 0

    @property
    def dims(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / (n - 1) for L, n in zip(self.domain.lengths, self.shape))

    def element_shape(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.shape)

    def element_ijk(self) -> np.ndarray:
        """Integer cell indices of every (unmasked) element."""
        h = np.asarray(self.spacing)
        return np.floor(self.centers / h).astype(int)

    def node(self, tag: str) -> int:
        idx = self.boundary_tags[tag]
        if len(idx) != 1:
            raise GridError(f"tag {tag!r} holds {len(idx)} nodes, expected one")
        return int(idx[0])


@dataclass(frozen=True)
class GridFamily:
    grids: tuple[CollocationGrid, ...]

    @property
    def n_g(self) -> int:
        return len(self.grids)

    @property
    def coarse(self) -> CollocationGrid:
        return self.grids[0]

    @property
    def fine(self) -> CollocationGrid:
        return self.grids[-1]

    def __getitem__(self, i: int) -> CollocationGrid:
        return self.grids[i]

    def __len__(self) -> int:
        return len(self.grids)

    def __iter__(self):
        return iter(self.grids)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def interpolate_counts(coarse: Sequence[int], fine: Sequence[int], n_g: int) -> list[tuple[int, ...]]:
    if n_g < 1:
        raise GridError("n_g must be >= 1")
    if len(coarse) != len(fine):
        raise GridError("coarse and fine resolutions differ in dimension")
    if any(f < c for c, f in zip(coarse, fine)):
        raise GridError(f"fine resolution {tuple(fine)} below coarse {tuple(coarse)}")
    if any(c < 2 for c in coarse):
        raise GridError("need at least 2 nodes per axis")
    if n_g == 1:
        return [tuple(int(v) for v in fine)]
    out = []
    for k in range(n_g):
        t = k / (n_g - 1)
        out.append(tuple(_round_half_up(c + (f - c) * t) for c, f in zip(coarse, fine)))
    return out


def _even_elements(counts: tuple[int, ...]) -> tuple[int, ...]:
    # L-shape cut lines must fall on element boundaries
    return tuple(n if (n - 1) % 2 == 0 else n + 1 for n in counts)


def build_grid(domain: Domain, counts: Sequence[int], index: int = 0) -> CollocationGrid:
    counts = tuple(int(c) for c in counts)
    if len(counts) != domain.dims:
        raise GridError(f"resolution {counts} does not match a {domain.dims}D domain")
    if domain.mask == "lshape":
        counts = _even_elements(counts)
    axes = [np.linspace(0.0, L, n) for L, n in zip(domain.lengths, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    # x-fastest flattening
    nodes = np.stack([m.ravel(order="F") for m in mesh], axis=1)

    def nid(*ijk):
        idx = ijk[0]
        stride = counts[0]
        for a in range(1, len(ijk)):
            idx = idx + stride * ijk[a]
            stride *= counts[a]
        return idx

    if domain.dims == 2:
        i, j = np.meshgrid(np.arange(counts[0] - 1), np.arange(counts[1] - 1), indexing="ij")
        i, j = i.ravel(order="F"), j.ravel(order="F")
        elements = np.stack([nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)], axis=1)
    else:
        i, j, k = np.meshgrid(*(np.arange(c - 1) for c in counts), indexing="ij")
        i, j, k = (a.ravel(order="F") for a in (i, j, k))
        elements = np.stack(
            [
                nid(i, j, k), nid(i + 1, j, k), nid(i + 1, j + 1, k), nid(i, j + 1, k),
                nid(i, j, k + 1), nid(i + 1, j, k + 1), nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1),
            ],
            axis=1,
        )
    centers = nodes[elements].mean(axis=1)
    keep = ~domain.removed(centers)
    elements, centers = elements[keep], centers[keep]
    if len(elements) == 0:
        raise GridError("mask removes every element")

    used = np.unique(elements)
    remap = -np.ones(len(nodes), dtype=np.int64)
    remap[used] = np.arange(len(used))
    nodes = nodes[used]
    elements = remap[elements]

    _check_connected(elements, len(nodes))
    boundary = _boundary_nodes(elements, len(nodes), domain.dims)
    return CollocationGrid(
        domain=domain,
        shape=counts,
        nodes=nodes,
        elements=elements.astype(np.int64),
        centers=centers,
        boundary=boundary,
        index=index,
    )


def _check_connected(elements: np.ndarray, n_nodes: int) -> None:
    n_e, n_s = elements.shape
    rows = np.repeat(np.arange(n_e), n_s)
    inc = coo_matrix((np.ones(n_e * n_s), (rows, elements.ravel())), shape=(n_e, n_nodes)).tocsr()
    adj = inc @ inc.T
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise GridError(f"mask disconnects the domain into {n_comp} components")


def _boundary_nodes(elements: np.ndarray, n_nodes: int, dims: int) -> np.ndarray:
    # nodes of a structured grid shared by fewer than 2**dims elements lie on the boundary
    count = np.bincount(elements.ravel(), minlength=n_nodes)
    return np.flatnonzero(count < 2 ** dims)


def build_grid_family(domain: Domain, coarse: Sequence[int], fine: Sequence[int], n_g: int) -> GridFamily:
    counts = interpolate_counts(coarse, fine, n_g)
    grids = tuple(build_grid(domain, c, index=k) for k, c in enumerate(counts))
    log.debug("grid family: %s", [g.shape for g in grids])
    return GridFamily(grids)


def sample_grid(family: GridFamily, rng: np.random.Generator) -> CollocationGrid:
    """Draw one grid uniformly; determinism comes from the caller's generator."""
    if len(family) == 1:
        return family[0]
    return family[int(rng.integers(len(family)))]


# ---------------------------------------------------------------- tagging

_EDGE_AXIS = {"x0": (0, 0), "x1": (0, 1), "y0": (1, 0), "y1": (1, 1), "z0": (2, 0), "z1": (2, 1)}


def select_nodes(grid: CollocationGrid, selector: dict, region: str = "?") -> tuple[np.ndarray, float]:
    """Resolve a selector to node indices; returns (indices, snap distance)."""
    x = grid.nodes
    tol = 1e-9 * max(grid.domain.lengths)
    if "point" in selector:
        p = np.asarray(selector["point"], dtype=float)
        if p.shape != (grid.dims,):
            raise GridError(f"{region}: point {p.tolist()} has wrong dimension")
        d = np.linalg.norm(x - p, axis=1)
        # ties broken by lowest node index
        dmin = d.min()
        idx = int(np.flatnonzero(d <= dmin + 1e-12 * max(1.0, dmin))[0])
        return np.array([idx]), float(d[idx])
    if "edge" in selector:
        names = selector["edge"]
        names = [names] if isinstance(names, str) else list(names)
        mask = np.zeros(len(x), dtype=bool)
        for name in names:
            if name not in _EDGE_AXIS:
                raise GridError(f"{region}: unknown edge {name!r}")
            ax, side = _EDGE_AXIS[name]
            if ax >= grid.dims:
                raise GridError(f"{region}: edge {name!r} needs a 3D domain")
            target = 0.0 if side == 0 else grid.domain.lengths[ax]
            mask |= np.abs(x[:, ax] - target) <= tol
        if "range" in selector:
            lo, hi = (np.asarray(v, dtype=float) for v in selector["range"])
            mask &= np.all((x >= lo - tol) & (x <= hi + tol), axis=1)
        idx = np.flatnonzero(mask)
    elif "box" in selector:
        lo, hi = (np.asarray(v, dtype=float) for v in selector["box"])
        inside = np.all((x >= lo - tol) & (x <= hi + tol), axis=1)
        if selector.get("boundary_only", True):
            on_b = np.zeros(len(x), dtype=bool)
            on_b[grid.boundary] = True
            inside &= on_b
        idx = np.flatnonzero(inside)
        if len(idx) == 0 and selector.get("snap", False):
            return select_nodes(grid, {"point": 0.5 * (lo + hi)}, region)
    else:
        raise GridError(f"{region}: selector needs one of point/edge/box, got {sorted(selector)}")
    return idx, 0.0


def tag_boundaries(grid: CollocationGrid, specs: Sequence[BoundaryData]) -> CollocationGrid:
    if not specs:
        return grid
    tags = dict(grid.boundary_tags)
    snaps = dict(grid.snap_distance)
    for bc in specs:
        idx, snap = select_nodes(grid, bc.selector, bc.region)
        if len(idx) == 0:
            raise GridError(f"region {bc.region!r} matches no nodes on grid {grid.shape}")
        tags[bc.region] = idx
        if bc.kind in POINT_KINDS or "point" in bc.selector:
            snaps[bc.region] = snap
            if snap > 0:
                log.info("region %s snapped %.4g away on grid %s", bc.region, snap, grid.shape)
    return dataclasses.replace(grid, boundary_tags=tags, snap_distance=snaps)


def tag_family(family: GridFamily, specs: Sequence[BoundaryData]) -> GridFamily:
    return GridFamily(tuple(tag_boundaries(g, specs) for g in family))
