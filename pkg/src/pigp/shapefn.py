"""Bilinear quad / trilinear hex shape functions and element quadrature.

Everything here is plain numpy.  Geometry is computed once per grid and then
handed to the torch side as constant tensors.

Voigt order is (e11, e22, g12) in 2D and (e11, e22, e33, g23, g13, g12) in
3D, with engineering shear strains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# reference node signs, counter-clockwise from (-1, -1)
QUAD_NODES = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
HEX_NODES = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
    dtype=float,
)

# (row, derivative axis, displacement component) of each Voigt strain entry
VOIGT_2D = [[(0, 0)], [(1, 1)], [(0, 1), (1, 0)]]
VOIGT_3D = [[(0, 0)], [(1, 1)], [(2, 2)], [(1, 2), (2, 1)], [(0, 2), (2, 0)], [(0, 1), (1, 0)]]


class ShapeError(ValueError):
    pass


def reference_nodes(dims: int) -> np.ndarray:
    if dims == 2:
        return QUAD_NODES
    if dims == 3:
        return HEX_NODES
    raise ShapeError(f"unsupported dimension {dims}")


def shape_values(xi) -> np.ndarray:
    """N_j(xi) for every node of the reference element.

    ``xi`` may be a single point ``(dims,)`` or a batch ``(n, dims)``.
    """
    xi = np.asarray(xi, dtype=float)
    ref = reference_nodes(xi.shape[-1])
    terms = 1.0 + xi[..., None, :] * ref
    return np.prod(terms, axis=-1) / 2 ** xi.shape[-1]


def shape_derivatives(xi) -> np.ndarray:
    """dN_j/dxi_a, shape ``(..., n_s, dims)``."""
    xi = np.asarray(xi, dtype=float)
    dims = xi.shape[-1]
    ref = reference_nodes(dims)
    terms = 1.0 + xi[..., None, :] * ref
    out = np.empty(xi.shape[:-1] + ref.shape)
    for a in range(dims):
        others = np.delete(terms, a, axis=-1)
        out[..., a] = ref[:, a] * np.prod(others, axis=-1)
    return out / 2 ** dims


def gauss_rule(dims: int, order: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Legendre points and weights on [-1, 1]^dims."""
    x, w = np.polynomial.legendre.leggauss(order)
    grids = np.meshgrid(*([x] * dims), indexing="ij")
    pts = np.stack([g.ravel(order="F") for g in grids], axis=1)
    wgrid = np.meshgrid(*([w] * dims), indexing="ij")
    wts = np.prod(np.stack([g.ravel(order="F") for g in wgrid], axis=1), axis=1)
    return pts, wts


@dataclass(frozen=True)
class ElementGeometry:
    """Cached per-element derivative data at a set of quadrature points.

    Attributes
    ----------
    dNdx : (n_e, n_q, n_s, dims) physical shape-function gradients
    N : (n_q, n_s) shape-function values at the quadrature points
    detJ : (n_e, n_q) Jacobian determinants
    weights : (n_q,) reference quadrature weights (sum to 2**dims)
    """

    dNdx: np.ndarray
    N: np.ndarray
    detJ: np.ndarray
    weights: np.ndarray

    @property
    def dims(self) -> int:
        return self.dNdx.shape[-1]

    @property
    def n_elements(self) -> int:
        return self.dNdx.shape[0]

    @property
    def n_quad(self) -> int:
        return self.dNdx.shape[1]

    @property
    def gauss_weight(self) -> float:
        return float(self.weights.sum()) if self.n_quad == 1 else float(self.weights[0])

    @property
    def dV(self) -> np.ndarray:
        """Quadrature volume of each point: weight * detJ, shape (n_e, n_q)."""
        return self.weights[None, :] * self.detJ

    @property
    def B_T(self) -> np.ndarray:
        """Scalar-gradient matrices, (n_e, n_q, dims, n_s)."""
        return np.swapaxes(self.dNdx, -1, -2)

    @property
    def B_u(self) -> np.ndarray:
        """Strain-displacement matrices, (n_e, n_q, n_voigt, n_s*dims).

        Columns are interleaved per node: (u1, u2[, u3]) of node 0, then node 1...
        """
        dims = self.dims
        table = VOIGT_2D if dims == 2 else VOIGT_3D
        n_e, n_q, n_s, _ = self.dNdx.shape
        B = np.zeros((n_e, n_q, len(table), n_s * dims))
        for row, pairs in enumerate(table):
            for comp, axis in pairs:
                B[:, :, row, comp::dims] = self.dNdx[:, :, :, axis]
        return B


def gradient_matrices(coords: np.ndarray, order: int = 1) -> ElementGeometry:
    """Shape-function gradients for a batch of elements.

    Parameters
    ----------
    coords : (n_e, n_s, dims) or (n_s, dims) element node coordinates, in the
        reference node order.
    order : Gauss order per axis; 1 gives the one-point rule at xi = 0.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 2:
        coords = coords[None]
    dims = coords.shape[-1]
    pts, wts = gauss_rule(dims, order)
    dN = shape_derivatives(pts)  # (n_q, n_s, dims)
    # J[e, q, a, b] = d x_b / d xi_a
    J = np.einsum("qsa,esb->eqab", dN, coords)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        bad = int(np.argmin(detJ.min(axis=1)))
        raise ShapeError(f"element {bad} is inverted or degenerate (detJ={detJ[bad].min():.3g})")
    Jinv = np.linalg.inv(J)
    dNdx = np.einsum("eqab,qsb->eqsa", Jinv, dN)
    return ElementGeometry(dNdx=dNdx, N=shape_values(pts), detJ=detJ, weights=wts)


def grid_geometry(grid, order: int = 1) -> ElementGeometry:
    return gradient_matrices(grid.nodes[grid.elements], order)


def integrate(values, geom: ElementGeometry) -> float:
    """sum_e sum_q w_q * f_eq * detJ_eq; per-element values broadcast over q."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] != geom.n_elements:
        raise ShapeError(f"{v.shape[0]} values for {geom.n_elements} elements")
    return float(np.sum(v * geom.dV))
