"""Piecewise linear finite elements with mass lumping.

Nodal fields are plain ``(n_vertices,)`` arrays tied to a :class:`P1Space`.
"""

from __future__ import annotations

import math
from functools import cached_property, lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import Marker, SimplicialMesh

__all__ = [
    "P1Space",
    "barycentric_gradients",
    "simplex_quadrature",
]


def barycentric_gradients(mesh: SimplicialMesh) -> np.ndarray:
    """Constant gradients of the barycentric coordinates, shape ``(n_cells, dim+1, dim)``."""
    x = mesh.vertices[mesh.cells]
    edges = x[:, 1:, :] - x[:, :1, :]
    inv_t = np.transpose(np.linalg.inv(edges), (0, 2, 1))
    g0 = -inv_t.sum(axis=1, keepdims=True)
    return np.concatenate([g0, inv_t], axis=1)


@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, n: int = 3):
    """Collapsed Gauss-Jacobi rule on the reference simplex.

    Returns barycentric points ``(nq, dim+1)`` and weights summing to one,
    exact for polynomials of degree ``2n - 1``.
    """
    nodes, weights = [], []
    for k in range(dim):
        alpha = dim - 1 - k
        t, w = roots_jacobi(n, alpha, 0.0)
        nodes.append(0.5 * (1.0 + t))
        weights.append(w / 2.0 ** (alpha + 1))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrid = np.prod(np.meshgrid(*weights, indexing="ij"), axis=0).ravel()
    xi = [g.ravel() for g in grids]
    # collapsed map: x_1 = xi_1, x_k = xi_k * prod_{j<k} (1 - xi_j)
    cart = []
    scale = np.ones_like(xi[0])
    for k in range(dim):
        cart.append(xi[k] * scale)
        scale = scale * (1.0 - xi[k])
    cart = np.column_stack(cart)
    bary = np.column_stack([1.0 - cart.sum(axis=1), cart])
    wgrid = wgrid / wgrid.sum()
    return bary, wgrid


class P1Space:
    """Continuous piecewise linear functions on a mesh.

    Caches the lumped masses, the boundary lumped masses and the sparsity
    pattern of the stiffness matrix so that weighted stiffness matrices can
    be rebuilt cheaply in every Newton iteration.
    """

    def __init__(self, mesh: SimplicialMesh):
        self.mesh = mesh
        self.dim = mesh.dim
        self.n = mesh.n_vertices
        self._bmass = {}
        self.grads = barycentric_gradients(mesh)
        vol = mesh.cell_volumes
        self.local_stiffness = vol[:, None, None] * np.einsum("cid,cjd->cij", self.grads, self.grads)

        nloc = mesh.dim + 1
        rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
        cols = np.tile(mesh.cells, (1, nloc)).ravel()
        key = rows * self.n + cols
        uniq, self._scatter = np.unique(key, return_inverse=True)
        self._indices = (uniq % self.n).astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // self.n, minlength=self.n))]).astype(np.int32)

    # -- masses --------------------------------------------------------------

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        share = self.mesh.cell_volumes / (self.dim + 1)
        return np.bincount(self.mesh.cells.ravel(), weights=np.repeat(share, self.dim + 1), minlength=self.n)

    def boundary_mass(self, marker: "Marker | None" = None) -> np.ndarray:
        """Boundary lumped masses, optionally restricted to facets carrying ``marker``."""
        key = None if marker is None else int(Marker.parse(marker))
        if key not in self._bmass:
            self._bmass[key] = self._boundary_mass(key)
        return self._bmass[key]

    def _boundary_mass(self, marker):
        mesh = self.mesh
        sel = np.ones(len(mesh.boundary_facets), bool) if marker is None else mesh.facet_markers == marker
        facets = mesh.boundary_facets[sel]
        share = mesh.facet_measures[sel] / mesh.dim
        out = np.bincount(facets.ravel(), weights=np.repeat(share, mesh.dim), minlength=self.n)
        out.setflags(write=False)
        return out

    def consistent_mass(self) -> sp.csr_matrix:
        """Exact P1 mass matrix; used only as a test oracle."""
        d = self.dim
        local = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
        data = self.mesh.cell_volumes[:, None, None] * local[None]
        return self._to_csr(data)

    # -- stiffness -----------------------------------------------------------

    def _to_csr(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._scatter, weights=local.ravel(), minlength=len(self._indices))
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n, self.n))

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return self._to_csr(self.local_stiffness)

    def assemble_stiffness(self, weight: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """Stiffness matrix weighted by the cell mean of a nodal weight.

        The cell mean integrates the linear interpolant of the weight against
        the constant gradient products exactly.
        """
        if weight is None:
            return self.stiffness
        weight = self._check(weight)
        if np.any(weight <= 0.0):
            raise ValueError("stiffness weight must be strictly positive")
        wbar = weight[self.mesh.cells].mean(axis=1)
        return self._to_csr(wbar[:, None, None] * self.local_stiffness)

    # -- inner products and norms -------------------------------------------

    def _check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n,):
            raise ValueError(f"field of shape {u.shape} does not live on a mesh with {self.n} vertices")
        return u

    def lumped_inner(self, u, v) -> float:
        return float(np.dot(self.lumped_mass * self._check(u), self._check(v)))

    def lumped_boundary_inner(self, u, v, marker=None) -> float:
        return float(np.dot(self.boundary_mass(marker) * self._check(u), self._check(v)))

    def norm_h(self, u) -> float:
        return math.sqrt(max(self.lumped_inner(u, u), 0.0))

    def seminorm_h1(self, u) -> float:
        u = self._check(u)
        return math.sqrt(max(float(u @ (self.stiffness @ u)), 0.0))

    def norm_boundary_h(self, u, marker=None) -> float:
        return math.sqrt(max(self.lumped_boundary_inner(u, u, marker), 0.0))

    def discrete_laplacian(self, q) -> np.ndarray:
        """Discrete Neumann Laplacian ``-M_lumped^{-1} K q``."""
        return -(self.stiffness @ self._check(q)) / self.lumped_mass

    # -- interpolation ---------------------------------------------------------

    def nodal_interpolate(self, f: "Callable | float") -> np.ndarray:
        """Nodal values ``f(P_p)``; ``f`` maps an ``(n, dim)`` array to ``(n,)``."""
        if np.isscalar(f):
            return np.full(self.n, float(f))
        return np.asarray(f(self.mesh.vertices), dtype=float).reshape(self.n)

    def quadrature_points(self, order: int = 3):
        """Physical quadrature points ``(n_cells, nq, dim)``, barycentric coordinates and weights.

        The weights include the cell volume.
        """
        bary, w = simplex_quadrature(self.dim, order)
        x = self.mesh.vertices[self.mesh.cells]
        pts = np.einsum("qi,cid->cqd", bary, x)
        return pts, bary, self.mesh.cell_volumes[:, None] * w[None, :]

    def _eval_at_quadrature(self, f, order):
        pts, bary, w = self.quadrature_points(order)
        if np.isscalar(f):
            vals = np.full(w.shape, float(f))
        else:
            vals = np.asarray(f(pts.reshape(-1, self.dim)), dtype=float).reshape(w.shape)
        return pts, bary, w, vals

    def clement_interpolate(self, f: "Callable | float", order: int = 3) -> np.ndarray:
        """Clement quasi-interpolant via patch-wise L2 projection onto linears.

        The value at vertex ``p`` is the value at ``P_p`` of the L2 projection
        of ``f`` onto affine functions over the union of cells sharing ``p``.
        Reproduces affine ``f`` exactly.
        """
        if np.isscalar(f):
            return np.full(self.n, float(f))
        mesh = self.mesh
        pts, _, w, vals = self._eval_at_quadrature(f, order)
        d = self.dim
        nloc = d + 1
        verts = mesh.cells.ravel()
        # patch length scale keeps the local normal equations well conditioned
        patch_h = np.zeros(self.n)
        np.maximum.at(patch_h, verts, np.repeat(mesh.cell_diameters, nloc))
        centre = mesh.vertices[verts].reshape(-1, nloc, d)
        rel = (pts[:, None, :, :] - centre[:, :, None, :]) / patch_h[verts].reshape(-1, nloc)[:, :, None, None]
        basis = np.concatenate([np.ones(rel.shape[:-1] + (1,)), rel], axis=-1)  # (C, nloc, nq, d+1)
        gram = np.einsum("cq,cvqi,cvqj->cvij", w, basis, basis).reshape(-1, d + 1, d + 1)
        rhs = np.einsum("cq,cq,cvqi->cvi", w, vals, basis).reshape(-1, d + 1)
        G = np.zeros((self.n, d + 1, d + 1))
        b = np.zeros((self.n, d + 1))
        np.add.at(G, verts, gram)
        np.add.at(b, verts, rhs)
        coef = np.linalg.solve(G, b[..., None])[..., 0]
        return coef[:, 0]

    def lumped_projection(self, f: "Callable | float", order: int = 3) -> np.ndarray:
        """Projection ``Q`` with ``<Q f, z>_h = (f, z)_{L2}`` for all ``z`` in the space."""
        pts, bary, w, vals = self._eval_at_quadrature(f, order)
        local = np.einsum("cq,cq,qi->ci", w, vals, bary)
        load = np.bincount(self.mesh.cells.ravel(), weights=local.ravel(), minlength=self.n)
        return load / self.lumped_mass

    def l2_error(self, u: np.ndarray, f: Callable, order: int = 5) -> float:
        """Exact-quadrature L2 distance between the P1 function ``u`` and ``f``."""
        pts, bary, w, vals = self._eval_at_quadrature(f, order)
        uq = np.einsum("qi,ci->cq", bary, self._check(u)[self.mesh.cells])
        return math.sqrt(float(np.sum(w * (uq - vals) ** 2)))
