"""Conforming simplicial meshes in one, two and three dimensions.

Meshes are immutable.  Refinement uses newest-vertex bisection with the
refinement edge stored as the facet opposite local vertex 0; a marked cell
is bisected twice, which splits a triangle into four children similar to
the parent.  On the structured right-triangle meshes produced by
:func:`build_rect_mesh` with square cells every refinement edge is a
hypotenuse, so all descendants stay right isosceles triangles.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Marker",
    "SimplicialMesh",
    "CellMarkSet",
    "NonObtuseReport",
    "build_interval_mesh",
    "build_rect_mesh",
    "build_box_mesh",
    "refine",
    "refine_uniform",
    "mark_interface",
    "check_non_obtuse",
    "evaluate_p1",
    "is_nested",
]

ANGLE_TOL = 1e-12


class Marker(IntEnum):
    NEUMANN = 0
    ROBIN = 1

    @classmethod
    def parse(cls, value: "Marker | str | int") -> "Marker":
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown boundary marker {value!r}") from None
        return cls(value)


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Immutable simplicial mesh with marked boundary facets.

    Parameters
    ----------
    vertices : (n_vertices, dim) array
    cells : (n_cells, dim + 1) int array
        Cells with nonpositive orientation are reordered so that every
        cell has positive signed volume.
    boundary_facets : (n_facets, dim) int array
    facet_markers : (n_facets,) array of :class:`Marker` values
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray
    facet_markers: np.ndarray
    _orient: bool = field(default=True, repr=False)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        dim = vertices.shape[1]
        if dim not in (1, 2, 3):
            raise ValueError(f"unsupported dimension {dim}")
        cells = np.array(self.cells, dtype=np.int64).reshape(-1, dim + 1)
        facets = np.array(self.boundary_facets, dtype=np.int64).reshape(-1, dim)
        markers = np.array(self.facet_markers, dtype=np.int8).reshape(-1)
        if markers.shape[0] != facets.shape[0]:
            raise ValueError("one marker per boundary facet is required")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise ValueError("cell refers to a vertex that does not exist")
        if self._orient and len(cells):
            det = _signed_dets(vertices, cells)
            if np.any(det == 0.0):
                raise ValueError("degenerate cell with zero volume")
            flip = det < 0
            if np.any(flip):
                cells[flip, -2], cells[flip, -1] = cells[flip, -1], cells[flip, -2].copy()
        for arr in (vertices, cells, facets, markers):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "boundary_facets", facets)
        object.__setattr__(self, "facet_markers", markers)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return _signed_dets(self.vertices, self.cells) / math.factorial(self.dim)

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        x = self.vertices[self.cells]
        diam = np.zeros(self.n_cells)
        for i, j in itertools.combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(x[:, i] - x[:, j], axis=1))
        return diam

    @property
    def h_max(self) -> float:
        return float(self.cell_diameters.max())

    @property
    def h_min(self) -> float:
        return float(self.cell_diameters.min())

    @cached_property
    def facet_measures(self) -> np.ndarray:
        """Hausdorff measure of every boundary facet (1 for points)."""
        x = self.vertices[self.boundary_facets]
        if self.dim == 1:
            return np.ones(len(x))
        if self.dim == 2:
            return np.linalg.norm(x[:, 1] - x[:, 0], axis=1)
        return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)

    @property
    def measure(self) -> float:
        return float(self.cell_volumes.sum())

    def with_markers(self, rule: Callable[[np.ndarray], "Marker | str"]) -> "SimplicialMesh":
        """Return a copy whose facet markers are ``rule(facet_midpoint)``."""
        mids = self.vertices[self.boundary_facets].mean(axis=1)
        markers = [Marker.parse(rule(m)) for m in mids]
        return SimplicialMesh(self.vertices, self.cells, self.boundary_facets, markers, _orient=False)

    def check_conforming(self) -> bool:
        """True iff every facet is shared by two cells or is a listed boundary facet."""
        keys, counts = np.unique(_sorted_facets(self.cells), axis=0, return_counts=True)
        if np.any(counts > 2):
            return False
        exposed = keys[counts == 1]
        listed = np.unique(np.sort(self.boundary_facets, axis=1), axis=0)
        return exposed.shape == listed.shape and bool(np.all(exposed == listed))


CellMarkSet = frozenset
"""Set of cell indices selected for refinement."""


def _validate_marks(mesh: SimplicialMesh, marks: Iterable[int]) -> np.ndarray:
    idx = np.fromiter((int(m) for m in marks), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= mesh.n_cells):
        raise ValueError("cell mark out of range")
    return np.unique(idx)


def _signed_dets(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    x = vertices[cells]
    edges = x[:, 1:, :] - x[:, :1, :]
    if vertices.shape[1] == 1:
        return edges[:, 0, 0]
    return np.linalg.det(edges)


def _sorted_facets(cells: np.ndarray) -> np.ndarray:
    n = cells.shape[1]
    facets = [np.delete(cells, i, axis=1) for i in range(n)]
    return np.sort(np.concatenate(facets), axis=1)


# ---------------------------------------------------------------------------
# builders


def build_interval_mesh(a: float, b: float, n_cells: int, markers: "tuple | None" = None) -> SimplicialMesh:
    """Uniform partition of ``[a, b]``; both end points are Robin facets by default."""
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    if int(n_cells) < 1:
        raise ValueError("n_cells must be positive")
    n_cells = int(n_cells)
    x = np.linspace(a, b, n_cells + 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    left, right = markers if markers is not None else (Marker.ROBIN, Marker.ROBIN)
    return SimplicialMesh(
        x[:, None], cells, [[0], [n_cells]], [Marker.parse(left), Marker.parse(right)]
    )


_SIDES_2D = ("left", "right", "bottom", "top")
_SIDES_3D = ("left", "right", "bottom", "top", "front", "back")


def _side_marker(marker_rule, side: str) -> Marker:
    if marker_rule is None:
        return Marker.ROBIN
    if isinstance(marker_rule, Mapping):
        return Marker.parse(marker_rule.get(side, Marker.ROBIN))
    return Marker.parse(marker_rule(side))


def build_rect_mesh(bounds, nx: int, ny: int, marker_rule=None) -> SimplicialMesh:
    """Structured mesh of a rectangle, every grid cell split into two right triangles.

    ``marker_rule`` maps the side names ``left/right/bottom/top`` to a
    marker, either as a mapping or as a callable; sides default to Robin.
    The diagonal of every grid cell runs from its lower-left to its upper-right
    corner, and the right-angle vertex of each triangle is stored first.
    """
    x0, y0, x1, y1 = map(float, bounds)
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate rectangle {bounds}")
    if int(nx) < 1 or int(ny) < 1:
        raise ValueError("nx and ny must be positive")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i, j = i.ravel(), j.ravel()
    sw, se, nw, ne = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
    lower = np.column_stack([se, ne, sw])
    upper = np.column_stack([nw, sw, ne])
    cells = np.empty((2 * len(i), 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    facets, markers = [], []
    for side in _SIDES_2D:
        mk = _side_marker(marker_rule, side)
        if side == "bottom":
            seg = [(vid(k, 0), vid(k + 1, 0)) for k in range(nx)]
        elif side == "top":
            seg = [(vid(k, ny), vid(k + 1, ny)) for k in range(nx)]
        elif side == "left":
            seg = [(vid(0, k), vid(0, k + 1)) for k in range(ny)]
        else:
            seg = [(vid(nx, k), vid(nx, k + 1)) for k in range(ny)]
        facets.extend(seg)
        markers.extend([mk] * len(seg))
    return SimplicialMesh(vertices, cells, facets, markers)


def build_box_mesh(bounds, n: "int | tuple", marker_rule=None) -> SimplicialMesh:
    """Structured tetrahedral mesh of a box by Kuhn (Freudenthal) subdivision."""
    x0, y0, z0, x1, y1, z1 = map(float, bounds)
    if not (x0 < x1 and y0 < y1 and z0 < z1):
        raise ValueError(f"degenerate box {bounds}")
    nx, ny, nz = (n, n, n) if np.isscalar(n) else map(int, n)
    if min(nx, ny, nz) < 1:
        raise ValueError("resolution must be positive")
    xs, ys, zs = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1), np.linspace(z0, z1, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"))
    cells = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for axis in perm:
            step = path[-1].copy()
            step[axis] += 1
            path.append(step)
        cells.append(np.column_stack([vid(I + p[0], J + p[1], K + p[2]) for p in path]))
    cells = np.concatenate(cells)

    facets, markers = [], []
    sides = {
        "left": (0, 0), "right": (0, nx), "bottom": (1, 0), "top": (1, ny), "front": (2, 0), "back": (2, nz),
    }
    keys, counts = np.unique(_sorted_facets(cells), axis=0, return_counts=True)
    exposed = keys[counts == 1]
    idx = np.stack(np.unravel_index(exposed, (nx + 1, ny + 1, nz + 1)), axis=-1)  # (F, 3 verts, 3 axes)
    for f, ijk in zip(exposed, idx):
        for name in _SIDES_3D:
            axis, val = sides[name]
            if np.all(ijk[:, axis] == val):
                facets.append(f)
                markers.append(_side_marker(marker_rule, name))
                break
    return SimplicialMesh(vertices, cells, facets, markers)


# ---------------------------------------------------------------------------
# refinement


class _EdgeMidpoints:
    """Registry of bisected edges, keyed by their sorted vertex pair."""

    def __init__(self):
        self.keys = np.empty(0, dtype=np.int64)
        self.mids = np.empty(0, dtype=np.int64)
        self.base = np.int64(1 << 31)

    def key(self, a, b):
        return np.minimum(a, b) * self.base + np.maximum(a, b)

    def get_or_create(self, a, b, vertices: list) -> np.ndarray:
        k = self.key(a, b)
        uniq, inv = np.unique(k, return_inverse=True)
        if len(self.keys):
            pos_c = np.minimum(np.searchsorted(self.keys, uniq), len(self.keys) - 1)
            found = self.keys[pos_c] == uniq
        else:
            pos_c = np.zeros(len(uniq), dtype=np.int64)
            found = np.zeros(len(uniq), dtype=bool)
        mids = np.empty(len(uniq), dtype=np.int64)
        mids[found] = self.mids[pos_c[found]]
        new = ~found
        if np.any(new):
            coords = vertices[0]
            lo = uniq[new] // self.base
            hi = uniq[new] % self.base
            start = len(coords)
            new_pts = 0.5 * (coords[lo] + coords[hi])
            vertices[0] = np.concatenate([coords, new_pts])
            mids[new] = np.arange(start, start + new.sum())
            order = np.argsort(np.concatenate([self.keys, uniq[new]]), kind="stable")
            self.keys = np.concatenate([self.keys, uniq[new]])[order]
            self.mids = np.concatenate([self.mids, mids[new]])[order]
        return mids[inv]

    def lookup(self, a, b) -> np.ndarray:
        """Midpoint index for each edge, or -1 if the edge was not bisected."""
        k = self.key(a, b)
        if len(self.keys) == 0:
            return np.full(len(k), -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.keys, k), len(self.keys) - 1)
        hit = self.keys[pos] == k
        return np.where(hit, self.mids[pos], -1)


def refine(mesh: SimplicialMesh, marks: Iterable[int]) -> SimplicialMesh:
    """Refine the marked cells and close the mesh conformingly.

    In 1D a marked interval is bisected.  In 2D a marked triangle is split
    into four similar children (all three edges bisected); neighbouring
    cells are bisected as required by newest-vertex bisection so that no
    hanging nodes remain.  The result does not depend on the order of
    ``marks``.  The vertices of ``mesh`` keep their indices.
    """
    idx = _validate_marks(mesh, marks)
    if idx.size == 0:
        return mesh
    if mesh.dim == 1:
        return _refine_1d(mesh, idx)
    if mesh.dim == 2:
        return _refine_2d(mesh, idx)
    raise NotImplementedError("local refinement is available in 1D and 2D only")


def refine_uniform(mesh: SimplicialMesh, times: int = 1) -> SimplicialMesh:
    for _ in range(times):
        mesh = refine(mesh, range(mesh.n_cells))
    return mesh


def _refine_1d(mesh: SimplicialMesh, idx: np.ndarray) -> SimplicialMesh:
    cells = mesh.cells
    n = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[cells[idx, 0]] + mesh.vertices[cells[idx, 1]])
    new_ids = np.arange(n, n + len(idx))
    keep = np.ones(mesh.n_cells, dtype=bool)
    keep[idx] = False
    left = np.column_stack([cells[idx, 0], new_ids])
    right = np.column_stack([new_ids, cells[idx, 1]])
    children = np.empty((2 * len(idx), 2), dtype=np.int64)
    children[0::2], children[1::2] = left, right
    # keep a deterministic cell order: survivors in place, children replace their parent
    out = []
    child_of = {int(c): k for k, c in enumerate(idx)}
    for c in range(mesh.n_cells):
        if keep[c]:
            out.append(cells[c])
        else:
            k = child_of[c]
            out.append(children[2 * k])
            out.append(children[2 * k + 1])
    vertices = np.concatenate([mesh.vertices, mids])
    return SimplicialMesh(vertices, np.array(out), mesh.boundary_facets, mesh.facet_markers)


def _cell_edges_2d(cells: np.ndarray) -> np.ndarray:
    """Local edges (1,2), (2,0), (0,1) of each triangle; edge 0 is the refinement edge."""
    return np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1)


def _refine_2d(mesh: SimplicialMesh, idx: np.ndarray) -> SimplicialMesh:
    cells = mesh.cells.copy()
    base = np.int64(1 << 31)
    edges = _cell_edges_2d(cells)  # (C, 3, 2)
    ekey = np.minimum(edges[..., 0], edges[..., 1]) * base + np.maximum(edges[..., 0], edges[..., 1])
    uniq, eid = np.unique(ekey, return_inverse=True)
    eid = eid.reshape(ekey.shape)
    marked = np.zeros(len(uniq), dtype=bool)
    marked[eid[idx].ravel()] = True
    # closure: a cell with any marked edge must bisect its refinement edge
    while True:
        need = marked[eid].any(axis=1) & ~marked[eid[:, 0]]
        if not need.any():
            break
        marked[eid[need, 0]] = True

    registry = _EdgeMidpoints()
    vertices = [mesh.vertices.copy()]
    # per-cell flag: is the refinement edge (local edge 0) marked?
    flags = marked[eid[:, 0]]
    # marks of the legs, needed for the children
    leg_marks = np.column_stack([marked[eid[:, 1]], marked[eid[:, 2]]])
    order = np.arange(len(cells), dtype=np.float64)
    while flags.any():
        b = np.flatnonzero(flags)
        p0, p1, p2 = cells[b, 0], cells[b, 1], cells[b, 2]
        m = registry.get_or_create(p1, p2, vertices)
        child1 = np.column_stack([m, p0, p1])  # refinement edge (p0, p1): parent edge 2
        child2 = np.column_stack([m, p2, p0])  # refinement edge (p2, p0): parent edge 1
        f1, f2 = leg_marks[b, 1], leg_marks[b, 0]
        keep = ~flags
        cells = np.concatenate([cells[keep], child1, child2])
        flags = np.concatenate([np.zeros(keep.sum(), bool), f1, f2])
        # children never carry further marks on their legs
        leg_marks = np.concatenate([leg_marks[keep], np.zeros((2 * len(b), 2), bool)])
        # sort key keeps the cell order deterministic and local
        order = np.concatenate([order[keep], order[b] + 0.25, order[b] + 0.5])
        srt = np.argsort(order, kind="stable")
        cells, flags, leg_marks, order = cells[srt], flags[srt], leg_marks[srt], order[srt]
        order = np.arange(len(cells), dtype=np.float64)

    coords = vertices[0]
    facets = mesh.boundary_facets
    markers = mesh.facet_markers
    mid = registry.lookup(facets[:, 0], facets[:, 1])
    split = mid >= 0
    new_facets = np.concatenate(
        [facets[~split], np.column_stack([facets[split, 0], mid[split]]), np.column_stack([mid[split], facets[split, 1]])]
    )
    new_markers = np.concatenate([markers[~split], markers[split], markers[split]])
    return SimplicialMesh(coords, cells, new_facets, new_markers)


def mark_interface(
    mesh: SimplicialMesh,
    phi: np.ndarray,
    threshold: float = 0.95,
    *,
    detect_crossings: bool = False,
    h_min: "float | None" = None,
) -> frozenset:
    """Cells touching the diffuse interface.

    A cell is marked iff one of its vertices has ``|phi| < threshold``.
    With ``detect_crossings`` a cell whose vertex values change sign is
    marked as well, which catches interfaces thinner than the cell.  Cells
    whose diameter is already at most ``h_min`` are never marked.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (mesh.n_vertices,):
        raise ValueError("phi does not live on this mesh")
    vals = phi[mesh.cells]
    hit = (np.abs(vals) < threshold).any(axis=1)
    if detect_crossings:
        hit |= (vals.min(axis=1) < 0.0) & (vals.max(axis=1) > 0.0)
    if h_min is not None:
        hit &= mesh.cell_diameters > h_min * (1.0 + 1e-9)
    return frozenset(np.flatnonzero(hit).tolist())


@dataclass
class NonObtuseReport:
    ok: bool
    worst_angle: float  # degrees, largest interior (dihedral) angle found
    offending: list  # (cell index, angle in degrees)

    def __bool__(self) -> bool:
        return self.ok


def check_non_obtuse(mesh: SimplicialMesh, tol: float = ANGLE_TOL) -> NonObtuseReport:
    """Check that every simplex is non-obtuse.

    Uses the barycentric gradients: the (dihedral) angle between the facets
    opposite vertices i and j has cosine ``-grad_i . grad_j / (|grad_i||grad_j|)``.
    """
    if mesh.dim == 1:
        return NonObtuseReport(True, 0.0, [])
    from .fem import barycentric_gradients

    grads = barycentric_gradients(mesh)
    norms = np.linalg.norm(grads, axis=2)
    worst = np.full(mesh.n_cells, -np.inf)
    cos_min = np.full(mesh.n_cells, np.inf)
    for i, j in itertools.combinations(range(mesh.dim + 1), 2):
        c = -np.einsum("cd,cd->c", grads[:, i], grads[:, j]) / (norms[:, i] * norms[:, j])
        cos_min = np.minimum(cos_min, c)
    worst = np.degrees(np.arccos(np.clip(cos_min, -1.0, 1.0)))
    bad = np.flatnonzero(cos_min < -tol)
    return NonObtuseReport(bad.size == 0, float(worst.max()), [(int(c), float(worst[c])) for c in bad])


# ---------------------------------------------------------------------------
# evaluation of P1 functions at arbitrary points


def _locate(mesh: SimplicialMesh, points: np.ndarray, tol: float = 1e-10):
    """Cell index and barycentric coordinates of each point."""
    x = mesh.vertices[mesh.cells]
    origin = x[:, 0, :]
    if mesh.dim == 1:
        inv = 1.0 / (x[:, 1, 0] - x[:, 0, 0])[:, None, None]
    else:
        inv = np.linalg.inv(np.transpose(x[:, 1:, :] - origin[:, None, :], (0, 2, 1)))
    centroids = x.mean(axis=1)
    tree = cKDTree(centroids)
    n = len(points)
    cell = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, mesh.dim + 1))
    pending = np.arange(n)
    for k in (8, 32, 128, mesh.n_cells):
        if pending.size == 0:
            break
        k = min(k, mesh.n_cells)
        _, cand = tree.query(points[pending], k=k)
        cand = cand.reshape(len(pending), -1)
        rel = points[pending][:, None, :] - origin[cand]
        lam = np.einsum("pkij,pkj->pki", inv[cand], rel)
        full = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        inside = full.min(axis=2) >= -tol
        found = inside.any(axis=1)
        # prefer the candidate with the largest minimal coordinate
        score = np.where(inside, full.min(axis=2), -np.inf)
        best = score.argmax(axis=1)
        rows = np.flatnonzero(found)
        cell[pending[rows]] = cand[rows, best[rows]]
        bary[pending[rows]] = full[rows, best[rows]]
        pending = pending[~found]
    if pending.size:
        raise ValueError(f"{pending.size} points lie outside the mesh")
    return cell, bary


def evaluate_p1(mesh: SimplicialMesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate the continuous piecewise linear function with nodal ``values`` at ``points``."""
    points = np.asarray(points, dtype=float).reshape(-1, mesh.dim)
    values = np.asarray(values, dtype=float)
    if mesh.dim == 1:
        order = np.argsort(mesh.vertices[:, 0])
        return np.interp(points[:, 0], mesh.vertices[order, 0], values[order])
    cell, bary = _locate(mesh, points)
    return np.einsum("pi,pi->p", bary, values[mesh.cells[cell]])


def is_nested(coarse: SimplicialMesh, fine: SimplicialMesh, tol: float = 1e-12) -> bool:
    """True iff every vertex of ``coarse`` is a vertex of ``fine``."""
    tree = cKDTree(fine.vertices)
    dist, _ = tree.query(coarse.vertices)
    scale = max(1.0, float(np.abs(fine.vertices).max()))
    return bool(np.all(dist <= tol * scale))
