"""Output: legacy VTK snapshots and CSV tables."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .mesh import SimplicialMesh

__all__ = ["write_vtk", "write_field_csv", "write_table_csv", "format_value"]

# VTK cell type per simplex dimension
_VTK_CELL = {1: 3, 2: 5, 3: 10}


def format_value(v) -> str:
    """Stable text form of a table entry (round-trip precision for floats)."""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_vtk(path, mesh: SimplicialMesh, point_data: Optional[Mapping[str, np.ndarray]] = None,
              title: str = "tumourfem") -> Path:
    """Write a legacy ASCII unstructured grid with scalar point data."""
    path = Path(path)
    pts = np.zeros((mesh.n_vertices, 3))
    pts[:, :mesh.dim] = mesh.vertices
    nloc = mesh.dim + 1
    with path.open("w") as f:
        f.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        np.savetxt(f, pts, fmt="%.17g")
        f.write(f"CELLS {mesh.n_cells} {mesh.n_cells * (nloc + 1)}\n")
        np.savetxt(f, np.column_stack([np.full(mesh.n_cells, nloc), mesh.cells]), fmt="%d")
        f.write(f"CELL_TYPES {mesh.n_cells}\n")
        np.savetxt(f, np.full(mesh.n_cells, _VTK_CELL[mesh.dim]), fmt="%d")
        if point_data:
            f.write(f"POINT_DATA {mesh.n_vertices}\n")
            for name, values in point_data.items():
                values = np.asarray(values, dtype=float)
                if values.shape != (mesh.n_vertices,):
                    raise ValueError(f"point data {name!r} does not match the mesh")
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(f, values, fmt="%.17g")
    return path


def write_field_csv(path, mesh: SimplicialMesh, fields: Mapping[str, np.ndarray]) -> Path:
    """Flat table of vertex index, coordinates and nodal values."""
    path = Path(path)
    coords = ["x", "y", "z"][:mesh.dim]
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vertex", *coords, *fields])
        cols = [np.asarray(v, dtype=float) for v in fields.values()]
        for i in range(mesh.n_vertices):
            w.writerow([i, *(format_value(c) for c in mesh.vertices[i]), *(format_value(c[i]) for c in cols)])
    return path


def write_table_csv(path, rows: Iterable[Iterable]) -> Path:
    """Write rows (header first) with round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path
