"""Solution tables and legacy VTK files for external plotting."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dvcfield import VOIGT_PAIRS, DvcGrid
from .errors import ContractError
from .mesh import Tet10Mesh
from .solver import principal_strains

VTK_QUADRATIC_TETRA = 24
STRAIN_NAMES = ["exx", "eyy", "ezz", "eyz", "exz", "exy"]


def _fmt(x):
    return repr(float(x))


# --------------------------------------------------------------------------
# solution CSV
# --------------------------------------------------------------------------

def write_solution_csv(mesh: Tet10Mesh, sol, nodes_path, elements_path=None, bc_sets=None):
    """Per-node (id, ux, uy, uz, rx, ry, rz, bc_set) and per-element tables.

    Reactions are blank where a component is unconstrained. ``bc_sets`` maps
    a label (e.g. ``"up"``) to node indices; other nodes get an empty label.
    The element table holds the six centroid strains (tensor shear), the
    three principal strains (descending) and the von Mises stress.
    """
    labels = np.full(mesh.n_nodes, "", dtype=object)
    for name, nodes in (bc_sets or {}).items():
        labels[np.asarray(nodes, np.intp)] = name
    react = sol.reactions
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "ux", "uy", "uz", "rx", "ry", "rz", "bc_set"])
        for nid, u, r, lab in zip(mesh.node_ids, sol.u, react, labels):
            w.writerow([int(nid), *map(_fmt, u), *("" if np.isnan(v) else _fmt(v) for v in r), lab])
    if elements_path is not None:
        eps = np.stack([sol.strain[:, i, j] for i, j in VOIGT_PAIRS], axis=1)
        p = principal_strains(sol.strain)
        vm = sol.von_mises
        with open(elements_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *STRAIN_NAMES, "p1", "p2", "p3", "von_mises"])
            for eid, e, pr, v in zip(mesh.element_ids, eps, p, vm):
                w.writerow([int(eid), *map(_fmt, e), *map(_fmt, pr), _fmt(v)])
    return Path(nodes_path)


@dataclass(eq=False)
class NodalResult:
    """Displacements and reactions read back from a node table."""

    u: np.ndarray
    reactions: np.ndarray
    bc_set: np.ndarray

    @property
    def constrained(self):
        return ~np.isnan(self.reactions)

    @property
    def nodal_forces(self):
        return np.nan_to_num(self.reactions)

    def nodes_in(self, label):
        return np.flatnonzero(self.bc_set == label)


def read_solution_nodes(mesh: Tet10Mesh, path) -> NodalResult:
    u = np.full((mesh.n_nodes, 3), np.nan)
    r = np.full((mesh.n_nodes, 3), np.nan)
    lab = np.full(mesh.n_nodes, "", dtype=object)
    seen = np.zeros(mesh.n_nodes, bool)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = mesh.node_index.get(int(row["id"]))
            if i is None:
                raise ContractError(f"{path}: node id {row['id']} is not in the mesh")
            u[i] = [float(row[k]) for k in ("ux", "uy", "uz")]
            r[i] = [float(row[k]) if row.get(k, "") not in ("", None) else np.nan for k in ("rx", "ry", "rz")]
            lab[i] = row.get("bc_set", "") or ""
            seen[i] = True
    if not seen.all():
        raise ContractError(f"{path}: {int((~seen).sum())} mesh node(s) missing from the table")
    return NodalResult(u, r, lab)


# --------------------------------------------------------------------------
# grid tables
# --------------------------------------------------------------------------

def write_grid_table(grid: DvcGrid, path, columns: dict):
    """CSV over all grid nodes: i, j, k, x, y, z followed by the given (nx, ny, nz[, c]) arrays."""
    pts = grid.node_coords().reshape(-1, 3)
    idx = np.column_stack(np.unravel_index(np.arange(pts.shape[0]), grid.dims))
    names, data = [], []
    for name, arr in columns.items():
        a = np.asarray(arr, dtype=float).reshape(pts.shape[0], -1)
        if a.shape[1] == 1:
            names.append(name)
        else:
            names.extend(f"{name}_{c}" for c in range(a.shape[1]))
        data.append(a)
    data = np.hstack(data) if data else np.zeros((pts.shape[0], 0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "x_mm", "y_mm", "z_mm", *names])
        for ijk, p, row in zip(idx, pts, data):
            w.writerow([*map(int, ijk), *map(_fmt, p), *("" if np.isnan(v) else _fmt(v) for v in row)])
    return Path(path)


# --------------------------------------------------------------------------
# legacy VTK
# --------------------------------------------------------------------------

def _vtk_arrays(fh, arrays, n):
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=float).reshape(n, -1)
        if a.shape[1] == 3:
            fh.write(f"VECTORS {name} double\n")
        else:
            fh.write(f"SCALARS {name} double {a.shape[1]}\nLOOKUP_TABLE default\n")
        for row in a:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def write_vtk_mesh(mesh: Tet10Mesh, path, point_data=None, cell_data=None):
    """ASCII legacy unstructured grid with quadratic tetrahedra."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nvertebra_hfe model\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for p in mesh.coords:
            fh.write(" ".join(_fmt(v) for v in p) + "\n")
        m = mesh.n_elements
        fh.write(f"CELLS {m} {11 * m}\n")
        for e in mesh.elements:
            fh.write("10 " + " ".join(str(int(v)) for v in e) + "\n")
        fh.write(f"CELL_TYPES {m}\n")
        fh.write(f"{VTK_QUADRATIC_TETRA}\n" * m)
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            _vtk_arrays(fh, point_data, mesh.n_nodes)
        if cell_data:
            fh.write(f"CELL_DATA {m}\n")
            _vtk_arrays(fh, cell_data, m)
    return Path(path)


def write_vtk_grid(grid: DvcGrid, path, point_data=None):
    """ASCII legacy structured-points file of a DVC grid (NaN where undefined)."""
    n = int(np.prod(grid.dims))
    arrays = {"displacement": grid.displacement, "correlate": grid.correlate, "inside_bone": grid.inside_bone}
    arrays.update(point_data or {})
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nvertebra_hfe DVC grid\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write("DIMENSIONS {} {} {}\n".format(*grid.dims))
        fh.write("ORIGIN {} {} {}\n".format(*map(_fmt, grid.origin)))
        fh.write("SPACING {} {} {}\n".format(*map(_fmt, grid.spacing)))
        fh.write(f"POINT_DATA {n}\n")
        # VTK point order is x fastest
        _vtk_arrays(fh, {k: np.asarray(v, float).reshape(grid.dims + (-1,)).transpose(2, 1, 0, 3)
                         for k, v in arrays.items()}, n)
    return Path(path)
