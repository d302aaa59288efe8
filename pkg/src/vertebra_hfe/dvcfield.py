"""Displacement fields sampled on a regular DVC grid.

A grid node ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing``. Nodes
that did not correlate carry NaN displacements; any quantity touching such
a node is undefined (NaN) rather than zero.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import EmptyStrainError, GridMismatchError
from .mesh import Tet10Mesh, interpolate_points
from .volume import VoxelVolume, sample_points

DEFAULT_SPACING = 1.95  # mm
UNITS = {"mm": 1.0, "um": 1e-3}

# strain components, tensor shear, in the order xx yy zz yz xz xy
VOIGT_PAIRS = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]


@dataclass(frozen=True, eq=False)
class DvcGrid:
    """Measured displacements (mm) on a regular grid with per-node flags."""

    displacement: np.ndarray          # (nx, ny, nz, 3)
    correlate: np.ndarray             # (nx, ny, nz) bool
    inside_bone: np.ndarray           # (nx, ny, nz) bool
    origin: tuple = (0.0, 0.0, 0.0)
    spacing: tuple = (DEFAULT_SPACING,) * 3

    def __post_init__(self):
        disp = np.array(self.displacement, dtype=float)
        if disp.ndim != 4 or disp.shape[-1] != 3:
            raise ValueError("displacement must have shape (nx, ny, nz, 3)")
        corr = np.array(self.correlate, dtype=bool)
        inside = np.array(self.inside_bone, dtype=bool)
        if corr.shape != disp.shape[:3] or inside.shape != disp.shape[:3]:
            raise ValueError("flag arrays must match the grid dims")
        if np.any(~np.isfinite(disp[corr])):
            raise ValueError("correlating nodes must carry finite displacements")
        disp[~corr] = np.nan
        spacing = tuple(float(s) for s in np.broadcast_to(np.asarray(self.spacing, float), (3,)))
        if any(s <= 0 for s in spacing):
            raise ValueError("grid spacing must be positive")
        for arr in (disp, corr, inside):
            arr.setflags(write=False)
        object.__setattr__(self, "displacement", disp)
        object.__setattr__(self, "correlate", corr)
        object.__setattr__(self, "inside_bone", inside)
        object.__setattr__(self, "spacing", spacing)
        origin = np.broadcast_to(np.asarray(self.origin, float), (3,))
        object.__setattr__(self, "origin", tuple(float(o) for o in origin))

    @property
    def dims(self):
        return tuple(int(n) for n in self.correlate.shape)

    def node_coords(self):
        """(nx, ny, nz, 3) world coordinates of the grid nodes."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def same_geometry(self, other):
        return (self.dims == other.dims and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
                and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0))

    def with_field(self, displacement, correlate=None):
        return replace(self, displacement=displacement,
                       correlate=self.correlate if correlate is None else correlate)


def empty_grid(origin, spacing, dims):
    dims = tuple(int(n) for n in dims)
    return DvcGrid(np.full(dims + (3,), np.nan), np.zeros(dims, bool), np.zeros(dims, bool), origin, spacing)


def grid_from_function(fn, origin, spacing, dims, correlate=None, inside_bone=None):
    """Grid whose displacements are ``fn(points)`` at its nodes; handy for analytic fields."""
    g = empty_grid(origin, spacing, dims)
    pts = g.node_coords()
    disp = np.asarray(fn(pts.reshape(-1, 3)), dtype=float).reshape(g.dims + (3,))
    corr = np.ones(g.dims, bool) if correlate is None else np.asarray(correlate, bool)
    inside = np.ones(g.dims, bool) if inside_bone is None else np.asarray(inside_bone, bool)
    return DvcGrid(np.where(corr[..., None], disp, np.nan), corr, inside, g.origin, g.spacing)


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------

def interpolate_grid(grid: DvcGrid, points):
    """Trilinear displacements at points; (values, available) with NaN where unavailable."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = np.asarray(grid.dims)
    h = np.asarray(grid.spacing)
    t = (pts - np.asarray(grid.origin)) / h
    # snap points within round-off of the grid boundary
    t = np.where(np.abs(t - np.rint(t)) < 1e-9, np.rint(t), t)
    inside = np.all((t >= 0) & (t <= n - 1), axis=1)
    out = np.full((len(pts), 3), np.nan)
    if not inside.any():
        return out, inside
    ti = t[inside]
    i0 = np.minimum(np.floor(ti).astype(np.intp), np.maximum(n - 2, 0))
    f = ti - i0
    acc = np.zeros((len(ti), 3))
    ok = np.ones(len(ti), bool)
    for b in range(8):
        off = np.array([b & 1, (b >> 1) & 1, (b >> 2) & 1])
        idx = np.minimum(i0 + off, n - 1)
        w = np.prod(np.where(off == 1, f, 1.0 - f), axis=1)
        corr = grid.correlate[idx[:, 0], idx[:, 1], idx[:, 2]]
        ok &= corr
        val = grid.displacement[idx[:, 0], idx[:, 1], idx[:, 2]]
        acc += w[:, None] * np.where(corr[:, None], val, 0.0)
    vals = np.where(ok[:, None], acc, np.nan)
    out[inside] = vals
    avail = np.zeros(len(pts), bool)
    avail[inside] = ok
    return out, avail


def trilinear_displacement(grid: DvcGrid, p):
    """Displacement vector at ``p`` or ``None`` when unavailable."""
    vals, ok = interpolate_grid(grid, np.reshape(p, (1, 3)))
    return vals[0] if ok[0] else None


def interpolate_slice(grid: DvcGrid, k, points_xy):
    """Bilinear interpolation on axial slice ``k``; (values, available).

    Corners with exactly zero weight (points on a cell edge or node) do not
    need to correlate.
    """
    pts = np.asarray(points_xy, dtype=float).reshape(-1, 2)
    n = np.asarray(grid.dims[:2])
    h = np.asarray(grid.spacing[:2])
    t = (pts - np.asarray(grid.origin[:2])) / h
    t = np.where(np.abs(t - np.rint(t)) < 1e-9, np.rint(t), t)
    inside = np.all((t >= 0) & (t <= n - 1), axis=1)
    out = np.full((len(pts), 3), np.nan)
    avail = np.zeros(len(pts), bool)
    if not inside.any():
        return out, avail
    ti = t[inside]
    i0 = np.minimum(np.floor(ti).astype(np.intp), np.maximum(n - 2, 0))
    f = ti - i0
    acc = np.zeros((len(ti), 3))
    ok = np.ones(len(ti), bool)
    disp = grid.displacement[:, :, k]
    corr = grid.correlate[:, :, k]
    for b in range(4):
        off = np.array([b & 1, (b >> 1) & 1])
        idx = np.minimum(i0 + off, n - 1)
        w = np.prod(np.where(off == 1, f, 1.0 - f), axis=1)
        c = corr[idx[:, 0], idx[:, 1]]
        ok &= c | (w == 0.0)
        acc += w[:, None] * np.where(c[:, None], disp[idx[:, 0], idx[:, 1]], 0.0)
    out[inside] = np.where(ok[:, None], acc, np.nan)
    avail[inside] = ok
    return out, avail


# --------------------------------------------------------------------------
# strains
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StrainGrid:
    """Cell-center strain tensors of a DVC grid (NaN where undefined)."""

    cell_strain: np.ndarray     # (nx-1, ny-1, nz-1, 3, 3)
    defined: np.ndarray         # (nx-1, ny-1, nz-1) bool
    origin: tuple
    spacing: tuple

    def cell_centers(self):
        axes = [self.origin[a] + self.spacing[a] * (np.arange(self.defined.shape[a]) + 0.5) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def node_strain(self):
        """Average of the defined adjacent cells at each grid node; (nx, ny, nz, 3, 3), NaN if none."""
        cs = np.where(self.defined[..., None, None], self.cell_strain, 0.0)
        shape = tuple(s + 1 for s in self.defined.shape)
        acc = np.zeros(shape + (3, 3))
        cnt = np.zeros(shape)
        for b in range(8):
            o = (b & 1, (b >> 1) & 1, (b >> 2) & 1)
            sl = tuple(slice(o[a], o[a] + self.defined.shape[a]) for a in range(3))
            acc[sl] += cs
            cnt[sl] += self.defined
        with np.errstate(invalid="ignore", divide="ignore"):
            out = acc / cnt[..., None, None]
        out[cnt == 0] = np.nan
        return out

    def components(self, node=False):
        """Six tensor components (xx, yy, zz, yz, xz, xy) on cells or nodes."""
        t = self.node_strain() if node else self.cell_strain
        return np.stack([t[..., i, j] for i, j in VOIGT_PAIRS], axis=-1)


def cell_gradients(grid: DvcGrid):
    """Gradient of the trilinear interpolant at every cell center, (nx-1, ny-1, nz-1, 3, 3).

    Entry ``[..., c, d]`` is d u_c / d x_d.
    """
    u = grid.displacement
    h = grid.spacing
    grad = np.empty(tuple(n - 1 for n in grid.dims) + (3, 3))
    # average the four parallel edge differences of each cell
    dx = (u[1:] - u[:-1]) / h[0]
    grad[..., 0] = 0.25 * (dx[:, :-1, :-1] + dx[:, 1:, :-1] + dx[:, :-1, 1:] + dx[:, 1:, 1:])
    dy = (u[:, 1:] - u[:, :-1]) / h[1]
    grad[..., 1] = 0.25 * (dy[:-1, :, :-1] + dy[1:, :, :-1] + dy[:-1, :, 1:] + dy[1:, :, 1:])
    dz = (u[:, :, 1:] - u[:, :, :-1]) / h[2]
    grad[..., 2] = 0.25 * (dz[:-1, :-1] + dz[1:, :-1] + dz[:-1, 1:] + dz[1:, 1:])
    return grad


def corner_gradients(grid: DvcGrid):
    """Gradient of the trilinear interpolant at the 8 corners of every cell, (nx-1, ny-1, nz-1, 8, 3, 3).

    Corner ``b`` has offsets ``(b & 1, (b >> 1) & 1, (b >> 2) & 1)``. Each
    gradient entry is multilinear over the cell, so its extremes sit at the
    corners.
    """
    u = grid.displacement
    h = grid.spacing
    nx, ny, nz = (n - 1 for n in grid.dims)
    dx = (u[1:] - u[:-1]) / h[0]
    dy = (u[:, 1:] - u[:, :-1]) / h[1]
    dz = (u[:, :, 1:] - u[:, :, :-1]) / h[2]
    grad = np.empty((nx, ny, nz, 8, 3, 3))
    for b in range(8):
        a0, a1, a2 = b & 1, (b >> 1) & 1, (b >> 2) & 1
        grad[..., b, :, 0] = dx[:, a1:a1 + ny, a2:a2 + nz]
        grad[..., b, :, 1] = dy[a0:a0 + nx, :, a2:a2 + nz]
        grad[..., b, :, 2] = dz[a0:a0 + nx, a1:a1 + ny, :]
    return grad


def peak_cell_strain(grid: DvcGrid):
    """Largest |strain component| of the trilinear interpolant within each cell (NaN if undefined)."""
    g = corner_gradients(grid)
    eps = 0.5 * (g + np.swapaxes(g, -1, -2))
    peak = np.abs(eps).max(axis=(-3, -2, -1))
    peak[~cell_defined(grid.correlate)] = np.nan
    return peak


def cell_defined(correlate):
    c = np.asarray(correlate, bool)
    out = np.ones(tuple(n - 1 for n in c.shape), bool)
    for b in range(8):
        o = (b & 1, (b >> 1) & 1, (b >> 2) & 1)
        out &= c[o[0]:c.shape[0] - 1 + o[0], o[1]:c.shape[1] - 1 + o[1], o[2]:c.shape[2] - 1 + o[2]]
    return out


def differentiate_strains(grid: DvcGrid) -> StrainGrid:
    """Small-strain tensor of each cell from the trilinear displacement interpolant."""
    if min(grid.dims) < 2:
        raise EmptyStrainError("strain differentiation needs at least 2 nodes per axis")
    defined = cell_defined(grid.correlate)
    if not defined.any():
        raise EmptyStrainError("no cell has all eight corners correlating")
    g = cell_gradients(grid)
    eps = 0.5 * (g + np.swapaxes(g, -1, -2))
    eps[~defined] = np.nan
    return StrainGrid(eps, defined, grid.origin, grid.spacing)


def zero_strain_uncertainty(grid_a: DvcGrid, grid_b: DvcGrid):
    """Per-node mean absolute strain component of the a-b difference field.

    Both grids describe the same unloaded specimen, so any strain is
    measurement noise. Undefined nodes are NaN.
    """
    if not grid_a.same_geometry(grid_b):
        raise GridMismatchError("uncertainty grids must share origin, spacing and dims")
    corr = grid_a.correlate & grid_b.correlate
    diff = np.where(corr[..., None], grid_a.displacement - grid_b.displacement, np.nan)
    strains = differentiate_strains(DvcGrid(diff, corr, grid_a.inside_bone, grid_a.origin, grid_a.spacing))
    comps = strains.components(node=True)
    return np.abs(comps).mean(axis=-1)


# --------------------------------------------------------------------------
# synthetic measurements
# --------------------------------------------------------------------------

def synthesize_dvc(mesh: Tet10Mesh, displacement, origin, spacing=DEFAULT_SPACING, dims=(2, 2, 2),
                   noise_sigma=0.0, seed=0, density_volume: VoxelVolume | None = None, min_density=None,
                   density_window=None):
    """Sample an FE nodal displacement field on a DVC grid, with optional noise.

    ``displacement`` is an (n_nodes, 3) array or anything with a ``u``
    attribute. Nodes outside the mesh do not correlate. When
    ``density_volume`` and ``min_density`` are given, nodes inside the mesh
    whose local mean density (box window of ``density_window`` mm, default
    one grid spacing) is below ``min_density`` do not correlate either,
    mimicking image regions without texture such as lytic voids.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    u = np.asarray(getattr(displacement, "u", displacement), dtype=float)
    g = empty_grid(origin, spacing, dims)
    pts = g.node_coords().reshape(-1, 3)
    vals, inside = interpolate_points(mesh, u, pts)
    corr = inside.copy()
    if density_volume is not None and min_density is not None:
        local = local_mean_density(density_volume, pts, density_window or float(np.mean(g.spacing)))
        corr &= local >= min_density
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=vals.shape) * noise_sigma
    disp = np.where(corr[:, None], vals + noise, np.nan)
    return DvcGrid(disp.reshape(g.dims + (3,)), corr.reshape(g.dims), inside.reshape(g.dims), g.origin, g.spacing)


def local_mean_density(volume: VoxelVolume, points, window):
    """Box-filtered density sampled at points (0 outside the volume)."""
    from scipy.ndimage import uniform_filter

    size = [max(1, int(round(window / h))) for h in volume.spacing]
    smooth = uniform_filter(np.asarray(volume.values, dtype=float), size=size, mode="constant")
    return sample_points(volume.with_values(smooth), points, fill=0.0)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

GRID_COLUMNS = ["i", "j", "k", "x_mm", "y_mm", "z_mm", "ux", "uy", "uz", "correlate", "inside_bone"]


def _grid_header_path(path):
    path = Path(path)
    return path.with_name(path.name + ".hdr")


def write_grid(grid: DvcGrid, path, units="mm"):
    """CSV of all nodes (i fastest) plus a ``<path>.hdr`` sidecar with the geometry."""
    scale = 1.0 / UNITS[units]
    path = Path(path)
    pts = grid.node_coords()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_COLUMNS)
        nx, ny, nz = grid.dims
        for k in range(nz):
            for j in range(ny):
                for i in range(nx):
                    d = grid.displacement[i, j, k] * scale
                    w.writerow([i, j, k, *(repr(float(c)) for c in pts[i, j, k]),
                                *(repr(float(c)) for c in d),
                                int(grid.correlate[i, j, k]), int(grid.inside_bone[i, j, k])])
    fmt = lambda t: " ".join(repr(float(x)) for x in t)  # noqa: E731
    _grid_header_path(path).write_text(
        f"origin_mm = {fmt(grid.origin)}\nspacing_mm = {fmt(grid.spacing)}\n"
        f"dims = {' '.join(str(n) for n in grid.dims)}\nunits = {units}\n")
    return path


def read_grid(path) -> DvcGrid:
    from .volume import _read_keyvalue

    path = Path(path)
    hdr = _read_keyvalue(_grid_header_path(path))
    dims = tuple(int(x) for x in hdr["dims"].split())
    units = hdr.get("units", "mm").replace("μm", "um")
    if units not in UNITS:
        raise ValueError(f"{path}: unknown displacement units {units!r}")
    scale = UNITS[units]
    disp = np.full(dims + (3,), np.nan)
    corr = np.zeros(dims, bool)
    inside = np.zeros(dims, bool)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i, j, k = int(row["i"]), int(row["j"]), int(row["k"])
            corr[i, j, k] = bool(int(row["correlate"]))
            inside[i, j, k] = bool(int(row["inside_bone"]))
            if corr[i, j, k]:
                disp[i, j, k] = [float(row["ux"]) * scale, float(row["uy"]) * scale, float(row["uz"]) * scale]
    return DvcGrid(disp, corr, inside,
                   [float(x) for x in hdr["origin_mm"].split()],
                   [float(x) for x in hdr["spacing_mm"].split()])
