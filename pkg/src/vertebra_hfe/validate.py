"""FE-versus-DVC comparison: boundary conditions, metrics, exclusion and error propagation."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dvcfield import DvcGrid, StrainGrid, differentiate_strains, interpolate_slice, peak_cell_strain
from .errors import (CoverageError, DegenerateRegressionError, EmptyComparisonError,
                     EmptyStrainError, InsufficientDataError)
from .mesh import Tet10Mesh, central_region_filter, interpolate_points
from .solver import DirichletSet, principal_strains
from .volume import VoxelVolume, sample_nearest

DIRECTIONS = ("x", "y", "z")


# --------------------------------------------------------------------------
# boundary conditions from DVC
# --------------------------------------------------------------------------

def extract_bc_slices(grid: DvcGrid, min_points=4):
    """(upper, lower) axial slice indices closest to the endplates with enough usable points."""
    usable = (grid.correlate & grid.inside_bone).sum(axis=(0, 1))
    ok = np.flatnonzero(usable >= min_points)
    if len(ok) < 2:
        raise CoverageError(f"need two axial slices with >= {min_points} correlating bone points, found {len(ok)}")
    return int(ok[-1]), int(ok[0])


@dataclass(frozen=True, eq=False)
class DvcBoundary:
    """Dirichlet data built from the two BC slices."""

    bc: DirichletSet
    up_nodes: np.ndarray
    down_nodes: np.ndarray
    upper_z: float
    lower_z: float
    extrapolated_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.intp))


def _slice_values(mesh, grid, k, nodes, extrapolate, neighbors, max_distance):
    xy = mesh.coords[nodes, :2]
    vals, ok = interpolate_slice(grid, k, xy)
    missing = np.flatnonzero(~ok)
    if len(missing) and extrapolate:
        corr = grid.correlate[:, :, k]
        if corr.sum() >= 3:
            gx = grid.node_coords()[:, :, k, :2][corr]
            gu = grid.displacement[:, :, k][corr]
            tree = cKDTree(gx)
            kk = min(neighbors, len(gx))
            dist, idx = tree.query(xy[missing], k=kk)
            idx = np.atleast_2d(idx.reshape(len(missing), kk))
            dist = np.atleast_2d(dist.reshape(len(missing), kk))
            for row, node_i in enumerate(missing):
                if dist[row, 0] > max_distance:
                    continue
                P = gx[idx[row]]
                A = np.column_stack([np.ones(kk), P - xy[node_i]])
                if np.linalg.matrix_rank(A) < 3:
                    continue
                coef, *_ = np.linalg.lstsq(A, gu[idx[row]], rcond=None)
                vals[node_i] = coef[0]
                ok[node_i] = True
    bad = np.flatnonzero(~ok)
    if len(bad):
        ids = mesh.node_ids[nodes[bad]]
        raise CoverageError(f"{len(ids)} BC node(s) project outside the correlated region of slice {k}: "
                            f"{ids[:10].tolist()}", ids)
    return vals, nodes[missing] if extrapolate else np.zeros(0, np.intp)


def build_dirichlet_from_dvc(mesh: Tet10Mesh, grid: DvcGrid, slices, extrapolate=False,
                             neighbors=8, max_distance=None, tol=None) -> DvcBoundary:
    """Constrain all nodes beyond the two BC slice planes with the slice displacements.

    Nodes with ``z >= z_upper`` take the in-plane bilinear interpolation of
    slice ``upper`` (axially clamped to the slice), nodes with
    ``z <= z_lower`` that of slice ``lower``. With ``extrapolate=True`` nodes
    falling outside the correlated cells get a local least-squares affine fit
    of the nearest correlating slice points (within ``max_distance``, default
    two grid spacings); otherwise they raise :class:`CoverageError`.
    """
    upper, lower = slices
    if upper <= lower:
        raise ValueError("upper slice index must exceed the lower one")
    h = grid.spacing[2]
    tol = 1e-6 * h if tol is None else tol
    max_distance = 2.0 * max(grid.spacing[:2]) if max_distance is None else max_distance
    z_up = grid.origin[2] + upper * h
    z_lo = grid.origin[2] + lower * h
    z = mesh.coords[:, 2]
    up = np.flatnonzero(z >= z_up - tol)
    down = np.flatnonzero(z <= z_lo + tol)
    if len(up) == 0 or len(down) == 0:
        raise CoverageError("no mesh nodes lie beyond one of the BC slice planes")
    u_up, ex_up = _slice_values(mesh, grid, upper, up, extrapolate, neighbors, max_distance)
    u_lo, ex_lo = _slice_values(mesh, grid, lower, down, extrapolate, neighbors, max_distance)
    bc = DirichletSet.from_nodes(up, u_up).merge(DirichletSet.from_nodes(down, u_lo))
    return DvcBoundary(bc, up, down, z_up, z_lo, np.concatenate([ex_up, ex_lo]))


# --------------------------------------------------------------------------
# paired samples
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pairs:
    """Co-located DVC and FE displacements at qualifying grid nodes."""

    indices: np.ndarray   # (n, 3) grid indices
    points: np.ndarray    # (n, 3) mm
    dvc: np.ndarray       # (n, 3) mm
    fe: np.ndarray        # (n, 3) mm

    def __len__(self):
        return len(self.points)

    def subset(self, keep):
        keep = np.asarray(keep, bool)
        return Pairs(self.indices[keep], self.points[keep], self.dvc[keep], self.fe[keep])

    @property
    def error(self):
        return self.fe - self.dvc

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "x_mm", "y_mm", "z_mm", "dvc_ux", "dvc_uy", "dvc_uz",
                        "fe_ux", "fe_uy", "fe_uz"])
            for idx, p, d, f in zip(self.indices, self.points, self.dvc, self.fe):
                w.writerow([*map(int, idx), *(repr(float(v)) for v in (*p, *d, *f))])
        return Path(path)


def read_pairs_csv(path) -> Pairs:
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, dtype=float))
    if rows.size == 0:
        raise EmptyComparisonError(f"{path}: no pairs")
    return Pairs(rows[:, :3].astype(np.intp), rows[:, 3:6], rows[:, 6:9], rows[:, 9:12])


def fe_at_dvc_points(mesh: Tet10Mesh, solution, grid: DvcGrid, fraction=0.75, keep=None) -> Pairs:
    """Pair DVC displacements with FE displacements interpolated by the element shape functions.

    Only correlating nodes inside the mesh and within the central
    ``fraction`` of its axial extent qualify. ``keep`` is an optional extra
    boolean filter over the grid nodes (nx, ny, nz).
    """
    u = np.asarray(getattr(solution, "u", solution), dtype=float)
    pts = grid.node_coords().reshape(-1, 3)
    sel = grid.correlate.reshape(-1).copy()
    if keep is not None:
        sel &= np.asarray(keep, bool).reshape(-1)
    sel &= central_region_filter(mesh, pts, fraction)
    cand = np.flatnonzero(sel)
    fe, inside = interpolate_points(mesh, u, pts[cand])
    cand, fe = cand[inside], fe[inside]
    if len(cand) == 0:
        raise EmptyComparisonError("no DVC point qualifies for comparison")
    idx = np.column_stack(np.unravel_index(cand, grid.dims))
    dvc = grid.displacement.reshape(-1, 3)[cand]
    return Pairs(idx, pts[cand], dvc, fe)


def subset_trabecular(points, mask: VoxelVolume):
    """Boolean keep-flags for points whose nearest mask voxel is 1."""
    if mask.kind != "mask":
        raise ValueError(f"expected a mask volume, got kind={mask.kind!r}")
    return sample_nearest(mask, points, fill=0.0) == 1.0


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionMetrics:
    slope: float
    intercept: float
    r2: float
    rmse: float
    rmse_pct: float
    max_abs_error: float
    n_points: int

    def as_dict(self):
        return asdict(self)


def regression_metrics(reference, predicted) -> RegressionMetrics:
    """Least-squares fit of ``predicted`` on ``reference`` plus error statistics.

    RMSE% normalises by the largest absolute reference value. When the
    predictions are constant the fit explains nothing and R^2 is reported as 0.
    """
    x = np.asarray(reference, dtype=float).ravel()
    y = np.asarray(predicted, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("reference and predicted must have the same length")
    if len(x) < 3:
        raise InsufficientDataError(f"regression needs at least 3 pairs, got {len(x)}")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 1e-300 or np.ptp(x) == 0:
        raise DegenerateRegressionError("reference values have zero variance")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_res = np.sum((y - (slope * x + intercept)) ** 2)
    ss_tot = np.sum((y - ym) ** 2)
    r2 = 0.0 if ss_tot == 0 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    diff = y - x
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    return RegressionMetrics(float(slope), float(intercept), r2, rmse,
                             float(100.0 * rmse / np.max(np.abs(x))),
                             float(np.max(np.abs(diff))), int(len(x)))


def direction_metrics(pairs: Pairs, directions=(0, 1, 2)):
    """Metrics per direction (None where degenerate) and pooled over ``directions``."""
    out = {}
    for d in range(3):
        try:
            out[DIRECTIONS[d]] = regression_metrics(pairs.dvc[:, d], pairs.fe[:, d])
        except (DegenerateRegressionError, InsufficientDataError):
            out[DIRECTIONS[d]] = None
    dirs = list(directions)
    pooled = None
    if dirs:
        try:
            pooled = regression_metrics(pairs.dvc[:, dirs].ravel(), pairs.fe[:, dirs].ravel())
        except (DegenerateRegressionError, InsufficientDataError):
            pooled = None
    return out, pooled


def direction_reliability(grid: DvcGrid, voxel_size):
    """Per direction: median |displacement| over correlating nodes and whether it reaches ``voxel_size``."""
    disp = grid.displacement[grid.correlate]
    out = {}
    for d, name in enumerate(DIRECTIONS):
        med = float(np.median(np.abs(disp[:, d]))) if len(disp) else 0.0
        out[name] = {"median_abs_mm": med, "reliable": bool(med >= voxel_size)}
    return out


# --------------------------------------------------------------------------
# exclusion criteria
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExclusionConfig:
    strain_limit: float = 0.010
    strain_warning: float = 0.008
    max_over_fraction: float = 0.25
    min_correlating_fraction: float = 0.5
    uncertainty_r2: float = 0.5


@dataclass
class ExclusionReport:
    criterion1: dict
    criterion2: dict
    criterion3: dict

    @property
    def overall_excluded(self):
        return any(bool(c.get("excluded")) for c in (self.criterion1, self.criterion2, self.criterion3))

    def triggered(self):
        return [i + 1 for i, c in enumerate((self.criterion1, self.criterion2, self.criterion3))
                if c.get("excluded")]

    def as_dict(self):
        return {"criterion1": self.criterion1, "criterion2": self.criterion2,
                "criterion3": self.criterion3, "overall_excluded": self.overall_excluded}


def strain_overload(strains: StrainGrid, grid: DvcGrid, limit):
    """Fraction of correlating nodes whose max or min principal strain exceeds ``limit`` in magnitude."""
    node = strains.node_strain()
    sel = grid.correlate & np.all(np.isfinite(node), axis=(-1, -2))
    if not sel.any():
        return float("nan"), 0
    p = principal_strains(node[sel])
    over = (p[:, 0] > limit) | (p[:, -1] < -limit)
    return float(over.mean()), int(sel.sum())


def exclusion_check(pairs: Pairs, strains: StrainGrid, grid: DvcGrid, uncertainty=None,
                    config: ExclusionConfig = ExclusionConfig(), directions=(0, 1, 2)) -> ExclusionReport:
    """Evaluate the three exclusion criteria for one specimen.

    1. over-limit experimental principal strains at more than
       ``max_over_fraction`` of the correlating points;
    2. fewer than ``min_correlating_fraction`` of the inside-bone grid points
       correlate (the measurable signature of a lesion destroying most of
       the body);
    3. per direction, |FE - DVC| strongly correlated (R^2 above
       ``uncertainty_r2`` with positive slope) with the zero-strain
       uncertainty at the same points.
    """
    frac, n = strain_overload(strains, grid, config.strain_limit)
    warn, _ = strain_overload(strains, grid, config.strain_warning)
    c1 = {"fraction_over_limit": frac, "fraction_over_warning": warn, "n_points": n,
          "limit": config.strain_limit, "threshold": config.max_over_fraction,
          "excluded": bool(np.isfinite(frac) and frac > config.max_over_fraction)}

    inside = grid.inside_bone
    n_in = int(inside.sum())
    corr_frac = float((grid.correlate & inside).sum() / n_in) if n_in else 0.0
    c2 = {"correlating_fraction": corr_frac, "n_inside_bone": n_in,
          "threshold": config.min_correlating_fraction,
          "excluded": bool(corr_frac < config.min_correlating_fraction)}

    if uncertainty is None:
        c3 = {"status": "not evaluated", "excluded": None}
    else:
        unc = np.asarray(uncertainty, float)[tuple(pairs.indices.T)]
        per_dir = {}
        strong = False
        for d in directions:
            err = np.abs(pairs.error[:, d])
            ok = np.isfinite(unc) & np.isfinite(err)
            try:
                m = regression_metrics(unc[ok], err[ok])
            except (DegenerateRegressionError, InsufficientDataError):
                per_dir[DIRECTIONS[d]] = None
                continue
            hit = m.r2 > config.uncertainty_r2 and m.slope > 0
            strong |= hit
            per_dir[DIRECTIONS[d]] = {"r2": m.r2, "slope": m.slope, "n_points": m.n_points, "strong": hit}
        c3 = {"status": "evaluated", "per_direction": per_dir, "threshold": config.uncertainty_r2,
              "excluded": bool(strong)}
    return ExclusionReport(c1, c2, c3)


# --------------------------------------------------------------------------
# error propagation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ErrorPropagation:
    quick: np.ndarray                 # (nx, ny, nz, 3) |error| / spacing per component
    strains: StrainGrid | None        # strains of the error field
    node_error_strain: np.ndarray     # (nx, ny, nz) mean |component| of error strain
    residual: np.ndarray | None       # node_error_strain minus zero-strain uncertainty
    peak: np.ndarray | None = None    # (nx-1, ny-1, nz-1) largest |error strain| within each cell

    def summary(self):
        def stats(a):
            a = np.asarray(a)[np.isfinite(a)]
            if a.size == 0:
                return None
            return {"mean": float(a.mean()), "median": float(np.median(a)), "max": float(a.max()),
                    "min": float(a.min()), "n": int(a.size)}
        out = {"quick_estimate": stats(np.max(self.quick, axis=-1)),
               "error_strain": stats(self.node_error_strain)}
        if self.residual is not None:
            out["residual_after_uncertainty"] = stats(self.residual)
        if self.peak is not None:
            out["peak_cell_error_strain"] = stats(self.peak)
        return out


def error_grid(grid: DvcGrid, pairs: Pairs) -> DvcGrid:
    """Grid carrying FE - DVC at the paired nodes and undefined elsewhere."""
    err = np.full(grid.dims + (3,), np.nan)
    corr = np.zeros(grid.dims, bool)
    i, j, k = pairs.indices.T
    err[i, j, k] = pairs.error
    corr[i, j, k] = True
    return DvcGrid(err, corr, grid.inside_bone, grid.origin, grid.spacing)


def propagate_displacement_error(grid: DvcGrid, error, uncertainty=None) -> ErrorPropagation:
    """Turn nodal displacement errors into strain errors.

    ``error`` is an (nx, ny, nz, 3) array (NaN where undefined) or a
    :class:`DvcGrid` holding it. The quick estimate divides each error
    component by the grid spacing; the full estimate differentiates the
    error field like a measured displacement field. When a zero-strain
    ``uncertainty`` map is supplied it is subtracted pointwise.
    """
    if isinstance(error, DvcGrid):
        eg = error
    else:
        err = np.asarray(error, dtype=float)
        ok = np.all(np.isfinite(err), axis=-1)
        eg = DvcGrid(np.where(ok[..., None], err, np.nan), ok, grid.inside_bone, grid.origin, grid.spacing)
    quick = np.abs(eg.displacement) / np.asarray(eg.spacing)
    try:
        strains = differentiate_strains(eg)
        node = np.abs(strains.components(node=True)).mean(axis=-1)
        peak = peak_cell_strain(eg)
    except EmptyStrainError:
        strains = None
        node = np.full(eg.dims, np.nan)
        peak = None
    residual = None if uncertainty is None else node - np.asarray(uncertainty, float)
    return ErrorPropagation(quick, strains, node, residual, peak)
