"""Voxel image container, phantom-based density calibration and trilinear sampling.

World convention shared by the whole package: the center of voxel ``(i, j, k)``
sits at ``origin + (i, j, k) * spacing`` (mm). Values are held as float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CalibrationError, KindMismatchError, OutOfBoundsError

KINDS = ("grey", "density", "mask")

_DTYPES = {
    "uint8": "<u1",
    "int16": "<i2",
    "uint16": "<u2",
    "int32": "<i4",
    "float32": "<f4",
    "float64": "<f8",
}


@dataclass(frozen=True)
class VoxelVolume:
    """Regular 3-D scalar image.

    Parameters
    ----------
    values : array_like, shape (nx, ny, nz)
        Grey values, densities (g/cm^3) or a 0/1 mask. Stored as float32.
    spacing : sequence of 3 floats
        Voxel size along x, y, z in mm.
    origin : sequence of 3 floats
        World position (mm) of the center of voxel (0, 0, 0).
    kind : {'grey', 'density', 'mask'}
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = "grey"

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 3:
            raise ValueError(f"volume values must be 3-D, got shape {vals.shape}")
        if min(vals.shape) < 1:
            raise ValueError("volume dims must all be >= 1")
        vals = np.ascontiguousarray(vals, dtype=np.float32)
        vals.setflags(write=False)
        spacing = _triple(self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "mask" and not np.all((vals == 0) | (vals == 1)):
            raise ValueError("mask volumes may only contain 0 and 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin))

    @property
    def dims(self):
        return tuple(int(n) for n in self.values.shape)

    @property
    def bounds(self):
        """(lo, hi) corners of the sampling domain: voxel centers padded by half a voxel."""
        h = np.asarray(self.spacing)
        o = np.asarray(self.origin)
        n = np.asarray(self.dims)
        return o - 0.5 * h, o + (n - 0.5) * h

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape (nx, ny, nz, 3)."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_values(self, values, kind=None):
        return replace(self, values=values, kind=kind or self.kind)


def _triple(v):
    arr = np.broadcast_to(np.asarray(v, dtype=float), (3,))
    return tuple(float(x) for x in arr)


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityCalibration:
    """Affine grey-to-density law with an optional affine correction.

    ``rho = correction_scale * (slope * grey + intercept) + correction_offset``
    """

    slope: float
    intercept: float
    correction_scale: float = 1.0
    correction_offset: float = 0.0
    residual: float = field(default=0.0, compare=False)

    def __call__(self, grey):
        base = self.slope * np.asarray(grey, dtype=float) + self.intercept
        return self.correction_scale * base + self.correction_offset

    def inverse(self, density):
        """Grey value that maps to ``density`` (no clamping)."""
        base = (np.asarray(density, dtype=float) - self.correction_offset) / self.correction_scale
        return (base - self.intercept) / self.slope


def fit_calibration(samples, correction=(1.0, 0.0)):
    """Least-squares line through phantom (grey value, density) samples.

    The RMS residual of the fit is stored on the returned calibration.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise CalibrationError("calibration needs at least 2 (grey, density) samples")
    grey, rho = arr[:, 0], arr[:, 1]
    if np.ptp(grey) == 0:
        raise CalibrationError("all calibration grey values are identical")
    A = np.column_stack([grey, np.ones_like(grey)])
    (slope, intercept), *_ = np.linalg.lstsq(A, rho, rcond=None)
    resid = float(np.sqrt(np.mean((A @ [slope, intercept] - rho) ** 2)))
    return DensityCalibration(float(slope), float(intercept),
                              float(correction[0]), float(correction[1]), resid)


def grey_to_density(volume: VoxelVolume, cal: DensityCalibration) -> VoxelVolume:
    """Apply the calibration voxel-wise; negative densities are clamped to 0."""
    if volume.kind != "grey":
        raise KindMismatchError(f"expected a grey volume, got kind={volume.kind!r}")
    rho = np.maximum(cal(volume.values), 0.0)
    return volume.with_values(rho, kind="density")


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_points(volume: VoxelVolume, points, fill=None):
    """Trilinear interpolation at many points.

    Points inside the half-voxel-padded box are interpolated from the 8
    surrounding voxel centers (clamped to the outermost centers inside the
    padding). Points outside the box get ``fill``; with ``fill=None`` an
    :class:`OutOfBoundsError` is raised instead.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lo, hi = volume.bounds
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    if fill is None and not inside.all():
        bad = pts[~inside][0]
        raise OutOfBoundsError(f"point {bad.tolist()} outside volume bounds {lo.tolist()}..{hi.tolist()}")
    out = np.full(len(pts), np.nan if fill is None else float(fill))
    if inside.any():
        out[inside] = _trilinear(volume, pts[inside])
    return out


def sample_trilinear(volume: VoxelVolume, point) -> float:
    """Trilinear sample of ``volume`` at a single world point (mm)."""
    return float(sample_points(volume, np.reshape(point, (1, 3)))[0])


def _trilinear(volume, pts):
    n = np.asarray(volume.dims)
    idx = (pts - np.asarray(volume.origin)) / np.asarray(volume.spacing)
    idx = np.clip(idx, 0.0, n - 1)
    i0 = np.minimum(np.floor(idx).astype(np.intp), np.maximum(n - 2, 0))
    t = idx - i0
    i1 = np.minimum(i0 + 1, n - 1)
    v = volume.values
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    tx, ty, tz = t.T
    c00 = v[x0, y0, z0] * (1 - tx) + v[x1, y0, z0] * tx
    c10 = v[x0, y1, z0] * (1 - tx) + v[x1, y1, z0] * tx
    c01 = v[x0, y0, z1] * (1 - tx) + v[x1, y0, z1] * tx
    c11 = v[x0, y1, z1] * (1 - tx) + v[x1, y1, z1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


def sample_nearest(volume: VoxelVolume, points, fill=0.0):
    """Nearest-voxel lookup; points outside the padded box get ``fill``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    idx = np.rint((pts - np.asarray(volume.origin)) / np.asarray(volume.spacing)).astype(np.intp)
    n = np.asarray(volume.dims)
    ok = np.all((idx >= 0) & (idx < n), axis=1)
    out = np.full(len(pts), float(fill))
    out[ok] = volume.values[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    return out


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def _read_keyvalue(path):
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        entries[key.strip()] = val.strip()
    return entries


def write_volume(volume: VoxelVolume, path, dtype="float32"):
    """Write ``<path>`` (key=value header) and ``<path stem>.raw`` (little-endian, x fastest)."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    data = volume.values.astype(_DTYPES[dtype])
    raw.write_bytes(data.tobytes(order="F"))
    fmt = lambda t: " ".join(repr(float(x)) for x in t)  # noqa: E731
    path.write_text(
        f"data_file = {raw.name}\n"
        f"dims = {' '.join(str(n) for n in volume.dims)}\n"
        f"spacing_mm = {fmt(volume.spacing)}\n"
        f"origin_mm = {fmt(volume.origin)}\n"
        f"dtype = {dtype}\n"
        f"kind = {volume.kind}\n"
    )
    return path


def read_volume(path) -> VoxelVolume:
    path = Path(path)
    hdr = _read_keyvalue(path)
    dims = tuple(int(x) for x in hdr["dims"].split())
    dtype = hdr.get("dtype", "float32")
    if dtype not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {dtype!r}")
    raw = path.parent / hdr.get("data_file", path.with_suffix(".raw").name)
    data = np.frombuffer(raw.read_bytes(), dtype=_DTYPES[dtype])
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{raw}: expected {int(np.prod(dims))} values, found {data.size}")
    return VoxelVolume(
        data.reshape(dims, order="F"),
        spacing=[float(x) for x in hdr["spacing_mm"].split()],
        origin=[float(x) for x in hdr.get("origin_mm", "0 0 0").split()],
        kind=hdr.get("kind", "grey"),
    )


def write_calibration(cal: DensityCalibration, path):
    Path(path).write_text(
        f"slope = {cal.slope!r}\n"
        f"intercept = {cal.intercept!r}\n"
        f"correction_scale = {cal.correction_scale!r}\n"
        f"correction_offset = {cal.correction_offset!r}\n"
        f"residual = {cal.residual!r}\n"
    )
    return Path(path)


def read_calibration(path) -> DensityCalibration:
    kv = _read_keyvalue(path)
    return DensityCalibration(
        float(kv["slope"]),
        float(kv["intercept"]),
        float(kv.get("correction_scale", 1.0)),
        float(kv.get("correction_offset", 0.0)),
        float(kv.get("residual", 0.0)),
    )


def read_calibration_samples(path):
    """Two-column text file of phantom (grey, density) pairs; '#' comments allowed."""
    return np.loadtxt(path, dtype=float, ndmin=2, delimiter=None)
