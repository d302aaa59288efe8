"""Element material properties from calibrated density images.

Apparent density is averaged over each element by quadrature on the
trilinear density field, then converted to modulus with a power law.
Plastic parameters follow the bilinear model used for vertebral bone:
yield stress ``21.70 * rho**1.52`` (MPa, rho in g/cm^3) and a post-yield
tangent of 5 % of the elastic modulus.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NoYieldError, ZeroOverlapError
from .mesh import Tet10Mesh
from .quadrature import composite_rule
from .volume import DensityCalibration, VoxelVolume, grey_to_density, sample_points

E_MIN = 0.01  # MPa
YIELD_COEFF = 21.70
YIELD_EXP = 1.52
HARDENING_RATIO = 0.05


@dataclass(frozen=True)
class ElasticityLaw:
    """``E = a * rho**b`` with E in MPa and rho in g/cm^3."""

    a: float = 4730.0
    b: float = 1.56

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"elasticity law needs a > 0 and b > 0, got a={self.a}, b={self.b}")


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Per-element material arrays (all of length n_elements)."""

    density: np.ndarray
    E: np.ndarray
    nu: np.ndarray
    sigma_y: np.ndarray | None = None
    Ep: np.ndarray | None = None

    def __post_init__(self):
        n = len(np.atleast_1d(self.density))
        arrs = {}
        for name in ("density", "E", "nu", "sigma_y", "Ep"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.array(np.broadcast_to(np.asarray(val, dtype=float), (n,)))
            arr.setflags(write=False)
            arrs[name] = arr
            object.__setattr__(self, name, arr)
        if np.any(arrs["density"] < 0):
            raise ValueError("densities must be non-negative")
        if np.any(arrs["E"] <= 0):
            raise ValueError("moduli must be positive")
        if np.any((arrs["nu"] <= 0) | (arrs["nu"] >= 0.5)):
            raise ValueError("Poisson ratio must lie in (0, 0.5)")
        if (self.sigma_y is None) != (self.Ep is None):
            raise ValueError("sigma_y and Ep must be given together")
        if self.sigma_y is not None:
            if np.any(arrs["sigma_y"] <= 0):
                raise ValueError("yield stresses must be positive")
            if np.any((arrs["Ep"] < 0) | (arrs["Ep"] >= arrs["E"])):
                raise ValueError("hardening tangent must satisfy 0 <= Ep < E")

    def __len__(self):
        return len(self.density)

    @property
    def has_plasticity(self):
        return self.sigma_y is not None

    def scaled(self, factor):
        """Copy with moduli (and plastic parameters) scaled by ``factor``."""
        return MaterialField(
            self.density, self.E * factor, self.nu,
            None if self.sigma_y is None else self.sigma_y * factor,
            None if self.Ep is None else self.Ep * factor,
        )

    @classmethod
    def uniform(cls, n_elements, E, nu=0.3, density=1.0, sigma_y=None, Ep=None):
        return cls(np.full(n_elements, float(density)), np.full(n_elements, float(E)), nu, sigma_y, Ep)


# --------------------------------------------------------------------------
# constitutive laws
# --------------------------------------------------------------------------

def density_to_modulus(rho, law: ElasticityLaw = ElasticityLaw(), e_min=E_MIN):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("density must be non-negative")
    E = np.maximum(law.a * rho ** law.b, e_min)
    return float(E) if E.ndim == 0 else E


def yield_stress(rho):
    """Yield stress (MPa) from apparent density (g/cm^3)."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise NoYieldError("yield stress is undefined for non-positive density")
    s = YIELD_COEFF * rho ** YIELD_EXP
    return float(s) if s.ndim == 0 else s


def hardening_modulus(E):
    """Post-yield tangent modulus (MPa), 5 % of ``E``."""
    E = np.asarray(E, dtype=float)
    if np.any(E <= 0):
        raise ValueError("elastic modulus must be positive")
    Ep = HARDENING_RATIO * E
    return float(Ep) if Ep.ndim == 0 else Ep


def plastic_parameters(density, E):
    """Vectorised yield stress and tangent; zero-density elements never yield."""
    density = np.asarray(density, dtype=float)
    sy = np.full(density.shape, np.inf)
    pos = density > 0
    sy[pos] = yield_stress(density[pos])
    return sy, hardening_modulus(E)


# --------------------------------------------------------------------------
# density integration
# --------------------------------------------------------------------------

def element_integrals(volume: VoxelVolume, mesh: Tet10Mesh, elements=None, order=4, levels=0,
                      transform=None, chunk_points=2_000_000):
    """Volume-averaged field value and overlap flag for each requested element.

    ``transform``, if given, maps sample values before averaging (used to
    average modulus instead of density). Samples outside the image
    contribute zero.
    """
    elems = np.arange(mesh.n_elements) if elements is None else np.atleast_1d(elements)
    nc, w = composite_rule(order, levels)
    step = max(1, chunk_points // len(w))
    avg = np.empty(len(elems))
    overlap = np.empty(len(elems), dtype=bool)
    for s in range(0, len(elems), step):
        block = elems[s:s + step]
        pts = mesh.physical_points(nc, block).reshape(-1, 3)
        vals = sample_points(volume, pts, fill=np.nan).reshape(len(block), len(w))
        inside = ~np.isnan(vals)
        vals = np.where(inside, vals, 0.0)
        if transform is not None:
            vals = np.where(inside, transform(vals), 0.0)
        avg[s:s + step] = vals @ w
        overlap[s:s + step] = inside.any(axis=1)
    return avg, overlap


def integrate_element_density(vol: VoxelVolume, mesh: Tet10Mesh, element, order=4, levels=0):
    """Apparent density of one element (index into ``mesh.elements``)."""
    rho, ok = element_integrals(vol, mesh, [element], order, levels)
    if not ok[0]:
        raise ZeroOverlapError(f"element {mesh.element_ids[element]} lies outside the volume",
                               [mesh.element_ids[element]])
    return float(rho[0])


def map_materials(mesh: Tet10Mesh, density_volume: VoxelVolume, law: ElasticityLaw = ElasticityLaw(),
                  nu=0.3, e_min=E_MIN, plasticity=False, order=4, levels=0, average="density"):
    """Element densities and moduli from a density image.

    ``average='density'`` integrates density then applies the law;
    ``average='modulus'`` integrates the law applied voxel-wise.
    """
    if density_volume.kind != "density":
        raise ValueError(f"expected a density volume, got kind={density_volume.kind!r}")
    rho, ok = element_integrals(density_volume, mesh, order=order, levels=levels)
    if not ok.all():
        ids = mesh.element_ids[~ok]
        raise ZeroOverlapError(f"{len(ids)} element(s) do not overlap the volume: {ids[:10].tolist()}", ids)
    rho = np.maximum(rho, 0.0)  # the degree-4 rule has a negative weight
    if average == "density":
        E = density_to_modulus(rho, law, e_min)
    elif average == "modulus":
        Eavg, _ = element_integrals(density_volume, mesh, order=order, levels=levels,
                                    transform=lambda r: law.a * np.maximum(r, 0.0) ** law.b)
        E = np.maximum(Eavg, e_min)
    else:
        raise ValueError(f"average must be 'density' or 'modulus', got {average!r}")
    E = np.atleast_1d(E)
    sy = Ep = None
    if plasticity:
        sy, Ep = plastic_parameters(rho, E)
    return MaterialField(rho, E, nu, sy, Ep)


# --------------------------------------------------------------------------
# clinical-CT remapping
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> R x + t``, mapping model coordinates into another image frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def read_transform(path):
    """12 numbers, row-major 3x4 ``[R | t]``."""
    vals = np.array(Path(path).read_text().split(), dtype=float)
    if vals.size != 12:
        raise ValueError(f"{path}: expected 12 numbers, found {vals.size}")
    m = vals.reshape(3, 4)
    return RigidTransform(m[:, :3], m[:, 3])


def write_transform(tr: RigidTransform, path):
    m = np.hstack([tr.rotation, tr.translation[:, None]])
    Path(path).write_text("\n".join(" ".join(repr(float(x)) for x in row) for row in m) + "\n")
    return Path(path)


def remap_materials(mesh: Tet10Mesh, transform: RigidTransform, clinical_volume: VoxelVolume,
                    cal: DensityCalibration, law: ElasticityLaw = ElasticityLaw(), **kwargs):
    """Materials of ``mesh`` read from a clinical grey image in another frame.

    The mesh is moved into the clinical frame only for sampling; the returned
    field is indexed like ``mesh.elements`` and ``mesh`` itself is untouched.
    """
    moved = mesh.transformed(transform.rotation, transform.translation)
    density = grey_to_density(clinical_volume, cal)
    return map_materials(moved, density, law, **kwargs)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def write_materials_csv(mesh: Tet10Mesh, mat: MaterialField, path):
    nan = np.full(len(mat), np.nan)
    sy = nan if mat.sigma_y is None else mat.sigma_y
    Ep = nan if mat.Ep is None else mat.Ep
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element_id", "density", "E", "nu", "sigma_y", "Ep"])
        for row in zip(mesh.element_ids, mat.density, mat.E, mat.nu, sy, Ep):
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
    return Path(path)


def read_materials_csv(mesh: Tet10Mesh, path):
    rows = list(csv.DictReader(open(path, newline="")))
    lookup = {int(e): i for i, e in enumerate(mesh.element_ids)}
    cols = {k: np.full(mesh.n_elements, np.nan) for k in ("density", "E", "nu", "sigma_y", "Ep")}
    for r in rows:
        i = lookup[int(r["element_id"])]
        for k in cols:
            cols[k][i] = float(r[k])
    plastic = not np.all(np.isnan(cols["sigma_y"]))
    return MaterialField(cols["density"], cols["E"], cols["nu"],
                         cols["sigma_y"] if plastic else None, cols["Ep"] if plastic else None)
