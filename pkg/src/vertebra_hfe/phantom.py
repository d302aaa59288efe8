"""Synthetic vertebra-like phantoms: density image, bone mask and Tet10 mesh.

The body is an elliptic cylinder standing on z = 0 with its axis on
x = y = 0. A cortical shell of constant thickness wraps a trabecular core;
an optional spherical lesion scales the density inside it (0 gives a
lytic void).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import PhantomSpecError
from .mesh import Tet10Mesh, structured_tet10
from .volume import VoxelVolume


@dataclass(frozen=True)
class PhantomSpec:
    radii: tuple = (15.0, 12.0)          # mm, semi-axes along x and y
    height: float = 24.0                 # mm
    shell_thickness: float = 1.0         # mm
    trabecular_density: float = 0.25     # g/cm^3
    cortical_density: float = 0.8        # g/cm^3
    lesion_center: tuple | None = None   # mm, body frame
    lesion_radius: float = 0.0           # mm
    lesion_multiplier: float = 1.0
    texture: float = 0.0                 # relative amplitude of smooth density texture
    texture_scale: float = 1.5           # mm, correlation length of the texture

    def validate(self):
        a, b = self.radii
        if min(a, b, self.height) <= 0:
            raise PhantomSpecError("radii and height must be positive")
        if not 0 < self.shell_thickness < min(a, b):
            raise PhantomSpecError("shell thickness must be positive and smaller than both radii")
        if self.trabecular_density < 0 or self.cortical_density < 0:
            raise PhantomSpecError("densities must be non-negative")
        if not 0.0 <= self.lesion_multiplier <= 1.0:
            raise PhantomSpecError("lesion multiplier must lie in [0, 1]")
        if self.texture < 0 or self.texture_scale <= 0:
            raise PhantomSpecError("texture amplitude must be >= 0 and its scale > 0")
        if self.has_lesion:
            c = np.asarray(self.lesion_center, float)
            r = self.lesion_radius
            if c.shape != (3,):
                raise PhantomSpecError("lesion center needs three coordinates")
            # the sphere must fit inside the body: check axial extent and the
            # ellipse on a ring of points around the equator
            if c[2] - r < 0 or c[2] + r > self.height:
                raise PhantomSpecError("lesion sphere crosses an endplate")
            ang = np.linspace(0, 2 * np.pi, 361)
            ring = c[:2] + r * np.column_stack([np.cos(ang), np.sin(ang)])
            if np.any((ring[:, 0] / a) ** 2 + (ring[:, 1] / b) ** 2 > 1.0 + 1e-12):
                raise PhantomSpecError("lesion sphere extends outside the body")

    @property
    def has_lesion(self):
        return self.lesion_center is not None and self.lesion_radius > 0

    def inside(self, points):
        p = np.asarray(points, float)
        a, b = self.radii
        return ((p[..., 0] / a) ** 2 + (p[..., 1] / b) ** 2 <= 1.0) & (p[..., 2] >= 0) & (p[..., 2] <= self.height)

    def density(self, points, seed=0):
        """Density (g/cm^3) at points (..., 3); 0 outside the body.

        Texture is a smooth random field fixed by ``seed`` and defined in
        physical space, so images of any voxel size sample the same field.
        """
        p = np.asarray(points, float)
        a, b = self.radii
        t = self.shell_thickness
        core = ((p[..., 0] / (a - t)) ** 2 + (p[..., 1] / (b - t)) ** 2) <= 1.0
        rho = np.where(core, self.trabecular_density, self.cortical_density)
        if self.texture > 0:
            rho = np.where(core, np.maximum(rho * (1.0 + self.texture * self._texture(p, seed)), 0.0), rho)
        rho = np.where(self.inside(p), rho, 0.0)
        if self.has_lesion:
            d2 = np.sum((p - np.asarray(self.lesion_center, float)) ** 2, axis=-1)
            rho = np.where(d2 <= self.lesion_radius ** 2, rho * self.lesion_multiplier, rho)
        return rho

    def _texture(self, p, seed):
        # unit-variance Gaussian field on a lattice of spacing scale/3, smoothed
        # with sigma = 3 lattice cells and read back trilinearly
        h = self.texture_scale / 3.0
        lo = np.array([-self.radii[0], -self.radii[1], 0.0]) - 4 * h
        n = np.ceil((np.array([2 * self.radii[0], 2 * self.radii[1], self.height]) + 8 * h) / h).astype(int) + 1
        rng = np.random.default_rng(seed)
        field = gaussian_filter(rng.standard_normal(tuple(n)), 3.0, mode="wrap")
        field /= field.std() or 1.0
        idx = ((p - lo) / h).reshape(-1, 3).T
        return map_coordinates(field, idx, order=1, mode="nearest").reshape(p.shape[:-1])


def phantom_volume(spec: PhantomSpec, voxel_size, seed=0, margin=2):
    """Density image of the phantom with ``margin`` empty voxels around the body."""
    a, b = spec.radii
    lo = np.array([-a, -b, 0.0]) - (margin - 0.5) * voxel_size
    hi = np.array([a, b, spec.height]) + (margin - 0.5) * voxel_size
    dims = tuple(int(n) for n in np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1)
    axes = [lo[d] + voxel_size * np.arange(dims[d]) for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return VoxelVolume(spec.density(pts, seed), voxel_size, lo, "density")


def generate_phantom(spec: PhantomSpec, voxel_size=0.25, mesh_edge=1.0, seed=0, margin=2):
    """Density volume, bone mask and mesh of a phantom.

    The volume covers the body plus ``margin`` voxels on each side. The mesh
    is a staircase of hexahedra (those whose center lies in the body), each
    split into six Tet10 elements; its layers are ``mesh_edge`` apart and
    aligned with the origin, axially starting at z = 0 (the height is
    rounded to a whole number of layers).
    """
    spec.validate()
    if voxel_size <= 0 or voxel_size > spec.shell_thickness:
        raise PhantomSpecError("voxel size must be positive and not exceed the shell thickness")
    if mesh_edge < 2 * voxel_size:
        raise PhantomSpecError("mesh edge must be at least twice the voxel size")
    density = phantom_volume(spec, voxel_size, seed, margin)
    mask = density.with_values((density.values > 0).astype(np.float32), kind="mask")
    return density, mask, phantom_mesh(spec, mesh_edge)


def phantom_mesh(spec: PhantomSpec, mesh_edge=1.0) -> Tet10Mesh:
    a, b = spec.radii
    nz = max(1, int(round(spec.height / mesh_edge)))
    zs = np.arange(nz + 1) * mesh_edge
    nx = int(np.ceil(a / mesh_edge))
    ny = int(np.ceil(b / mesh_edge))
    xs = np.arange(-nx, nx + 1) * mesh_edge
    ys = np.arange(-ny, ny + 1) * mesh_edge
    cx = 0.5 * (xs[1:] + xs[:-1])
    cy = 0.5 * (ys[1:] + ys[:-1])
    inside = (cx[:, None] / a) ** 2 + (cy[None, :] / b) ** 2 <= 1.0
    keep = np.repeat(inside[:, :, None], nz, axis=2)
    if not keep.any():
        raise PhantomSpecError("mesh edge too coarse for the body cross-section")
    return structured_tet10(xs, ys, zs, keep)
