"""Straight-edged quadratic tetrahedral meshes.

Node ordering inside an element follows the usual quadratic-tet convention:
four vertices, then the mid-edge nodes of edges (0,1), (1,2), (0,2), (0,3),
(1,3), (2,3). Geometry is taken from the vertices only, so the Jacobian is
constant per element and fields are interpolated quadratically.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import GeometryError

EDGES = np.array([(0, 1), (1, 2), (0, 2), (0, 3), (1, 3), (2, 3)])

INSIDE_TOL = 1e-9


# --------------------------------------------------------------------------
# shape functions
# --------------------------------------------------------------------------

def shape_tet10(nc):
    """Quadratic tetrahedron shape functions at barycentric coordinates.

    ``nc`` has shape (..., 4); the result has shape (..., 10).
    """
    nc = np.asarray(nc, dtype=float)
    out = np.empty(nc.shape[:-1] + (10,))
    out[..., :4] = nc * (2.0 * nc - 1.0)
    out[..., 4:] = 4.0 * nc[..., EDGES[:, 0]] * nc[..., EDGES[:, 1]]
    return out


def shape_tet10_dnc(nc):
    """Derivatives of the 10 shape functions w.r.t. the 4 barycentric coordinates, (..., 10, 4)."""
    nc = np.asarray(nc, dtype=float)
    d = np.zeros(nc.shape[:-1] + (10, 4))
    for a in range(4):
        d[..., a, a] = 4.0 * nc[..., a] - 1.0
    for e, (i, j) in enumerate(EDGES):
        d[..., 4 + e, i] = 4.0 * nc[..., j]
        d[..., 4 + e, j] = 4.0 * nc[..., i]
    return d


# --------------------------------------------------------------------------
# mesh
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Tet10Mesh:
    """Quadratic tetrahedral mesh.

    ``elements`` holds 0-based row indices into ``coords``; ``node_ids`` and
    ``element_ids`` carry the external labels used in files.
    """

    coords: np.ndarray
    elements: np.ndarray
    node_ids: np.ndarray = None
    element_ids: np.ndarray = None
    axial_direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        elems = np.array(self.elements, dtype=np.intp)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError("coords must have shape (n_nodes, 3)")
        if elems.ndim != 2 or elems.shape[1] != 10:
            raise ValueError("elements must have shape (n_elements, 10)")
        if elems.size and (elems.min() < 0 or elems.max() >= len(coords)):
            raise ValueError("element connectivity references a missing node")
        nid = np.arange(1, len(coords) + 1) if self.node_ids is None else np.array(self.node_ids)
        eid = np.arange(1, len(elems) + 1) if self.element_ids is None else np.array(self.element_ids)
        if len(nid) != len(coords) or len(eid) != len(elems):
            raise ValueError("id arrays must match coords/elements lengths")
        if len(np.unique(nid)) != len(nid) or len(np.unique(eid)) != len(eid):
            raise ValueError("node and element ids must be unique")
        ax = np.asarray(self.axial_direction, dtype=float)
        ax = ax / np.linalg.norm(ax)
        for arr in (coords, elems, nid, eid):
            arr.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "elements", elems)
        object.__setattr__(self, "node_ids", nid)
        object.__setattr__(self, "element_ids", eid)
        object.__setattr__(self, "axial_direction", tuple(ax))
        bad = np.flatnonzero(self.volumes <= 0)
        if len(bad):
            raise GeometryError(
                f"{len(bad)} element(s) with non-positive volume, e.g. id {eid[bad[0]]}",
                element_ids=eid[bad])

    @property
    def n_nodes(self):
        return len(self.coords)

    @property
    def n_elements(self):
        return len(self.elements)

    @cached_property
    def vertex_coords(self):
        return self.coords[self.elements[:, :4]]

    @cached_property
    def _jacobians(self):
        v = self.vertex_coords
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=-1)

    @cached_property
    def volumes(self):
        return np.linalg.det(self._jacobians) / 6.0

    @cached_property
    def bary_gradients(self):
        """Constant gradients of the 4 barycentric coordinates, (m, 4, 3)."""
        jinv = np.linalg.inv(self._jacobians)
        g = np.empty((self.n_elements, 4, 3))
        g[:, 1:] = jinv
        g[:, 0] = -jinv.sum(axis=1)
        return g

    @cached_property
    def edge_lengths(self):
        v = self.vertex_coords
        return np.linalg.norm(v[:, EDGES[:, 1]] - v[:, EDGES[:, 0]], axis=-1)

    @cached_property
    def centroids(self):
        return self.vertex_coords.mean(axis=1)

    @cached_property
    def node_index(self):
        return {int(n): i for i, n in enumerate(self.node_ids)}

    def check_midedges(self, rtol=1e-6):
        """Ids of elements whose mid-edge nodes are off the straight edge midpoints."""
        v = self.vertex_coords
        mid = 0.5 * (v[:, EDGES[:, 0]] + v[:, EDGES[:, 1]])
        dev = np.linalg.norm(self.coords[self.elements[:, 4:]] - mid, axis=-1)
        return self.element_ids[np.any(dev > rtol * self.edge_lengths, axis=1)]

    def physical_points(self, nc, elements=None):
        """World coordinates of barycentric points; ``nc`` is (q, 4) or (m, q, 4)."""
        v = self.vertex_coords if elements is None else self.vertex_coords[elements]
        nc = np.asarray(nc, dtype=float)
        if nc.ndim == 2:
            return np.einsum("qa,mad->mqd", nc, v)
        return np.einsum("mqa,mad->mqd", nc, v)

    def shape_gradients(self, nc, elements=None):
        """Cartesian gradients of the 10 shape functions.

        ``nc`` of shape (q, 4) gives the same points in every element; the
        result has shape (m, q, 10, 3).
        """
        dn = shape_tet10_dnc(nc)
        g = self.bary_gradients if elements is None else self.bary_gradients[elements]
        return np.einsum("qna,mad->mqnd", dn, g)

    def axial_coordinates(self, points=None):
        pts = self.coords if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ np.asarray(self.axial_direction)

    def transformed(self, rotation, translation):
        """Copy with node coordinates mapped through ``x -> R x + t``; ids and connectivity kept."""
        R = np.asarray(rotation, dtype=float)
        new = self.coords @ R.T + np.asarray(translation, dtype=float)
        return Tet10Mesh(new, self.elements, self.node_ids, self.element_ids,
                         tuple(R @ np.asarray(self.axial_direction)))

    @cached_property
    def locator(self):
        return PointLocator(self)


# --------------------------------------------------------------------------
# point location
# --------------------------------------------------------------------------

def barycentric(mesh, elements, points):
    """Barycentric coordinates of ``points[i]`` w.r.t. element ``elements[i]``."""
    v0 = mesh.vertex_coords[elements, 0]
    lam = np.einsum("mkd,md->mk", mesh.bary_gradients[elements, 1:], points - v0)
    return np.column_stack([1.0 - lam.sum(axis=1), lam])


class PointLocator:
    """Uniform grid over element bounding boxes (cell size ~ 2x mean edge length)."""

    def __init__(self, mesh, cell_size=None):
        self.mesh = mesh
        v = mesh.vertex_coords
        bb_lo, bb_hi = v.min(axis=1), v.max(axis=1)
        self.lo = bb_lo.min(axis=0)
        hi = bb_hi.max(axis=0)
        h = float(cell_size or 2.0 * mesh.edge_lengths.mean())
        self.h = h
        self.shape = np.maximum(np.ceil((hi - self.lo) / h).astype(np.intp), 1)
        c_lo = self._cell(bb_lo)
        c_hi = self._cell(bb_hi)
        ext = c_hi - c_lo + 1
        counts = ext.prod(axis=1)
        elem = np.repeat(np.arange(mesh.n_elements), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ex, ey = ext[elem, 0], ext[elem, 1]
        off = np.column_stack([local % ex, (local // ex) % ey, local // (ex * ey)])
        flat = self._flat(c_lo[elem] + off)
        order = np.lexsort((mesh.element_ids[elem], flat))
        self.cell_elems = elem[order]
        self.cell_start = np.searchsorted(flat[order], np.arange(self.shape.prod() + 1))

    def _cell(self, pts):
        c = np.floor((pts - self.lo) / self.h).astype(np.intp)
        return np.clip(c, 0, self.shape - 1)

    def _flat(self, c):
        return (c[:, 2] * self.shape[1] + c[:, 1]) * self.shape[0] + c[:, 0]

    def locate(self, points):
        """Element index (-1 when outside) and barycentric coordinates for each point."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(pts)
        elem_out = np.full(n, -1, dtype=np.intp)
        nc_out = np.full((n, 4), np.nan)
        if n == 0:
            return elem_out, nc_out
        slack = 1e-9 * self.h
        in_box = np.all((pts >= self.lo - slack) & (pts <= self.lo + self.shape * self.h + slack), axis=1)
        cells = self._flat(self._cell(pts))
        start, stop = self.cell_start[cells], self.cell_start[cells + 1]
        counts = np.where(in_box, stop - start, 0)
        pid = np.repeat(np.arange(n), counts)
        if len(pid) == 0:
            return elem_out, nc_out
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = self.cell_elems[start[pid] + local]
        lam = barycentric(self.mesh, cand, pts[pid])
        ok = lam.min(axis=1) >= -INSIDE_TOL
        pid, cand, lam = pid[ok], cand[ok], lam[ok]
        # candidates are stored by ascending element id within each cell,
        # so the first hit per point is the lowest id
        first = np.unique(pid, return_index=True)[1]
        elem_out[pid[first]] = cand[first]
        nc_out[pid[first]] = lam[first]
        return elem_out, nc_out


def locate_points(mesh: Tet10Mesh, points):
    return mesh.locator.locate(points)


def locate_point(mesh: Tet10Mesh, p):
    """Containing element index and its barycentric coordinates, or ``None`` if outside."""
    e, nc = mesh.locator.locate(np.reshape(p, (1, 3)))
    if e[0] < 0:
        return None
    return int(e[0]), nc[0]


def interpolate_points(mesh: Tet10Mesh, field, points):
    """Quadratic interpolation of a nodal field; NaN rows where the point is outside."""
    field = np.asarray(field, dtype=float)
    vec = field.ndim > 1
    f2 = field.reshape(mesh.n_nodes, -1)
    elem, nc = locate_points(mesh, points)
    out = np.full((len(elem), f2.shape[1]), np.nan)
    ok = elem >= 0
    if ok.any():
        w = shape_tet10(nc[ok])
        out[ok] = np.einsum("pn,pnc->pc", w, f2[mesh.elements[elem[ok]]])
    return (out if vec else out[:, 0]), ok


def interpolate_nodal_field(mesh: Tet10Mesh, field, p):
    """Field value at ``p`` (world mm) or ``None`` outside the mesh."""
    vals, ok = interpolate_points(mesh, field, np.reshape(p, (1, 3)))
    return vals[0] if ok[0] else None


def central_region_filter(mesh: Tet10Mesh, points, fraction=0.75):
    """True for points within the central ``fraction`` of the mesh's axial extent (inclusive)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    ax = mesh.axial_coordinates()
    lo, hi = ax.min(), ax.max()
    trim = 0.5 * (1.0 - fraction) * (hi - lo)
    z = mesh.axial_coordinates(pts)
    return (z >= lo + trim) & (z <= hi - trim)


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

# Kuhn split of a hex into 6 tets along the (0,0,0)-(1,1,1) diagonal.
_KUHN = []
for _perm in [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]:
    _b = np.zeros(3, dtype=int)
    _path = [0]
    for _ax in _perm:
        _b[_ax] = 1
        _path.append(int(_b[0] + 2 * _b[1] + 4 * _b[2]))
    _KUHN.append(_path)
_KUHN = np.array(_KUHN)


def tet4_to_tet10(coords, tets):
    """Add straight mid-edge nodes to linear tets; returns (coords, elements)."""
    coords = np.asarray(coords, dtype=float)
    tets = np.asarray(tets, dtype=np.intp)
    edges = np.sort(tets[:, EDGES], axis=2).reshape(-1, 2)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    mids = 0.5 * (coords[uniq[:, 0]] + coords[uniq[:, 1]])
    elems = np.hstack([tets, len(coords) + inv.reshape(-1, 6)])
    return np.vstack([coords, mids]), elems


def structured_tet10(xs, ys, zs, keep=None, axial_direction=(0.0, 0.0, 1.0)):
    """Tet10 mesh of a rectilinear hex lattice, six tets per kept hex cell.

    ``keep`` is an optional boolean array of shape (len(xs)-1, len(ys)-1,
    len(zs)-1) selecting which hex cells to mesh.
    """
    xs, ys, zs = (np.asarray(a, dtype=float) for a in (xs, ys, zs))
    nx, ny, nz = len(xs), len(ys), len(zs)
    cells = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool) if keep is None else np.asarray(keep, bool)
    ci, cj, ck = np.nonzero(cells)
    vid = lambda i, j, k: (k * ny + j) * nx + i  # noqa: E731
    corners = np.stack([vid(ci + (b & 1), cj + ((b >> 1) & 1), ck + ((b >> 2) & 1)) for b in range(8)], axis=1)
    tets = corners[:, _KUHN].reshape(-1, 4)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])
    used, tets = np.unique(tets, return_inverse=True)
    tets = tets.reshape(-1, 4)
    pts = pts[used]
    # fix orientation so every tet has positive volume
    v = pts[tets]
    det = np.einsum("md,md->m", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), v[:, 3] - v[:, 0])
    flip = det < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    coords, elems = tet4_to_tet10(pts, tets)
    return Tet10Mesh(coords, elems, axial_direction=axial_direction)


def box_mesh(size=(10.0, 10.0, 10.0), divisions=(4, 4, 4), origin=(0.0, 0.0, 0.0)):
    """Tet10 mesh of an axis-aligned box."""
    axes = [origin[a] + np.linspace(0.0, size[a], divisions[a] + 1) for a in range(3)]
    return structured_tet10(*axes)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def write_mesh(mesh: Tet10Mesh, path, attributes=None):
    """Text mesh: node block, element block, then optional ``attribute <name>`` blocks."""
    lines = [str(mesh.n_nodes)]
    lines += [f"{nid} {float(x)!r} {float(y)!r} {float(z)!r}" for nid, (x, y, z) in zip(mesh.node_ids, mesh.coords)]
    lines.append(str(mesh.n_elements))
    conn = mesh.node_ids[mesh.elements]
    lines += [f"{eid} " + " ".join(str(n) for n in row) for eid, row in zip(mesh.element_ids, conn)]
    for name, vals in (attributes or {}).items():
        lines.append(f"attribute {name}")
        lines += [f"{eid} {float(v)!r}" for eid, v in zip(mesh.element_ids, vals)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_mesh(path, axial_direction=(0.0, 0.0, 1.0)):
    """Read a text mesh; returns ``(mesh, attributes)`` with per-element attribute arrays."""
    tokens = [ln.split() for ln in Path(path).read_text().splitlines()]
    tokens = [t for t in tokens if t and not t[0].startswith("#")]
    pos = 0
    n_nodes = int(tokens[pos][0])
    pos += 1
    node_rows = tokens[pos:pos + n_nodes]
    pos += n_nodes
    node_ids = np.array([int(r[0]) for r in node_rows])
    coords = np.array([[float(x) for x in r[1:4]] for r in node_rows])
    n_el = int(tokens[pos][0])
    pos += 1
    el_rows = tokens[pos:pos + n_el]
    pos += n_el
    element_ids = np.array([int(r[0]) for r in el_rows])
    lookup = {int(n): i for i, n in enumerate(node_ids)}
    try:
        elements = np.array([[lookup[int(n)] for n in r[1:11]] for r in el_rows], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"{path}: element references unknown node id {exc.args[0]}") from None
    attrs = {}
    el_lookup = {int(e): i for i, e in enumerate(element_ids)}
    while pos < len(tokens):
        head = tokens[pos]
        if head[0] != "attribute" or len(head) != 2:
            raise ValueError(f"{path}: expected 'attribute <name>', got {' '.join(head)!r}")
        vals = np.full(n_el, np.nan)
        for r in tokens[pos + 1:pos + 1 + n_el]:
            vals[el_lookup[int(r[0])]] = float(r[1])
        attrs[head[1]] = vals
        pos += 1 + n_el
    mesh = Tet10Mesh(coords, elements, node_ids, element_ids, axial_direction)
    return mesh, attrs
