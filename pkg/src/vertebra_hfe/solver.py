"""Static FE solution on Tet10 meshes under prescribed displacements.

Strains use Voigt order ``[xx, yy, zz, yz, xz, xy]`` with engineering shear
inside the element kernels; reported tensors are symmetric 3x3 with tensor
shear components.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConstraintError, ContractError, ConvergenceError
from .materials import MaterialField
from .mesh import Tet10Mesh
from .quadrature import tet_rule

log = logging.getLogger(__name__)

CENTROID = np.full((1, 4), 0.25)
_M = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
_IVOIGT = np.diag([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])


# --------------------------------------------------------------------------
# boundary conditions
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DirichletSet:
    """Prescribed displacement components: parallel arrays of node index, component (0-2), value (mm)."""

    nodes: np.ndarray
    components: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.nodes, dtype=np.intp).ravel()
        c = np.asarray(self.components, dtype=np.intp).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if not (len(n) == len(c) == len(v)):
            raise ValueError("nodes, components and values must have equal length")
        if np.any((c < 0) | (c > 2)):
            raise ValueError("components must be 0, 1 or 2")
        dofs = 3 * n + c
        if len(np.unique(dofs)) != len(dofs):
            raise ValueError("duplicate (node, component) entries in Dirichlet set")
        order = np.argsort(dofs, kind="stable")
        for name, arr in (("nodes", n[order]), ("components", c[order]), ("values", v[order])):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_nodes(cls, nodes, values, components=(0, 1, 2)):
        """Constrain ``components`` of each node; ``values`` is (k, 3) or broadcastable."""
        nodes = np.asarray(nodes, dtype=np.intp).ravel()
        comps = np.asarray(components, dtype=np.intp)
        vals = np.broadcast_to(np.asarray(values, dtype=float), (len(nodes), 3))[:, comps]
        return cls(np.repeat(nodes, len(comps)), np.tile(comps, len(nodes)), vals.ravel())

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0))

    def merge(self, other):
        return DirichletSet(np.concatenate([self.nodes, other.nodes]),
                            np.concatenate([self.components, other.components]),
                            np.concatenate([self.values, other.values]))

    def scaled(self, factor):
        return DirichletSet(self.nodes, self.components, self.values * factor)

    @property
    def dofs(self):
        return 3 * self.nodes + self.components

    def __len__(self):
        return len(self.nodes)


# --------------------------------------------------------------------------
# element kernels
# --------------------------------------------------------------------------

def strain_displacement(dN):
    """B matrices (..., 6, 30) from shape gradients (..., 10, 3)."""
    B = np.zeros(dN.shape[:-2] + (6, 30))
    x, y, z = dN[..., 0], dN[..., 1], dN[..., 2]
    B[..., 0, 0::3] = x
    B[..., 1, 1::3] = y
    B[..., 2, 2::3] = z
    B[..., 3, 1::3] = z
    B[..., 3, 2::3] = y
    B[..., 4, 0::3] = z
    B[..., 4, 2::3] = x
    B[..., 5, 0::3] = y
    B[..., 5, 1::3] = x
    return B


def elasticity_matrix(E, nu):
    """Isotropic Voigt stiffness (..., 6, 6) for engineering shear strains."""
    E = np.asarray(E, dtype=float)[..., None, None]
    nu = np.asarray(nu, dtype=float)[..., None, None]
    G = E / (2.0 * (1.0 + nu))
    K = E / (3.0 * (1.0 - 2.0 * nu))
    mm = np.outer(_M, _M)
    return K * mm + 2.0 * G * (_IVOIGT - mm / 3.0)


def voigt_to_tensor(v, engineering=True):
    """(..., 6) Voigt vectors to (..., 3, 3) tensors."""
    f = 0.5 if engineering else 1.0
    t = np.empty(v.shape[:-1] + (3, 3))
    t[..., 0, 0], t[..., 1, 1], t[..., 2, 2] = v[..., 0], v[..., 1], v[..., 2]
    t[..., 1, 2] = t[..., 2, 1] = f * v[..., 3]
    t[..., 0, 2] = t[..., 2, 0] = f * v[..., 4]
    t[..., 0, 1] = t[..., 1, 0] = f * v[..., 5]
    return t


def element_dofs(mesh):
    return (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(mesh.n_elements, 30)


class _Pattern:
    """Node-level block sparsity of the global matrix.

    Contributions are summed with bincount in element order, so assembly is
    deterministic.
    """

    def __init__(self, mesh):
        e = mesh.elements
        nn = mesh.n_nodes
        keys = np.repeat(e, 10, axis=1).astype(np.int64).ravel() * nn + np.tile(e, (1, 10)).ravel()
        uniq, inv = np.unique(keys, return_inverse=True)
        self.inv = inv.astype(np.intp).reshape(len(e), 100)
        self.indices = (uniq % nn).astype(np.int32)
        self.indptr = np.searchsorted(uniq // nn, np.arange(nn + 1)).astype(np.int32)
        self.n_nodes = nn
        self.n_blocks = len(uniq)

    def zeros(self):
        return np.zeros((self.n_blocks, 9))

    def add(self, data, ke, start=0):
        """Accumulate element matrices ``ke`` (elements ``start:start+len(ke)``) into ``data``."""
        m = len(ke)
        kb = ke.reshape(m, 10, 3, 10, 3).transpose(0, 1, 3, 2, 4).reshape(m * 100, 9)
        inv = self.inv[start:start + m].ravel()
        for c in range(9):
            data[:, c] += np.bincount(inv, weights=kb[:, c], minlength=self.n_blocks)
        return data

    def to_csr(self, data):
        n = 3 * self.n_nodes
        K = sp.bsr_matrix((data.reshape(-1, 3, 3), self.indices, self.indptr), shape=(n, n)).tocsr()
        K.sort_indices()
        return K

    def matrix(self, ke):
        return self.to_csr(self.add(self.zeros(), ke))


def _pattern(mesh):
    pat = mesh.__dict__.get("_stiffness_pattern")
    if pat is None:
        pat = _Pattern(mesh)
        mesh.__dict__["_stiffness_pattern"] = pat
    return pat


def _gauss(mesh):
    pts, w = tet_rule(2)
    B = strain_displacement(mesh.shape_gradients(pts))  # (m, q, 6, 30)
    wv = mesh.volumes[:, None] * w[None, :]  # (m, q)
    return B, wv


def element_stiffness(mesh, materials, elements=None):
    """Element matrices (m, 30, 30) with 4-point Gauss integration."""
    sel = slice(None) if elements is None else np.atleast_1d(elements)
    pts, w = tet_rule(2)
    dn = mesh.shape_gradients(pts, sel)
    B = strain_displacement(dn)
    D = elasticity_matrix(np.asarray(materials.E)[sel], np.asarray(materials.nu)[sel])
    wv = mesh.volumes[sel][:, None] * w
    return np.einsum("mq,mqia,mij,mqjb->mab", wv, B, D, B, optimize=True)


def assemble_stiffness(mesh: Tet10Mesh, materials: MaterialField, chunk=4000):
    """Global sparse stiffness (CSR, 3 dofs per node)."""
    if len(materials) != mesh.n_elements:
        raise ContractError("materials must be defined for every element")
    pat = _pattern(mesh)
    data = pat.zeros()
    for s in range(0, mesh.n_elements, chunk):
        idx = np.arange(s, min(s + chunk, mesh.n_elements))
        pat.add(data, element_stiffness(mesh, materials, idx), s)
    return pat.to_csr(data)


# --------------------------------------------------------------------------
# linear solve
# --------------------------------------------------------------------------

def rigid_body_modes(coords):
    """(3n, 6) translations and linearised rotations about the centroid."""
    x = coords - coords.mean(axis=0)
    n = len(x)
    modes = np.zeros((n, 3, 6))
    for c in range(3):
        modes[:, c, c] = 1.0
    # rotations about x, y, z: omega x r
    modes[:, 1, 3], modes[:, 2, 3] = -x[:, 2], x[:, 1]
    modes[:, 0, 4], modes[:, 2, 4] = x[:, 2], -x[:, 0]
    modes[:, 0, 5], modes[:, 1, 5] = -x[:, 1], x[:, 0]
    return modes.reshape(3 * n, 6)


def _check_constraints(mesh, bc):
    modes = rigid_body_modes(mesh.coords)[bc.dofs]
    if len(bc) == 0:
        rank = 0
    else:
        s = np.linalg.svd(modes, compute_uv=False)
        rank = int(np.sum(s > 1e-10 * max(s[0], 1.0)))
    if rank < 6:
        raise ConstraintError(f"boundary conditions leave {6 - rank} rigid-body mode(s) free")


def block_jacobi(K_ff, free):
    """Inverse of the 3x3 nodal diagonal blocks of the free-dof matrix."""
    node = free // 3
    comp = free % 3
    uniq, loc = np.unique(node, return_inverse=True)
    blocks = np.tile(np.eye(3), (len(uniq), 1, 1))
    coo = K_ff.tocoo()
    same = loc[coo.row] == loc[coo.col]
    r, c, v = coo.row[same], coo.col[same], coo.data[same]
    blocks[loc[r], comp[r], comp[c]] = v
    inv = np.linalg.inv(blocks)
    rows, cols = _block_pairs(loc)
    return sp.csr_matrix((inv[loc[rows], comp[rows], comp[cols]], (rows, cols)), shape=K_ff.shape)


def _block_pairs(loc):
    order = np.argsort(loc, kind="stable")
    starts = np.searchsorted(loc[order], np.arange(loc.max() + 2))
    sizes = np.diff(starts)
    rows, cols = [], []
    for s in (1, 2, 3):
        groups = np.flatnonzero(sizes == s)
        if not len(groups):
            continue
        members = order[starts[groups][:, None] + np.arange(s)]
        rows.append(np.repeat(members, s, axis=1).ravel())
        cols.append(np.tile(members, (1, s)).ravel())
    return np.concatenate(rows), np.concatenate(cols)


@dataclass
class LinearSolveInfo:
    iterations: int = 0
    residual: float = 0.0


def linear_solve(A, b, method="pcg", rtol=1e-9, maxiter=None, free=None):
    """Solve the SPD system ``A x = b``; returns (x, LinearSolveInfo)."""
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), LinearSolveInfo(0, 0.0)
    if method == "direct":
        x = spla.splu(A.tocsc()).solve(b)
        return x, LinearSolveInfo(1, float(np.linalg.norm(b - A @ x) / bnorm))
    if method != "pcg":
        raise ValueError(f"unknown linear solver {method!r}")
    M = block_jacobi(A, np.arange(A.shape[0]) if free is None else free)
    count = [0]

    def _cb(_):
        count[0] += 1

    maxiter = maxiter or max(1000, 10 * A.shape[0])
    x, info = spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=_cb)
    res = float(np.linalg.norm(b - A @ x) / bnorm)
    if info != 0 or res > 10 * rtol:
        raise ConvergenceError(f"PCG did not converge in {count[0]} iterations (relative residual {res:.3e})",
                               residual=res)
    return x, LinearSolveInfo(count[0], res)


# --------------------------------------------------------------------------
# solution
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Solution:
    """Nodal displacements, centroid strains/stresses and support reactions."""

    u: np.ndarray                 # (n_nodes, 3) mm
    strain: np.ndarray            # (n_elements, 3, 3) at centroids
    stress: np.ndarray            # (n_elements, 3, 3) MPa
    nodal_forces: np.ndarray      # (n_nodes, 3) N, internal forces K u
    constrained: np.ndarray       # (n_nodes, 3) bool
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)
    plastic_strain: np.ndarray | None = None   # (n_elements,) mean equivalent plastic strain
    state: "PlasticState | None" = None

    @property
    def reactions(self):
        """(n_nodes, 3) reactions with NaN at unconstrained components."""
        return np.where(self.constrained, self.nodal_forces, np.nan)

    @property
    def von_mises(self):
        return von_mises(self.stress)


def von_mises(stress):
    s = np.asarray(stress)
    dev = s - np.trace(s, axis1=-2, axis2=-1)[..., None, None] * np.eye(3) / 3.0
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", dev, dev))


def principal_strains(tensor):
    """Eigenvalues of symmetric tensor(s), in descending order along the last axis."""
    t = np.asarray(tensor, dtype=float)
    return np.linalg.eigvalsh(t)[..., ::-1]


def centroid_strains(mesh, u):
    dn = mesh.shape_gradients(CENTROID)[:, 0]
    B = strain_displacement(dn)
    ue = np.asarray(u).reshape(-1)[element_dofs(mesh)]
    return np.einsum("mij,mj->mi", B, ue)


def _prepare(mesh, materials, bc):
    if len(materials) != mesh.n_elements:
        raise ContractError("materials must be defined for every element")
    if len(bc) and (bc.nodes.max() >= mesh.n_nodes):
        raise ContractError("Dirichlet set references a node outside the mesh")
    _check_constraints(mesh, bc)
    ndof = 3 * mesh.n_nodes
    fixed = bc.dofs
    is_fixed = np.zeros(ndof, dtype=bool)
    is_fixed[fixed] = True
    free = np.flatnonzero(~is_fixed)
    return ndof, fixed, free, is_fixed


def solve_elastic(mesh: Tet10Mesh, materials: MaterialField, bc: DirichletSet,
                  method="pcg", rtol=1e-9, maxiter=None) -> Solution:
    """Linear-elastic solution with prescribed dofs eliminated from the system."""
    ndof, fixed, free, is_fixed = _prepare(mesh, materials, bc)
    K = assemble_stiffness(mesh, materials)
    diag = K.diagonal()
    if np.any(diag[free] <= 0):
        raise ConstraintError("free dofs without stiffness (nodes not attached to any element)")
    u = np.zeros(ndof)
    u[fixed] = bc.values
    K_ff = K[free][:, free]
    rhs = -(K[free][:, fixed] @ u[fixed])
    x, info = linear_solve(K_ff, rhs, method, rtol, maxiter, free)
    u[free] = x
    log.debug("elastic solve: %d dofs, %d iterations, residual %.2e", len(free), info.iterations, info.residual)
    f = K @ u
    eps = centroid_strains(mesh, u)
    sig = np.einsum("mij,mj->mi", elasticity_matrix(materials.E, materials.nu), eps)
    return Solution(
        u=u.reshape(-1, 3), strain=voigt_to_tensor(eps), stress=voigt_to_tensor(sig, engineering=False),
        nodal_forces=f.reshape(-1, 3), constrained=is_fixed.reshape(-1, 3),
        converged=True, iterations=info.iterations, residual=info.residual,
    )


def reaction_force_axial(sol: Solution, nodes, axis=2):
    """Sum of reaction components along ``axis`` (index or direction vector) over ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.intp).ravel()
    if np.ndim(axis) == 0:
        d = np.zeros(3)
        d[int(axis)] = 1.0
    else:
        d = np.asarray(axis, dtype=float)
        d = d / np.linalg.norm(d)
    need = np.abs(d) > 0
    ok = sol.constrained[nodes][:, need].all(axis=1)
    if not ok.all():
        raise ContractError(f"{int((~ok).sum())} node(s) are not constrained along the requested axis")
    return float(np.sum(sol.nodal_forces[nodes] @ d))


# --------------------------------------------------------------------------
# elastoplastic
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PlasticState:
    """Converged history variables at the 4 Gauss points of each element."""

    u: np.ndarray          # (n_dof,)
    eps_p: np.ndarray      # (m, q, 6) plastic strain, engineering shear
    alpha: np.ndarray      # (m, q) equivalent plastic strain

    @classmethod
    def initial(cls, mesh):
        q = len(tet_rule(2)[1])
        return cls(np.zeros(3 * mesh.n_nodes), np.zeros((mesh.n_elements, q, 6)),
                   np.zeros((mesh.n_elements, q)))


def radial_return(eps, eps_p, alpha, E, nu, sigma_y, H):
    """J2 return mapping with linear isotropic hardening.

    All arrays broadcast over leading axes; ``eps`` and ``eps_p`` are Voigt
    with engineering shear. Returns (stress, tangent, eps_p_new, alpha_new).
    """
    E = np.asarray(E, float)
    nu = np.asarray(nu, float)
    G = E / (2.0 * (1.0 + nu))
    K = E / (3.0 * (1.0 - 2.0 * nu))
    ee = eps - eps_p
    tr = ee[..., :3].sum(axis=-1)
    e_dev = ee.copy()
    e_dev[..., :3] -= tr[..., None] / 3.0
    e_dev[..., 3:] *= 0.5  # tensor shear
    s_tr = 2.0 * G[..., None] * e_dev
    norm = np.sqrt(np.sum(s_tr[..., :3] ** 2, axis=-1) + 2.0 * np.sum(s_tr[..., 3:] ** 2, axis=-1))
    q_tr = np.sqrt(1.5) * norm
    f = q_tr - (sigma_y + H * alpha)
    yielding = f > 1e-12 * sigma_y
    dp = np.where(yielding, f / (3.0 * G + H), 0.0)
    safe = np.where(norm > 0, norm, 1.0)
    n = s_tr / safe[..., None]
    theta = 1.0 - np.where(yielding, 3.0 * G * dp / np.where(q_tr > 0, q_tr, 1.0), 0.0)
    s = s_tr * theta[..., None]
    stress = s.copy()
    stress[..., :3] += (K * tr)[..., None]
    deps_p = np.sqrt(1.5) * dp[..., None] * n
    deps_p[..., 3:] *= 2.0  # back to engineering shear
    mm = np.outer(_M, _M)
    theta_bar = np.where(yielding, 1.0 / (1.0 + H / (3.0 * G)) - (1.0 - theta), 0.0)
    C = (K[..., None, None] * mm + 2.0 * (G * theta)[..., None, None] * (_IVOIGT - mm / 3.0)
         - 2.0 * (G * theta_bar)[..., None, None] * n[..., :, None] * n[..., None, :])
    return stress, C, eps_p + deps_p, alpha + dp


def isotropic_hardening(E, Et):
    """Plastic modulus H giving a uniaxial post-yield tangent ``Et``."""
    return E * Et / (E - Et)


def solve_elastoplastic(mesh: Tet10Mesh, materials: MaterialField, bc: DirichletSet, n_steps=10,
                        state: PlasticState | None = None, tol=1e-8, max_iter=50,
                        method="pcg", rtol=1e-10) -> Solution:
    """Incremental Newton solution with von Mises plasticity.

    Prescribed values are reached in ``n_steps`` equal increments starting
    from ``state`` (or the undeformed, virgin state). The returned solution
    carries the final ``PlasticState`` so loading can be continued, e.g. to
    unload.
    """
    if not materials.has_plasticity:
        raise ContractError("materials carry no plasticity parameters")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    ndof, fixed, free, is_fixed = _prepare(mesh, materials, bc)
    state = state or PlasticState.initial(mesh)
    pat = _pattern(mesh)
    B, wv = _gauss(mesh)
    edofs = element_dofs(mesh)
    E = materials.E[:, None]
    nu = materials.nu[:, None]
    sy = materials.sigma_y[:, None]
    H = isotropic_hardening(materials.E, materials.Ep)[:, None]

    u = state.u.copy()
    start = u[fixed].copy()
    eps_p, alpha = state.eps_p, state.alpha
    history = []
    total_iter = 0
    res = 0.0
    # residuals are judged against the largest support load seen, so steps
    # that return close to zero load (unloading) can still converge
    peak = 0.0
    # each step starts with a predictor linearised about the last converged
    # state: moving only the prescribed dofs and iterating from there sees a
    # distorted boundary layer and can cycle around the yield kink
    eps = np.einsum("mqij,mj->mqi", B, u[edofs])
    sig, C, _, _ = radial_return(eps, eps_p, alpha, E, nu, sy, H)
    f = np.bincount(edofs.ravel(), weights=np.einsum("mq,mqia,mqi->ma", wv, B, sig).ravel(), minlength=ndof)
    for step in range(1, n_steps + 1):
        du_fixed = start + (bc.values - start) * step / n_steps - u[fixed]
        Kt = pat.matrix(np.einsum("mq,mqia,mqij,mqjb->mab", wv, B, C, B, optimize=True))
        rhs = -(f[free] + Kt[free][:, fixed] @ du_fixed)
        u[fixed] += du_fixed
        if np.any(rhs):
            du, _ = linear_solve(Kt[free][:, free], rhs, method, rtol, None, free)
            u[free] += du
        for it in range(max_iter + 1):
            eps = np.einsum("mqij,mj->mqi", B, u[edofs])
            sig, C, ep_new, a_new = radial_return(eps, eps_p, alpha, E, nu, sy, H)
            fe = np.einsum("mq,mqia,mqi->ma", wv, B, sig)
            f = np.bincount(edofs.ravel(), weights=fe.ravel(), minlength=ndof)
            r_free = f[free]
            res = float(np.linalg.norm(r_free))
            ref = float(np.linalg.norm(f[fixed]))
            peak = max(peak, ref)
            log.debug("step %d iteration %d: residual %.3e, load norm %.3e", step, it, res, peak)
            if res <= tol * peak or res == 0.0 or (peak == 0.0 and res < 1e-14):
                break
            if it == max_iter:
                raise ConvergenceError(
                    f"Newton did not converge in step {step} (residual {res:.3e}, load norm {peak:.3e})",
                    residual=res, step=step)
            ke = np.einsum("mq,mqia,mqij,mqjb->mab", wv, B, C, B, optimize=True)
            Kt = pat.matrix(ke)
            du, info = linear_solve(Kt[free][:, free], -r_free, method, rtol, None, free)
            u[free] += du
            total_iter += 1
        eps_p, alpha = ep_new, a_new
        history.append({"step": step, "iterations": it, "residual": res,
                        "yielded_points": int(np.count_nonzero(a_new > state.alpha))})
    new_state = PlasticState(u.copy(), eps_p, alpha)
    eps_c = centroid_strains(mesh, u)
    return Solution(
        u=u.reshape(-1, 3), strain=voigt_to_tensor(eps_c),
        stress=voigt_to_tensor(sig.mean(axis=1), engineering=False),
        nodal_forces=f.reshape(-1, 3), constrained=is_fixed.reshape(-1, 3),
        converged=True, iterations=total_iter, residual=res, history=history,
        plastic_strain=alpha.mean(axis=1), state=new_state,
    )
