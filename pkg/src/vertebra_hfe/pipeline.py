"""End-to-end validation workflow: configuration, synthetic inputs, stages, report.

Stages run in order calibrate -> materials -> boundary -> solve -> compare
-> exclusion -> errors (-> clinical). Every stage writes its artifacts under
the output directory and the JSON report lists them with paths relative to
that directory, so two runs with the same configuration and seed produce
byte-identical reports.
"""
from __future__ import annotations

import configparser
import contextlib
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dvcfield import (DEFAULT_SPACING, differentiate_strains, read_grid, synthesize_dvc,
                       write_grid, zero_strain_uncertainty)
from .errors import ContractError, DegenerateRegressionError, HfeError, InsufficientDataError, StageError
from .export import write_grid_table, write_solution_csv, write_vtk_mesh
from .materials import (ElasticityLaw, RigidTransform, map_materials, read_transform, remap_materials,
                        write_materials_csv, write_transform)
from .mesh import Tet10Mesh, read_mesh, write_mesh
from .phantom import PhantomSpec, generate_phantom, phantom_volume
from .solver import DirichletSet, principal_strains, reaction_force_axial, solve_elastic, solve_elastoplastic
from .validate import (DIRECTIONS, ExclusionConfig, build_dirichlet_from_dvc, direction_metrics,
                       direction_reliability, error_grid, exclusion_check, extract_bc_slices,
                       fe_at_dvc_points, propagate_displacement_error, regression_metrics, subset_trabecular)
from .volume import (DensityCalibration, fit_calibration, grey_to_density, read_calibration,
                     read_calibration_samples, read_volume, write_calibration, write_volume)

log = logging.getLogger(__name__)

REPORT_NAME = "report.json"


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class PathsConfig:
    volume: str = ""
    mask: str = ""
    mesh: str = ""
    grid: str = ""
    calibration: str = ""
    calibration_samples: str = ""
    transform: str = ""
    clinical_volume: str = ""
    clinical_calibration: str = ""
    uncertainty_a: str = ""
    uncertainty_b: str = ""


@dataclass
class MaterialConfig:
    law_a: float = 4730.0
    law_b: float = 1.56
    nu: float = 0.3
    e_min: float = 0.01
    average: str = "density"
    quadrature_order: int = 4
    subdivision_levels: int = 0


@dataclass
class SolverConfig:
    plasticity: bool = False
    n_steps: int = 10
    method: str = "pcg"
    rtol: float = 1e-9
    newton_tol: float = 1e-8
    max_newton: int = 50


@dataclass
class DvcConfig:
    spacing: float = DEFAULT_SPACING
    min_points: int = 4
    extrapolate: bool = True
    extrapolate_neighbors: int = 8
    extrapolate_max_distance: float = 0.0   # 0 = two grid spacings
    central_fraction: float = 0.75
    trabecular_only: bool = False
    voxel_size: float = 0.039


@dataclass
class ExclusionSection:
    strain_limit: float = 0.010
    strain_warning: float = 0.008
    max_over_fraction: float = 0.25
    min_correlating_fraction: float = 0.5
    uncertainty_r2: float = 0.5


@dataclass
class SyntheticConfig:
    enabled: bool = False
    radii: tuple = (15.0, 12.0)
    height: float = 23.4
    shell_thickness: float = 1.0
    trabecular_density: float = 0.25
    cortical_density: float = 0.8
    lesion_center: tuple = ()
    lesion_radius: float = 0.0
    lesion_multiplier: float = 1.0
    texture: float = 0.2
    texture_scale: float = 1.5
    voxel_size: float = 0.25
    mesh_edge: float = 0.975
    endplate_margin: float = 1.95
    displacement: float = 0.1
    tilt: float = 0.0
    shear: float = 0.0
    noise_sigma: float = 0.0
    uncertainty_sigma: float = 0.0
    min_density: float = 0.05
    calibration_slope: float = 0.001
    calibration_intercept: float = -0.1
    clinical: bool = False
    clinical_voxel_size: float = 0.5
    clinical_slope: float = 0.0008
    clinical_intercept: float = -0.05


@dataclass
class RunConfig:
    seed: int = 0
    strict: bool = False


SECTIONS = {
    "paths": PathsConfig, "material": MaterialConfig, "solver": SolverConfig, "dvc": DvcConfig,
    "exclusion": ExclusionSection, "synthetic": SyntheticConfig, "run": RunConfig,
}


def _parse(value: str, default):
    value = value.strip()
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class PipelineConfig:
    """All configurable constants of a run, grouped like the INI sections."""

    paths: PathsConfig = field(default_factory=PathsConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    dvc: DvcConfig = field(default_factory=DvcConfig)
    exclusion: ExclusionSection = field(default_factory=ExclusionSection)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    run: RunConfig = field(default_factory=RunConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_string(cls, text, base_dir="."):
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        cfg = cls(base_dir=Path(base_dir))
        for name in cp.sections():
            if name not in SECTIONS:
                raise ValueError(f"unknown config section [{name}]")
            for key, val in cp[name].items():
                cfg.set(name, key, val)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        return cls.from_string(path.read_text(), base_dir=path.parent)

    def set(self, section, key, value):
        """Set ``section.key`` from its text form."""
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        if key not in {f.name for f in dataclasses.fields(sec)}:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        try:
            setattr(sec, key, _parse(value, getattr(sec, key)) if isinstance(value, str) else value)
        except ValueError as exc:
            raise ValueError(f"[{section}] {key}: {exc}") from None

    def override(self, assignments):
        """Apply ``section.key=value`` strings."""
        for item in assignments:
            lhs, sep, rhs = item.partition("=")
            section, dot, key = lhs.strip().partition(".")
            if not sep or not dot:
                raise ValueError(f"override must look like section.key=value, got {item!r}")
            self.set(section, key.strip(), rhs)
        self.validate()
        return self

    def as_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_format(tuple(v) if isinstance(v, list) else v)}")
            lines.append("")
        return "\n".join(lines)

    def resolve(self, path):
        if not path:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self):
        m, s, d, e, syn = self.material, self.solver, self.dvc, self.exclusion, self.synthetic
        checks = [
            (m.law_a > 0 and m.law_b > 0, "material law coefficients must be positive"),
            (0 < m.nu < 0.5, "nu must lie in (0, 0.5)"),
            (m.e_min > 0, "e_min must be positive"),
            (m.average in ("density", "modulus"), "average must be 'density' or 'modulus'"),
            (m.quadrature_order in (1, 2, 4), "quadrature_order must be 1, 2 or 4"),
            (m.subdivision_levels >= 0, "subdivision_levels must be >= 0"),
            (s.n_steps >= 1, "n_steps must be >= 1"),
            (s.method in ("pcg", "direct"), "solver method must be 'pcg' or 'direct'"),
            (0 < s.rtol < 1 and 0 < s.newton_tol < 1, "solver tolerances must lie in (0, 1)"),
            (d.spacing > 0 and d.voxel_size > 0, "grid spacing and voxel size must be positive"),
            (d.min_points >= 1, "min_points must be >= 1"),
            (0 < d.central_fraction <= 1, "central_fraction must lie in (0, 1]"),
            (d.extrapolate_neighbors >= 3, "extrapolate_neighbors must be >= 3"),
            (d.extrapolate_max_distance >= 0, "extrapolate_max_distance must be >= 0"),
            (0 < e.strain_warning <= e.strain_limit, "need 0 < strain_warning <= strain_limit"),
            (0 <= e.max_over_fraction <= 1, "max_over_fraction must lie in [0, 1]"),
            (0 <= e.min_correlating_fraction <= 1, "min_correlating_fraction must lie in [0, 1]"),
            (0 <= e.uncertainty_r2 <= 1, "uncertainty_r2 must lie in [0, 1]"),
            (len(syn.radii) == 2, "synthetic radii need two values"),
            (len(syn.lesion_center) in (0, 3), "lesion_center needs three values or none"),
            (syn.noise_sigma >= 0 and syn.uncertainty_sigma >= 0, "noise levels must be >= 0"),
            (syn.endplate_margin >= 0, "endplate_margin must be >= 0"),
            (self.run.seed >= 0, "seed must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    def exclusion_config(self):
        return ExclusionConfig(**dataclasses.asdict(self.exclusion))

    def phantom_spec(self):
        syn = self.synthetic
        return PhantomSpec(
            radii=tuple(syn.radii), height=syn.height, shell_thickness=syn.shell_thickness,
            trabecular_density=syn.trabecular_density, cortical_density=syn.cortical_density,
            lesion_center=tuple(syn.lesion_center) or None, lesion_radius=syn.lesion_radius,
            lesion_multiplier=syn.lesion_multiplier, texture=syn.texture, texture_scale=syn.texture_scale)


def load_config(path=None, overrides=(), seed=None):
    cfg = PipelineConfig.from_file(path) if path else PipelineConfig()
    cfg.override(list(overrides))
    if seed is not None:
        cfg.run.seed = int(seed)
    return cfg.validate()


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

@contextlib.contextmanager
def stage(name, path=None):
    """Re-raise anything failing inside a stage as :class:`StageError`."""
    try:
        yield
    except StageError:
        raise
    except (HfeError, ValueError, OSError, KeyError) as exc:
        raise StageError(name, str(path) if path else None, exc) from exc


def _require(path, what):
    if path is None:
        raise ContractError(f"no {what} file configured")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, Path):
        return obj.as_posix()
    if hasattr(obj, "as_dict"):
        return _clean(obj.as_dict())
    return obj


def dump_json(obj, path=None):
    text = json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _stats(a):
    a = np.asarray(a, float)
    return {"min": float(a.min()), "max": float(a.max()), "mean": float(a.mean())}


def _seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _rel(path, root):
    path = Path(path)
    try:
        return path.resolve().relative_to(Path(root).resolve()).as_posix()
    except ValueError:
        return path.as_posix()


# --------------------------------------------------------------------------
# synthetic experiment
# --------------------------------------------------------------------------

def endplate_loading(mesh: Tet10Mesh, z_low, z_up, displacement, tilt=0.0, shear=0.0, tol=1e-6):
    """Slab boundary conditions of a displacement-controlled compression test.

    Nodes with ``z <= z_low`` are fixed; nodes with ``z >= z_up`` move by
    ``(shear, 0, -displacement + tilt * x)``, an affine function of the
    in-plane position. Returns (DirichletSet, low nodes, up nodes).
    """
    z = mesh.coords[:, 2]
    low = np.flatnonzero(z <= z_low + tol)
    up = np.flatnonzero(z >= z_up - tol)
    if len(low) == 0 or len(up) == 0:
        raise ContractError("no mesh nodes beyond one of the loading planes")
    vals = np.zeros((len(up), 3))
    vals[:, 0] = shear
    vals[:, 2] = -displacement + tilt * mesh.coords[up, 0]
    bc = DirichletSet.from_nodes(low, 0.0).merge(DirichletSet.from_nodes(up, vals))
    return bc, low, up


def synthetic_grid_geometry(mesh: Tet10Mesh, spacing, margin):
    """Origin and dims of a grid aligned with x = y = 0 that spans the body between the potted endplates.

    The first and last axial slices sit ``margin`` inside the bottom and top
    of the mesh (rounded onto the grid), mimicking endplate regions that are
    embedded and not measured.
    """
    lo, hi = mesh.coords.min(axis=0), mesh.coords.max(axis=0)
    ix0, ix1 = int(np.floor(lo[0] / spacing + 1e-9)), int(np.ceil(hi[0] / spacing - 1e-9))
    iy0, iy1 = int(np.floor(lo[1] / spacing + 1e-9)), int(np.ceil(hi[1] / spacing - 1e-9))
    z0 = lo[2] + margin
    nz = int(np.floor((hi[2] - margin - z0) / spacing + 1e-9)) + 1
    if nz < 2:
        raise ContractError("body too short for the endplate margin and grid spacing")
    origin = (ix0 * spacing, iy0 * spacing, z0)
    return origin, (ix1 - ix0 + 1, iy1 - iy0 + 1, nz)


def synthesize_inputs(cfg: PipelineConfig, out_dir):
    """Write a synthetic case (images, mesh, DVC grids, calibrations) and return a config pointing at it."""
    syn = cfg.synthetic
    inp = Path(out_dir) / "inputs"
    inp.mkdir(parents=True, exist_ok=True)
    s_tex, s_dvc, s_ua, s_ub = _seeds(cfg.run.seed, 4)
    spec = cfg.phantom_spec()
    density, mask, mesh = generate_phantom(spec, syn.voxel_size, syn.mesh_edge, seed=s_tex)

    cal = DensityCalibration(syn.calibration_slope, syn.calibration_intercept)
    rods = np.array([0.0, 0.1, 0.2, 0.4, 0.8, 1.2])
    np.savetxt(inp / "calibration_samples.txt", np.column_stack([cal.inverse(rods), rods]),
               header="grey density_g_cm3")
    write_volume(density.with_values(cal.inverse(density.values), kind="grey"), inp / "ct.hdr")
    write_volume(mask, inp / "mask.hdr", dtype="uint8")
    write_mesh(mesh, inp / "mesh.txt")

    # experiment: the "true" specimen response under endplate slab loading
    h = cfg.dvc.spacing
    origin, dims = synthetic_grid_geometry(mesh, h, syn.endplate_margin)
    z_low, z_up = origin[2], origin[2] + (dims[2] - 1) * h
    law = ElasticityLaw(cfg.material.law_a, cfg.material.law_b)
    mat = map_materials(mesh, density, law, cfg.material.nu, cfg.material.e_min)
    bc, _, _ = endplate_loading(mesh, z_low, z_up, syn.displacement, syn.tilt, syn.shear)
    truth = solve_elastic(mesh, mat, bc, cfg.solver.method, cfg.solver.rtol)
    min_density = syn.min_density if syn.min_density > 0 else None
    grid = synthesize_dvc(mesh, truth, origin, h, dims, syn.noise_sigma, s_dvc, density, min_density)
    write_grid(grid, inp / "dvc.csv")
    np.savetxt(inp / "experiment_u.txt", truth.u)

    paths = dataclasses.replace(
        cfg.paths, volume="inputs/ct.hdr", mask="inputs/mask.hdr", mesh="inputs/mesh.txt",
        grid="inputs/dvc.csv", calibration="", calibration_samples="inputs/calibration_samples.txt")
    if syn.uncertainty_sigma > 0:
        zero = np.zeros_like(truth.u)
        for name, s in (("uncertainty_a", s_ua), ("uncertainty_b", s_ub)):
            g = synthesize_dvc(mesh, zero, origin, h, dims, syn.uncertainty_sigma, s, density, min_density)
            write_grid(g, inp / f"{name}.csv")
            setattr(paths, name, f"inputs/{name}.csv")
    if syn.clinical:
        ccal = DensityCalibration(syn.clinical_slope, syn.clinical_intercept)
        cvol = phantom_volume(spec, syn.clinical_voxel_size, seed=s_tex)
        write_volume(cvol.with_values(ccal.inverse(cvol.values), kind="grey"), inp / "clinical_ct.hdr")
        write_calibration(ccal, inp / "clinical_calibration.txt")
        write_transform(RigidTransform.identity(), inp / "transform.txt")
        paths.clinical_volume = "inputs/clinical_ct.hdr"
        paths.clinical_calibration = "inputs/clinical_calibration.txt"
        paths.transform = "inputs/transform.txt"
    new = dataclasses.replace(cfg, paths=paths, base_dir=Path(out_dir))
    return new


# --------------------------------------------------------------------------
# model comparison
# --------------------------------------------------------------------------

def compare_models(sol_a, sol_b, reaction_nodes, axis=2, mesh_a=None, mesh_b=None):
    """Nodal displacement agreement of model b against model a plus their reaction difference.

    Only nodes that are free in model a enter the regression (prescribed
    values agree trivially). Directions without displacement variance report
    ``None``.
    """
    if mesh_a is not None and mesh_b is not None:
        if (mesh_a.coords.shape != mesh_b.coords.shape or mesh_a.elements.shape != mesh_b.elements.shape
                or not np.array_equal(mesh_a.elements, mesh_b.elements)
                or not np.allclose(mesh_a.coords, mesh_b.coords, rtol=0, atol=1e-9)):
            raise ContractError("models must share the same mesh")
    ua, ub = np.asarray(sol_a.u, float), np.asarray(sol_b.u, float)
    if ua.shape != ub.shape:
        raise ContractError("models must share the same mesh")
    free = ~np.asarray(sol_a.constrained).all(axis=1)
    if not free.any():
        free = np.ones(len(ua), bool)
    per = {}
    for d, name in enumerate(DIRECTIONS):
        try:
            per[name] = regression_metrics(ua[free, d], ub[free, d])
        except (DegenerateRegressionError, InsufficientDataError):
            per[name] = None
    ra = reaction_force_axial(sol_a, reaction_nodes, axis)
    rb = reaction_force_axial(sol_b, reaction_nodes, axis)
    delta = abs(rb - ra) / abs(ra) if ra != 0 else (0.0 if rb == 0 else float("inf"))
    return {"per_direction": per, "reaction_a_N": ra, "reaction_b_N": rb, "reaction_delta": delta,
            "n_nodes": int(free.sum())}


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _law(cfg):
    return ElasticityLaw(cfg.material.law_a, cfg.material.law_b)


def _material_kwargs(cfg):
    m = cfg.material
    return dict(nu=m.nu, e_min=m.e_min, plasticity=cfg.solver.plasticity, order=m.quadrature_order,
                levels=m.subdivision_levels, average=m.average)


def _solve(cfg, mesh, mat, bc):
    s = cfg.solver
    if s.plasticity:
        return solve_elastoplastic(mesh, mat, bc, s.n_steps, tol=s.newton_tol, max_iter=s.max_newton,
                                   method=s.method)
    return solve_elastic(mesh, mat, bc, s.method, s.rtol)


def calibrated_density(cfg, volume_path, calibration_path=None, samples_path=None, out=None):
    """Density image from a grey (or already density) volume; returns (density, calibration, info)."""
    vol = read_volume(_require(volume_path, "volume"))
    if vol.kind == "density":
        return vol, None, {"source": "density volume"}
    if calibration_path:
        cal = read_calibration(_require(calibration_path, "calibration"))
        info = {"source": "calibration file"}
    elif samples_path:
        samples = read_calibration_samples(_require(samples_path, "calibration samples"))
        cal = fit_calibration(samples)
        info = {"source": "fitted", "n_samples": int(len(samples))}
    else:
        raise ContractError("a grey volume needs a calibration or calibration samples")
    if out is not None:
        write_calibration(cal, out)
    info.update(slope=cal.slope, intercept=cal.intercept, correction_scale=cal.correction_scale,
                correction_offset=cal.correction_offset, residual=cal.residual)
    return grey_to_density(vol, cal), cal, info


def run_pipeline(config: PipelineConfig, out_dir, write_report=True):
    """Run every stage and return the report dictionary (also written as ``report.json``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config
    report = {"config": config.as_dict(), "seed": config.run.seed}
    artifacts = {}

    def art(name, path):
        artifacts[name] = _rel(path, out)
        return path

    if cfg.synthetic.enabled:
        with stage("synthesize", out / "inputs"):
            cfg = synthesize_inputs(config, out)
        for k in ("volume", "mask", "mesh", "grid", "calibration_samples", "uncertainty_a",
                  "uncertainty_b", "clinical_volume", "clinical_calibration", "transform"):
            if getattr(cfg.paths, k):
                art(f"input_{k}", cfg.resolve(getattr(cfg.paths, k)))
    p = cfg.paths
    report["inputs"] = {k: v for k, v in dataclasses.asdict(p).items() if v}

    with stage("calibrate", cfg.resolve(p.volume)):
        density, cal, info = calibrated_density(cfg, cfg.resolve(p.volume), cfg.resolve(p.calibration),
                                                cfg.resolve(p.calibration_samples), out / "calibration.txt")
        if cal is not None:
            art("calibration", out / "calibration.txt")
        report["calibration"] = info

    with stage("mesh", cfg.resolve(p.mesh)):
        mesh, _ = read_mesh(_require(cfg.resolve(p.mesh), "mesh"))

    with stage("materials", cfg.resolve(p.volume)):
        mat = map_materials(mesh, density, _law(cfg), **_material_kwargs(cfg))
        write_materials_csv(mesh, mat, art("materials", out / "materials.csv"))
        report["materials"] = {"n_elements": mesh.n_elements, "density": _stats(mat.density),
                               "E_MPa": _stats(mat.E), "plasticity": mat.has_plasticity}

    with stage("boundary", cfg.resolve(p.grid)):
        grid = read_grid(_require(cfg.resolve(p.grid), "DVC grid"))
        slices = extract_bc_slices(grid, cfg.dvc.min_points)
        bnd = build_dirichlet_from_dvc(mesh, grid, slices, cfg.dvc.extrapolate, cfg.dvc.extrapolate_neighbors,
                                       cfg.dvc.extrapolate_max_distance or None)
        report["boundary_conditions"] = {
            "upper_slice": slices[0], "lower_slice": slices[1], "upper_z_mm": bnd.upper_z,
            "lower_z_mm": bnd.lower_z, "n_up_nodes": len(bnd.up_nodes), "n_down_nodes": len(bnd.down_nodes),
            "n_extrapolated_nodes": len(bnd.extrapolated_nodes)}

    with stage("solve", cfg.resolve(p.mesh)):
        sol = _solve(cfg, mesh, mat, bnd.bc)
        bc_sets = {"up": bnd.up_nodes, "down": bnd.down_nodes}
        write_solution_csv(mesh, sol, art("solution_nodes", out / "solution_nodes.csv"),
                           art("solution_elements", out / "solution_elements.csv"), bc_sets)
        write_vtk_mesh(mesh, art("model_vtk", out / "model.vtk"), point_data={"displacement": sol.u},
                       cell_data={"E": mat.E, "density": mat.density, "von_mises": sol.von_mises})
        report["solve"] = {"iterations": sol.iterations, "residual": sol.residual,
                           "plastic_steps": sol.history or None}
        report["reactions"] = {"down_N": reaction_force_axial(sol, bnd.down_nodes, 2),
                               "up_N": reaction_force_axial(sol, bnd.up_nodes, 2)}

    with stage("compare", cfg.resolve(p.grid)):
        keep = None
        if cfg.dvc.trabecular_only:
            mask = read_volume(_require(cfg.resolve(p.mask), "mask"))
            keep = subset_trabecular(grid.node_coords().reshape(-1, 3), mask).reshape(grid.dims)
        pairs = fe_at_dvc_points(mesh, sol, grid, cfg.dvc.central_fraction, keep)
        pairs.write_csv(art("pairs", out / "pairs.csv"))
        reliab = direction_reliability(grid, cfg.dvc.voxel_size)
        used = [d for d, n in enumerate(DIRECTIONS) if reliab[n]["reliable"]] or [0, 1, 2]
        per, pooled = direction_metrics(pairs, used)
        report["comparison"] = {"n_points": len(pairs), "per_direction": per, "pooled": pooled,
                                "pooled_directions": [DIRECTIONS[d] for d in used],
                                "reliability": reliab, "central_fraction": cfg.dvc.central_fraction,
                                "trabecular_only": cfg.dvc.trabecular_only}

    with stage("exclusion", cfg.resolve(p.uncertainty_a) or cfg.resolve(p.grid)):
        strains = differentiate_strains(grid)
        node = strains.node_strain()
        princ = principal_strains(np.nan_to_num(node))
        princ[~np.all(np.isfinite(node), axis=(-1, -2))] = np.nan
        write_grid_table(grid, art("dvc_strain", out / "dvc_strain.csv"),
                         {"strain": strains.components(node=True), "principal": princ})
        unc = None
        if p.uncertainty_a and p.uncertainty_b:
            ga = read_grid(_require(cfg.resolve(p.uncertainty_a), "uncertainty grid"))
            gb = read_grid(_require(cfg.resolve(p.uncertainty_b), "uncertainty grid"))
            unc = zero_strain_uncertainty(ga, gb)
            write_grid_table(grid, art("uncertainty", out / "uncertainty.csv"), {"uncertainty": unc})
        excl = exclusion_check(pairs, strains, grid, unc, cfg.exclusion_config())
        report["exclusion"] = excl.as_dict()

    with stage("errors", out / "pairs.csv"):
        prop = propagate_displacement_error(grid, error_grid(grid, pairs), unc)
        cols = {"quick": prop.quick, "error_strain": prop.node_error_strain}
        if prop.residual is not None:
            cols["residual"] = prop.residual
        write_grid_table(grid, art("error_strain", out / "error_strain.csv"), cols)
        report["error_propagation"] = prop.summary()

    if p.clinical_volume:
        with stage("clinical", cfg.resolve(p.clinical_volume)):
            cvol = read_volume(_require(cfg.resolve(p.clinical_volume), "clinical volume"))
            ccal = read_calibration(_require(cfg.resolve(p.clinical_calibration), "clinical calibration"))
            tr = read_transform(cfg.resolve(p.transform)) if p.transform else RigidTransform.identity()
            cmat = remap_materials(mesh, tr, cvol, ccal, _law(cfg), **_material_kwargs(cfg))
            write_materials_csv(mesh, cmat, art("clinical_materials", out / "clinical_materials.csv"))
            csol = _solve(cfg, mesh, cmat, bnd.bc)
            write_solution_csv(mesh, csol, art("clinical_solution_nodes", out / "clinical_solution_nodes.csv"),
                               None, bc_sets)
            report["clinical"] = compare_models(sol, csol, bnd.down_nodes)

    report["excluded"] = bool(excl.overall_excluded)
    report["artifacts"] = artifacts
    if write_report:
        dump_json(report, out / REPORT_NAME)
    return _clean(report)
