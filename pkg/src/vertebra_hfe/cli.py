"""Build, solve and validate vertebra hFE models from the command line.

Every subcommand accepts ``--config`` (INI file), ``--set section.key=value``
overrides, ``--seed`` and ``--out``. File flags such as ``--mesh`` override
the matching ``[paths]`` entry. Exit status: 0 ok, 2 excluded under
``--strict``, 3 stage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .dvcfield import differentiate_strains, read_grid, zero_strain_uncertainty
from .errors import HfeError, StageError
from .export import read_solution_nodes, write_grid_table, write_solution_csv, write_vtk_mesh
from .materials import (MaterialField, map_materials, plastic_parameters, read_materials_csv, read_transform,
                        remap_materials, write_materials_csv)
from .mesh import read_mesh
from .solver import reaction_force_axial
from .validate import (DIRECTIONS, build_dirichlet_from_dvc, direction_metrics, direction_reliability,
                       error_grid, exclusion_check, extract_bc_slices, fe_at_dvc_points,
                       propagate_displacement_error, read_pairs_csv, subset_trabecular)
from .volume import (fit_calibration, read_calibration, read_calibration_samples, read_volume, write_calibration,
                     write_volume)

EXIT_OK, EXIT_EXCLUDED, EXIT_STAGE = 0, 2, 3

# file flag -> [paths] key
PATH_FLAGS = {
    "volume": "volume", "mask": "mask", "mesh": "mesh", "grid": "grid", "calibration": "calibration",
    "samples": "calibration_samples", "transform": "transform", "uncertainty_a": "uncertainty_a",
    "uncertainty_b": "uncertainty_b",
}


def _common(p):
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration entry (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--strict", action="store_true", help="exit with status 2 when a specimen is excluded")
    p.add_argument("-v", "--verbose", action="store_true")


def _files(p, *names):
    for n in names:
        p.add_argument("--" + n.replace("_", "-"), dest=n, type=Path)


def build_parser():
    ap = argparse.ArgumentParser(prog="vertebra-hfe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the grey-to-density line and write a density image")
    _common(p)
    _files(p, "samples", "volume", "calibration")

    p = sub.add_parser("map-materials", help="element densities and moduli from an image "
                                             "(with --transform: remap a grey image through a rigid transform)")
    _common(p)
    _files(p, "mesh", "volume", "calibration", "samples", "transform")

    p = sub.add_parser("solve", help="solve with boundary conditions taken from a DVC grid")
    _common(p)
    _files(p, "mesh", "materials", "grid")

    p = sub.add_parser("validate", help="pair FE and DVC displacements and compute metrics")
    _common(p)
    _files(p, "mesh", "solution", "grid", "mask")

    p = sub.add_parser("exclude", help="evaluate the exclusion criteria")
    _common(p)
    _files(p, "pairs", "grid", "uncertainty_a", "uncertainty_b")

    p = sub.add_parser("propagate-error", help="strain errors implied by displacement errors")
    _common(p)
    _files(p, "pairs", "grid", "uncertainty_a", "uncertainty_b")

    p = sub.add_parser("phantom", help="write a synthetic specimen (images, mesh, DVC grids)")
    _common(p)

    p = sub.add_parser("pipeline", help="run the full validation workflow")
    _common(p)

    p = sub.add_parser("compare-models", help="compare two solutions on the same mesh")
    _common(p)
    _files(p, "mesh", "solution_a", "solution_b")
    p.add_argument("--reaction-set", default="down", help="bc_set label whose reactions are compared")
    return ap


def _config(args):
    cfg = pl.load_config(args.config, args.overrides, args.seed)
    for flag, key in PATH_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg.paths, key, str(val.resolve()))
    if args.strict:
        cfg.run.strict = True
    return cfg


def _need(args, name):
    val = getattr(args, name, None)
    if val is None:
        raise StageError(name.replace("_", "-"), None, f"--{name.replace('_', '-')} is required")
    return val


def cmd_calibrate(args, cfg, out):
    with pl.stage("calibrate", cfg.resolve(cfg.paths.volume or cfg.paths.calibration_samples)):
        if cfg.paths.volume:
            density, cal, info = pl.calibrated_density(cfg, cfg.resolve(cfg.paths.volume),
                                                       cfg.resolve(cfg.paths.calibration),
                                                       cfg.resolve(cfg.paths.calibration_samples),
                                                       out / "calibration.txt")
            write_volume(density, out / "density.hdr")
        else:
            samples = read_calibration_samples(pl._require(cfg.resolve(cfg.paths.calibration_samples),
                                                           "calibration samples"))
            cal = fit_calibration(samples)
            write_calibration(cal, out / "calibration.txt")
            info = {"source": "fitted", "slope": cal.slope, "intercept": cal.intercept, "residual": cal.residual}
    print(pl.dump_json(info), end="")
    return EXIT_OK


def cmd_map_materials(args, cfg, out):
    p = cfg.paths
    with pl.stage("materials", cfg.resolve(p.volume)):
        mesh, _ = read_mesh(pl._require(cfg.resolve(p.mesh), "mesh"))
        kw = pl._material_kwargs(cfg)
        # the case file names a transform for the clinical branch; remap only when asked on the command line
        if args.transform is not None:
            vol = read_volume(pl._require(cfg.resolve(p.volume), "volume"))
            cal = read_calibration(pl._require(cfg.resolve(p.calibration), "calibration"))
            mat = remap_materials(mesh, read_transform(cfg.resolve(p.transform)), vol, cal, pl._law(cfg), **kw)
        else:
            density, _, _ = pl.calibrated_density(cfg, cfg.resolve(p.volume), cfg.resolve(p.calibration),
                                                  cfg.resolve(p.calibration_samples))
            mat = map_materials(mesh, density, pl._law(cfg), **kw)
        write_materials_csv(mesh, mat, out / "materials.csv")
    print(pl.dump_json({"n_elements": mesh.n_elements, "density": pl._stats(mat.density),
                        "E_MPa": pl._stats(mat.E)}), end="")
    return EXIT_OK


def cmd_solve(args, cfg, out):
    p = cfg.paths
    with pl.stage("solve", cfg.resolve(p.mesh)):
        mesh, _ = read_mesh(pl._require(cfg.resolve(p.mesh), "mesh"))
        mat = read_materials_csv(mesh, pl._require(_need(args, "materials"), "materials"))
        if cfg.solver.plasticity and not mat.has_plasticity:
            sy, Ep = plastic_parameters(mat.density, mat.E)
            mat = MaterialField(mat.density, mat.E, mat.nu, sy, Ep)
        grid = read_grid(pl._require(cfg.resolve(p.grid), "DVC grid"))
        slices = extract_bc_slices(grid, cfg.dvc.min_points)
        bnd = build_dirichlet_from_dvc(mesh, grid, slices, cfg.dvc.extrapolate, cfg.dvc.extrapolate_neighbors,
                                       cfg.dvc.extrapolate_max_distance or None)
        sol = pl._solve(cfg, mesh, mat, bnd.bc)
        write_solution_csv(mesh, sol, out / "solution_nodes.csv", out / "solution_elements.csv",
                           {"up": bnd.up_nodes, "down": bnd.down_nodes})
        write_vtk_mesh(mesh, out / "model.vtk", point_data={"displacement": sol.u},
                       cell_data={"E": mat.E, "von_mises": sol.von_mises})
    print(pl.dump_json({"iterations": sol.iterations, "upper_slice": slices[0], "lower_slice": slices[1],
                        "reaction_down_N": reaction_force_axial(sol, bnd.down_nodes)}), end="")
    return EXIT_OK


def cmd_validate(args, cfg, out):
    p = cfg.paths
    with pl.stage("compare", cfg.resolve(p.grid)):
        mesh, _ = read_mesh(pl._require(cfg.resolve(p.mesh), "mesh"))
        sol = read_solution_nodes(mesh, pl._require(_need(args, "solution"), "solution"))
        grid = read_grid(pl._require(cfg.resolve(p.grid), "DVC grid"))
        keep = None
        if cfg.dvc.trabecular_only:
            mask = read_volume(pl._require(cfg.resolve(p.mask), "mask"))
            keep = subset_trabecular(grid.node_coords().reshape(-1, 3), mask).reshape(grid.dims)
        pairs = fe_at_dvc_points(mesh, sol, grid, cfg.dvc.central_fraction, keep)
        pairs.write_csv(out / "pairs.csv")
        reliab = direction_reliability(grid, cfg.dvc.voxel_size)
        used = [d for d, n in enumerate(DIRECTIONS) if reliab[n]["reliable"]] or [0, 1, 2]
        per, pooled = direction_metrics(pairs, used)
        res = {"n_points": len(pairs), "per_direction": per, "pooled": pooled, "reliability": reliab}
        pl.dump_json(res, out / "metrics.json")
    print(pl.dump_json(res), end="")
    return EXIT_OK


def _uncertainty(cfg, grid):
    p = cfg.paths
    if not (p.uncertainty_a and p.uncertainty_b):
        return None
    ga = read_grid(pl._require(cfg.resolve(p.uncertainty_a), "uncertainty grid"))
    gb = read_grid(pl._require(cfg.resolve(p.uncertainty_b), "uncertainty grid"))
    return zero_strain_uncertainty(ga, gb)


def cmd_exclude(args, cfg, out):
    with pl.stage("exclusion", cfg.resolve(cfg.paths.grid)):
        grid = read_grid(pl._require(cfg.resolve(cfg.paths.grid), "DVC grid"))
        pairs = read_pairs_csv(pl._require(_need(args, "pairs"), "pairs"))
        rep = exclusion_check(pairs, differentiate_strains(grid), grid, _uncertainty(cfg, grid),
                              cfg.exclusion_config())
        pl.dump_json(rep, out / "exclusion.json")
    print(pl.dump_json(rep), end="")
    return EXIT_EXCLUDED if cfg.run.strict and rep.overall_excluded else EXIT_OK


def cmd_propagate_error(args, cfg, out):
    with pl.stage("errors", args.pairs):
        grid = read_grid(pl._require(cfg.resolve(cfg.paths.grid), "DVC grid"))
        pairs = read_pairs_csv(pl._require(_need(args, "pairs"), "pairs"))
        unc = _uncertainty(cfg, grid)
        prop = propagate_displacement_error(grid, error_grid(grid, pairs), unc)
        cols = {"quick": prop.quick, "error_strain": prop.node_error_strain}
        if prop.residual is not None:
            cols["residual"] = prop.residual
        write_grid_table(grid, out / "error_strain.csv", cols)
        summary = prop.summary()
        pl.dump_json(summary, out / "error_propagation.json")
    print(pl.dump_json(summary), end="")
    return EXIT_OK


def cmd_phantom(args, cfg, out):
    with pl.stage("phantom", out / "inputs"):
        new = pl.synthesize_inputs(cfg, out)
        new.synthetic.enabled = False
        (out / "case.ini").write_text(new.to_ini())
    print(f"wrote synthetic case to {out / 'inputs'} (configuration: {out / 'case.ini'})")
    return EXIT_OK


def cmd_pipeline(args, cfg, out):
    report = pl.run_pipeline(cfg, out)
    comp = report["comparison"]
    print(f"{comp['n_points']} comparison points; excluded={report['excluded']}; "
          f"report: {out / pl.REPORT_NAME}")
    return EXIT_EXCLUDED if cfg.run.strict and report["excluded"] else EXIT_OK


def cmd_compare_models(args, cfg, out):
    with pl.stage("compare-models", args.solution_b):
        mesh, _ = read_mesh(pl._require(cfg.resolve(cfg.paths.mesh), "mesh"))
        a = read_solution_nodes(mesh, pl._require(_need(args, "solution_a"), "solution"))
        b = read_solution_nodes(mesh, pl._require(_need(args, "solution_b"), "solution"))
        nodes = a.nodes_in(args.reaction_set)
        if len(nodes) == 0:
            raise ValueError(f"no nodes labelled {args.reaction_set!r} in {args.solution_a}")
        res = pl.compare_models(a, b, nodes)
        pl.dump_json(res, out / "compare_models.json")
    print(pl.dump_json(res), end="")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate, "map-materials": cmd_map_materials, "solve": cmd_solve,
    "validate": cmd_validate, "exclude": cmd_exclude, "propagate-error": cmd_propagate_error,
    "phantom": cmd_phantom, "pipeline": cmd_pipeline, "compare-models": cmd_compare_models,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (HfeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
