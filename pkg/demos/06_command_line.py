"""
Command line walkthrough
========================

The same chain through the ``vertebra-hfe`` subcommands: write a synthetic
case, then run each stage on its files. ``main`` takes the argument list a
shell would pass.
"""

import contextlib
import io
import json
import tempfile
from pathlib import Path

from vertebra_hfe.cli import main

CASE = """
[synthetic]
enabled = true
radii = 10, 8
height = 15.6
voxel_size = 0.5
mesh_edge = 1.95
displacement = 0.02
noise_sigma = 0.002
uncertainty_sigma = 0.005
[run]
seed = 7
"""

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "case.ini").write_text(CASE)
    case = tmp / "case"
    work = tmp / "work"
    ini = str(case / "case.ini")
    steps = [
        ["phantom", "--config", str(tmp / "case.ini"), "--out", str(case)],
        ["calibrate", "--config", ini, "--out", str(work)],
        ["map-materials", "--config", ini, "--out", str(work)],
        ["solve", "--config", ini, "--materials", str(work / "materials.csv"), "--out", str(work)],
        ["validate", "--config", ini, "--solution", str(work / "solution_nodes.csv"), "--out", str(work)],
        ["exclude", "--config", ini, "--pairs", str(work / "pairs.csv"), "--out", str(work)],
        ["propagate-error", "--config", ini, "--pairs", str(work / "pairs.csv"), "--out", str(work)],
    ]
    for argv in steps:
        print("$ vertebra-hfe", argv[0])
        # each subcommand prints a JSON summary; keep only its exit status here
        with contextlib.redirect_stdout(io.StringIO()):
            code = main(argv)
        print(f"  -> exit {code}")
    metrics = json.loads((work / "metrics.json").read_text())
    print("written:", sorted(p.name for p in work.iterdir()))
    print("z metrics:", {k: round(v, 4) for k, v in metrics["per_direction"]["z"].items() if k != "n_points"})
