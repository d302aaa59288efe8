import numpy as np
import pytest

from vertebra_hfe.mesh import Tet10Mesh, tet4_to_tet10

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record(key, title, ok, detail):
    ACCEPTANCE[key] = f"[{'PASS' if ok else 'FAIL'}] {key} {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def single_tet(vertices=None):
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) if vertices is None else np.asarray(vertices, float)
    coords, elems = tet4_to_tet10(v, np.array([[0, 1, 2, 3]]))
    return Tet10Mesh(coords, elems)


def two_tets():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]])
    coords, elems = tet4_to_tet10(v, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
    return Tet10Mesh(coords, elems)


# a quick synthetic specimen used by the pipeline and CLI tests
SMALL_CASE = """
[synthetic]
enabled = true
radii = 10, 8
height = 15.6
voxel_size = 0.5
mesh_edge = 1.95
displacement = 0.02
tilt = 0.002
uncertainty_sigma = 0.005
clinical = true

[run]
seed = 7
"""


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    from vertebra_hfe.pipeline import PipelineConfig, run_pipeline

    out = tmp_path_factory.mktemp("small_run")
    report = run_pipeline(PipelineConfig.from_string(SMALL_CASE), out)
    return out, report
