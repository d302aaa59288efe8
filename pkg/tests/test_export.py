import numpy as np
import pytest

from vertebra_hfe.dvcfield import grid_from_function
from vertebra_hfe.errors import ContractError
from vertebra_hfe.export import (read_solution_nodes, write_grid_table, write_solution_csv, write_vtk_grid,
                                 write_vtk_mesh)
from vertebra_hfe.materials import MaterialField
from vertebra_hfe.mesh import box_mesh
from vertebra_hfe.solver import DirichletSet, reaction_force_axial, solve_elastic


@pytest.fixture
def solved():
    m = box_mesh((1.0, 1.0, 2.0), (1, 1, 2))
    z = m.coords[:, 2]
    bottom, top = np.flatnonzero(z == 0), np.flatnonzero(z == 2)
    bc = DirichletSet.from_nodes(bottom, 0.0).merge(DirichletSet.from_nodes(top, [0.0, 0.0, -0.01]))
    sol = solve_elastic(m, MaterialField(np.full(m.n_elements, 0.5), 1000.0, 0.3), bc)
    return m, sol, bottom, top


def test_solution_tables_round_trip(tmp_path, solved):
    m, sol, bottom, top = solved
    write_solution_csv(m, sol, tmp_path / "n.csv", tmp_path / "e.csv", {"down": bottom, "up": top})
    back = read_solution_nodes(m, tmp_path / "n.csv")
    assert np.array_equal(back.u, sol.u)
    assert np.array_equal(back.constrained, sol.constrained)
    assert np.array_equal(back.nodes_in("down"), bottom)
    assert np.sum(back.nodal_forces[back.nodes_in("down"), 2]) == pytest.approx(reaction_force_axial(sol, bottom))
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0].split(",") == ["id", "exx", "eyy", "ezz", "eyz", "exz", "exy", "p1", "p2", "p3", "von_mises"]
    assert len(rows) == m.n_elements + 1


def test_unknown_node_rejected(tmp_path, solved):
    m, sol, *_ = solved
    write_solution_csv(m, sol, tmp_path / "n.csv")
    other = box_mesh((1.0, 1.0, 1.0), (1, 1, 1))
    with pytest.raises(ContractError):
        read_solution_nodes(other, tmp_path / "n.csv")


def test_vtk_mesh(tmp_path, solved):
    m, sol, *_ = solved
    write_vtk_mesh(m, tmp_path / "m.vtk", {"u": sol.u}, {"von_mises": sol.von_mises})
    text = (tmp_path / "m.vtk").read_text()
    assert f"CELLS {m.n_elements} {11 * m.n_elements}" in text
    assert text.count("\n24\n") + text.count("24\n24") >= 1
    assert "VECTORS u double" in text and "SCALARS von_mises double 1" in text


def test_vtk_grid_and_table(tmp_path):
    g = grid_from_function(lambda p: p, (0.0, 1.0, 2.0), 0.5, (2, 3, 2))
    write_vtk_grid(g, tmp_path / "g.vtk", {"s": np.arange(12.0).reshape(2, 3, 2)})
    lines = (tmp_path / "g.vtk").read_text().splitlines()
    assert "DIMENSIONS 2 3 2" in lines and "POINT_DATA 12" in lines
    start = lines.index("VECTORS displacement double") + 1
    # x varies fastest in the file
    assert [float(v) for v in lines[start + 1].split()] == [0.5, 1.0, 2.0]
    write_grid_table(g, tmp_path / "t.csv", {"s": np.arange(12.0).reshape(2, 3, 2), "v": np.zeros((2, 3, 2, 2))})
    head = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert head == ["i", "j", "k", "x_mm", "y_mm", "z_mm", "s", "v_0", "v_1"]
