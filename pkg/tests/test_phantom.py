import numpy as np
import pytest

from vertebra_hfe.errors import PhantomSpecError
from vertebra_hfe.phantom import PhantomSpec, generate_phantom, phantom_mesh, phantom_volume

SMALL = PhantomSpec(radii=(6.0, 5.0), height=8.0, texture=0.2)


class TestSpec:
    @pytest.mark.parametrize("kw", [
        {"radii": (0.0, 5.0)},
        {"shell_thickness": 6.0},
        {"trabecular_density": -0.1},
        {"lesion_multiplier": 1.5},
        {"lesion_center": (0.0, 0.0, 1.0), "lesion_radius": 2.0},
        {"lesion_center": (4.0, 0.0, 4.0), "lesion_radius": 3.0},
        {"texture_scale": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(PhantomSpecError):
            PhantomSpec(**{**SMALL.__dict__, **kw}).validate()

    def test_voxel_and_edge_rules(self):
        with pytest.raises(PhantomSpecError):
            generate_phantom(SMALL, voxel_size=1.5, mesh_edge=4.0)
        with pytest.raises(PhantomSpecError):
            generate_phantom(SMALL, voxel_size=0.5, mesh_edge=0.9)

    def test_density_layout(self):
        s = PhantomSpec(radii=(6.0, 5.0), height=8.0)
        pts = np.array([[0.0, 0.0, 4.0], [5.8, 0.0, 4.0], [0.0, 0.0, 9.0], [7.0, 0.0, 4.0]])
        assert s.density(pts).tolist() == [0.25, 0.8, 0.0, 0.0]

    def test_lesion(self):
        s = PhantomSpec(radii=(6.0, 5.0), height=8.0, lesion_center=(0.0, 0.0, 4.0), lesion_radius=2.0,
                        lesion_multiplier=0.0)
        assert s.density(np.array([[0.5, 0.5, 4.0], [0.0, 0.0, 6.5]])).tolist() == [0.0, 0.25]


class TestGeneration:
    def test_deterministic(self):
        a = generate_phantom(SMALL, 0.5, 1.0, seed=4)
        b = generate_phantom(SMALL, 0.5, 1.0, seed=4)
        assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1].values, b[1].values)
        assert np.array_equal(a[2].coords, b[2].coords) and np.array_equal(a[2].elements, b[2].elements)
        c = generate_phantom(SMALL, 0.5, 1.0, seed=5)
        assert not np.array_equal(a[0].values, c[0].values)

    def test_unit_multiplier_equals_healthy(self):
        lesion = PhantomSpec(**{**SMALL.__dict__, "lesion_center": (0.0, 0.0, 4.0), "lesion_radius": 2.0,
                                "lesion_multiplier": 1.0})
        assert np.array_equal(phantom_volume(SMALL, 0.5, 1).values, phantom_volume(lesion, 0.5, 1).values)

    def test_mask_and_volume_cover_body(self):
        dens, mask, mesh = generate_phantom(SMALL, 0.5, 1.0)
        assert mask.kind == "mask" and set(np.unique(mask.values)) == {0.0, 1.0}
        assert dens.values[0].max() == 0 and dens.values[-1].max() == 0
        c = dens.voxel_centers()
        assert c[..., 0].min() < -6.0 and c[..., 0].max() > 6.0 and c[..., 2].max() > 8.0

    def test_mesh_is_inside_ellipse_staircase(self):
        mesh = phantom_mesh(SMALL, 1.0)
        assert mesh.coords[:, 2].min() == 0.0 and mesh.coords[:, 2].max() == 8.0
        # every kept hex has its centre in the ellipse, so tets stay within one edge of it
        cen = mesh.centroids
        assert np.all((cen[:, 0] / 7.0) ** 2 + (cen[:, 1] / 6.0) ** 2 <= 1.0)
        # staircase volume approaches the elliptic cylinder
        assert mesh.volumes.sum() == pytest.approx(np.pi * 6.0 * 5.0 * 8.0, rel=0.05)

    def test_texture_independent_of_voxel_size(self):
        p = np.array([[1.0, 1.0, 4.0], [-2.0, 0.5, 3.0]])
        assert np.array_equal(SMALL.density(p, seed=2), SMALL.density(p, seed=2))
        # both images sample one physical field at their voxel centres
        for h in (0.5, 0.25):
            v = phantom_volume(SMALL, h, seed=2)
            want = SMALL.density(v.voxel_centers(), seed=2).astype(np.float32)
            assert np.array_equal(v.values, want)
