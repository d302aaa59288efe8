"""Homogenized finite element models of vertebrae validated against DVC displacement grids."""
from .dvcfield import (DvcGrid, StrainGrid, differentiate_strains, grid_from_function, interpolate_grid,
                       peak_cell_strain, read_grid, synthesize_dvc, trilinear_displacement, write_grid,
                       zero_strain_uncertainty)
from .errors import *  # noqa: F401,F403
from .materials import (ElasticityLaw, MaterialField, RigidTransform, density_to_modulus, hardening_modulus,
                        integrate_element_density, map_materials, remap_materials, yield_stress)
from .mesh import Tet10Mesh, box_mesh, interpolate_nodal_field, locate_point, read_mesh, write_mesh
from .phantom import PhantomSpec, generate_phantom
from .pipeline import PipelineConfig, compare_models, run_pipeline
from .solver import (DirichletSet, PlasticState, Solution, reaction_force_axial, solve_elastic,
                     solve_elastoplastic)
from .validate import (ExclusionConfig, ExclusionReport, RegressionMetrics, build_dirichlet_from_dvc,
                       direction_reliability, exclusion_check, extract_bc_slices, fe_at_dvc_points,
                       propagate_displacement_error, regression_metrics, subset_trabecular)
from .volume import (DensityCalibration, VoxelVolume, fit_calibration, grey_to_density, read_volume,
                     sample_trilinear, write_volume)

__version__ = "0.1.0"
