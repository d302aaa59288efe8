"""
End-to-end validation
=====================

Run the full chain on a synthetic specimen: the "experiment" is an FE
solve sampled on a noisy DVC grid; the model takes its boundary conditions
from the two grid slices nearest the endplates and is compared with the
measured displacements at the interior grid points.
"""

import json
import tempfile

from vertebra_hfe.pipeline import PipelineConfig, run_pipeline

CASE = """
[synthetic]
enabled = true
radii = 15, 12
height = 23.4
voxel_size = 0.5
mesh_edge = 1.95
displacement = 0.1
noise_sigma = 0.005
uncertainty_sigma = 0.005
clinical = true
clinical_voxel_size = 1.0
[run]
seed = 11
"""

with tempfile.TemporaryDirectory() as out:
    rep = run_pipeline(PipelineConfig.from_string(CASE), out)

cmp_ = rep["comparison"]
print(f"{cmp_['n_points']} compared points")
for d, m in cmp_["per_direction"].items():
    print(f"  {d}: slope {m['slope']:.3f}  R2 {m['r2']:.3f}  RMSE {m['rmse'] * 1000:.1f} um  RMSE% {m['rmse_pct']:.1f}")
print("reactions (N):", json.dumps({k: round(v, 1) for k, v in rep["reactions"].items()}))
print("excluded:", rep["excluded"], {k: v["excluded"] for k, v in rep["exclusion"].items() if isinstance(v, dict)})
print(f"clinical vs micro-CT reaction delta {100 * rep['clinical']['reaction_delta']:.2f}%")
