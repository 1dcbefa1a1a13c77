"""Correctly centered internal-IV estimation for clustered linear regressions."""

from .centering import (
    CenteringMatrix,
    build_astar,
    build_astar_blockB,
    build_astar_leaveout,
    build_astar_vec_oracle,
    design_instrument,
    design_mode_astar,
    diagnostics,
    validate_class,
)
from .estimator import ClusteredDataset, EstimateResult, estimate, estimate_iv_form, estimate_ols
from .exclusion import ClusterPartition, ExclusionMatrix, from_recipe
from .inference import ConfidenceSet, ar_test, infer, invert_ar, tstat_interval
from .projections import ControlMatrix, build_projection, leave_out_projection_row, pseudoinverse

__version__ = "0.1.0"
