"""Sparse deconvolution of compressible linear state-space models.

States follow ``x_t = theta x_{t-1} + w_t`` with sparse innovations and are
seen through nested compressive measurements ``y_t = A_t x_t + v_t``. The
estimator minimizes an l1 penalty on the innovations plus a least-squares
data term by iteratively reweighted Kalman smoothing, and estimates
``theta`` along the way.
"""

from dyncs.baseline import BPConfig, basis_pursuit_denoise, bp_sequence
from dyncs.model import ModelParams, StateTrajectory, make_innovations, propagate_states
from dyncs.sensing import MeasurementEnsemble, build_ensemble, observe, row_counts_for_ratio
from dyncs.smoother import InnerSSMSpec, fixed_interval_smooth
from dyncs.solver import DeconvolutionResult, SolverConfig, confidence_bands, run
from dyncs.spikes import SpikeTrain, detect_spikes

__all__ = [
    "BPConfig", "basis_pursuit_denoise", "bp_sequence",
    "ModelParams", "StateTrajectory", "make_innovations", "propagate_states",
    "MeasurementEnsemble", "build_ensemble", "observe", "row_counts_for_ratio",
    "InnerSSMSpec", "fixed_interval_smooth",
    "DeconvolutionResult", "SolverConfig", "confidence_bands", "run",
    "SpikeTrain", "detect_spikes",
]
__version__ = "0.1.0"
