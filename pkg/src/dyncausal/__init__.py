"""Online causal-structure discovery over streaming data with change detection."""

__version__ = "0.1.0"

from .errors import ConfigurationError, ConstraintInfeasibleError, InvalidArgumentError
from .graph import (
    AdjacencyMatrix, StructuralDelta, WeightedGraph, acyclicity_gradient, acyclicity_value,
    is_dag, matrix_exponential, structural_delta, structural_hamming_distance, threshold_edges,
)
from .simulate import (
    GroundTruth, ObservationBatch, SimConfig, generate_random_dag, generate_stream,
    inject_change, load_stream, sample_contemporaneous, save_stream, step_sem,
)
from .solver import SolverConfig, SolverState, objective, regression_targets, solve_static, solve_step
from .detect import (
    CusumState, DetectionEvent, DetectorConfig, EdgeTestConfig, calibrate_cusum, cusum_update,
    edge_appearance_test, edge_disappearance_test, residual, run_sequential,
)
from .bounds import delay_lower_bound, delay_upper_bound, scaled_bounds
from .harness import (
    SweepSpec, SweepSummary, TrialProtocol, TrialResult, compute_far_mdr, emit_outputs,
    run_sweep, run_trial,
)
