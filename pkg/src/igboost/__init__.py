"""Softmax regression trees, gradient boosting and its vanishing-learning-rate limit."""
from .boosting import BoostingDiverged, BoostState, TrajectoryRecord, boost_init, boost_step, run_chain
from .core import (
    BinaryCrossEntropy,
    Config,
    Dataset,
    DatasetError,
    ExponentialMargin,
    LossDomainError,
    SquaredError,
    generate_sine_dataset,
    get_loss,
    init_constant,
    loss_eval,
    responses_for_loss,
)
from .infinitesimal import (
    OdeTrajectory,
    OperatorEstimate,
    estimate_operator,
    euler_integrate,
    exact_operator_1d,
    lambda_sweep,
    long_time_diagnostics,
)
from .measure import (
    Ensemble,
    SignedAtomMeasure,
    face_decompose,
    jordan_split,
    l2_norm,
    sup_norm,
    to_measure,
    tv_norm,
)
from .rng import RngStream
from .tree import (
    FittedTree,
    Region,
    fit_gradient_tree,
    fit_regression_tree,
    grow_partition,
    region_mse,
    softmax_select,
    split_score,
)

__version__ = "0.1.0"
