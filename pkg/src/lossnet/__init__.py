"""Mean-field loss networks: Erlang measures, mean-field ODEs, exact simulation and large deviations."""

from .exceptions import ConvergenceError, PreconditionError, StepSizeError
from .models import (
    FAMILIES,
    Closed,
    FeedbackField,
    Jump,
    Mobile,
    MobileSplit,
    ModelSpec,
    Open,
    Rerouting,
    make_split,
    model_from_dict,
)
from .statespace import (
    EmpiricalVector,
    LoadVector,
    StateSpace,
    blocking_probability,
    enumerate_states,
    erlang_measure,
    log_partition,
    partition_function,
    relative_entropy,
    solve_rho_lambda,
    solve_theta_bar,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "PreconditionError",
    "StepSizeError",
    "FAMILIES",
    "Closed",
    "FeedbackField",
    "Jump",
    "Mobile",
    "MobileSplit",
    "ModelSpec",
    "Open",
    "Rerouting",
    "make_split",
    "model_from_dict",
    "EmpiricalVector",
    "LoadVector",
    "StateSpace",
    "blocking_probability",
    "enumerate_states",
    "erlang_measure",
    "log_partition",
    "partition_function",
    "relative_entropy",
    "solve_rho_lambda",
    "solve_theta_bar",
]
