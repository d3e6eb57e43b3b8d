"""Derivative-free GP dynamics learning and trajectory optimization.

Learns forward models of mechanical systems from raw position histories
(no velocity or acceleration measurements), composes physics-structured
derivative-free kernels with nonparametric ones, and uses the learned
models for iLQG trajectory optimization on simulated ball-and-beam and
rotary-pendulum plants.
"""

from .gp import GpModel, NumericalError, TrainConfig, TrainingError, train
from .kernels import (
    FeatureFactor,
    FeatureMapSpec,
    InputShapeError,
    Kernel,
    LinearFeatureKernel,
    MetricParam,
    PhysicsFeatureMap,
    PolynomialKernel,
    ProductKernel,
    RbfKernel,
    Selector,
    SumKernel,
    compile_physics_kernel,
    semiparametric,
)
from .statespace import (
    DfState,
    RegressionDataset,
    StateLayout,
    Trajectory,
    build_deriv_dataset,
    build_df_dataset,
    rollout_state,
)

__version__ = "0.1.0"

__all__ = [
    "GpModel",
    "TrainConfig",
    "TrainingError",
    "NumericalError",
    "train",
    "Kernel",
    "Selector",
    "MetricParam",
    "FeatureFactor",
    "FeatureMapSpec",
    "PhysicsFeatureMap",
    "LinearFeatureKernel",
    "PolynomialKernel",
    "RbfKernel",
    "SumKernel",
    "ProductKernel",
    "InputShapeError",
    "compile_physics_kernel",
    "semiparametric",
    "Trajectory",
    "StateLayout",
    "DfState",
    "RegressionDataset",
    "build_df_dataset",
    "build_deriv_dataset",
    "rollout_state",
    "__version__",
]
