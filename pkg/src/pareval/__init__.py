"""Parallel evaluation of nonlinear recurrences by Newton-type fixed-point solvers.

The package solves ``s_t = f_t(s_{t-1})`` for a whole trace at once: DEER
(undamped Newton with affine scans), quasi-DEER (diagonal Jacobians) and
ELK / quasi-ELK (Levenberg-Marquardt steps computed by Kalman filtering).
"""
__version__ = "0.1.0"

from .core import (DimensionError, DivergedDynamicsError, DynamicsModel, mad, merit,
                   merit_gradient, residual, sequential_evaluate)
from .deer import DeerConfig, SolveReport, deer_solve, deer_step
from .elk import ElkConfig, elk_solve, elk_step, lambda_sweep
from .scan import inclusive_scan

__all__ = [
    "DimensionError",
    "DivergedDynamicsError",
    "DynamicsModel",
    "residual",
    "merit",
    "merit_gradient",
    "mad",
    "sequential_evaluate",
    "inclusive_scan",
    "DeerConfig",
    "SolveReport",
    "deer_step",
    "deer_solve",
    "ElkConfig",
    "elk_step",
    "elk_solve",
    "lambda_sweep",
]
