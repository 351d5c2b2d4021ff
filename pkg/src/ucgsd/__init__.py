"""Unit-consistent canonical scaling, the UC adjoint and gauge-equivariant descent.

Modules: ``tensor`` (matrix helpers and text formats), ``canon`` (canonical
diagonal decomposition), ``graph`` (network DAG and differentiation),
``models`` (builders, network files), ``gauge`` (rescaling symmetry and
equivariance checks), ``optim`` (UC-GSD and friends), ``tasks`` and ``cli``.
"""

from .canon import (
    ScaleDecomposition,
    balance_log,
    canonical_project,
    canonicalize_kernel,
    rz_canonicalize,
    uc_adjoint,
)
from .gauge import (
    apply_gauge,
    check_trajectory_equivariance,
    sample_gauge,
    solve_gauge_constraints,
)
from .graph import (
    Network,
    backward_euclidean,
    backward_uc,
    finite_diff_grad,
    forward,
    loss_and_grad,
)
from .models import build_network, conv_net, mlp, residual_mlp
from .optim import Optimizer, OptimizerConfig, gauge_fix_projection, ucgsd_step
from .tasks import synthetic_regression, two_moons

__version__ = "0.1.0"

__all__ = [
    "ScaleDecomposition",
    "balance_log",
    "canonical_project",
    "canonicalize_kernel",
    "rz_canonicalize",
    "uc_adjoint",
    "apply_gauge",
    "check_trajectory_equivariance",
    "sample_gauge",
    "solve_gauge_constraints",
    "Network",
    "backward_euclidean",
    "backward_uc",
    "finite_diff_grad",
    "forward",
    "loss_and_grad",
    "build_network",
    "conv_net",
    "mlp",
    "residual_mlp",
    "Optimizer",
    "OptimizerConfig",
    "gauge_fix_projection",
    "ucgsd_step",
    "synthetic_regression",
    "two_moons",
]
