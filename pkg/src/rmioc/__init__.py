"""Inverse optimal control from incomplete trajectory observations.

The central object is the recovery matrix built from system and feature
Jacobians along an observation window; its kernel holds the cost weights
and the costate right after the window.
"""

from .dynamics import (
    ArmParameters,
    FeatureSet,
    LinearSystem,
    Monomial,
    arm_system,
    lti_system,
    quadratic_feature_library,
)
from .recovery import (
    RecoveryReport,
    RecoveryState,
    build_recovery_matrix,
    init_recovery,
    minimal_observation_ioc,
    normalize,
    observations,
    rank_index,
    recover_weights,
    recovery_error,
    update_recovery,
)
from .trajectory import Trajectory, trajectory_from_csv, trajectory_to_csv

__version__ = "0.1.0"
