"""cguard: build, train, and certify contraction-stable neural controllers.

The toolkit has three layers:

* dense small-matrix machinery that diagonalizes/triangularizes closed-loop
  differential dynamics and certifies contraction (``transforms``,
  ``certify``),
* a constrained control-policy architecture whose weights are projected into
  a provably contracting set (``policy``), plus the composite-variable
  reduction for impedance-shaped second-order plants (``composite``),
* a 2D peg benchmark, a minimal clipped-surrogate policy-gradient trainer,
  and an experiment suite that reproduces the stability / robustness /
  network-size studies (``peg``, ``training``, ``experiments``, ``cli``).
"""

__version__ = "0.1.0"

from .plant import PlantModel, linear_plant
from .transforms import (
    CoordinateTransform,
    build_Wy,
    build_Wu_qr,
    build_Wu_lu,
    build_transform,
)
from .certify import (
    ContractionCertificate,
    RegionGrid,
    assemble_F,
    certify_theorem1,
    check_hierarchical_blocks,
    generalized_jacobian,
    uniformly_negative,
)
from .policy import (
    AxisNetwork,
    ConstrainedPolicy,
    InnerPolicyState,
    axis_jacobian,
    policy_forward,
    project_weights,
    verify_constraint_satisfaction,
)
from .composite import (
    CompositeMap,
    ImpedanceGains,
    absorbing_feasibility,
    gains_to_first_order,
    recover_tracking_error,
    synthetic_cartesian_plant,
    verify_theorem3,
)

__all__ = [
    "PlantModel",
    "linear_plant",
    "CoordinateTransform",
    "build_Wy",
    "build_Wu_qr",
    "build_Wu_lu",
    "build_transform",
    "ContractionCertificate",
    "RegionGrid",
    "assemble_F",
    "certify_theorem1",
    "check_hierarchical_blocks",
    "generalized_jacobian",
    "uniformly_negative",
    "AxisNetwork",
    "ConstrainedPolicy",
    "InnerPolicyState",
    "axis_jacobian",
    "policy_forward",
    "project_weights",
    "verify_constraint_satisfaction",
    "CompositeMap",
    "ImpedanceGains",
    "absorbing_feasibility",
    "gains_to_first_order",
    "recover_tracking_error",
    "synthetic_cartesian_plant",
    "verify_theorem3",
]
