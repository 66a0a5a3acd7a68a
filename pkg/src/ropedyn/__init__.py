"""Differentiable mass-spring-damper rope dynamics with identification and control."""

import jax

# Finite-difference validation of the dynamics needs double precision.
jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    ConfigError,
    DegenerateLink,
    DimensionMismatch,
    Diverged,
    EmptyInput,
    HiddenParameterAccess,
    IndexOutOfRange,
    InsufficientPoints,
    KindMismatch,
    NonFinite,
    NonMonotonicTime,
    RopeError,
    UnregisteredPrimitive,
)
from .rope import (  # noqa: E402
    LinkGeometry,
    RopeParams,
    RopeState,
    bending_damping_forces,
    bending_spring_forces,
    compute_link_geometry,
    external_forces,
    linear_forces,
    rollout,
    rope_energy,
    step,
    torsion_forces,
)

__version__ = "0.1.0"
