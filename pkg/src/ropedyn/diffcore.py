"""Reverse-mode differentiation and the Adam update.

The tape is JAX's linearization: :class:`DiffTape` records a program's forward
pass with :func:`jax.vjp` and replays the adjoint on demand.  Programs are
checked against a registry of primitives before differentiation so that a
loss built from something the tape cannot differentiate fails loudly instead
of silently returning a wrong gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .errors import DimensionMismatch, NonFinite, UnregisteredPrimitive

# Every primitive the rope model, the policy and the losses lower to.
REGISTERED_PRIMITIVES = frozenset({
    # arithmetic
    "add", "add_any", "sub", "mul", "div", "neg", "integer_pow", "pow", "sqrt", "rsqrt",
    "exp", "log", "abs", "sign", "square", "max", "min", "clamp",
    # linear algebra / reductions
    "dot_general", "reduce_sum", "reduce_max", "reduce_min", "cumsum", "transpose",
    # trigonometry and activation
    "acos", "atan2", "atan", "tanh", "sin", "cos", "logistic",
    # comparisons and selection
    "eq", "ne", "gt", "ge", "lt", "le", "and", "or", "not", "select_n",
    # shape plumbing
    "broadcast_in_dim", "reshape", "squeeze", "expand_dims", "concatenate", "slice",
    "dynamic_slice", "dynamic_update_slice", "gather", "scatter-add", "scatter_add", "pad",
    "rev", "split", "iota", "convert_element_type", "copy", "copy_p", "device_put",
    "stop_gradient",
    # control flow and call wrappers
    "scan", "while", "cond", "pjit", "jit", "closed_call", "custom_jvp_call",
    "custom_vjp_call", "custom_vjp_call_jaxpr", "remat", "checkpoint", "remat2",
})


def _sub_jaxprs(value):
    if isinstance(value, (tuple, list)):
        for v in value:
            yield from _sub_jaxprs(v)
    elif hasattr(value, "eqns"):
        yield value
    elif hasattr(value, "jaxpr") and hasattr(value.jaxpr, "eqns"):
        yield value.jaxpr


def _collect(jaxpr, seen):
    for eqn in jaxpr.eqns:
        seen.add(eqn.primitive.name)
        for v in eqn.params.values():
            for sub in _sub_jaxprs(v):
                _collect(sub, seen)
    return seen


def primitives_of(program, *args) -> set[str]:
    """Names of all primitives ``program(*args)`` lowers to, including nested calls."""
    closed = jax.make_jaxpr(program)(*args)
    return _collect(closed.jaxpr, set())


def check_registered(program, *args) -> None:
    try:
        used = primitives_of(program, *args)
    except (jax.errors.TracerArrayConversionError, jax.errors.ConcretizationTypeError,
            jax.errors.TracerBoolConversionError) as exc:
        raise UnregisteredPrimitive(f"program leaves the differentiable core: {exc}") from exc
    unknown = sorted(used - REGISTERED_PRIMITIVES)
    if unknown:
        raise UnregisteredPrimitive(f"unregistered primitive(s): {', '.join(unknown)}")


def _locate_nonfinite(program, leaves) -> str:
    """Re-run the gradient with NaN/Inf trapping to name the offending primitive."""
    try:
        with jax.debug_nans(True), jax.debug_infs(True):
            jax.grad(program)(leaves)
    except FloatingPointError as exc:
        msg = str(exc).splitlines()[0]
        return msg
    return "unknown primitive"


class DiffTape:
    """One recorded forward pass of ``program(leaves)`` with its adjoint."""

    def __init__(self, program, leaves):
        self.program = program
        self.leaves = leaves
        value, self._pullback = jax.vjp(program, leaves)
        if jnp.ndim(value) != 0:
            raise DimensionMismatch("program must return a scalar")
        self.value = value

    def replay(self):
        """Recompute the forward value from the recorded inputs."""
        return self.program(self.leaves)

    def gradient(self):
        (g,) = self._pullback(jnp.ones_like(self.value))
        return g


def value_and_grad(program, leaves, check_primitives: bool = True):
    """Scalar value of ``program(leaves)`` and its gradient flattened to one entry per leaf.

    ``leaves`` may be any pytree of arrays; the flat gradient follows
    :func:`jax.flatten_util.ravel_pytree` ordering.
    """
    if check_primitives:
        check_registered(program, leaves)
    tape = DiffTape(program, leaves)
    grad_flat, _ = ravel_pytree(tape.gradient())
    grad = np.asarray(grad_flat)
    if not np.all(np.isfinite(grad)):
        raise NonFinite(f"non-finite gradient: {_locate_nonfinite(program, leaves)}")
    return float(tape.value), grad


def value_and_grad_tree(program, leaves):
    """Like :func:`value_and_grad` but keeps the gradient in the shape of ``leaves``."""
    tape = DiffTape(program, leaves)
    return float(tape.value), tape.gradient()


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update of a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionMismatch(
            f"params {params.shape}, grads {grads.shape}, moments {state.m.shape} disagree")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


def clip_by_norm(grads, max_norm: float | None):
    if max_norm is None:
        return grads
    n = float(np.linalg.norm(grads))
    return grads * (max_norm / n) if n > max_norm else grads
