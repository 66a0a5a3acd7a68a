"""Mass-spring-damper rope model.

A rope with N links is N+1 point masses joined by linear spring-dampers,
bending springs with bending dampers between consecutive links, and geometric
torsion springs across consecutive link triples.  Point 0 is the held end;
its velocity is the control input.

Array functions prefixed with ``_`` operate on plain ``(N+1, 3)`` arrays and
are safe to trace with JAX.  The public wrappers take :class:`RopeState` /
:class:`RopeParams` and add the runtime checks that cannot run under tracing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DegenerateLink, DimensionMismatch, NonFinite

LENGTH_EPS = 1e-9  # links shorter than this are degenerate
REJECTION_EPS = 1e-12  # below this the bending direction is undefined -> zero force
BINORMAL_EPS = 1e-9  # torsion of a near-collinear link pair is zero
DEFAULT_TORSION_FADE = 0.05


@dataclass(frozen=True)
class RopeParams:
    """Physical parameters of an N-link rope (all SI units)."""

    masses: np.ndarray  # (N+1,)
    rest_lengths: np.ndarray  # (N,)
    gravity: np.ndarray  # (3,)
    air_drag: float | np.ndarray
    linear_stiffness: np.ndarray  # (N,)
    linear_damping: np.ndarray  # (N,)
    bending_stiffness: np.ndarray  # (N-1,)
    bending_damping: np.ndarray  # (N-1,)
    torsion_stiffness: np.ndarray  # (N-2,)
    # Torsion of a link triple is weighted by s^2/(s^2+fade^2) per binormal
    # (s = sine of the bend); 0 keeps only the hard cutoff at BINORMAL_EPS.
    torsion_fade: float = field(default=DEFAULT_TORSION_FADE)

    ARRAY_FIELDS = (
        "masses",
        "rest_lengths",
        "gravity",
        "air_drag",
        "linear_stiffness",
        "linear_damping",
        "bending_stiffness",
        "bending_damping",
        "torsion_stiffness",
    )

    @property
    def n_links(self) -> int:
        return int(np.shape(self.rest_lengths)[0])

    @property
    def n_points(self) -> int:
        return self.n_links + 1

    def replace(self, **changes) -> "RopeParams":
        return dataclasses.replace(self, **changes)

    def as_numpy(self) -> "RopeParams":
        vals = {k: np.array(getattr(self, k), dtype=np.float64) for k in self.ARRAY_FIELDS}
        vals["air_drag"] = np.float64(vals["air_drag"])
        return RopeParams(**vals, torsion_fade=self.torsion_fade)

    def validate(self) -> "RopeParams":
        n = self.n_links
        if n < 2:
            raise DimensionMismatch(f"rope needs at least 2 links, got {n}")
        expected = {
            "masses": (n + 1,),
            "rest_lengths": (n,),
            "gravity": (3,),
            "air_drag": (),
            "linear_stiffness": (n,),
            "linear_damping": (n,),
            "bending_stiffness": (n - 1,),
            "bending_damping": (n - 1,),
            "torsion_stiffness": (n - 2,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise DimensionMismatch(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"{name} has non-finite entries")
        if np.any(np.asarray(self.masses) <= 0) or np.any(np.asarray(self.rest_lengths) <= 0):
            raise ValueError("masses and rest lengths must be positive")
        for name in ("air_drag", "linear_stiffness", "linear_damping", "bending_stiffness",
                     "bending_damping", "torsion_stiffness"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be non-negative")
        return self

    @classmethod
    def uniform(
        cls,
        n_links: int,
        length: float = 0.8,
        rope_mass: float = 0.0128,
        tip_mass: float = 0.0,
        linear_stiffness: float = 100.0,
        linear_damping: float = 0.05,
        bending_stiffness: float = 2e-3,
        bending_damping: float = 1e-4,
        torsion_stiffness: float = 1e-4,
        air_drag: float = 1e-3,
        gravity=(0.0, 0.0, -9.81),
        torsion_fade: float = DEFAULT_TORSION_FADE,
    ) -> "RopeParams":
        """Homogeneous rope; the rope mass is lumped half-weight at the ends."""
        seg = rope_mass / n_links
        masses = np.full(n_links + 1, seg)
        masses[0] = masses[-1] = seg / 2
        masses[-1] += tip_mass
        return cls(
            masses=masses,
            rest_lengths=np.full(n_links, length / n_links),
            gravity=np.asarray(gravity, dtype=np.float64),
            air_drag=np.float64(air_drag),
            linear_stiffness=np.full(n_links, float(linear_stiffness)),
            linear_damping=np.full(n_links, float(linear_damping)),
            bending_stiffness=np.full(n_links - 1, float(bending_stiffness)),
            bending_damping=np.full(n_links - 1, float(bending_damping)),
            torsion_stiffness=np.full(n_links - 2, float(torsion_stiffness)),
            torsion_fade=torsion_fade,
        )


jax.tree_util.register_dataclass(
    RopeParams, data_fields=list(RopeParams.ARRAY_FIELDS), meta_fields=["torsion_fade"]
)


@dataclass(frozen=True)
class RopeState:
    positions: np.ndarray  # (N+1, 3)
    velocities: np.ndarray  # (N+1, 3)

    @property
    def n_points(self) -> int:
        return int(np.shape(self.positions)[0])

    def flat(self) -> np.ndarray:
        """Positions of all points followed by all velocities, length 6(N+1)."""
        return np.concatenate([np.ravel(self.positions), np.ravel(self.velocities)])

    @classmethod
    def from_flat(cls, x) -> "RopeState":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.size % 6:
            raise DimensionMismatch(f"flat state length {x.size} is not a multiple of 6")
        half = x.size // 2
        return cls(x[:half].reshape(-1, 3), x[half:].reshape(-1, 3))

    @classmethod
    def at_rest(cls, positions) -> "RopeState":
        p = np.asarray(positions, dtype=np.float64)
        return cls(p, np.zeros_like(p))

    def as_numpy(self) -> "RopeState":
        return RopeState(np.asarray(self.positions, dtype=np.float64),
                         np.asarray(self.velocities, dtype=np.float64))


jax.tree_util.register_dataclass(RopeState, data_fields=["positions", "velocities"], meta_fields=[])


@dataclass(frozen=True)
class LinkGeometry:
    link_vectors: np.ndarray  # (N, 3)
    lengths: np.ndarray  # (N,)
    unit_dirs: np.ndarray  # (N, 3)
    bend_angles: np.ndarray  # (N-1,)
    bend_rates: np.ndarray  # (N-1,)
    torsion_angles: np.ndarray  # (N-2,)
    # d(beta_j)/d(p_j), d(beta_j)/d(p_j+1), d(beta_j)/d(p_j+2), each (N-1, 3)
    bend_grads: tuple


jax.tree_util.register_dataclass(
    LinkGeometry,
    data_fields=["link_vectors", "lengths", "unit_dirs", "bend_angles", "bend_rates",
                 "torsion_angles", "bend_grads"],
    meta_fields=[],
)


# ---------------------------------------------------------------------------
# traceable array kernels


def _unit(x, eps):
    """Normalize the rows of ``x``; rows with norm <= eps map to zero (NaN-free gradients)."""
    n2 = jnp.sum(x * x, axis=-1, keepdims=True)
    ok = n2 > eps * eps
    n = jnp.sqrt(jnp.where(ok, n2, 1.0))
    return jnp.where(ok, x / n, 0.0)


def _safe_norm(x, eps):
    n2 = jnp.sum(x * x, axis=-1)
    ok = n2 > eps * eps
    return jnp.where(ok, jnp.sqrt(jnp.where(ok, n2, 1.0)), 0.0)


def _links(pos):
    lv = pos[1:] - pos[:-1]
    lengths = jnp.sqrt(jnp.sum(lv * lv, axis=-1))
    return lv, lengths, lv / lengths[:, None]


def _bend_angles(u):
    ua, ub = u[:-1], u[1:]
    cos = jnp.clip(jnp.sum(ua * ub, axis=-1), -1.0, 1.0)
    sin = _safe_norm(jnp.cross(ua, ub), 0.0)
    return jnp.arctan2(sin, cos)


def _bend_grads(u, lengths):
    """Position gradients of every bending angle.

    For bend j between links a=j and b=j+1, with e_a the unit rejection of u_b
    from u_a (and e_b vice versa): d(beta)/d(l_a) = -e_a/|l_a| and
    d(beta)/d(l_b) = -e_b/|l_b|.  The rejections have norm sin(beta), so this
    form needs no division by sin(beta) and is zero at collinearity.
    """
    ua, ub = u[:-1], u[1:]
    c = jnp.sum(ua * ub, axis=-1, keepdims=True)
    ea = _unit(ub - c * ua, REJECTION_EPS) / lengths[:-1, None]
    eb = _unit(ua - c * ub, REJECTION_EPS) / lengths[1:, None]
    return ea, eb - ea, -eb


def _bend_rates(grads, vel):
    ga, gb, gc = grads
    return (jnp.sum(ga * vel[:-2], axis=-1) + jnp.sum(gb * vel[1:-1], axis=-1)
            + jnp.sum(gc * vel[2:], axis=-1))


def _torsion_terms(u, fade):
    """Signed dihedral angles across consecutive link triples and their fade weights."""
    u1, u2, u3 = u[:-2], u[1:-1], u[2:]
    b1 = jnp.cross(u1, u2)
    b2 = jnp.cross(u2, u3)
    s1 = _safe_norm(b1, 0.0)
    s2 = _safe_norm(b2, 0.0)
    ok = (s1 > BINORMAL_EPS) & (s2 > BINORMAL_EPS)
    y = jnp.sum(jnp.cross(b1, b2) * u2, axis=-1)
    x = jnp.sum(b1 * b2, axis=-1)
    # angle between the unoriented planes, in [-pi/2, pi/2]: planar zigzags have zero torsion
    sgn = jnp.where(x >= 0, 1.0, -1.0)
    psi = jnp.where(ok, jnp.arctan2(jnp.where(ok, sgn * y, 0.0), jnp.where(ok, sgn * x, 1.0)), 0.0)
    if fade > 0:
        f2 = fade * fade
        w = (s1 * s1 / (s1 * s1 + f2)) * (s2 * s2 / (s2 * s2 + f2))
    else:
        w = jnp.ones_like(psi)
    return psi, jnp.where(ok, w, 0.0)


def _torsion_energy(pos, k_t, fade):
    _, _, u = _links(pos)
    psi, w = _torsion_terms(u, fade)
    return 0.5 * jnp.sum(k_t * w * psi * psi)


def _scatter3(fa, fb, fc):
    """Sum per-element forces on points (j, j+1, j+2) into an (N+1, 3) array."""
    z = jnp.zeros((2, 3), dtype=fa.dtype)
    return (jnp.concatenate([fa, z]) + jnp.concatenate([z[:1], fb, z[:1]])
            + jnp.concatenate([z, fc]))


def _linear_forces(pos, vel, p: RopeParams):
    lv, lengths, u = _links(pos)
    dv = vel[1:] - vel[:-1]
    mag = (-p.linear_stiffness * (lengths - p.rest_lengths)
           - p.linear_damping * jnp.sum(dv * u, axis=-1))
    f = mag[:, None] * u  # force on the lower point of each link
    z = jnp.zeros((1, 3), dtype=f.dtype)
    return jnp.concatenate([z, f]) - jnp.concatenate([f, z])


def _bending_spring_forces(pos, p: RopeParams):
    _, lengths, u = _links(pos)
    beta = _bend_angles(u)
    ga, gb, gc = _bend_grads(u, lengths)
    s = (-p.bending_stiffness * beta)[:, None]
    return _scatter3(s * ga, s * gb, s * gc)


def _bending_damping_forces(pos, vel, p: RopeParams):
    _, lengths, u = _links(pos)
    grads = _bend_grads(u, lengths)
    rate = _bend_rates(grads, vel)
    s = (-p.bending_damping * rate)[:, None]
    ga, gb, gc = grads
    return _scatter3(s * ga, s * gb, s * gc)


def _torsion_forces(pos, p: RopeParams):
    return -jax.grad(_torsion_energy)(pos, p.torsion_stiffness, p.torsion_fade)


def _external_forces(vel, p: RopeParams):
    return p.masses[:, None] * p.gravity[None, :] - p.air_drag * vel


def _total_forces(pos, vel, p: RopeParams):
    _, lengths, u = _links(pos)
    beta = _bend_angles(u)
    grads = _bend_grads(u, lengths)
    rate = _bend_rates(grads, vel)
    s = (-p.bending_stiffness * beta - p.bending_damping * rate)[:, None]
    ga, gb, gc = grads
    bend = _scatter3(s * ga, s * gb, s * gc)
    return (_linear_forces(pos, vel, p) + bend + _torsion_forces(pos, p)
            + _external_forces(vel, p))


def _step(pos, vel, u, p: RopeParams, dt):
    """One symplectic Euler step; the held point's velocity is set to ``u``."""
    f = _total_forces(pos, vel, p)
    acc = f[1:] / p.masses[1:, None]
    vel_new = jnp.concatenate([u[None, :], vel[1:] + dt * acc])
    return pos + dt * vel_new, vel_new


def _hold(pos, vel, u, p, dt, substeps):
    def body(carry, _):
        return _step(*carry, u, p, dt), None

    (pos, vel), _ = jax.lax.scan(body, (pos, vel), None, length=substeps)
    return pos, vel


def _rollout(pos, vel, controls, p: RopeParams, dt, substeps, remat=True):
    """Hold each control for ``substeps`` steps; returns stacked (positions, velocities)."""
    hold = partial(_hold, p=p, dt=dt, substeps=substeps)
    if remat:
        hold = jax.checkpoint(hold)

    def body(carry, u):
        nxt = hold(*carry, u)
        return nxt, nxt

    _, (P, V) = jax.lax.scan(body, (pos, vel), controls)
    return P, V


def _energy(pos, vel, p: RopeParams):
    g = jnp.asarray(p.gravity)
    gravitational = -jnp.sum(p.masses * (pos @ g))  # m |g| z with z = -p.g_hat
    kinetic = 0.5 * jnp.sum(p.masses * jnp.sum(vel * vel, axis=-1))
    _, lengths, u = _links(pos)
    beta = _bend_angles(u)
    psi, w = _torsion_terms(u, p.torsion_fade)
    elastic = (0.5 * jnp.sum(p.bending_stiffness * beta**2)
               + 0.5 * jnp.sum(p.linear_stiffness * (lengths - p.rest_lengths) ** 2)
               + 0.5 * jnp.sum(p.torsion_stiffness * w * psi**2))
    return gravitational + kinetic + elastic


def _geometry(pos, vel, fade):
    lv, lengths, u = _links(pos)
    grads = _bend_grads(u, lengths)
    psi, _ = _torsion_terms(u, fade)
    return LinkGeometry(lv, lengths, u, _bend_angles(u), _bend_rates(grads, vel), psi, grads)


_geometry_jit = jax.jit(_geometry, static_argnums=2)
_linear_jit = jax.jit(_linear_forces)
_bending_jit = jax.jit(_bending_spring_forces)
_bending_damping_jit = jax.jit(_bending_damping_forces)
_torsion_jit = jax.jit(_torsion_forces)
_external_jit = jax.jit(_external_forces)
_step_jit = jax.jit(_step)
_rollout_jit = jax.jit(_rollout, static_argnames=("substeps", "remat"))
_energy_jit = jax.jit(_energy)


# ---------------------------------------------------------------------------
# public API


def _check_links(pos):
    lv = np.diff(np.asarray(pos), axis=0)
    lengths = np.linalg.norm(lv, axis=-1)
    if np.any(~(lengths > LENGTH_EPS)):
        bad = int(np.argmax(~(lengths > LENGTH_EPS)))
        raise DegenerateLink(f"link {bad + 1} has length {lengths[bad]:.3e}")


def _check_shapes(state: RopeState, params: RopeParams):
    shape = (params.n_points, 3)
    if np.shape(state.positions) != shape or np.shape(state.velocities) != shape:
        raise DimensionMismatch(
            f"state shape {np.shape(state.positions)} does not match rope with {params.n_points} points")


def _np(x):
    return np.asarray(x)


def compute_link_geometry(state: RopeState, params: RopeParams) -> LinkGeometry:
    _check_shapes(state, params)
    _check_links(state.positions)
    g = _geometry_jit(state.positions, state.velocities, params.torsion_fade)
    return jax.tree_util.tree_map(_np, g)


def linear_forces(state: RopeState, geometry: LinkGeometry | None, params: RopeParams) -> np.ndarray:
    _check_links(state.positions)
    return _np(_linear_jit(state.positions, state.velocities, params))


def bending_spring_forces(state: RopeState, geometry: LinkGeometry | None, params: RopeParams) -> np.ndarray:
    _check_links(state.positions)
    return _np(_bending_jit(state.positions, params))


def bending_damping_forces(state: RopeState, geometry: LinkGeometry | None, params: RopeParams) -> np.ndarray:
    _check_links(state.positions)
    return _np(_bending_damping_jit(state.positions, state.velocities, params))


def torsion_forces(state: RopeState, geometry: LinkGeometry | None, params: RopeParams) -> np.ndarray:
    """Negative position gradient of the torsion energy, by reverse-mode differentiation."""
    _check_links(state.positions)
    return _np(_torsion_jit(state.positions, params))


def external_forces(state: RopeState, params: RopeParams) -> np.ndarray:
    return _np(_external_jit(state.velocities, params))


def step(state: RopeState, u, params: RopeParams, dt: float) -> RopeState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_shapes(state, params)
    _check_links(state.positions)
    u = np.asarray(u, dtype=np.float64)
    pos, vel = _step_jit(state.positions, state.velocities, u, params, dt)
    pos, vel = _np(pos), _np(vel)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise NonFinite("step produced non-finite state")
    return RopeState(pos, vel)


def rollout_arrays(state0: RopeState, controls, params: RopeParams, dt: float,
                   substeps_per_control: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`rollout` but returns stacked ``(K, N+1, 3)`` positions and velocities."""
    if substeps_per_control < 1:
        raise ValueError("substeps_per_control must be >= 1")
    _check_shapes(state0, params)
    _check_links(state0.positions)
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, 3)
    n = params.n_points
    if len(controls) == 0:
        return np.zeros((0, n, 3)), np.zeros((0, n, 3))
    P, V = _rollout_jit(state0.positions, state0.velocities, controls, params, dt,
                        substeps=int(substeps_per_control), remat=False)
    P, V = _np(P), _np(V)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(V))):
        bad = int(np.argmax(~np.all(np.isfinite(P.reshape(len(P), -1)), axis=1)))
        raise NonFinite(f"rollout became non-finite at control step {bad}")
    return P, V


def rollout(state0: RopeState, controls, params: RopeParams, dt: float,
            substeps_per_control: int = 10) -> list[RopeState]:
    P, V = rollout_arrays(state0, controls, params, dt, substeps_per_control)
    return [RopeState(p, v) for p, v in zip(P, V)]


def rope_energy(state: RopeState, geometry: LinkGeometry | None, params: RopeParams) -> float:
    """Gravitational + kinetic + bending + stretch + torsion energy (J)."""
    return float(_energy_jit(state.positions, state.velocities, params))


# ---------------------------------------------------------------------------
# reference configurations


def hanging_rest_positions(params: RopeParams, top=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Static equilibrium of the rope hanging straight down from ``top``.

    Each link carries the weight of every point below it, so its length is
    ``l0 + |g| * sum(m_below) / k``.  Bending and torsion vanish when straight.
    """
    p = params.as_numpy()
    g = p.gravity
    gn = np.linalg.norm(g)
    down = g / gn if gn > 0 else np.array([0.0, 0.0, -1.0])
    below = np.cumsum(p.masses[::-1])[::-1][1:]  # mass carried by link i
    lengths = p.rest_lengths + gn * below / p.linear_stiffness
    offsets = np.concatenate([[0.0], np.cumsum(lengths)])
    return np.asarray(top, dtype=np.float64)[None, :] + offsets[:, None] * down[None, :]


def rest_energy(params: RopeParams, top=(0.0, 0.0, 0.0)) -> float:
    pos = hanging_rest_positions(params, top)
    return float(_energy_jit(pos, np.zeros_like(pos), params))


def _rest_energy_traced(top, p: RopeParams):
    """Energy of the hanging equilibrium below ``top``; traceable in ``top`` and ``p``."""
    g = jnp.asarray(p.gravity)
    gn = jnp.sqrt(jnp.sum(g * g))
    down = g / gn
    below = jnp.cumsum(p.masses[::-1])[::-1][1:]
    stretch = gn * below / p.linear_stiffness
    offsets = jnp.concatenate([jnp.zeros(1), jnp.cumsum(p.rest_lengths + stretch)])
    pos = top[None, :] + offsets[:, None] * down[None, :]
    gravitational = -jnp.sum(p.masses * (pos @ g))
    return gravitational + 0.5 * jnp.sum(p.linear_stiffness * stretch**2)


def offset_energy(state: RopeState, params: RopeParams) -> float:
    """Rope energy minus that of the hanging equilibrium under the same top point."""
    return float(_offset_energy_jit(state.positions, state.velocities, params))


def _offset_energy(pos, vel, p: RopeParams):
    return _energy(pos, vel, p) - _rest_energy_traced(pos[0], p)


_offset_energy_jit = jax.jit(_offset_energy)
