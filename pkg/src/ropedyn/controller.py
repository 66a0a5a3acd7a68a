"""Neural velocity controller trained by backpropagating task losses through rollouts.

The policy is a tanh MLP that maps the rope state (positions relative to the
held point, absolute velocities) and, for tracking, a window of upcoming
targets to a velocity command for the held point.  Training samples a batch of
start states and a batch of parameter perturbations, rolls each pair out
through the differentiable model with the policy in the loop, and takes an
Adam step on the mean task loss.  States where the loss stalls or grows during
evaluation are fed back into the start-state set with a higher sampling
weight.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import AdamState, adam_step
from .errors import DimensionMismatch, Diverged, KindMismatch
from .rope import RopeParams, RopeState, _hold, _offset_energy

STABILIZATION = "stabilization"
TRACKING = "tracking"
LOOKAHEAD = 40  # upcoming targets in the tracking features, besides the current one
VEL_SCALE = 0.2  # s; brings velocity features to the scale of the position features


# ---------------------------------------------------------------------------
# weights and tasks


@dataclass(frozen=True)
class PolicyWeights:
    """Layers ``(W, b)`` with ``W`` of shape (in, out); hidden layers use tanh."""

    layers: tuple

    @property
    def in_dim(self) -> int:
        return int(np.shape(self.layers[0][0])[0])

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [int(np.shape(W)[1]) for W, _ in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in self.layers])

    def unflatten(self, x) -> "PolicyWeights":
        out, k = [], 0
        for W, b in self.layers:
            nw, nb = int(np.size(W)), int(np.size(b))
            out.append((np.asarray(x[k:k + nw]).reshape(np.shape(W)),
                        np.asarray(x[k + nw:k + nw + nb]).reshape(np.shape(b))))
            k += nw + nb
        return PolicyWeights(tuple(out))

    def as_numpy(self) -> "PolicyWeights":
        return PolicyWeights(tuple((np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                                   for W, b in self.layers))


jax.tree_util.register_dataclass(PolicyWeights, data_fields=["layers"], meta_fields=[])


def init_policy(in_dim: int, hidden=(128, 128, 128), seed: int = 0,
                out_dim: int = 3) -> PolicyWeights:
    """Glorot-scaled hidden layers; the output layer starts at zero (passive policy)."""
    rng = np.random.default_rng(seed)
    widths = [in_dim, *hidden]
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers.append((rng.normal(0.0, math.sqrt(2.0 / (a + b)), size=(a, b)), np.zeros(b)))
    layers.append((np.zeros((widths[-1], out_dim)), np.zeros(out_dim)))
    return PolicyWeights(tuple(layers))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = STABILIZATION
    targets: np.ndarray | None = None  # (T, 3): targets for states 1..T

    def __post_init__(self):
        if self.kind not in (STABILIZATION, TRACKING):
            raise ValueError(f"unknown task kind '{self.kind}'")
        if self.kind == TRACKING:
            t = np.asarray(self.targets, dtype=np.float64)
            if t.ndim != 2 or t.shape[1] != 3 or not np.all(np.isfinite(t)):
                raise DimensionMismatch("tracking targets must be a finite (T, 3) array")
            object.__setattr__(self, "targets", t)

    @property
    def feature_width(self) -> int:
        return 3 * (LOOKAHEAD + 1) if self.kind == TRACKING else 0


def feature_width(n_points: int, kind: str) -> int:
    return 6 * n_points + (3 * (LOOKAHEAD + 1) if kind == TRACKING else 0)


def target_windows(targets, T: int | None = None) -> np.ndarray:
    """For step t (0-based) the targets of states t+1..t+41; past the end the last repeats."""
    g = np.asarray(targets, dtype=np.float64)
    T = len(g) if T is None else T
    idx = np.minimum(np.arange(T)[:, None] + np.arange(LOOKAHEAD + 1)[None, :], len(g) - 1)
    return g[idx]


@dataclass
class TrainConfig:
    batch_size: int = 8  # K
    horizon: int = 300  # T control steps
    dt: float = 1e-3
    substeps: int = 10
    gamma: float = 0.99
    noise_scales: dict = field(default_factory=dict)  # field name -> relative std
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay from lr to lr_final when set
    iterations: int = 300
    bound: float = 1.0
    seed: int = 0
    hidden: tuple = (128, 128, 128)
    grad_clip: float | None = 1.0
    kind: str = STABILIZATION
    # A batch loss above guard * (running mean) rolls the weights back to the
    # last snapshot and halves the learning rate.
    guard: float | None = 20.0
    warmup: int = 20

    def __post_init__(self):
        if self.batch_size < 1 or self.horizon < 1 or not 0 < self.gamma <= 1:
            raise ValueError("need K >= 1, T >= 1 and gamma in (0, 1]")


@dataclass
class OodEvent:
    state: RopeState
    task: TaskSpec
    timestamp: float
    trigger: str  # "plateau", "growth" or "distance"


@dataclass
class OodThresholds:
    window: int = 100  # control steps (1 s at 100 Hz)
    floor: float = 0.0  # J; windows whose mean energy sits below this never trigger
    stall_rate: float = 0.0  # 1/s; relative decay -E'/E slower than this is a plateau
    growth_rate: float = math.inf  # 1/s; relative rise E'/E faster than this is growth
    distance: float = 0.05  # m, tracking
    period: float = 0.01

    @classmethod
    def for_energy(cls, e0: float, target_time: float = 6.0, band: float = 0.01, **kw) -> "OodThresholds":
        """Floor at 2% of the initial offset energy.

        A window stalls when it decays at under 3/4 of the constant rate that
        would reach ``band`` within ``target_time``.
        """
        kw.setdefault("stall_rate", 0.75 * math.log(1 / band) / target_time)
        kw.setdefault("growth_rate", 0.1)
        return cls(floor=0.02 * e0, **kw)


# ---------------------------------------------------------------------------
# policy


def _gravity_basis(g):
    """Two unit vectors spanning the plane perpendicular to gravity."""
    g = jnp.asarray(g)
    gh = g / jnp.linalg.norm(g)
    # first axis well away from gravity; stays fixed under small tilts, unlike argmin
    helper = jnp.eye(3, dtype=gh.dtype)[jnp.argmax(jnp.abs(gh) < 0.6)]
    e1 = helper - (helper @ gh) * gh
    e1 = e1 / jnp.linalg.norm(e1)
    return jnp.stack([e1, jnp.cross(gh, e1)])


def _mlp(x, weights: PolicyWeights):
    h = x
    for W, b in weights.layers[:-1]:
        h = jnp.tanh(h @ W + b)
    W, b = weights.layers[-1]
    return h @ W + b


def _squash(r, bound):
    """Radial tanh saturation: direction kept, magnitude bound * tanh(|r| / bound)."""
    n2 = jnp.sum(r * r)
    n = jnp.sqrt(jnp.where(n2 > 0, n2, 1.0))
    scale = jnp.where(n2 > 0, bound * jnp.tanh(n / bound) / n, 1.0)
    return r * scale


def _features(pos, vel, window):
    rel = pos - pos[0]
    parts = [jnp.ravel(rel), VEL_SCALE * jnp.ravel(vel)]
    if window is not None:
        parts.append(jnp.ravel(window - pos[0]))
    return jnp.concatenate(parts)


def _command(pos, vel, window, weights, bound, basis):
    r = _mlp(_features(pos, vel, window), weights)
    if basis is not None:  # stabilization: command confined to the horizontal plane
        r = r[0] * basis[0] + r[1] * basis[1]
    return _squash(r, bound)


def policy_forward(state: RopeState, task_features, weights: PolicyWeights, *,
                   kind: str = STABILIZATION, bound: float = 1.0,
                   gravity=(0.0, 0.0, -9.81)) -> np.ndarray:
    """Velocity command for the held point.

    ``task_features`` is empty for stabilization and the (41, 3) target window
    (absolute coordinates) for tracking.
    """
    tf = np.asarray(task_features, dtype=np.float64)
    n = np.shape(state.positions)[0]
    window = tf.reshape(-1, 3) if tf.size else None
    if 6 * n + tf.size != weights.in_dim:
        raise DimensionMismatch(f"features of width {6 * n + tf.size}, network expects {weights.in_dim}")
    basis = _gravity_basis(gravity) if kind == STABILIZATION else None
    return np.asarray(_command_jit(jnp.asarray(state.positions), jnp.asarray(state.velocities),
                                   window, weights, bound, basis))


_command_jit = jax.jit(_command)


# ---------------------------------------------------------------------------
# closed-loop rollouts


def _closed_loop(pos, vel, windows, weights, p: RopeParams, T, dt, substeps, bound, horizontal,
                 remat=True):
    """Run the policy for T control steps; returns stacked positions, velocities, commands.

    ``horizontal`` confines commands to the plane normal to ``p.gravity``; the
    basis is built inside the trace so gradients see its gravity dependence.
    """
    basis = _gravity_basis(p.gravity) if horizontal else None

    def control_step(carry, window):
        pos, vel = carry
        u = _command(pos, vel, window, weights, bound, basis)
        pos, vel = _hold(pos, vel, u, p, dt, substeps)
        return (pos, vel), (pos, vel, u)

    if remat:
        control_step = jax.checkpoint(control_step)
    xs = windows if windows is not None else None
    _, (P, V, U) = jax.lax.scan(control_step, (pos, vel), xs, length=T)
    return P, V, U


def _stab_loss_single(weights, pos, vel, p, T, dt, substeps, bound):
    P, V, _ = _closed_loop(pos, vel, None, weights, p, T, dt, substeps, bound, True)
    return _offset_energy(P[-1], V[-1], p)


def _track_loss_single(weights, pos, vel, windows, targets, p, T, dt, substeps, bound, gamma):
    P, _, _ = _closed_loop(pos, vel, windows, weights, p, T, dt, substeps, bound, False)
    err = jnp.sum((P[:, -1, :] - targets) ** 2, axis=1)
    disc = gamma ** jnp.arange(T - 1, -1, -1, dtype=err.dtype)
    return jnp.sum(disc * err)


@partial(jax.jit, static_argnames=("T", "substeps"))
def _stab_batch(weights, pos, vel, p, T, dt, substeps, bound):
    losses = jax.vmap(_stab_loss_single, in_axes=(None, 0, 0, 0, None, None, None, None))(
        weights, pos, vel, p, T, dt, substeps, bound)
    return jnp.mean(losses), losses


@partial(jax.jit, static_argnames=("T", "substeps"))
def _track_batch(weights, pos, vel, windows, targets, p, T, dt, substeps, bound, gamma):
    losses = jax.vmap(_track_loss_single,
                      in_axes=(None, 0, 0, 0, 0, 0, None, None, None, None, None))(
        weights, pos, vel, windows, targets, p, T, dt, substeps, bound, gamma)
    return jnp.mean(losses), losses


_stab_batch_grad = jax.jit(jax.value_and_grad(_stab_batch, has_aux=True),
                           static_argnames=("T", "substeps"))
_track_batch_grad = jax.jit(jax.value_and_grad(_track_batch, has_aux=True),
                            static_argnames=("T", "substeps"))


def _stab_objective(weights, p, pos, vel, T, dt, substeps, bound):
    return _stab_loss_single(weights, pos, vel, p, T, dt, substeps, bound)


_stab_objective_jit = jax.jit(_stab_objective, static_argnames=("T", "substeps"))
_stab_objective_grad = jax.jit(jax.value_and_grad(_stab_objective, argnums=(0, 1)),
                               static_argnames=("T", "substeps"))


def stabilization_objective(weights: PolicyWeights, params: RopeParams, state: RopeState, T: int, *,
                            dt: float = 1e-3, substeps: int = 10, bound: float = 1.0, grad: bool = False):
    """Terminal offset energy after ``T`` closed-loop control steps.

    With ``grad=True`` returns ``(loss, d/dweights, d/dparams)``, the latter two
    as pytrees shaped like their inputs.
    """
    args = (weights, params, jnp.asarray(state.positions), jnp.asarray(state.velocities), T, dt,
            substeps, bound)
    if not grad:
        return float(_stab_objective_jit(*args))
    loss, (gw, gp) = _stab_objective_grad(*args)
    return float(loss), PolicyWeights(gw.layers).as_numpy(), gp


@partial(jax.jit, static_argnames=("T", "substeps", "horizontal"))
def _eval_batch(weights, pos, vel, windows, p, T, dt, substeps, bound, horizontal):
    fn = partial(_closed_loop, T=T, dt=dt, substeps=substeps, bound=bound, horizontal=horizontal,
                 remat=False)
    if windows is None:
        return jax.vmap(lambda a, b, q: fn(a, b, None, weights, q))(pos, vel, p)
    return jax.vmap(lambda a, b, w, q: fn(a, b, w, weights, q))(pos, vel, windows, p)


def _stack_params(plist):
    return jax.tree_util.tree_map(lambda *xs: jnp.stack([jnp.asarray(x) for x in xs]), *plist)


def simulate_policy(weights: PolicyWeights | None, states, params_list, T: int, *,
                    kind: str = STABILIZATION, targets=None, dt: float = 1e-3, substeps: int = 10,
                    bound: float = 1.0):
    """Closed-loop rollouts for a batch of (state, params) pairs.

    ``weights=None`` runs the passive policy.  Returns stacked positions,
    velocities and commands of shape (B, T, ...).
    """
    states = list(states)
    plist = list(params_list)
    if len(plist) == 1 and len(states) > 1:
        plist = plist * len(states)
    n = states[0].n_points
    if weights is None:
        weights = init_policy(feature_width(n, kind), hidden=(1,))
    pos = jnp.stack([jnp.asarray(s.positions) for s in states])
    vel = jnp.stack([jnp.asarray(s.velocities) for s in states])
    windows = None
    if kind == TRACKING:
        tg = [targets] * len(states) if np.ndim(targets) == 2 else targets
        windows = jnp.stack([jnp.asarray(target_windows(t, T)) for t in tg])
    P, V, U = _eval_batch(weights, pos, vel, windows, _stack_params(plist), T, dt, substeps,
                          bound, kind == STABILIZATION)
    return np.asarray(P), np.asarray(V), np.asarray(U)


# ---------------------------------------------------------------------------
# losses


def stabilization_loss(trajectory, params: RopeParams) -> float:
    """Offset energy of the final state (0 at the hanging equilibrium)."""
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    last = trajectory[-1]
    return float(_offset_energy_jit(jnp.asarray(last.positions), jnp.asarray(last.velocities), params))


_offset_energy_jit = jax.jit(_offset_energy)


def tracking_loss(trajectory, task: TaskSpec, gamma: float = 0.99) -> float:
    """Discounted squared tip error, later steps weighted more (gamma^(T-t))."""
    if task.kind != TRACKING:
        raise KindMismatch("tracking_loss needs a tracking task")
    from .sysid import _positions

    P = _positions(trajectory)
    g = task.targets
    if len(P) != len(g):
        raise DimensionMismatch(f"{len(P)} states vs {len(g)} targets")
    err = np.sum((P[:, -1, :] - g) ** 2, axis=1)
    T = len(err)
    return float(np.sum(gamma ** np.arange(T - 1, -1, -1) * err))


# ---------------------------------------------------------------------------
# data: augmentation, parameter noise, weighted start-state sets


def _rotation_about(axis, angle):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    R = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)
    R[np.abs(R) < 1e-15] = 0.0
    return R


def augment_states(states, rotation_count: int, translation_grid=(), gravity=(0.0, 0.0, -9.81),
                   phase: float = 0.0) -> list[RopeState]:
    """Anchor each state's top at the origin, rotate about gravity, then replicate on a grid.

    Rotation ``k`` is by ``phase + 2*pi*k/rotation_count`` about the upward axis.
    An empty grid means the single offset (0, 0, 0).
    """
    if rotation_count < 1:
        raise ValueError("rotation_count must be >= 1")
    up = -np.asarray(gravity, dtype=np.float64)
    grid = [np.zeros(3)] if len(translation_grid) == 0 else [np.asarray(o, float) for o in translation_grid]
    out = []
    for s in states:
        rel = np.asarray(s.positions) - np.asarray(s.positions)[0]
        vel = np.asarray(s.velocities)
        for k in range(rotation_count):
            R = _rotation_about(up, phase + 2 * math.pi * k / rotation_count)
            pr, vr = rel @ R.T, vel @ R.T
            for off in grid:
                out.append(RopeState(pr + off, vr.copy()))
    return out


def translation_grid(spacing: float, count: int) -> list[np.ndarray]:
    """``count`` equally spaced offsets per axis, centred on 0 (count**3 offsets)."""
    ticks = (np.arange(count) - (count - 1) / 2) * spacing
    return [np.array([x, y, z]) for x in ticks for y in ticks for z in ticks]


NOISE_FLOOR = 1e-3  # perturbed parameters stay above this fraction of the nominal value


def sample_param_noise(params: RopeParams, scales: dict, seed: int, K: int = 1) -> list[dict]:
    """K Gaussian offsets, std = scale * |theta| per entry, clipped to keep theta + d > 0."""
    rng = np.random.default_rng(seed)
    p = params.as_numpy()
    out = [dict() for _ in range(K)]
    for name in RopeParams.ARRAY_FIELDS:
        s = float(scales.get(name, 0.0))
        if s < 0:
            raise ValueError(f"noise scale for {name} is negative")
        theta = np.asarray(getattr(p, name))
        d = rng.normal(size=(K,) + theta.shape) * s * np.abs(theta)
        if name != "gravity":
            d = np.maximum(d, (NOISE_FLOOR - 1.0) * np.abs(theta))
        for k in range(K):
            out[k][name] = d[k]
    return out


def apply_noise(params: RopeParams, offset: dict) -> RopeParams:
    p = params.as_numpy()
    return p.replace(**{k: np.asarray(getattr(p, k)) + v for k, v in offset.items()})


@dataclass
class TrainingSet:
    """Start states and task specs with sampling weights (base weight 1)."""

    states: list
    specs: list
    weights: list = field(default_factory=list)
    hashes: dict = field(default_factory=dict)  # state hash -> index, for OOD entries

    def __post_init__(self):
        if not self.weights:
            self.weights = [1.0] * len(self.states)
        if not (len(self.states) == len(self.specs) == len(self.weights)):
            raise DimensionMismatch("states, specs and weights differ in length")

    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()

    def sample(self, rng, K: int) -> list[int]:
        return list(rng.choice(len(self.states), size=K, p=self.probabilities()))

    def copy(self) -> "TrainingSet":
        return TrainingSet(list(self.states), list(self.specs), list(self.weights), dict(self.hashes))


def state_hash(state: RopeState) -> str:
    """Hash of the state quantized to 1 mm and 1 cm/s."""
    q = np.concatenate([np.round(np.asarray(state.positions) / 1e-3).ravel(),
                        np.round(np.asarray(state.velocities) / 1e-2).ravel()]).astype(np.int64)
    return hashlib.sha256(q.tobytes()).hexdigest()


def dagger_update(training_set: TrainingSet, events, weight_boost: float = 5.0) -> TrainingSet:
    """Append OOD states with weight ``boost``; a repeated state accumulates weight instead."""
    if not weight_boost > 1:
        raise ValueError("weight_boost must exceed 1")
    out = training_set.copy()
    for ev in events:
        h = state_hash(ev.state)
        if h in out.hashes:
            out.weights[out.hashes[h]] += weight_boost
            continue
        out.hashes[h] = len(out.states)
        out.states.append(ev.state)
        out.specs.append(ev.task)
        out.weights.append(float(weight_boost))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    weights: PolicyWeights
    curve: list  # (iteration, mean batch loss)


def _batch_inputs(ts: TrainingSet, idx, T):
    pos = jnp.stack([jnp.asarray(ts.states[i].positions) for i in idx])
    vel = jnp.stack([jnp.asarray(ts.states[i].velocities) for i in idx])
    return pos, vel


def _tracking_arrays(ts: TrainingSet, idx, T):
    targets, windows = [], []
    for i in idx:
        g = ts.specs[i].targets
        if len(g) < T:
            g = np.concatenate([g, np.repeat(g[-1:], T - len(g), axis=0)])
        windows.append(target_windows(g, T))
        targets.append(g[:T])
    return jnp.asarray(np.stack(windows)), jnp.asarray(np.stack(targets))


def batch_loss_and_grad(weights: PolicyWeights, ts: TrainingSet, idx, plist, cfg: TrainConfig):
    """Mean task loss over the chosen start states / parameter sets and its gradient."""
    pos, vel = _batch_inputs(ts, idx, cfg.horizon)
    p = _stack_params(plist)
    if cfg.kind == STABILIZATION:
        (loss, per), g = _stab_batch_grad(weights, pos, vel, p, cfg.horizon, cfg.dt, cfg.substeps,
                                          cfg.bound)
    else:
        windows, targets = _tracking_arrays(ts, idx, cfg.horizon)
        (loss, per), g = _track_batch_grad(weights, pos, vel, windows, targets, p, cfg.horizon,
                                           cfg.dt, cfg.substeps, cfg.bound, cfg.gamma)
    return float(loss), np.asarray(per), g


def batch_loss(weights: PolicyWeights, ts: TrainingSet, idx, plist, cfg: TrainConfig) -> float:
    pos, vel = _batch_inputs(ts, idx, cfg.horizon)
    p = _stack_params(plist)
    if cfg.kind == STABILIZATION:
        loss, _ = _stab_batch(weights, pos, vel, p, cfg.horizon, cfg.dt, cfg.substeps, cfg.bound)
    else:
        windows, targets = _tracking_arrays(ts, idx, cfg.horizon)
        loss, _ = _track_batch(weights, pos, vel, windows, targets, p, cfg.horizon, cfg.dt,
                               cfg.substeps, cfg.bound, cfg.gamma)
    return float(loss)


def train_run(initial_states, task_specs, params: RopeParams, config: TrainConfig | None = None,
              weights: PolicyWeights | None = None, callback=None) -> TrainResult:
    """Self-supervised policy training with domain randomization.

    ``initial_states`` may be a :class:`TrainingSet` (weighted sampling) or a
    list of states paired with ``task_specs``.  Fresh parameter noise is drawn
    every iteration.
    """
    cfg = config or TrainConfig()
    ts = initial_states if isinstance(initial_states, TrainingSet) else TrainingSet(
        list(initial_states), list(task_specs) if task_specs is not None
        else [TaskSpec(cfg.kind)] * len(initial_states))
    if not ts.states:
        raise ValueError("no initial states")
    n = ts.states[0].n_points
    if n != params.n_points:
        raise DimensionMismatch("initial states and parameters disagree on the number of points")
    if weights is None:
        weights = init_policy(feature_width(n, cfg.kind), cfg.hidden, cfg.seed)
    weights = weights.as_numpy()
    x = weights.flat()
    adam = AdamState.zeros(x.size, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    lr_scale, ema = 1.0, None
    snapshot = (x.copy(), adam)
    for it in range(cfg.iterations):
        lr = cfg.lr
        if cfg.lr_final is not None and cfg.iterations > 1:
            frac = it / (cfg.iterations - 1)
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
        adam.lr = lr * lr_scale
        idx = ts.sample(rng, cfg.batch_size)
        noise = sample_param_noise(params, cfg.noise_scales, int(rng.integers(2**63)), cfg.batch_size)
        plist = [apply_noise(params, d) for d in noise]
        loss, _, g = batch_loss_and_grad(weights, ts, idx, plist, cfg)
        if not math.isfinite(loss):
            raise Diverged(f"training loss non-finite at iteration {it}")
        curve.append((it, loss))
        if cfg.guard is not None and ema is not None and it >= cfg.warmup and loss > cfg.guard * ema:
            x, adam = snapshot[0].copy(), AdamState.zeros(x.size, cfg.lr)
            lr_scale *= 0.5
            weights = weights.unflatten(x)
            continue
        ema = loss if ema is None else 0.95 * ema + 0.05 * loss
        if it % 10 == 0:
            snapshot = (x.copy(), adam)
        grad = PolicyWeights(g.layers).flat()
        if not np.all(np.isfinite(grad)):
            raise Diverged(f"policy gradient non-finite at iteration {it}")
        if cfg.grad_clip is not None:
            gn = float(np.linalg.norm(grad))
            if gn > cfg.grad_clip:
                grad *= cfg.grad_clip / gn
        x, adam = adam_step(x, grad, adam)
        weights = weights.unflatten(x)
        if callback is not None:
            callback(it, loss, weights)
    return TrainResult(weights, curve)


def train(initial_states, task_specs, params: RopeParams, config: TrainConfig | None = None,
          weights: PolicyWeights | None = None) -> PolicyWeights:
    return train_run(initial_states, task_specs, params, config, weights).weights


# ---------------------------------------------------------------------------
# out-of-distribution monitoring


def _slope(y, period):
    t = np.arange(len(y)) * period
    tc = t - t.mean()
    return float(np.sum(tc * (y - y.mean())) / np.sum(tc * tc)) if len(y) > 1 else 0.0


def ood_detect(loss_history, kind: str, thresholds: OodThresholds, *, state=None, task=None,
               timestamp: float | None = None) -> OodEvent | None:
    """Inspect the last ``window`` samples of an online loss signal.

    Stabilization: with the window mean above the floor, growth when the
    relative slope E'/E exceeds the growth rate, else a plateau when the
    relative decay is slower than the stall rate.  Tracking: the latest
    tip-to-target distance above ``distance``.
    """
    h = np.asarray(loss_history, dtype=np.float64)
    w = thresholds.window
    if len(h) < w:
        raise ValueError(f"history of {len(h)} samples is shorter than the window {w}")
    t = (len(h) - 1) * thresholds.period if timestamp is None else timestamp
    trig = None
    if kind == STABILIZATION:
        seg = h[-w:]
        mean = float(seg.mean())
        if mean > thresholds.floor:
            rate = -_slope(seg, thresholds.period) / mean
            if -rate > thresholds.growth_rate:
                trig = "growth"
            elif rate < thresholds.stall_rate:
                trig = "plateau"
    elif kind == TRACKING:
        if h[-1] > thresholds.distance:
            trig = "distance"
    else:
        raise ValueError(f"unknown task kind '{kind}'")
    if trig is None:
        return None
    if task is None and kind == STABILIZATION:
        task = TaskSpec()
    return OodEvent(state, task, float(t), trig)


def monitor(weights: PolicyWeights, state: RopeState, params: RopeParams, T: int,
            thresholds: OodThresholds, *, kind: str = STABILIZATION, task: TaskSpec | None = None,
            dt: float = 1e-3, substeps: int = 10, bound: float = 1.0) -> OodEvent | None:
    """Run the policy and report the first OOD trigger.

    The captured state is the one at the start of the detection window; for
    tracking the event task keeps the remaining target segment.
    """
    targets = task.targets if kind == TRACKING else None
    P, V, _ = simulate_policy(weights, [state], [params], T, kind=kind, targets=targets, dt=dt,
                              substeps=substeps, bound=bound)
    P, V = P[0], V[0]
    if kind == STABILIZATION:
        sig = np.asarray(jax.vmap(_offset_energy, in_axes=(0, 0, None))(P, V, params))
        sig = np.concatenate([[float(_offset_energy_jit(state.positions, state.velocities, params))], sig])
    else:
        sig = np.concatenate([[np.linalg.norm(state.positions[-1] - targets[0])],
                              np.linalg.norm(P[:, -1, :] - targets[:T], axis=1)])
    w = thresholds.window
    start = w if kind == STABILIZATION else 1
    for t in range(start, len(sig) + 1):
        ev = ood_detect(sig[:t], kind, thresholds)
        if ev is None:
            continue
        k = max(0, t - w) if kind == STABILIZATION else t - 1
        cap = state if k == 0 else RopeState(P[k - 1], V[k - 1])
        spec = TaskSpec(kind) if kind == STABILIZATION else TaskSpec(TRACKING, targets[k:])
        return OodEvent(cap, spec, k * thresholds.period, ev.trigger)
    return None


# ---------------------------------------------------------------------------
# PID baseline


@dataclass(frozen=True)
class PidGains:
    kp: float = 2.0
    ki: float = 0.0
    kd: float = 0.0
    bound: float = 2.5
    integral_limit: float = 1.0
    period: float = 0.01


@dataclass(frozen=True)
class PidMemory:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_error: np.ndarray | None = None


def pid_baseline(state: RopeState, target, gains: PidGains, memory: PidMemory | None = None):
    """PID on the tip error; integral clamped per axis, output clamped to the bound."""
    mem = memory or PidMemory()
    e = np.asarray(target, dtype=np.float64) - np.asarray(state.positions)[-1]
    integral = np.clip(mem.integral + e * gains.period, -gains.integral_limit, gains.integral_limit)
    deriv = np.zeros(3) if mem.prev_error is None else (e - mem.prev_error) / gains.period
    u = gains.kp * e + gains.ki * integral + gains.kd * deriv
    n = float(np.linalg.norm(u))
    if n > gains.bound:
        u = u * (gains.bound / n)
    return u, PidMemory(integral, e)


def run_pid(state: RopeState, targets, params: RopeParams, gains: PidGains, dt: float = 1e-3,
            substeps: int = 10):
    """Closed-loop PID tracking; returns positions of states 1..T."""
    pos, vel = jnp.asarray(state.positions), jnp.asarray(state.velocities)
    mem = PidMemory()
    out = []
    for g in np.asarray(targets):
        u, mem = pid_baseline(RopeState(np.asarray(pos), np.asarray(vel)), g, gains, mem)
        pos, vel = _pid_hold(pos, vel, jnp.asarray(u), params, dt, substeps)
        out.append(np.asarray(pos))
    return np.stack(out)


_pid_hold = jax.jit(_hold, static_argnames=("substeps",))
