"""Gradient-based identification of rope parameters from position recordings.

Parameters are fitted in log space through the differentiable rollout.  The
prediction horizon starts short and grows whenever the loss drops below a
threshold, so the optimizer first matches the immediate response before it has
to explain long-range drift.  A second curriculum runs a homogeneous fit (one
shared value per parameter array) before freeing every element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import AdamState, adam_step, check_registered
from .errors import DimensionMismatch, Diverged
from .rope import RopeParams, RopeState, _rollout, rollout_arrays

FREE_FIELDS = ("air_drag", "linear_stiffness", "linear_damping", "bending_stiffness",
               "bending_damping", "torsion_stiffness")


@dataclass
class SysIdDataset:
    """Positions ``P^0..P^T`` (shape (T+1, N+1, 3)) and controls ``u^0..u^{T-1}``.

    ``u^t`` is held over the interval from sample ``t`` to ``t+1``.  The rope is
    assumed at rest at ``P^0``.
    """

    positions: np.ndarray
    controls: np.ndarray
    h: float = 0.01

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64).reshape(-1, 3)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise DimensionMismatch("positions must have shape (T+1, N+1, 3)")
        if len(self.positions) != len(self.controls) + 1:
            raise DimensionMismatch(
                f"{len(self.positions)} position samples need {len(self.positions) - 1} controls, "
                f"got {len(self.controls)}")

    @property
    def T(self) -> int:
        return len(self.controls)

    @property
    def initial_state(self) -> RopeState:
        return RopeState.at_rest(self.positions[0])

    @classmethod
    def from_trajectory(cls, times, positions, controls=None):
        """Build from a recorded trajectory; controls default to the top point's finite difference."""
        t = np.asarray(times, dtype=np.float64)
        h = float(np.mean(np.diff(t)))
        P = np.asarray(positions, dtype=np.float64)
        if controls is None:
            controls = np.diff(P[:, 0, :], axis=0) / h
        return cls(P, controls, h)


@dataclass
class SysIdConfig:
    horizon: int = 10  # H, samples
    horizon_step: int = 10  # delta H
    h: float = 0.01
    dt: float = 1e-3
    loss_threshold: float = 1e-4  # epsilon, m^2
    lr: float = 1e-2
    max_iterations: int = 2000
    stage: str = "heterogeneous"  # or "homogeneous"
    free: tuple = FREE_FIELDS
    patience: int = 50
    min_rel_improvement: float = 1e-6
    converged_loss: float = 1e-20  # m^2; at full horizon a loss this small is rounding noise
    horizon_bucket: int = 50  # rollout lengths are rounded up to limit recompilation
    grad_clip: float | None = None

    @property
    def substeps(self) -> int:
        ratio = self.h / self.dt
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * ratio:
            raise ValueError(f"h/dt = {ratio} is not a positive integer")
        return n


@dataclass
class Trainable:
    """Parameter values plus which leaves are optimized and whether they are tied."""

    params: RopeParams
    tied: bool = False
    free: tuple = FREE_FIELDS


@dataclass
class SysIdResult:
    params: RopeParams
    log: list = field(default_factory=list)  # (iteration, H, loss)
    horizon_reached: int = 0
    iterations: int = 0


# ---------------------------------------------------------------------------
# losses and metrics


def position_loss(predicted, measured, horizon: int | None = None) -> float:
    """Mean over the first ``horizon`` samples of the squared stacked position error."""
    a, b = _positions(predicted), _positions(measured)
    H = len(a) if horizon is None else int(horizon)
    if H < 1 or len(a) < H or len(b) < H or a.shape[1:] != b.shape[1:]:
        raise DimensionMismatch(f"cannot compare {a.shape} and {b.shape} over H={H}")
    d = a[:H] - b[:H]
    return float(np.sum(d * d) / H)


def rmse_tip(predicted, reference) -> float:
    a, b = _positions(predicted), _positions(reference)
    if a.shape != b.shape:
        raise DimensionMismatch(f"trajectories differ in shape: {a.shape} vs {b.shape}")
    d = a[:, -1, :] - b[:, -1, :]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _positions(traj) -> np.ndarray:
    if isinstance(traj, (list, tuple)) and traj and isinstance(traj[0], RopeState):
        return np.stack([s.positions for s in traj])
    return np.asarray(traj, dtype=np.float64)


# ---------------------------------------------------------------------------
# tying


def tie_parameters(params, free: tuple = FREE_FIELDS) -> Trainable:
    """Every free per-element array becomes its mean; one scalar per array is trained."""
    p = params.params if isinstance(params, Trainable) else params
    p = p.as_numpy()
    changes = {}
    for name in free:
        arr = np.asarray(getattr(p, name))
        if arr.ndim:
            changes[name] = np.full_like(arr, arr.mean()) if arr.size else arr
    return Trainable(p.replace(**changes), tied=True, free=tuple(free))


def untie_parameters(params, free: tuple = FREE_FIELDS) -> Trainable:
    p = params.params if isinstance(params, Trainable) else params
    return Trainable(p.as_numpy(), tied=False, free=tuple(free))


def _to_rho(tr: Trainable) -> dict:
    rho = {}
    for name in tr.free:
        arr = np.asarray(getattr(tr.params, name), dtype=np.float64)
        if np.any(arr <= 0) and arr.size:
            raise ValueError(f"{name} must be positive to be identified in log space")
        if tr.tied and arr.ndim:
            rho[name] = np.log(arr.mean()).reshape(1) if arr.size else np.zeros(0)
        else:
            rho[name] = np.log(arr)
    return rho


def _from_rho(rho: dict, base: RopeParams):
    changes = {}
    for name, r in rho.items():
        ref = getattr(base, name)
        val = jnp.exp(r)
        changes[name] = jnp.broadcast_to(val, jnp.shape(ref)) if jnp.ndim(ref) else jnp.reshape(val, ())
    return base.replace(**changes)


# ---------------------------------------------------------------------------
# identification loop


def _make_loss(dt: float, substeps: int):
    def loss(rho, base, p0, controls, measured, mask):
        p = _from_rho(rho, base)
        P, _ = _rollout(p0, jnp.zeros_like(p0), controls, p, dt, substeps)
        err = jnp.sum((P - measured) ** 2, axis=(1, 2))
        return jnp.sum(err * mask) / jnp.sum(mask)

    return loss


_LOSS_CACHE: dict = {}


def _loss_and_grad(dt: float, substeps: int):
    key = (dt, substeps)
    if key not in _LOSS_CACHE:
        _LOSS_CACHE[key] = jax.jit(jax.value_and_grad(_make_loss(dt, substeps)))
    return _LOSS_CACHE[key]


def _flatten(rho: dict, names):
    return np.concatenate([np.ravel(rho[k]) for k in names]) if names else np.zeros(0)


def _unflatten(vec, like: dict, names):
    out, k = {}, 0
    for n in names:
        sz = like[n].size
        out[n] = vec[k:k + sz].reshape(like[n].shape)
        k += sz
    return out


def identify_run(dataset: SysIdDataset, params_init, config: SysIdConfig | None = None) -> SysIdResult:
    """Run the variable-horizon identification loop and keep the training log."""
    cfg = config or SysIdConfig()
    if isinstance(params_init, Trainable):
        tr = params_init
    elif cfg.stage == "homogeneous":
        tr = tie_parameters(params_init, cfg.free)
    else:
        tr = untie_parameters(params_init, cfg.free)
    base = tr.params.as_numpy().validate()
    if dataset.positions.shape[1] != base.n_points:
        raise DimensionMismatch("dataset and parameters disagree on the number of points")
    if abs(dataset.h - cfg.h) > 1e-12:
        raise ValueError(f"dataset sampled at h={dataset.h}, config expects {cfg.h}")
    T = dataset.T
    if not 0 < cfg.horizon <= T or cfg.horizon_step < 1 or cfg.loss_threshold <= 0:
        raise ValueError("need 0 < H <= T, horizon_step >= 1 and a positive loss threshold")

    rho = _to_rho(tr)
    names = [n for n in tr.free if rho[n].size]
    value_grad = _loss_and_grad(cfg.dt, cfg.substeps)
    p0 = jnp.asarray(dataset.positions[0])

    def evaluate(rho_np, H):
        L = min(T, int(math.ceil(H / cfg.horizon_bucket) * cfg.horizon_bucket))
        mask = (np.arange(L) < H).astype(np.float64)
        return value_grad({k: jnp.asarray(v) for k, v in rho_np.items() if k in names},
                          base, p0, dataset.controls[:L], dataset.positions[1:L + 1], mask)

    if not names:
        return SysIdResult(base, [], T, 0)
    x = _flatten(rho, names)
    adam = AdamState.zeros(x.size, cfg.lr)
    H = cfg.horizon
    log: list = []
    best_at_full = math.inf
    stale = 0
    it = 0
    for it in range(cfg.max_iterations):
        cur = _unflatten(x, rho, names)
        loss, g = evaluate(cur, H)
        loss = float(loss)
        if not math.isfinite(loss):
            raise Diverged(f"loss became non-finite at iteration {it} with H={H}")
        log.append((it, H, loss))
        if loss < cfg.loss_threshold and H < T:
            H = min(T, H + cfg.horizon_step)
            continue
        if H >= T:
            if loss < best_at_full * (1 - cfg.min_rel_improvement):
                best_at_full, stale = loss, 0
            else:
                stale += 1
            if stale >= cfg.patience or loss <= cfg.converged_loss:
                break
        grad = _flatten({k: np.asarray(v) for k, v in g.items()}, names)
        if not np.all(np.isfinite(grad)):
            raise Diverged(f"gradient became non-finite at iteration {it} with H={H}")
        if cfg.grad_clip is not None:
            n = np.linalg.norm(grad)
            if n > cfg.grad_clip:
                grad = grad * (cfg.grad_clip / n)
        x, adam = adam_step(x, grad, adam)
    final = _from_rho({k: jnp.asarray(v) for k, v in _unflatten(x, rho, names).items()}, base)
    return SysIdResult(final.as_numpy(), log, H, it + 1)


def identify(dataset: SysIdDataset, params_init, config: SysIdConfig | None = None) -> RopeParams:
    return identify_run(dataset, params_init, config).params


def identify_two_stage(dataset, params_init, config: SysIdConfig | None = None,
                       stage1_iterations: int | None = None):
    """Homogeneous fit followed by a per-element refinement from its result."""
    cfg = config or SysIdConfig()
    c1 = SysIdConfig(**{**cfg.__dict__, "stage": "homogeneous"})
    if stage1_iterations is not None:
        c1.max_iterations = stage1_iterations
    r1 = identify_run(dataset, tie_parameters(params_init, cfg.free), c1)
    c2 = SysIdConfig(**{**cfg.__dict__, "stage": "heterogeneous"})
    r2 = identify_run(dataset, untie_parameters(r1.params, cfg.free), c2)
    return r1, r2


def stage1_seed(params: RopeParams, free: tuple = FREE_FIELDS) -> RopeParams:
    """Order-of-magnitude starting point: stiffnesses 10, dampings 0.1, air drag 0.01."""
    seeds = {"linear_stiffness": 10.0, "bending_stiffness": 10.0, "torsion_stiffness": 10.0,
             "linear_damping": 0.1, "bending_damping": 0.1, "air_drag": 0.01}
    p = params.as_numpy()
    return p.replace(**{k: np.full_like(np.asarray(getattr(p, k)), v)
                        for k, v in seeds.items() if k in free})


def check_program(dataset: SysIdDataset, params: RopeParams, config: SysIdConfig | None = None):
    """Verify the identification loss lowers only to registered primitives."""
    cfg = config or SysIdConfig()
    rho = {k: jnp.asarray(v) for k, v in _to_rho(untie_parameters(params, cfg.free)).items()}
    loss = _make_loss(cfg.dt, cfg.substeps)
    L = min(dataset.T, cfg.horizon)
    check_registered(lambda r: loss(r, params, jnp.asarray(dataset.positions[0]),
                                    dataset.controls[:L], dataset.positions[1:L + 1],
                                    jnp.ones(L)), rho)


def simulate_dataset(params: RopeParams, state0: RopeState, controls, h: float = 0.01,
                     dt: float = 1e-3) -> SysIdDataset:
    """Record a noise-free dataset by rolling the model out under ``controls``."""
    sub = int(round(h / dt))
    P, _ = rollout_arrays(state0, controls, params, dt, sub)
    return SysIdDataset(np.concatenate([state0.positions[None], P]), controls, h)


def predict_positions(params: RopeParams, state0: RopeState, controls, h=0.01, dt=1e-3):
    P, _ = rollout_arrays(state0, controls, params, dt, int(round(h / dt)))
    return P
