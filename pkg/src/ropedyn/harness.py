"""Experiment plumbing: reference ropes, excitations, targets, disturbances and metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DimensionMismatch, IndexOutOfRange
from .rope import RopeParams, RopeState

HETEROGENEOUS_FIELDS = ("linear_stiffness", "linear_damping", "bending_stiffness",
                        "bending_damping", "torsion_stiffness")


@dataclass(frozen=True)
class PublicGeometry:
    """What can be measured directly on the reference rope."""

    n_links: int
    rest_lengths: np.ndarray
    masses: np.ndarray
    gravity: np.ndarray


def generate_reference_rope(seed: int, n_links: int, heterogeneity: float = 0.0,
                            **uniform_kw) -> tuple[RopeParams, PublicGeometry]:
    """Ground-truth rope whose per-element values are the base scaled by U[1-h, 1+h]."""
    if n_links < 2:
        raise ValueError("reference rope needs at least 2 links")
    base = RopeParams.uniform(n_links, **uniform_kw)
    rng = np.random.default_rng(seed)
    changes = {}
    for name in HETEROGENEOUS_FIELDS:
        arr = np.asarray(getattr(base, name))
        changes[name] = arr * rng.uniform(1 - heterogeneity, 1 + heterogeneity, size=arr.shape)
    hidden = base.replace(**changes).validate()
    public = PublicGeometry(n_links, hidden.rest_lengths.copy(), hidden.masses.copy(),
                            hidden.gravity.copy())
    return hidden, public


def perturb_params(params: RopeParams, rel: float, seed: int,
                   fields=("air_drag",) + HETEROGENEOUS_FIELDS) -> RopeParams:
    """Scale every listed entry by an independent factor of 1 +/- ``rel`` (random sign)."""
    rng = np.random.default_rng(seed)
    p = params.as_numpy()
    changes = {}
    for name in fields:
        arr = np.asarray(getattr(p, name))
        changes[name] = arr * (1 + rel * rng.choice([-1.0, 1.0], size=arr.shape))
    return p.replace(**changes)


def make_excitation(seed: int, duration: float, max_speed: float, h: float = 0.01,
                    cutoff_hz: float = 1.5, n_modes: int = 6, vertical_scale: float = 0.5) -> np.ndarray:
    """Smooth random velocity profile, zero at t = 0 and scaled to peak at ``max_speed``."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration / h))
    if max_speed == 0:
        return np.zeros((n, 3))
    rng = np.random.default_rng(seed)
    t = np.arange(n) * h
    freqs = rng.uniform(0.2, cutoff_hz, size=(n_modes, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(n_modes, 3))
    amps = rng.normal(size=(n_modes, 3)) / np.arange(1, n_modes + 1)[:, None]
    u = np.sum(amps[:, None, :] * np.sin(2 * np.pi * freqs[:, None, :] * t[None, :, None]
                                         + phases[:, None, :]), axis=0)
    ramp = np.clip(t / min(0.5, duration / 4), 0, 1)
    u *= (ramp * ramp * (3 - 2 * ramp))[:, None]
    u[:, 2] *= vertical_scale
    peak = np.max(np.linalg.norm(u, axis=1))
    return u * (max_speed / peak) if peak > 0 else u


def displaced_state(params: RopeParams, angle: float, azimuth: float = 0.0,
                    top=(0.0, 0.0, 0.0)) -> RopeState:
    """Rope at rest, straight, tilted by ``angle`` from the hanging direction."""
    from .rope import hanging_rest_positions

    pos = hanging_rest_positions(params, top)
    rel = pos - pos[0]
    axis = np.array([-np.sin(azimuth), np.cos(azimuth), 0.0])
    rel = _rotate(rel, axis, angle)
    return RopeState.at_rest(pos[0] + rel)


def _rotate(v, axis, angle):
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + np.outer(v @ axis, axis) * (1 - c)


# ---------------------------------------------------------------------------
# metrics


def stabilization_time(energy, period: float, fraction: float = 0.01):
    """First time the series enters, and then stays in, the band ``<= fraction * E[0]``."""
    e = np.asarray(energy, dtype=np.float64)
    if e.size == 0 or not e[0] > 0:
        raise ValueError("energy series must be non-empty with a positive initial value")
    inside = e <= fraction * e[0]
    if not inside[-1]:
        return None
    outside = np.nonzero(~inside)[0]
    first = 0 if outside.size == 0 else outside[-1] + 1
    return float(first * period)


def tracking_error(trajectory, target) -> float:
    from .sysid import _positions

    P = _positions(trajectory)
    g = np.asarray(target, dtype=np.float64)
    tip = P[:, -1, :] if P.ndim == 3 else P
    if tip.shape != g.shape:
        raise DimensionMismatch(f"tip path {tip.shape} vs target {g.shape}")
    return float(np.mean(np.linalg.norm(tip - g, axis=1)))


# ---------------------------------------------------------------------------
# target trajectories

TARGET_LENGTHS = {"sinusoid": 3.13, "egg": 2.92, "lemniscate": 2.77}


@dataclass(frozen=True)
class TargetTrajectory:
    kind: str
    duration: float
    period: float
    samples: np.ndarray  # (T, 3)

    @property
    def max_speed(self) -> float:
        return float(np.max(np.linalg.norm(np.diff(self.samples, axis=0), axis=1)) / self.period)

    @property
    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.samples, axis=0), axis=1)))


def _shape(kind: str, s):
    """Unscaled closed curve or sweep in the x-z plane, s in [0, 1]."""
    w = 2 * np.pi * s
    if kind == "lemniscate":
        w = w + np.pi / 2  # start at the crossing point
    if kind == "sinusoid":  # two periods of a sine over a horizontal sweep
        x = s - 0.5
        z = 0.25 * np.sin(2 * w)
    elif kind == "egg":  # oval whose lower lobe is flattened
        x = np.cos(w) * (1 + 0.2 * np.sin(w))
        z = 0.75 * np.sin(w)
        z = np.where(z < 0, 0.6 * z, z)
    elif kind == "lemniscate":  # Bernoulli figure-eight
        d = 1 + np.sin(w) ** 2
        x = np.cos(w) / d
        z = np.sin(w) * np.cos(w) / d
    else:
        raise ValueError(f"unknown target kind '{kind}'")
    return np.stack([x, np.zeros_like(x), z], axis=-1)


def _progress(tau, ramp):
    """Normalized arc length vs. normalized time for a sin^2 ramp / cruise / ramp speed."""
    fine = np.linspace(0, 1, 40001)
    speed = np.ones_like(fine)
    if ramp > 0:
        edge = np.minimum(fine, 1 - fine) / ramp
        speed = np.where(edge < 1, np.sin(0.5 * np.pi * np.clip(edge, 0, 1)) ** 2, 1.0)
    cum = np.concatenate([[0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(fine))])
    return np.interp(tau, fine, cum / cum[-1])


def make_target(kind: str, duration: float, period: float = 0.01, length: float | None = None,
                center=(0.0, 0.0, -0.3), scale: float = 1.0, ramp: float = 0.25) -> TargetTrajectory:
    """Target path for the rope tip, sampled every ``period`` seconds.

    Shapes live in the vertical x-z plane: a two-period sine sweep, an oval
    with a flattened lower half, and the lemniscate of Bernoulli (started at
    its crossing point).  The curve is scaled to a length of ``length * scale``
    (defaults 3.13, 2.92 and 2.77 m) and traversed with a sin^2 speed ramp
    over the first and last ``ramp`` fraction of the duration, cruising in
    between, so the tip starts and ends at rest.  The first sample sits at
    ``center``.
    """
    if duration <= 0 or scale <= 0:
        raise ValueError("duration and scale must be positive")
    total = (TARGET_LENGTHS[kind] if length is None else length) * scale
    fine = np.linspace(0, 1, 20001)
    pts = _shape(kind, fine)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0], np.cumsum(seg)])
    pts *= total / arc[-1]
    arc *= total / arc[-1]
    n = int(round(duration / period))
    tau = np.linspace(0, 1, n)
    progress = _progress(tau, ramp)
    spline = CubicSpline(arc, pts, axis=0)
    samples = spline(progress * total) + np.asarray(center)[None, :]
    samples -= samples[0] - np.asarray(center)[None, :]
    return TargetTrajectory(kind, float(duration), float(period), samples)


# ---------------------------------------------------------------------------
# disturbances


def inject_disturbance(state: RopeState, impulse, point_index: int, params: RopeParams) -> RopeState:
    """Add ``impulse / m_i`` to one point's velocity."""
    n = np.shape(state.positions)[0]
    if not 0 <= point_index < n:
        raise IndexOutOfRange(f"point {point_index} outside 0..{n - 1}")
    v = np.array(state.velocities, dtype=np.float64)
    v[point_index] += np.asarray(impulse, dtype=np.float64) / float(params.masses[point_index])
    return RopeState(np.array(state.positions, dtype=np.float64), v)


def tracking_start(params: RopeParams, first_target) -> RopeState:
    """Hanging equilibrium translated so the tip sits on the first target sample."""
    from .rope import hanging_rest_positions

    pos = hanging_rest_positions(params)
    pos = pos + (np.asarray(first_target, dtype=np.float64) - pos[-1])
    return RopeState.at_rest(pos)


# ---------------------------------------------------------------------------
# evaluation on a grid of hidden parameter multipliers

GRID_FIELDS = ("masses", "bending_stiffness", "torsion_stiffness")


def parameter_grid(params: RopeParams, levels=(0.8, 1.0, 1.2), fields=GRID_FIELDS) -> list[RopeParams]:
    """All multiplier combinations, last field varying fastest."""
    base = params.as_numpy()
    return [base.replace(**{f: np.asarray(getattr(base, f)) * m for f, m in zip(fields, combo)})
            for combo in itertools.product(levels, repeat=len(fields))]


def energy_series(P, V, params_list, initial_states=None) -> np.ndarray:
    """Offset energy along (B, T, n, 3) rollouts, optionally prefixed by the start states."""
    import jax

    from .controller import _stack_params
    from .rope import _offset_energy

    per_step = jax.vmap(_offset_energy, in_axes=(0, 0, None))
    e = np.asarray(jax.jit(jax.vmap(per_step))(P, V, _stack_params(params_list)))
    if initial_states is not None:
        from .rope import offset_energy

        e0 = np.array([offset_energy(s, p) for s, p in zip(initial_states, params_list)])
        e = np.concatenate([e0[:, None], e], axis=1)
    return e


@dataclass
class StabilizationReport:
    times: np.ndarray  # (cells, states), nan where the band is never held
    energy: np.ndarray  # (cells, states, T + 1)
    tips: np.ndarray  # (cells, states, T + 1, 3)

    def success_fraction(self, limit: float) -> float:
        return float(np.mean(np.nan_to_num(self.times, nan=np.inf) <= limit))


def evaluate_stabilization(weights, states, params_list, duration: float = 15.0, *, period: float = 0.01,
                           dt: float = 1e-3, bound: float = 1.0, fraction: float = 0.01) -> StabilizationReport:
    """Closed-loop (or passive, ``weights=None``) runs of every state on every grid cell.

    Cells are batched together in one vectorized rollout; results come back
    ordered by cell index, then state index.
    """
    from .controller import simulate_policy

    states, cells = list(states), list(params_list)
    T = int(round(duration / period))
    pairs = [(c, s) for c in range(len(cells)) for s in range(len(states))]
    P, V, _ = simulate_policy(weights, [states[s] for _, s in pairs], [cells[c] for c, _ in pairs], T,
                              dt=dt, substeps=int(round(period / dt)), bound=bound)
    e = energy_series(P, V, [cells[c] for c, _ in pairs], [states[s] for _, s in pairs])
    times = np.array([np.nan if (t := stabilization_time(row, period, fraction)) is None else t for row in e])
    tips = np.concatenate([np.stack([states[s].positions[-1] for _, s in pairs])[:, None], P[:, :, -1]], axis=1)
    shape = (len(cells), len(states))
    return StabilizationReport(times.reshape(shape), e.reshape(shape + e.shape[1:]),
                               tips.reshape(shape + tips.shape[1:]))


def evaluate_tracking(weights, params_list, target: TargetTrajectory, *, bound: float = 2.5,
                      dt: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Mean tip error per cell and the tip paths (cells, T, 3) for the policy."""
    from .controller import TRACKING, simulate_policy

    g = target.samples
    cells = list(params_list)
    starts = [tracking_start(p, g[0]) for p in cells]
    P, _, _ = simulate_policy(weights, starts, cells, len(g) - 1, kind=TRACKING, targets=g[1:],
                              dt=dt, substeps=int(round(target.period / dt)), bound=bound)
    errs = np.array([tracking_error(P[k], g[1:]) for k in range(len(cells))])
    return errs, P[:, :, -1]


def tune_pid(params: RopeParams, target: TargetTrajectory, kp_values, kd_values, ki_values=(0.0,),
             bound: float = 2.5, dt: float = 1e-3):
    """Grid search over PID gains on the nominal model; returns (gains, error)."""
    from .controller import PidGains, run_pid

    g = target.samples
    best = None
    for kp, kd, ki in itertools.product(kp_values, kd_values, ki_values):
        gains = PidGains(kp=float(kp), ki=float(ki), kd=float(kd), bound=bound, period=target.period)
        err = tracking_error(run_pid(tracking_start(params, g[0]), g[1:], params, gains, dt,
                                     int(round(target.period / dt))), g[1:])
        if best is None or err < best[1]:
            best = (gains, err)
    return best


def evaluate_pid(gains, params_list, target: TargetTrajectory, dt: float = 1e-3):
    from .controller import run_pid

    g = target.samples
    paths = [run_pid(tracking_start(p, g[0]), g[1:], p, gains, dt, int(round(target.period / dt)))
             for p in params_list]
    return np.array([tracking_error(P, g[1:]) for P in paths]), np.stack([P[:, -1] for P in paths])


# ---------------------------------------------------------------------------
# command pipelines

COMMANDS = ("simulate", "identify", "train", "eval-stabilize", "eval-track", "split", "dagger-refine")

ROPE_KEYS = {"n_links": 8, "length": 0.8, "rope_mass": 0.0128, "tip_mass": 0.015,
             "linear_stiffness": 100.0, "linear_damping": 0.05, "bending_stiffness": 2e-3,
             "bending_damping": 1e-4, "torsion_stiffness": 1e-4, "air_drag": 1e-3}
COMMON_KEYS = {"seed": 0, "dt": 1e-3, "h": 0.01, "params_file": None, **ROPE_KEYS}
STAB_KEYS = {"n_states": 64, "angle_min": 0.15, "angle_max": 0.8}
TRAIN_KEYS = {"kind": "stabilization", "iterations": 60, "batch_size": 8, "horizon": 300, "lr": 1e-3,
              "lr_final": None, "bound": 1.0, "gamma": 0.99, "hidden": "128, 128, 128", "grad_clip": 1.0,
              "noise_masses": 0.1, "noise_bending_stiffness": 0.1, "noise_torsion_stiffness": 0.1,
              "shapes": "lemniscate, egg, sinusoid", "durations": "2.5, 3.5", "center_z": -0.3,
              **STAB_KEYS}
GRID_KEYS = {"grid_levels": "0.8, 1.0, 1.2", "grid_fields": ", ".join(GRID_FIELDS)}
POLICY_KEYS = {"policy": None}

DEFAULTS = {
    "simulate": {**COMMON_KEYS, "heterogeneity": 0.3, "angle": 0.0, "azimuth": 0.0, "duration": 4.0,
                 "max_speed": 0.0},
    "identify": {**COMMON_KEYS, "heterogeneity": 0.3, "trajectory": "trajectory.csv",
                 "controls": "controls.csv", "init_params": "public.params", "init_perturbation": 0.0,
                 "stage": "heterogeneous", "horizon": 10, "horizon_step": 10, "loss_threshold": 1e-4,
                 "lr": 1e-2, "max_iterations": 300, "ablate_bending_damping": False,
                 "holdout_angle": 0.5, "holdout_azimuth": 0.7, "holdout_duration": 4.0},
    "train": {**COMMON_KEYS, **TRAIN_KEYS},
    "eval-stabilize": {**COMMON_KEYS, **POLICY_KEYS, **GRID_KEYS, "n_displacements": 4,
                       "eval_seed": 1000, "angle_min": 0.3, "angle_max": 0.7, "duration": 15.0,
                       "band": 0.01, "success_time": 6.0, "impulse": None, "impulse_point": -1,
                       "settle": 8.0},
    "eval-track": {**COMMON_KEYS, **POLICY_KEYS, **GRID_KEYS, "shape": "lemniscate", "duration": 2.5,
                   "center_z": -0.3, "bound": 2.5, "pid_kp": "0.1, 0.25, 0.5, 1, 2, 4",
                   "pid_kd": "0, 0.1, 0.2, 0.4, 0.8", "pid_ki": "0, 0.5"},
    "split": {"seed": 0, "frames": "frames", "d_min": 15.0, "n_nodes": 9, "factor": 4,
              "mode": "accelerated", "velocity_window": 1},
    "dagger-refine": {**COMMON_KEYS, **POLICY_KEYS, **TRAIN_KEYS, "iterations": 40, "n_adversarial": 10,
                      "candidates": 200, "window": 100, "boost": 5.0, "refine_horizon": 150},
}


def _floats(v) -> tuple:
    if v is None:
        return ()
    if isinstance(v, (int, float)):
        return (float(v),)
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _words(v) -> tuple:
    return tuple(x.strip() for x in str(v).split(",") if x.strip())


def resolve_config(command: str, config: dict, seed: int | None = None) -> dict:
    """Defaults merged with ``config``; unknown keys are rejected."""
    from .errors import ConfigError

    if command not in DEFAULTS:
        raise ConfigError(f"unknown command '{command}'")
    unknown = sorted(set(config) - set(DEFAULTS[command]))
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {', '.join(unknown)}")
    cfg = {**DEFAULTS[command], **config}
    if seed is not None:
        cfg["seed"] = int(seed)
    for key in ("n_links", "n_states", "n_displacements", "n_adversarial", "iterations", "batch_size",
                "horizon", "max_iterations", "n_nodes", "window", "refine_horizon"):
        if key in cfg and cfg[key] is not None and (int(cfg[key]) != cfg[key] or cfg[key] < 1):
            raise ConfigError(f"{key} must be a positive integer, got {cfg[key]!r}")
    for key in ("dt", "h", "duration", "d_min", "lr", "length", "rope_mass"):
        if key in cfg and cfg[key] is not None and not float(cfg[key]) > 0:
            raise ConfigError(f"{key} must be positive, got {cfg[key]!r}")
    return cfg


def _path(cfg, key, base: Path) -> Path:
    p = Path(str(cfg[key]))
    return p if p.is_absolute() else base / p


def _model(cfg, base: Path) -> RopeParams:
    """The controller's model: an identified parameter file, else the uniform rope from the keys."""
    from .io import load_params

    if cfg.get("params_file"):
        return load_params(_path(cfg, "params_file", base))
    return RopeParams.uniform(int(cfg["n_links"]), **{k: float(cfg[k]) for k in ROPE_KEYS if k != "n_links"})


def _reference(cfg) -> tuple[RopeParams, PublicGeometry]:
    kw = {k: float(cfg[k]) for k in ROPE_KEYS if k != "n_links"}
    return generate_reference_rope(int(cfg["seed"]), int(cfg["n_links"]), float(cfg["heterogeneity"]), **kw)


def _public_params(public: PublicGeometry, cfg) -> RopeParams:
    """Measured geometry plus the nominal (catalog) values of the free parameters."""
    nominal = RopeParams.uniform(public.n_links, **{k: float(cfg[k]) for k in ROPE_KEYS if k != "n_links"})
    return nominal.replace(masses=public.masses, rest_lengths=public.rest_lengths, gravity=public.gravity)


def _stab_states(cfg, params, seed, count=None, lo=None, hi=None):
    rng = np.random.default_rng(seed)
    n = int(cfg["n_states"] if count is None else count)
    lo = float(cfg["angle_min"] if lo is None else lo)
    hi = float(cfg["angle_max"] if hi is None else hi)
    return [displaced_state(params, a, z) for a, z in zip(rng.uniform(lo, hi, n), rng.uniform(0, 2 * np.pi, n))]


def _train_config(cfg):
    from .controller import TrainConfig

    noise = {k[len("noise_"):]: float(v) for k, v in cfg.items() if k.startswith("noise_") and v}
    return TrainConfig(batch_size=int(cfg["batch_size"]), horizon=int(cfg["horizon"]), dt=float(cfg["dt"]),
                       substeps=int(round(float(cfg["h"]) / float(cfg["dt"]))), gamma=float(cfg["gamma"]),
                       noise_scales=noise, lr=float(cfg["lr"]),
                       lr_final=None if cfg["lr_final"] is None else float(cfg["lr_final"]),
                       iterations=int(cfg["iterations"]), bound=float(cfg["bound"]), seed=int(cfg["seed"]),
                       hidden=tuple(int(x) for x in _floats(cfg["hidden"])),
                       grad_clip=None if cfg["grad_clip"] is None else float(cfg["grad_clip"]),
                       kind=str(cfg["kind"]))


def _training_tasks(cfg, params):
    from .controller import STABILIZATION, TaskSpec, TRACKING

    kind = str(cfg["kind"])
    if kind == STABILIZATION:
        states = _stab_states(cfg, params, int(cfg["seed"]))
        return states, [TaskSpec()] * len(states)
    if kind != TRACKING:
        raise ValueError(f"unknown task kind '{kind}'")
    states, specs = [], []
    for shape in _words(cfg["shapes"]):
        for d in _floats(cfg["durations"]):
            g = make_target(shape, d, float(cfg["h"]), center=(0.0, 0.0, float(cfg["center_z"]))).samples
            states.append(tracking_start(params, g[0]))
            specs.append(TaskSpec(TRACKING, g[1:]))
    return states, specs


def _load_policy(cfg, base: Path):
    from .controller import PolicyWeights
    from .io import load_config, load_weights

    if not cfg.get("policy"):
        return None, {}
    path = _path(cfg, "policy", base)
    meta = load_config(path.with_suffix(".meta"))
    return PolicyWeights(tuple(load_weights(path))), meta


def _save_policy(weights, out: Path, meta: dict):
    from .io import format_summary, save_weights

    save_weights(out / "policy.weights", weights.as_numpy().layers)
    (out / "policy.meta").write_text(format_summary(meta))


def _grid(cfg, params):
    return parameter_grid(params, _floats(cfg["grid_levels"]), _words(cfg["grid_fields"]))


def _run_simulate(cfg, base, out):
    from .io import save_columns, save_params, save_trajectory
    from .rope import rollout_arrays

    if cfg["params_file"]:
        params = _model(cfg, base)
    else:
        params, public = _reference(cfg)
        save_params(out / "reference.hidden.params", params, allow_hidden=True)  # audit copy only
        save_params(out / "public.params", _public_params(public, cfg))
    state = displaced_state(params, float(cfg["angle"]), float(cfg["azimuth"]))
    h, dt = float(cfg["h"]), float(cfg["dt"])
    u = make_excitation(int(cfg["seed"]) + 1, float(cfg["duration"]), float(cfg["max_speed"]), h)
    P, V = rollout_arrays(state, u, params, dt, int(round(h / dt)))
    P = np.concatenate([state.positions[None], P])
    V = np.concatenate([state.velocities[None], V])
    t = np.arange(len(P)) * h
    save_trajectory(out / "trajectory.csv", t, P, V)
    save_columns(out / "controls.csv", {"ux": u[:, 0], "uy": u[:, 1], "uz": u[:, 2]})
    save_columns(out / "tip_xz.csv", {"t": t, "x": P[:, -1, 0], "z": P[:, -1, 2]})
    e = energy_series(P[None], V[None], [params])[0]
    save_columns(out / "energy.csv", {"t": t, "offset_energy": e})
    return {"n_points": params.n_points, "steps": len(u), "offset_energy_initial": e[0],
            "offset_energy_final": e[-1], "tip_travel": float(np.max(np.linalg.norm(P[:, -1] - P[0, -1], axis=1))),
            "max_speed": float(cfg["max_speed"])}


def _run_identify(cfg, base, out):
    from .io import load_params, load_trajectory, save_columns, save_params
    from .sysid import (FREE_FIELDS, SysIdConfig, SysIdDataset, identify_run, identify_two_stage,
                        predict_positions, rmse_tip)

    _, P, _ = load_trajectory(_path(cfg, "trajectory", base))
    u = np.loadtxt(_path(cfg, "controls", base), delimiter=",", skiprows=1, ndmin=2)
    init = load_params(_path(cfg, "init_params", base))
    if float(cfg["init_perturbation"]) > 0:
        init = perturb_params(init, float(cfg["init_perturbation"]), int(cfg["seed"]) + 2)
    free = tuple(FREE_FIELDS)
    if cfg["ablate_bending_damping"]:
        init = init.replace(bending_damping=np.zeros_like(np.asarray(init.bending_damping)))
        free = tuple(f for f in free if f != "bending_damping")
    ds = SysIdDataset(P, u, float(cfg["h"]))
    scfg = SysIdConfig(horizon=int(cfg["horizon"]), horizon_step=int(cfg["horizon_step"]), h=float(cfg["h"]),
                       dt=float(cfg["dt"]), loss_threshold=float(cfg["loss_threshold"]), lr=float(cfg["lr"]),
                       max_iterations=int(cfg["max_iterations"]), free=free,
                       stage="homogeneous" if cfg["stage"] == "homogeneous" else "heterogeneous")
    if cfg["stage"] == "two-stage":
        first, res = identify_two_stage(ds, init, scfg)
        log = first.log + [(it + first.iterations, H, l) for it, H, l in res.log]
    elif cfg["stage"] in ("heterogeneous", "homogeneous"):
        res = identify_run(ds, init, scfg)
        log = res.log
    else:
        raise ValueError(f"unknown stage '{cfg['stage']}'")
    save_params(out / "identified.params", res.params)
    save_columns(out / "loss_log.csv", {"iteration": [r[0] for r in log], "horizon": [r[1] for r in log],
                                        "loss": [r[2] for r in log]})
    summary = {"iterations": len(log), "horizon_reached": res.horizon_reached, "final_loss": log[-1][2],
               "stage": cfg["stage"], "lr": float(cfg["lr"]), "loss_threshold": float(cfg["loss_threshold"]),
               "horizon_step": int(cfg["horizon_step"]), "ablate_bending_damping": bool(cfg["ablate_bending_damping"])}
    if cfg["holdout_duration"]:
        truth, _ = _reference(cfg)  # regenerated from the seed, never read from disk
        held = displaced_state(truth, float(cfg["holdout_angle"]), float(cfg["holdout_azimuth"]))
        zero = np.zeros((int(round(float(cfg["holdout_duration"]) / float(cfg["h"]))), 3))
        ref = predict_positions(truth, held, zero, float(cfg["h"]), float(cfg["dt"]))
        summary["heldout_tip_rmse"] = rmse_tip(predict_positions(res.params, held, zero, float(cfg["h"]),
                                                                 float(cfg["dt"])), ref)
        summary["heldout_tip_rmse_initial"] = rmse_tip(predict_positions(init, held, zero, float(cfg["h"]),
                                                                         float(cfg["dt"])), ref)
    return summary


def _run_train(cfg, base, out):
    from .controller import train_run
    from .io import save_columns

    params = _model(cfg, base)
    states, specs = _training_tasks(cfg, params)
    tcfg = _train_config(cfg)
    res = train_run(states, specs, params, tcfg)
    _save_policy(res.weights, out, {"kind": tcfg.kind, "bound": tcfg.bound, "n_points": params.n_points})
    it, loss = zip(*res.curve)
    save_columns(out / "training_curve.csv", {"iteration": it, "loss": loss})
    tail = min(10, len(loss))
    return {"kind": tcfg.kind, "iterations": tcfg.iterations, "initial_loss": loss[0],
            "final_loss": float(np.mean(loss[-tail:])), "training_states": len(states),
            "lr": tcfg.lr, "gamma": tcfg.gamma, "horizon": tcfg.horizon}


def _run_eval_stabilize(cfg, base, out):
    from .controller import STABILIZATION, simulate_policy
    from .errors import KindMismatch
    from .io import save_columns

    params = _model(cfg, base)
    weights, meta = _load_policy(cfg, base)
    if meta and meta.get("kind") != STABILIZATION:
        raise KindMismatch(f"policy was trained for {meta.get('kind')}")
    bound = float(meta.get("bound", 1.0))
    h = float(cfg["h"])
    cells = _grid(cfg, params)
    states = _stab_states(cfg, params, int(cfg["eval_seed"]), int(cfg["n_displacements"]))
    if cfg["impulse"] is not None:
        # settle first, then kick one point of the (nearly) stabilized rope
        T = int(round(float(cfg["settle"]) / h))
        P, V, _ = simulate_policy(weights, states, [params], T, dt=float(cfg["dt"]),
                                  substeps=int(round(h / float(cfg["dt"]))), bound=bound)
        idx = int(cfg["impulse_point"]) % params.n_points
        states = [inject_disturbance(RopeState(P[k, -1], V[k, -1]), _floats(cfg["impulse"]), idx, params)
                  for k in range(len(states))]
    rep = evaluate_stabilization(weights, states, cells, float(cfg["duration"]), period=h,
                                 dt=float(cfg["dt"]), bound=bound, fraction=float(cfg["band"]))
    nominal = len(cells) // 2
    t = np.arange(rep.energy.shape[-1]) * h
    ratio = rep.energy / rep.energy[..., :1]
    cols = {"t": t, "mean_ratio": ratio.reshape(-1, len(t)).mean(axis=0)}
    for k in range(len(states)):
        cols[f"energy_{k}"] = rep.energy[nominal, k]
    save_columns(out / "energy_vs_time.csv", cols)
    tip = {"t": t}
    for k in range(len(states)):
        tip[f"x_{k}"], tip[f"z_{k}"] = rep.tips[nominal, k, :, 0], rep.tips[nominal, k, :, 2]
    save_columns(out / "tip_xz.csv", tip)
    first = rep.times[nominal, 0]
    reached = rep.times[~np.isnan(rep.times)]
    return {"policy": "passive" if weights is None else "trained", "cells": len(cells),
            "episodes": rep.times.size, "stabilization_time": None if np.isnan(first) else first,
            "stabilization_time_mean": float(reached.mean()) if reached.size else None,
            "stabilization_time_max": float(reached.max()) if reached.size == rep.times.size else None,
            "stabilized_fraction": float(reached.size / rep.times.size),
            "success_fraction": rep.success_fraction(float(cfg["success_time"])),
            "success_time": float(cfg["success_time"]), "final_energy_ratio_max": float(ratio[..., -1].max()),
            "disturbance": cfg["impulse"] is not None}


def _run_eval_track(cfg, base, out):
    from .controller import TRACKING
    from .errors import KindMismatch
    from .io import save_columns

    params = _model(cfg, base)
    weights, meta = _load_policy(cfg, base)
    if meta and meta.get("kind") != TRACKING:
        raise KindMismatch(f"policy was trained for {meta.get('kind')}")
    bound = float(meta.get("bound", cfg["bound"]))
    target = make_target(str(cfg["shape"]), float(cfg["duration"]), float(cfg["h"]),
                         center=(0.0, 0.0, float(cfg["center_z"])))
    cells = _grid(cfg, params)
    nominal = len(cells) // 2
    gains, _ = tune_pid(params, target, _floats(cfg["pid_kp"]), _floats(cfg["pid_kd"]),
                        _floats(cfg["pid_ki"]), bound, float(cfg["dt"]))
    pid_err, pid_tip = evaluate_pid(gains, cells, target, float(cfg["dt"]))
    g = target.samples[1:]
    cols = {"t": np.arange(1, len(target.samples)) * target.period,
            "target_x": g[:, 0], "target_y": g[:, 1], "target_z": g[:, 2],
            "pid_x": pid_tip[nominal, :, 0], "pid_y": pid_tip[nominal, :, 1], "pid_z": pid_tip[nominal, :, 2]}
    summary = {"shape": target.kind, "duration": target.duration, "max_speed": target.max_speed,
               "cells": len(cells), "pid_kp": gains.kp, "pid_kd": gains.kd, "pid_ki": gains.ki,
               "pid_error_mean": float(pid_err.mean())}
    if weights is not None:
        err, tip = evaluate_tracking(weights, cells, target, bound=bound, dt=float(cfg["dt"]))
        cols.update(policy_x=tip[nominal, :, 0], policy_y=tip[nominal, :, 1], policy_z=tip[nominal, :, 2])
        summary.update(tracking_error_mean=float(err.mean()), tracking_error_nominal=float(err[nominal]),
                       tracking_error_max=float(err.max()), error_ratio=float(err.mean() / pid_err.mean()))
    save_columns(out / "tracked_vs_target.csv", cols)
    return summary


def _run_split(cfg, base, out):
    from .split import equalize_splits, estimate_node_velocities, load_skeleton, save_splits, split_rope
    from .errors import EmptyInput
    from .io import save_columns

    folder = _path(cfg, "frames", base)
    files = sorted(p for p in folder.iterdir() if p.is_file() and p.suffix in (".txt", ".csv"))
    if not files:
        raise EmptyInput(f"no skeleton files in {folder}")
    frames, early = [], 0
    for k, f in enumerate(files):
        t, pts = load_skeleton(f)
        n = int(cfg["n_nodes"])
        fine = split_rope(pts, float(cfg["d_min"]) / int(cfg["factor"]), str(cfg["mode"]))
        res = equalize_splits(fine, n) if n > 1 else fine
        early += bool(res.early_termination)
        frames.append((float(k) if t is None else t, res))
    save_splits(out / "splits.csv", frames)
    spacings = np.concatenate([r.spacings for _, r in frames if len(r.points) > 1] or [np.zeros(0)])
    summary = {"frames": len(frames), "early_terminations": early,
               "nodes_min": min(len(r.points) for _, r in frames),
               "spacing_min": float(spacings.min()) if spacings.size else None,
               "spacing_mean": float(spacings.mean()) if spacings.size else None}
    if len(frames) > 1 and len({len(r.points) for _, r in frames}) == 1:
        vel = estimate_node_velocities(frames, int(cfg["velocity_window"]))
        cols = {"t": [t for t, _ in frames]}
        for i in range(vel.shape[1]):
            cols[f"vx_{i}"], cols[f"vy_{i}"] = vel[:, i, 0], vel[:, i, 1]
        save_columns(out / "node_velocities.csv", cols)
    return summary


def random_states(params: RopeParams, count: int, seed: int, max_tilt: float = 2.5, bend: float = 0.4,
                  speed: float = 0.5) -> list[RopeState]:
    """Tilted, randomly bent ropes with smooth random point velocities (held end at rest)."""
    rng = np.random.default_rng(seed)
    n = params.n_points
    out = []
    for _ in range(count):
        tilt, az = rng.uniform(0, max_tilt), rng.uniform(0, 2 * np.pi)
        d = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), -np.cos(tilt)])
        pts = [np.zeros(3)]
        for length in np.asarray(params.rest_lengths):
            d = d + rng.normal(0, bend, 3)
            d /= np.linalg.norm(d)
            pts.append(pts[-1] + length * d)
        v = np.cumsum(rng.normal(0, speed, (n, 3)), axis=0) / np.sqrt(np.arange(1, n + 1))[:, None]
        v[0] = 0.0
        out.append(RopeState(np.array(pts), v))
    return out


def find_adversarial(weights, params: RopeParams, count: int, *, candidates: int = 200, seed: int = 0,
                     horizon: int = 300, window: int = 100, period: float = 0.01, dt: float = 1e-3,
                     bound: float = 1.0, **state_kw):
    """Worst-case start states for a stabilization policy.

    Candidates from :func:`random_states` are ranked by the fraction of their
    offset energy left after ``horizon`` steps; the highest-ranked ones whose
    run raises an OOD event are returned with those events.
    """
    from .controller import OodThresholds, monitor, simulate_policy
    from .rope import offset_energy

    pool = random_states(params, candidates, seed, **state_kw)
    P, V, _ = simulate_policy(weights, pool, [params], horizon, dt=dt, substeps=int(round(period / dt)),
                              bound=bound)
    e = energy_series(P, V, [params] * len(pool), pool)
    order = np.argsort(-(e[:, -1] / e[:, 0]), kind="stable")
    found = []
    for k in order:
        th = OodThresholds.for_energy(offset_energy(pool[k], params), window=window, period=period)
        ev = monitor(weights, pool[k], params, horizon, th, dt=dt, substeps=int(round(period / dt)), bound=bound)
        if ev is not None:
            found.append((pool[k], ev))
            if len(found) == count:
                break
    return found


def _run_dagger(cfg, base, out):
    from .controller import STABILIZATION, TaskSpec, TrainingSet, batch_loss, dagger_update, train_run
    from .errors import ConfigError
    from .io import save_columns

    params = _model(cfg, base)
    weights, meta = _load_policy(cfg, base)
    if weights is None:
        raise ConfigError("dagger-refine needs a trained policy")
    cfg = {**cfg, "kind": STABILIZATION, "bound": meta.get("bound", cfg["bound"])}
    tcfg = _train_config(cfg)
    found = find_adversarial(weights, params, int(cfg["n_adversarial"]), candidates=int(cfg["candidates"]),
                             seed=int(cfg["seed"]) + 7, horizon=tcfg.horizon, window=int(cfg["window"]),
                             period=float(cfg["h"]), dt=tcfg.dt, bound=tcfg.bound)
    if not found:
        raise ConfigError("no candidate state triggered the OOD monitor")
    adv = [s for s, _ in found]
    events = [ev for _, ev in found]
    ts = TrainingSet(adv, [TaskSpec()] * len(adv))
    idx = list(range(len(adv)))
    before = batch_loss(weights, ts, idx, [params] * len(adv), tcfg)
    base_states = _stab_states(cfg, params, int(cfg["seed"]))
    pool = dagger_update(TrainingSet(base_states, [TaskSpec()] * len(base_states)), events,
                         float(cfg["boost"]))
    # Gradients of the full-horizon loss from flagged states are close to chaotic
    # (their sign flips under the randomization noise); refine on a shorter window.
    refine = replace(tcfg, horizon=min(int(cfg["refine_horizon"]), tcfg.horizon))
    res = train_run(pool, None, params, refine, weights=weights)
    after = batch_loss(res.weights, ts, idx, [params] * len(adv), tcfg)
    _save_policy(res.weights, out, {"kind": STABILIZATION, "bound": tcfg.bound, "n_points": params.n_points})
    it, loss = zip(*res.curve)
    save_columns(out / "training_curve.csv", {"iteration": it, "loss": loss})
    return {"adversarial_states": len(adv), "ood_events": len(events),
            "triggers": ", ".join(sorted({ev.trigger for ev in events})),
            "loss_before": before, "loss_after": after,
            "loss_reduction": 1.0 - after / before if before > 0 else None,
            "pool_size": len(pool.states), "boost": float(cfg["boost"])}


_RUNNERS = {"simulate": _run_simulate, "identify": _run_identify, "train": _run_train,
            "eval-stabilize": _run_eval_stabilize, "eval-track": _run_eval_track, "split": _run_split,
            "dagger-refine": _run_dagger}


def run_experiment(command: str, config: dict, out_dir=".", *, seed: int | None = None,
                   base_dir=None, stderr=None) -> int:
    """Run one subcommand; returns 0 or writes ``error=<code>: <message>`` and returns 1.

    Outputs land in ``out_dir`` next to a ``summary.txt`` of sorted ``key=value``
    lines and the fully resolved ``config_used.txt``.  Relative paths in the
    config resolve against ``base_dir`` (the config file's folder).
    """
    import sys

    from .io import format_summary, write_summary

    err = sys.stderr if stderr is None else stderr
    try:
        cfg = resolve_config(command, dict(config), seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        base = Path(base_dir) if base_dir is not None else Path(".")
        summary = _RUNNERS[command](cfg, base, out)
        (out / "config_used.txt").write_text(format_summary(cfg))
        write_summary(out / "summary.txt", {"command": command, "seed": cfg["seed"], **summary})
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        code = getattr(exc, "code", None) or (
            "missing_file" if isinstance(exc, FileNotFoundError)
            else "invalid_value" if isinstance(exc, (ValueError, KeyError)) else "error")
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error={code}: {msg}", file=err)
        return 1
