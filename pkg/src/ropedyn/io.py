"""Plain-text and binary file formats.

* parameters: ``name = v1, v2, ...`` one array per line, floats in shortest
  round-trip repr so a write/read cycle is exact;
* trajectories: comma-delimited text with header ``t, p0x, p0y, p0z, ..., vNz``;
* policy weights: little-endian binary, ``uint32`` layer count ``L``, ``L+1``
  ``uint32`` widths, then all weights and biases as ``float64`` in layer order
  (``W1`` row-major, ``b1``, ``W2``, ...);
* configs: flat ``key = value`` text, ``#`` starts a comment.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, HiddenParameterAccess, NonMonotonicTime
from .rope import RopeParams, RopeState

HIDDEN_MARKER = ".hidden"


def is_hidden(path) -> bool:
    return HIDDEN_MARKER in Path(path).name


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# parameters


def format_params(params: RopeParams) -> str:
    p = params.as_numpy()
    lines = [f"n_links = {p.n_links}", f"torsion_fade = {_fmt(p.torsion_fade)}"]
    for name in RopeParams.ARRAY_FIELDS:
        vals = np.atleast_1d(getattr(p, name))
        lines.append(f"{name} = " + ", ".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> RopeParams:
    kv = parse_kv(text)
    vals = {}
    for name in RopeParams.ARRAY_FIELDS:
        if name not in kv:
            raise DimensionMismatch(f"parameter file is missing '{name}'")
        vals[name] = np.array([float(s) for s in str(kv[name]).split(",") if s.strip()])
    vals["air_drag"] = np.float64(vals["air_drag"][0])
    params = RopeParams(**vals, torsion_fade=float(kv.get("torsion_fade", 0.05)))
    if "n_links" in kv and int(kv["n_links"]) != params.n_links:
        raise DimensionMismatch("n_links disagrees with rest_lengths")
    return params.validate()


def save_params(path, params: RopeParams, *, allow_hidden: bool = False) -> None:
    if is_hidden(path) and not allow_hidden:
        raise HiddenParameterAccess(f"refusing to write hidden parameter file {path}")
    Path(path).write_text(format_params(params))


def load_params(path) -> RopeParams:
    """Read a parameter file; ground-truth files of the reference rope are off limits."""
    if is_hidden(path) or (Path(path).is_symlink() and is_hidden(os.path.realpath(path))):
        raise HiddenParameterAccess(f"{path} holds hidden reference parameters")
    return parse_params(Path(path).read_text())


# ---------------------------------------------------------------------------
# trajectories


def trajectory_header(n_points: int) -> list[str]:
    cols = ["t"]
    for kind in ("p", "v"):
        for i in range(n_points):
            cols += [f"{kind}{i}{a}" for a in "xyz"]
    return cols


def save_trajectory(path, times, positions, velocities=None) -> None:
    P = np.asarray(positions, dtype=np.float64)
    V = np.zeros_like(P) if velocities is None else np.asarray(velocities, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if P.shape != V.shape or P.ndim != 3 or len(t) != len(P):
        raise DimensionMismatch("times, positions and velocities disagree")
    rows = np.column_stack([t, P.reshape(len(P), -1), V.reshape(len(V), -1)])
    header = ", ".join(trajectory_header(P.shape[1]))
    np.savetxt(path, rows, delimiter=", ", header=header, comments="", fmt="%.17g")


def load_trajectory(path):
    """Returns ``(times, positions, velocities)`` with shapes (T,), (T, N+1, 3), (T, N+1, 3)."""
    with open(path) as fh:
        header = [c.strip() for c in fh.readline().split(",")]
    if header[0] != "t" or (len(header) - 1) % 6:
        raise DimensionMismatch(f"{path}: not a trajectory file")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = (len(header) - 1) // 6
    t = data[:, 0]
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime(f"{path}: timestamps are not increasing")
    P = data[:, 1:1 + 3 * n].reshape(-1, n, 3)
    V = data[:, 1 + 3 * n:].reshape(-1, n, 3)
    return t, P, V


def states_of(P, V) -> list[RopeState]:
    return [RopeState(p, v) for p, v in zip(P, V)]


# ---------------------------------------------------------------------------
# policy weights


def save_weights(path, layers) -> None:
    """``layers`` is a sequence of ``(W, b)`` with ``W`` of shape (in, out)."""
    widths = [layers[0][0].shape[0]] + [W.shape[1] for W, _ in layers]
    head = np.array([len(layers), *widths], dtype="<u4")
    body = np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])
    with open(path, "wb") as fh:
        fh.write(head.tobytes())
        fh.write(body.astype("<f8").tobytes())


def load_weights(path):
    raw = Path(path).read_bytes()
    n_layers = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    widths = np.frombuffer(raw[4:4 * (n_layers + 2)], dtype="<u4").astype(int)
    flat = np.frombuffer(raw[4 * (n_layers + 2):], dtype="<f8")
    layers, k = [], 0
    for a, b in zip(widths[:-1], widths[1:]):
        W = flat[k:k + a * b].reshape(a, b)
        k += a * b
        layers.append((W.copy(), flat[k:k + b].copy()))
        k += b
    if k != flat.size:
        raise DimensionMismatch(f"{path}: {flat.size - k} trailing values")
    return layers


# ---------------------------------------------------------------------------
# flat key-value configs and summaries


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    return v


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v if "," in v else _coerce(v)
    return out


def load_config(path) -> dict:
    return parse_kv(Path(path).read_text())


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def format_summary(metrics: dict) -> str:
    """Sorted ``key=value`` lines, floats at 6 significant digits."""
    return "".join(f"{k}={format_value(metrics[k])}\n" for k in sorted(metrics))


def write_summary(path, metrics: dict) -> None:
    Path(path).write_text(format_summary(metrics))


def save_columns(path, columns: dict) -> None:
    """Plot data: one named column per key, comma-delimited."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=np.float64) for k in names])
    np.savetxt(path, data, delimiter=", ", header=", ".join(names), comments="", fmt="%.10g")
