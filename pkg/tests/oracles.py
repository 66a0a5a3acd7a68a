"""Independent numpy reference implementations used as test oracles.

Nothing here imports the package's kernels: bending angles use arccos of the
clamped dot product, forces are taken from the closed-form cross-product
expressions written out term by term, and gradients come from central
differences.
"""

import numpy as np


def random_config(rng, n_links, min_bend=0.25, max_bend=2.6, speed=1.0):
    """Random rope with every bend angle in [min_bend, max_bend]."""
    dirs = [rng.normal(size=3)]
    dirs[0] /= np.linalg.norm(dirs[0])
    while len(dirs) < n_links:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ang = np.arccos(np.clip(d @ dirs[-1], -1, 1))
        if min_bend <= ang <= max_bend:
            dirs.append(d)
    lengths = rng.uniform(0.05, 0.2, size=n_links)
    pos = np.concatenate([np.zeros((1, 3)), np.cumsum(lengths[:, None] * np.array(dirs), axis=0)])
    pos += rng.normal(size=3)
    vel = speed * rng.normal(size=pos.shape)
    return pos, vel


def units(pos):
    lv = np.diff(pos, axis=0)
    lengths = np.linalg.norm(lv, axis=1)
    return lv / lengths[:, None], lengths


def bend_angles(pos):
    u, _ = units(pos)
    return np.arccos(np.clip(np.sum(u[:-1] * u[1:], axis=1), -1.0, 1.0))


def torsion_angles(pos, fade=0.0):
    """Signed dihedral angles and fade weights, straight from the definitions."""
    u, _ = units(pos)
    psis, ws = [], []
    for j in range(len(u) - 2):
        b1 = np.cross(u[j], u[j + 1])
        b2 = np.cross(u[j + 1], u[j + 2])
        s1, s2 = np.linalg.norm(b1), np.linalg.norm(b2)
        if s1 <= 1e-9 or s2 <= 1e-9:
            psis.append(0.0)
            ws.append(0.0)
            continue
        # angle between unoriented planes
        psis.append(np.arctan((np.cross(b1, b2) @ u[j + 1]) / (b1 @ b2)))
        if fade > 0:
            ws.append(s1**2 / (s1**2 + fade**2) * s2**2 / (s2**2 + fade**2))
        else:
            ws.append(1.0)
    return np.array(psis), np.array(ws)


def torsion_energy(pos, k_t, fade=0.0):
    psi, w = torsion_angles(pos, fade)
    return 0.5 * np.sum(k_t * w * psi**2)


def central_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at array x (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def bend_gradient_fd(pos, j, h=1e-6):
    """d(beta_j)/d(positions) by central differences, shape (N+1, 3)."""
    return central_grad(lambda p: bend_angles(p)[j], pos, h)


def bend_rates_fd(pos, vel, delta=1e-6):
    """beta-dot from advecting positions along the velocity field."""
    return (bend_angles(pos + delta * vel) - bend_angles(pos - delta * vel)) / (2 * delta)


def closed_form_bending_force(pos, k_b):
    """Four-term closed-form bending-spring force on every point.

    Indices follow the 1-based link / bend numbering of the model: link i joins
    points i-1 and i, bend i sits between links i and i+1.  Terms referring to
    bends or links that do not exist are dropped.
    """
    u0, l0 = units(pos)
    n = len(l0)
    u = {i + 1: u0[i] for i in range(n)}
    ln = {i + 1: l0[i] for i in range(n)}
    beta = {i + 1: b for i, b in enumerate(bend_angles(pos))}
    k = {i + 1: kk for i, kk in enumerate(k_b)}
    F = np.zeros_like(pos)
    for i in range(n + 1):
        f = np.zeros(3)
        if (i - 1) in beta:
            b = beta[i - 1]
            f += k[i - 1] * b / ln[i] * np.cross(u[i], np.cross(u[i - 1], u[i])) / np.sin(b)
        if i in beta:
            b = beta[i]
            f -= k[i] * b / ln[i + 1] * np.cross(u[i + 1], np.cross(u[i], u[i + 1])) / np.sin(b)
            f -= k[i] * b / ln[i] * np.cross(u[i], np.cross(u[i], u[i + 1])) / np.sin(b)
        if (i + 1) in beta:
            b = beta[i + 1]
            f += k[i + 1] * b / ln[i + 1] * np.cross(u[i + 1], np.cross(u[i + 1], u[i + 2])) / np.sin(b)
        F[i] = f
    return F


def closed_form_bend_rates(pos, vel):
    """beta-dot from the two-term closed form in link velocities."""
    u0, l0 = units(pos)
    out = []
    for j in range(len(l0) - 1):
        ui, uj = u0[j], u0[j + 1]
        b = np.arccos(np.clip(ui @ uj, -1, 1))
        c, s = np.cos(b), np.sin(b)
        out.append((vel[j + 1] - vel[j]) / l0[j] @ (ui * c - uj) / s
                   + (vel[j + 2] - vel[j + 1]) / l0[j + 1] @ (uj * c - ui) / s)
    return np.array(out)


def closed_form_bending_damping_force(pos, vel, c_b):
    """Four-term closed-form bending-damping force on every point."""
    u0, l0 = units(pos)
    n = len(l0)
    u = {i + 1: u0[i] for i in range(n)}
    ln = {i + 1: l0[i] for i in range(n)}
    beta = {i + 1: b for i, b in enumerate(bend_angles(pos))}
    rate = {i + 1: r for i, r in enumerate(closed_form_bend_rates(pos, vel))}
    c = {i + 1: cc for i, cc in enumerate(c_b)}
    F = np.zeros_like(pos)
    for i in range(n + 1):
        f = np.zeros(3)
        if (i - 1) in beta:
            b = beta[i - 1]
            f += c[i - 1] * rate[i - 1] / ln[i] * (u[i - 1] - u[i] * np.cos(b)) / np.sin(b)
        if i in beta:
            b = beta[i]
            f += c[i] * rate[i] / ln[i + 1] * (u[i + 1] * np.cos(b) - u[i]) / np.sin(b)
            f -= c[i] * rate[i] / ln[i] * (u[i] * np.cos(b) - u[i + 1]) / np.sin(b)
        if (i + 1) in beta:
            b = beta[i + 1]
            f += c[i + 1] * rate[i + 1] / ln[i + 1] * (u[i + 1] * np.cos(b) - u[i + 2]) / np.sin(b)
        F[i] = f
    return F


def bending_force_fd(pos, k_b, h=1e-6):
    """-sum_j k_j beta_j d(beta_j)/dp with the gradient by central differences."""
    beta = bend_angles(pos)
    F = np.zeros_like(pos)
    for j in range(len(beta)):
        F -= k_b[j] * beta[j] * bend_gradient_fd(pos, j, h)
    return F


def bending_damping_force_fd(pos, vel, c_b, h=1e-6):
    """-sum_j c_j beta-dot_j d(beta_j)/dp (virtual work), all by differences."""
    rate = bend_rates_fd(pos, vel)
    F = np.zeros_like(pos)
    for j in range(len(rate)):
        F -= c_b[j] * rate[j] * bend_gradient_fd(pos, j, h)
    return F


def torsion_force_fd(pos, k_t, fade=0.0, h=1e-6):
    return -central_grad(lambda p: torsion_energy(p, k_t, fade), pos, h)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- batched variants for the large acceptance sweeps -------------------------


def bend_angles_batch(P):
    """(B, n, 3) positions -> (B, n-2) bend angles."""
    lv = np.diff(P, axis=1)
    u = lv / np.linalg.norm(lv, axis=2, keepdims=True)
    return np.arccos(np.clip(np.sum(u[:, :-1] * u[:, 1:], axis=2), -1.0, 1.0))


def torsion_energy_batch(P, k_t, fade=0.0):
    """(B, n, 3) -> (B,) torsion energy, same definitions as torsion_angles."""
    lv = np.diff(P, axis=1)
    u = lv / np.linalg.norm(lv, axis=2, keepdims=True)
    b1 = np.cross(u[:, :-2], u[:, 1:-1])
    b2 = np.cross(u[:, 1:-1], u[:, 2:])
    psi = np.arctan(np.sum(np.cross(b1, b2) * u[:, 1:-1], axis=2) / np.sum(b1 * b2, axis=2))
    w = 1.0
    if fade > 0:
        s1, s2 = np.sum(b1 * b1, axis=2), np.sum(b2 * b2, axis=2)
        w = s1 / (s1 + fade**2) * s2 / (s2 + fade**2)
    return 0.5 * np.sum(k_t * w * psi**2, axis=1)


def central_jacobian(f_batch, x, h=1e-6):
    """Jacobian of a batched map by central differences: returns (k, *x.shape)."""
    x = np.asarray(x, dtype=np.float64)
    m = x.size
    eye = np.eye(m).reshape((m,) + x.shape) * h
    vals = f_batch(np.concatenate([x[None] + eye, x[None] - eye]))
    vals = vals.reshape(2 * m, -1)
    return ((vals[:m] - vals[m:]) / (2 * h)).T.reshape((-1,) + x.shape)


def richardson_derivative(f, h):
    """Scalar derivative at 0 from two central differences (error O(h^4)).

    A wider step keeps round-off small next to gradients far below the loss scale.
    """
    def central(k):
        return (f(k) - f(-k)) / (2 * k)
    return (4 * central(h / 2) - central(h)) / 3


def force_oracles(pos, vel, k_b, c_b, k_t, fade=0.0, h=1e-6):
    """Bending, bending-damping and torsion forces from virtual work, plus beta-dot."""
    J = central_jacobian(bend_angles_batch, pos, h)  # (n-2, n, 3)
    beta = bend_angles_batch(pos[None])[0]
    rate = (bend_angles_batch((pos + h * vel)[None]) - bend_angles_batch((pos - h * vel)[None]))[0] / (2 * h)
    f_bend = -np.einsum("j,jnk->nk", k_b * beta, J)
    f_damp = -np.einsum("j,jnk->nk", c_b * rate, J)
    f_tors = -central_jacobian(lambda P: torsion_energy_batch(P, k_t, fade), pos, h)[0]
    return f_bend, f_damp, f_tors, rate
