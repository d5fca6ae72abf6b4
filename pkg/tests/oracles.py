"""Slow, independent reference implementations used as test oracles.

None of these import the code paths they check.
"""
import math

import numpy as np


# -- geometry -----------------------------------------------------------------

def grid_canonical_theta(lh_xy, levels_step=1e-13, points=101, coarse=1e-2):
    """Coarse-to-fine grid search for the Z angle putting the left hip on y=0, x>=0.

    ``lh_xy``: (N, 2) horizontal left-hip coordinates. Starts from a ``coarse`` rad
    grid over [0, 2pi) and zooms in +-2 steps at a time until the step is below
    ``levels_step``. The objective has a single basin, so any coarse step well
    under pi/2 lands in it.
    """
    lh_xy = np.atleast_2d(np.asarray(lh_xy, dtype=np.float64))
    x, y = lh_xy[:, :1], lh_xy[:, 1:]

    def objective(th):
        c, s = np.cos(th), np.sin(th)
        ry = s * x + c * y
        rx = c * x - s * y
        return np.where(rx >= 0, np.abs(ry), np.inf)

    step = coarse
    grid = np.arange(0.0, 2 * math.pi, step)[None, :].repeat(len(lh_xy), 0)
    best = grid[np.arange(len(lh_xy)), np.argmin(objective(grid), axis=1)]
    while step > levels_step:
        lo = best - 2 * step
        new_step = 4 * step / (points - 1)
        grid = lo[:, None] + new_step * np.arange(points)[None, :]
        best = grid[np.arange(len(lh_xy)), np.argmin(objective(grid), axis=1)]
        step = new_step
    return best


def homogeneous_project(pose, azimuth, elevation, distance, mode, focal=None,
                        half_extent=1250.0, sensor_half=18.0):
    """Pinhole / orthographic projection through explicit 4x4 matrices."""
    eye = distance * np.array([math.cos(elevation) * math.cos(azimuth),
                               math.cos(elevation) * math.sin(azimuth),
                               math.sin(elevation)])
    target = np.zeros(3)
    world_up = np.array([0.0, 0.0, 1.0])
    z = target - eye
    z /= math.sqrt(z @ z)
    xa = np.cross(z, world_up)
    xa /= math.sqrt(xa @ xa)
    ya = np.cross(xa, z)
    rot = np.eye(4)
    rot[0, :3], rot[1, :3], rot[2, :3] = xa, ya, z
    trans = np.eye(4)
    trans[:3, 3] = -eye
    extrinsic = rot @ trans
    homo = np.hstack([np.asarray(pose, dtype=np.float64), np.ones((len(pose), 1))])
    cam = (extrinsic @ homo.T).T
    if mode == "orthographic":
        P = np.array([[1 / half_extent, 0, 0, 0], [0, 1 / half_extent, 0, 0], [0, 0, 0, 1]])
    else:
        k = focal / sensor_half
        P = np.array([[k, 0, 0, 0], [0, k, 0, 0], [0, 0, 1, 0]])
    img = (P @ cam.T).T
    return (img[:, :2] / img[:, 2:3]).ravel()


# -- metrics ------------------------------------------------------------------

def naive_mpjpe(p, q):
    total = 0.0
    for a, b in zip(p, q):
        total += math.sqrt(sum((ai - bi) ** 2 for ai, bi in zip(a, b)))
    return total / len(p)


def golden_section(f, lo, hi, tol=1e-12, max_iter=500):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# -- mining / loss ------------------------------------------------------------

def exhaustive_mining(D, beta):
    """Enumerate every (i, j) pair; returns lists j_min, k_min, d_min (None when absent)."""
    m = len(D)
    j_min, k_min, d_min = [], [], []
    for i in range(m):
        bj, bk = None, None
        for j in range(m):
            if j != i and D[i][j] > beta and (bj is None or D[i][j] < D[i][bj]):
                bj = j
        for k in range(m):
            if k != i and D[k][i] > beta and (bk is None or D[k][i] < D[bk][i]):
                bk = k
        cands = []
        if bj is not None:
            cands.append(D[i][bj])
        if bk is not None:
            cands.append(D[bk][i])
        j_min.append(bj)
        k_min.append(bk)
        d_min.append(min(cands) if cands else None)
    return j_min, k_min, d_min


def direct_contrastive(D, beta, alpha):
    """Loss and dL/dD straight from the averaged hinge formula over exhaustive mining."""
    m = len(D)
    j_min, k_min, d_min = exhaustive_mining(D, beta)
    loss = 0.0
    grad = [[0.0] * m for _ in range(m)]
    for i in range(m):
        loss += D[i][i]
        grad[i][i] += 1.0 / m
        if d_min[i] is None:
            continue
        if alpha - d_min[i] > 0:
            loss += alpha - d_min[i]
            if j_min[i] is not None and D[i][j_min[i]] == d_min[i]:
                grad[i][j_min[i]] -= 1.0 / m
            else:
                grad[k_min[i]][i] -= 1.0 / m
    return loss / m, np.array(grad)


# -- networks -----------------------------------------------------------------

def naive_forward(widths, activations, normalize, layers, x):
    """Loop-based MLP forward for a single input vector."""
    h = list(map(float, x))
    for (W, b), act in zip(layers, activations):
        out = []
        for o in range(len(b)):
            s = b[o]
            for i in range(len(h)):
                s += h[i] * W[i][o]
            out.append(max(s, 0.0) if act == "relu" else s)
        h = out
    if normalize:
        n = math.sqrt(sum(v * v for v in h))
        h = [v / n for v in h]
    return np.array(h)


def scalar_adam(grads, p0, lr=1e-3, b1=0.9, b2=0.99, eps=1e-8):
    p, m, v = p0, 0.0, 0.0
    traj = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        traj.append(p)
    return traj


def central_difference(f, x, h):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


# -- retrieval ----------------------------------------------------------------

def kabsch_pa(pred, gt):
    """PA-MPJPE for one pose pair via a textbook Kabsch + closed-form scale."""
    P = np.asarray(pred, dtype=np.float64)
    G = np.asarray(gt, dtype=np.float64)
    Pc, Gc = P - P.mean(0), G - G.mean(0)
    H = Pc.T @ Gc
    U, S, Vt = np.linalg.svd(H)
    sign = 1.0 if np.linalg.det(Vt.T @ U.T) > 0 else -1.0
    E = np.diag([1.0, 1.0, sign])
    R = Vt.T @ E @ U.T
    s = (S * np.diag(E)).sum() / (Pc ** 2).sum()
    aligned = s * Pc @ R.T + G.mean(0)
    return naive_mpjpe(aligned, G)


def sorted_retrieval(emb, subject, view, frame, q, K, cross_subject=False):
    """Full python sort of the candidate pool by (distance, subject, view, frame)."""
    keyed = []
    for i in range(len(emb)):
        if view[i] == view[q] or (cross_subject and subject[i] == subject[q]):
            continue
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(emb[i], emb[q])))
        keyed.append((d, subject[i], view[i], frame[i], i))
    keyed.sort()
    return [k[-1] for k in keyed[:K]]
