"""Multi-start ascent on the unit sphere and finite nets used as low-dimension oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    starts: int = 16           # random starts
    max_iters: int = 300
    grad_tol: float = 1e-9     # on the tangential gradient, relative to the objective scale
    oracle_tol: float = 0.05   # absolute accuracy wanted from deviation values
    step0: float = 0.2         # initial geodesic step (radians)
    step_shrink: float = 0.5
    min_step: float = 1e-12
    ascent_starts: int = 24    # best screened candidates that are actually optimised
    row_starts: int = 512      # normalized rows screened when N is larger than this
    net_dim_cap: int = 4
    net_mesh: float = 0.05
    net_max_points: int = 400_000

    @classmethod
    def sweep_preset(cls, **kw) -> "SolverConfig":
        """Looser settings for Monte Carlo sweeps, where deviations are needed to ~1e-6."""
        base = dict(grad_tol=1e-5, min_step=1e-8, max_iters=200, ascent_starts=8,
                    row_starts=256)
        base.update(kw)
        return cls(**base)

    def __post_init__(self):
        if self.starts < 8:
            raise ValueError("SolverConfig.starts must be at least 8")
        if not 0 < self.net_mesh <= 0.5:
            raise ValueError("SolverConfig.net_mesh must lie in (0, 1/2]")
        if self.max_iters < 1 or self.ascent_starts < 1:
            raise ValueError("max_iters and ascent_starts must be positive")


@dataclass
class AscentStats:
    starts: int = 0
    iterations: int = 0
    converged: int = 0
    trace: list = field(default_factory=list)

    def as_tuple(self):
        return (self.starts, self.iterations, self.converged)


def normalize_rows(X: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(X, axis=1, keepdims=True)
    keep = nrm[:, 0] > 0
    return X[keep] / nrm[keep]


def random_directions(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    R = rng.standard_normal((k, n))
    return normalize_rows(R)


def sphere_ascent(fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
                  X0: np.ndarray, cfg: SolverConfig, labels=None):
    """Maximize a function on the unit sphere from each row of ``X0``.

    ``fun(X)`` returns values (k,) and Euclidean (sub)gradients (k, n) for a
    stack of unit vectors. Each start moves along the geodesic in the
    direction of its tangential gradient. The step length is a
    Barzilai-Borwein guess from the last accepted move; a step is kept only
    when it strictly improves the objective, otherwise it is halved.
    Returns final points, values and stats.
    """
    X = np.array(X0, dtype=float)
    k, n = X.shape
    vals, grads = fun(X)
    step = np.full(k, cfg.step0)
    active = np.ones(k, dtype=bool)
    iters = np.zeros(k, dtype=int)
    prev_x = np.full_like(X, np.nan)
    prev_gt = np.full_like(X, np.nan)
    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x, g = X[idx], grads[idx]
        gt = g - np.sum(g * x, axis=1, keepdims=True) * x
        gnorm = np.linalg.norm(gt, axis=1)
        scale = np.maximum(np.abs(vals[idx]), np.linalg.norm(g, axis=1))
        flat = gnorm <= cfg.grad_tol * np.maximum(scale, 1e-300)
        active[idx[flat]] = False
        keep = ~flat
        idx, x, gt, gnorm = idx[keep], x[keep], gt[keep], gnorm[keep]
        if idx.size == 0:
            break
        # Barzilai-Borwein: alpha = |s|^2 / |<s, y>|, geodesic angle = alpha |gt|
        sv = x - prev_x[idx]
        yv = gt - prev_gt[idx]
        sy = np.abs(np.sum(sv * yv, axis=1))
        ss = np.sum(sv * sv, axis=1)
        have = np.isfinite(sy) & (sy > 0)
        bb = np.where(have, ss / np.where(have, sy, 1.0) * gnorm, step[idx])
        th_now = np.clip(bb, cfg.min_step, math.pi / 4)
        iters[idx] += 1
        d = gt / gnorm[:, None]
        th = th_now[:, None]
        Y = np.cos(th) * x + np.sin(th) * d
        Y /= np.linalg.norm(Y, axis=1, keepdims=True)
        nv, ng = fun(Y)
        better = nv > vals[idx]
        ok = idx[better]
        prev_x[ok], prev_gt[ok] = x[better], gt[better]
        X[ok], vals[ok], grads[ok] = Y[better], nv[better], ng[better]
        step[ok] = th_now[better]
        bad = idx[~better]
        step[bad] = th_now[~better] * cfg.step_shrink
        prev_x[bad] = np.nan   # fall back to the halved step next time
        active[bad[step[bad] < cfg.min_step]] = False
    stats = AscentStats(starts=k, iterations=int(iters.sum()), converged=int((~active).sum()))
    labels = labels if labels is not None else ["start"] * k
    stats.trace = [(labels[i], float(vals[i]), int(iters[i]), bool(not active[i])) for i in range(k)]
    return X, vals, stats


def best_index(vals: np.ndarray, X: np.ndarray) -> int:
    """Index of the max value; ties go to the lexicographically largest witness."""
    top = np.max(vals)
    cand = np.flatnonzero(vals == top)
    if cand.size == 1:
        return int(cand[0])
    order = np.lexsort(X[cand].T[::-1])
    return int(cand[order[-1]])


def sphere_net(n: int, mesh: float, max_points: int = 400_000) -> tuple[np.ndarray, float]:
    """Points of the upper half of S^{n-1} (up to sign) within ``mesh`` of every direction.

    For n == 2 an angle grid is used. For n >= 3 the faces of the cube
    [-1, 1]^n are gridded with spacing 2*mesh/sqrt(n-1) and projected radially;
    a face point is at distance >= 1 from the origin, so projection does not
    increase the covering radius. If the grid would exceed ``max_points`` the
    mesh is coarsened and the mesh actually achieved is returned.
    """
    if n == 1:
        return np.ones((1, 1)), 0.0
    if n == 2:
        k = max(2, int(math.ceil(math.pi / (2 * mesh))))
        th = np.arange(k) * (math.pi / k)
        return np.column_stack([np.cos(th), np.sin(th)]), math.pi / (2 * k)
    while True:
        h = 2 * mesh / math.sqrt(n - 1)
        m = int(math.ceil(2 / h)) + 1
        count = n * m ** (n - 1)
        if count <= max_points:
            break
        mesh *= 1.25
    grid = np.linspace(-1.0, 1.0, m)
    actual = (2.0 / (m - 1)) * math.sqrt(n - 1) / 2
    pieces = []
    mesh_pts = np.stack(np.meshgrid(*([grid] * (n - 1)), indexing="ij"), -1).reshape(-1, n - 1)
    for j in range(n):
        # only the face x_j = +1: the objectives are even, so x and -x agree
        P = np.insert(mesh_pts, j, 1.0, axis=1)
        pieces.append(P)
    P = np.vstack(pieces)
    return P / np.linalg.norm(P, axis=1, keepdims=True), actual
