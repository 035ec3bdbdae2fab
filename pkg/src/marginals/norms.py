"""Weak-l2 and lp quasi-norms, l2 -> lp and l2 -> l(2,inf) operator norms,
subset-sum norms and the order-statistic checks built on them."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from .dist import ModelParams, SymmetricPareto, as_rows
from .rng import StreamLike, as_generator
from .sphere import (SolverConfig, best_index, normalize_rows, random_directions,
                     sphere_ascent, sphere_net)


def nonincreasing_rearrangement(v) -> np.ndarray:
    a = np.abs(np.asarray(v, dtype=float).ravel())
    return -np.sort(-a)


def weak_l2_norm(v) -> float:
    """max_k sqrt(k) * v*_k, with v* the non-increasing rearrangement of |v|."""
    s = nonincreasing_rearrangement(v)
    if s.size == 0:
        return 0.0
    return float(np.max(np.sqrt(np.arange(1, s.size + 1)) * s))


def _weak_l2_rows(U: np.ndarray):
    """Weak-l2 norm of every column of U, with the active k and its index."""
    N = U.shape[0]
    A = np.abs(U)
    order = np.argsort(-A, axis=0, kind="stable")
    S = np.take_along_axis(A, order, axis=0)
    w = np.sqrt(np.arange(1, N + 1))[:, None] * S
    k = np.argmax(w, axis=0)       # first maximiser, i.e. the smallest active k
    cols = np.arange(U.shape[1])
    return w[k, cols], k, order[k, cols]


def lp_norm(v, p: float) -> float:
    a = np.abs(np.asarray(v, dtype=float).ravel())
    if a.size == 0:
        return 0.0
    m = a.max()
    if m == 0:
        return 0.0
    return float(m * np.sum((a / m) ** p) ** (1.0 / p))


def weak_to_lp_constant(p: float) -> float:
    """zeta(p/2)^(1/p): ||v||_p <= this * ||v||_(2,inf) for p > 2.

    Summing (v*_k)^p <= M^p k^(-p/2) over k gives M^p zeta(p/2).
    """
    if not p > 2:
        raise ValueError("need p > 2")
    return float(special.zeta(p / 2.0, 1.0) ** (1.0 / p))


def c_p(p: float) -> float:
    """Lower sandwich constant: c_p ||v||_p <= ||v||_(2,inf)."""
    return 1.0 / weak_to_lp_constant(p)


@dataclass
class OpNormEstimate:
    value: float
    witness_x: np.ndarray
    solver_stats: tuple
    oracle_value: Optional[float] = None
    oracle_mesh: Optional[float] = None
    upper_bound: Optional[float] = None
    sandwich: Optional[tuple] = None

    def to_dict(self) -> dict:
        return {"value": self.value, "witness_x": [float(c) for c in self.witness_x],
                "solver_stats": list(self.solver_stats), "oracle_value": self.oracle_value,
                "oracle_mesh": self.oracle_mesh, "upper_bound": self.upper_bound,
                "sandwich": None if self.sandwich is None else list(self.sandwich)}


def _candidate_starts(A: np.ndarray, cfg: SolverConfig, rng) -> tuple[np.ndarray, list]:
    N, n = A.shape
    rows = A
    if N > cfg.row_starts:
        keep = np.argsort(-np.linalg.norm(A, axis=1), kind="stable")[: cfg.row_starts]
        rows = A[np.sort(keep)]
    R = normalize_rows(rows)
    parts, labels = [R], ["row"] * len(R)
    parts.append(np.eye(n))
    labels += ["basis"] * n
    if np.any(A):
        _, _, vt = np.linalg.svd(A, full_matrices=False)
        parts.append(vt[:1])
        labels.append("singular")
    parts.append(random_directions(rng, cfg.starts, n))
    labels += ["random"] * cfg.starts
    return np.vstack(parts), labels


def _screen(vals: np.ndarray, labels: list, keep: int) -> np.ndarray:
    """Indices of the best ``keep`` candidates, always retaining a few random starts."""
    order = np.argsort(-vals, kind="stable")
    chosen = list(order[:keep])
    randoms = [i for i in order if labels[i] == "random" and i not in chosen]
    chosen += randoms[: max(0, 8 - sum(labels[i] == "random" for i in chosen))]
    return np.array(sorted(set(int(i) for i in chosen)))


def _lp_power(A: np.ndarray, X: np.ndarray, p: float, cfg: SolverConfig):
    """Fixed-point ascent x <- A^T(sign(Ax)|Ax|^(p-1)) / norm for max ||Ax||_p^p.

    The objective is convex, so moving to the normalized gradient never
    decreases it.
    """
    X = X.copy()
    active = np.ones(len(X), dtype=bool)
    iters = 0
    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters += idx.size
        U = A @ X[idx].T
        G = (A.T @ (np.sign(U) * np.abs(U) ** (p - 1))).T
        gn = np.linalg.norm(G, axis=1)
        zero = gn == 0
        Y = X[idx].copy()
        Y[~zero] = G[~zero] / gn[~zero, None]
        moved = np.linalg.norm(Y - X[idx], axis=1)
        X[idx] = Y
        active[idx[(moved <= cfg.grad_tol) | zero]] = False
    return X, iters, int((~active).sum())


def opnorm_l2_lp(A, p: float, cfg: SolverConfig = SolverConfig(),
                 stream: StreamLike = 0) -> OpNormEstimate:
    """Certified lower bound on max_{||x||_2=1} ||Ax||_p."""
    if not p > 2:
        raise ValueError("opnorm_l2_lp needs p > 2")
    A = as_rows(A)
    N, n = A.shape
    if not np.any(A):
        e = np.zeros(n)
        e[0] = 1.0
        return OpNormEstimate(0.0, e, (0, 0, 0), upper_bound=0.0)
    rng = as_generator(stream)
    C, labels = _candidate_starts(A, cfg, rng)
    screen = np.sum(np.abs(A @ C.T) ** p, axis=0)
    pick = _screen(screen, labels, cfg.ascent_starts)
    X, iters, conv = _lp_power(A, C[pick], p, cfg)
    vals = np.array([lp_norm(A @ x, p) for x in X])
    i = best_index(vals, X)
    w = X[i]
    value = lp_norm(A @ w, p)
    est = OpNormEstimate(value, w, (len(pick), iters, conv))
    if n <= cfg.net_dim_cap:
        P, mesh = sphere_net(n, cfg.net_mesh, cfg.net_max_points)
        net = float(np.max(np.sum(np.abs(A @ P.T) ** p, axis=0)) ** (1.0 / p))
        est.oracle_value, est.oracle_mesh = net, mesh
        # ||A|| <= net + mesh ||A|| for a norm, hence ||A|| <= net / (1 - mesh)
        est.upper_bound = net / (1.0 - mesh)
    return est


def _weak_objective(A: np.ndarray):
    def fun(X):
        U = A @ X.T
        w, k, idx = _weak_l2_rows(U)
        cols = np.arange(X.shape[0])
        s = np.sign(U[idx, cols])
        G = (np.sqrt(k + 1) * s)[:, None] * A[idx]
        return w, G
    return fun


def opnorm_l2_l2inf(A, cfg: SolverConfig = SolverConfig(), stream: StreamLike = 0,
                    sandwich_p: float = 4.0) -> OpNormEstimate:
    """Certified lower bound on max_{||x||_2=1} ||Ax||_(2,inf).

    Ascent uses the subgradient of the active term sqrt(k) |<a_i, x>|, where i
    is the row holding the k-th largest coefficient. The sandwich reports
    c_p times the l2 -> lp estimate (a lower bound) and the spectral norm
    (an upper bound).
    """
    A = as_rows(A)
    N, n = A.shape
    if not np.any(A):
        e = np.zeros(n)
        e[0] = 1.0
        return OpNormEstimate(0.0, e, (0, 0, 0), upper_bound=0.0, sandwich=(0.0, 0.0))
    rng = as_generator(stream)
    lp = opnorm_l2_lp(A, sandwich_p, cfg, rng)
    C, labels = _candidate_starts(A, cfg, rng)
    C = np.vstack([C, lp.witness_x[None, :]])
    labels = labels + ["lp_witness"]
    fun = _weak_objective(A)
    screen, _ = fun(C)
    pick = _screen(screen, labels, cfg.ascent_starts)
    X, vals, stats = sphere_ascent(fun, C[pick], cfg, [labels[i] for i in pick])
    i = best_index(vals, X)
    w = X[i]
    value = weak_l2_norm(A @ w)
    spectral = float(np.linalg.norm(A, 2))
    est = OpNormEstimate(value, w, stats.as_tuple(),
                         sandwich=(c_p(sandwich_p) * lp.value, spectral))
    est.upper_bound = spectral
    if n <= cfg.net_dim_cap:
        P, mesh = sphere_net(n, cfg.net_mesh, cfg.net_max_points)
        net = float(np.max(_weak_l2_rows(A @ P.T)[0]))
        est.oracle_value, est.oracle_mesh = net, mesh
        # sqrt(k)(u+v)*_k <= sqrt(2)(||u||_(2,inf) + ||v||_2): at least k/2 of the
        # top-k entries of u+v have |v_i| <= sqrt(2/k)||v||_2
        est.upper_bound = min(spectral, math.sqrt(2) * (net + mesh * spectral))
    return est


def projected_subset_norm(A, s: int, mode: str = "auto",
                          exact_limit: int = 1_000_000) -> tuple[float, tuple]:
    """max over |I| = s of ||sum_{i in I} X_i||_2, exactly or greedily."""
    A = as_rows(A)
    N = A.shape[0]
    if not 1 <= s <= N:
        raise ValueError(f"subset size s={s} outside 1..{N}")
    if mode == "auto":
        mode = "exact" if math.comb(N, s) <= exact_limit else "greedy"
    if mode == "exact":
        if math.comb(N, s) > exact_limit:
            raise ValueError(f"exact mode needs binomial(N, s) <= {exact_limit}")
        return _subset_exact(A, s)
    if mode == "greedy":
        return _subset_greedy(A, s)
    raise ValueError(f"unknown mode {mode!r}")


def _subset_exact(A: np.ndarray, s: int):
    N = A.shape[0]
    best, best_I = -1.0, ()
    combos = itertools.combinations(range(N), s)
    while True:
        block = np.array(list(itertools.islice(combos, 50_000)), dtype=np.intp)
        if block.size == 0:
            break
        sums = A[block].sum(axis=1)
        nrm = np.linalg.norm(sums, axis=1)
        j = int(np.argmax(nrm))
        if nrm[j] > best:
            best, best_I = float(nrm[j]), tuple(int(i) for i in block[j])
    return best, best_I


def _subset_greedy(A: np.ndarray, s: int):
    N, n = A.shape
    chosen = np.zeros(N, dtype=bool)
    total = np.zeros(n)
    for _ in range(s):
        cand = np.linalg.norm(total[None, :] + A, axis=1)
        cand[chosen] = -np.inf
        j = int(np.argmax(cand))
        chosen[j] = True
        total += A[j]
    return float(np.linalg.norm(total)), tuple(int(i) for i in np.flatnonzero(chosen))


def geometric_grid(N: int) -> list[int]:
    grid, s = [], 1
    while s < N:
        grid.append(s)
        s *= 2
    grid.append(N)
    return grid


@dataclass
class NormTheoremReport:
    rows: list = field(default_factory=list)   # (s, max_norm, envelope, ratio, exact_flag)
    min_feasible_C: float = 0.0
    t: float = 1.0
    q: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "max_norm", "envelope", "ratio", "exact_flag"])
            for s, m, e, r, x in self.rows:
                w.writerow([s, repr(m), repr(e), repr(r), int(x)])

    def summary_json(self) -> str:
        return json.dumps({"min_feasible_C": self.min_feasible_C, "t": self.t, "q": self.q,
                           "cardinalities": [r[0] for r in self.rows]}, indent=2)


def norm_envelope(n: int, N: int, s: int, q: float, t: float) -> float:
    return math.sqrt(n * s) + t * s * (N / s) ** (2.0 / q)


def check_norm_theorem(A, params: ModelParams, t: float, mode: str = "auto",
                       grid: Optional[list] = None) -> NormTheoremReport:
    """Subset-sum norms against sqrt(n s) + t s (N/s)^(2/q) on a geometric grid of s."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if not params.q > 4:
        raise ValueError("q must exceed 4")
    A = as_rows(A)
    N, n = A.shape
    rep = NormTheoremReport(t=t, q=params.q)
    for s in grid or geometric_grid(N):
        m = mode
        if m == "auto":
            m = "exact" if math.comb(N, s) <= 1_000_000 else "greedy"
        val, _ = projected_subset_norm(A, s, m)
        env = norm_envelope(n, N, s, params.q, t)
        rep.rows.append((s, val, env, val / env, m == "exact"))
    rep.min_feasible_C = max(r[3] for r in rep.rows)
    return rep


def gram_offdiag_table(A, params: ModelParams, t: float) -> np.ndarray:
    """ratio[k, s-1] = max over |E| = s of
    (1/s) sum_{i in E, i != k} <X_i, X_k>^2 / (t^2 K^2 L^2 (N/s)^(4/q) n).

    For fixed k and s <= N-1 the worst E is the top-s of the squared
    off-diagonal inner products; an E containing k itself only loses a term.
    For s = N the set is everything.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    A = as_rows(A)
    N, n = A.shape
    G2 = (A @ A.T) ** 2
    np.fill_diagonal(G2, -np.inf)
    top = -np.sort(-G2, axis=1)[:, : N - 1]
    top = np.where(np.isfinite(top), top, 0.0)
    s = np.arange(1, N + 1)
    sums = np.concatenate([np.cumsum(top, axis=1), np.cumsum(top, axis=1)[:, -1:]], axis=1) \
        if N > 1 else np.zeros((N, 1))
    lhs = sums / s[None, :]
    rhs = t * t * params.K ** 2 * params.L ** 2 * (N / s) ** (4.0 / params.q) * n
    return lhs / rhs[None, :]


def gram_offdiag_check(A, params: ModelParams, t: float):
    """Smallest C with (1/|E|) sum_{i in E, i != k} <X_i, X_k>^2 <= C t^2 K^2 L^2 (N/|E|)^(4/q) n
    for every subset E and every k. Returns (C, (k, s))."""
    ratio = gram_offdiag_table(A, params, t)
    k, j = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    return float(ratio[k, j]), (int(k), int(j + 1))


def rearrangement_bound_check(Z, B: float, q: float, t: float) -> bool:
    """True iff Z*_i <= t B (N/i)^(2/q) for i = 1..N."""
    if not (B > 0 and q > 0 and t >= 1):
        raise ValueError("need B > 0, q > 0, t >= 1")
    z = nonincreasing_rearrangement(Z)
    N = z.size
    if N == 0:
        return True
    i = np.arange(1, N + 1)
    return bool(np.all(z <= t * B * (N / i) ** (2.0 / q)))


@dataclass(frozen=True)
class ScalarLaw:
    """A non-negative scalar law given by a sampler and its analytic q-th moment."""

    sampler: Callable[[np.random.Generator, tuple], np.ndarray]
    moment: Callable[[float], float]

    @classmethod
    def degenerate(cls, value: float) -> "ScalarLaw":
        return cls(lambda rng, size: np.full(size, float(value)), lambda q: float(value) ** q)

    @classmethod
    def abs_symmetric_pareto(cls, alpha: float) -> "ScalarLaw":
        law = SymmetricPareto(alpha)
        return cls(lambda rng, size: np.abs(law.sample(rng, size)), law.abs_moment)


def _failures(law: ScalarLaw, N: int, q: float, ts, trials: int, rng, chunk: int = 20_000):
    B = law.moment(q) ** (1.0 / q)
    i = np.arange(1, N + 1)
    env = B * (N / i) ** (2.0 / q)
    fails = np.zeros(len(ts), dtype=np.int64)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        Z = -np.sort(-law.sampler(rng, (m, N)), axis=1)
        for j, t in enumerate(ts):
            fails[j] += int(np.sum(np.any(Z > t * env, axis=1)))
        done += m
    return fails, B


def rearrangement_failure_rate(law: ScalarLaw, N: int, q: float, t: float, trials: int,
                               stream: StreamLike) -> tuple[float, float]:
    """Monte Carlo frequency of rearrangement_bound_check failing, and t^-q / N."""
    rng = as_generator(stream)
    fails, _ = _failures(law, N, q, [t], trials, rng)
    return float(fails[0] / trials), float(t ** (-q) / N)


def rearrangement_failure_rates(law: ScalarLaw, N: int, q: float, ts, trials: int,
                                stream: StreamLike) -> np.ndarray:
    """Failure rates for several t on the same draws (common random numbers)."""
    rng = as_generator(stream)
    fails, _ = _failures(law, N, q, list(ts), trials, rng)
    return fails / trials
