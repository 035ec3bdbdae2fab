"""Empirical marginal moments, the sup-over-sphere deviation, truncation and
the large-coefficient diagnostics."""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .dist import (CLOSED_FORM_KINDS, DistributionSpec, NoClosedFormError, SampleMatrix, Z99,
                   _check_unit, _draw, as_rows, exact_moment, exact_tail_moment)
from .norms import weak_l2_norm
from .rng import StreamLike, as_generator
from .sphere import (SolverConfig, best_index, normalize_rows, random_directions,
                     sphere_ascent, sphere_net)

__all__ = [
    "SolverConfig", "DeviationResult", "LargeCoeffDiag", "MissingOracleError",
    "OracleTooNoisyError",
    "ExactOracle", "SampleOracle", "attach_mc_oracle", "oracle_for",
    "empirical_moment", "deviation_sup", "truncated_estimate", "truncation_threshold",
    "large_coeff_diag", "deviation_decomposition", "choose_B", "probe_directions",
]


class MissingOracleError(LookupError):
    pass


class OracleTooNoisyError(ValueError):
    pass


def _pow(a: np.ndarray, r: float) -> np.ndarray:
    """a**r for a >= 0 with 0**r = 0; small integer r by repeated products."""
    if r == int(r) and 1 <= r <= 8:
        out = a
        for _ in range(int(r) - 1):
            out = out * a
        return out
    return a ** r


def _abs_pow(U: np.ndarray, p: float) -> np.ndarray:
    return _pow(np.abs(U), p)


def _signed_pow(U: np.ndarray, r: float) -> np.ndarray:
    # sign(u)|u|^r, zero at u = 0
    return np.sign(U) * _pow(np.abs(U), r)


class ExactOracle:
    """x -> E|<X, x>|^p (and its gradient) for laws with a closed form."""

    def __init__(self, spec: DistributionSpec, p: float):
        if spec.kind not in CLOSED_FORM_KINDS:
            raise NoClosedFormError(f"{spec.kind} has no closed form")
        self.spec, self.p = spec, p
        self.ci_halfwidth = 0.0

    def value(self, X: np.ndarray) -> np.ndarray:
        return exact_moment(self.spec, np.atleast_2d(X), self.p)

    def grad(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        spec, p = self.spec, self.p
        if spec.kind == "orthobasis":
            return spec.n ** (p / 2 - 1) * p * _signed_pow(X, p - 1)
        if spec.kind == "constant":
            v = np.asarray(spec.fixed_vector)
            return p * _signed_pow(X @ v, p - 1)[:, None] * v[None, :]
        return np.zeros_like(X)


class SampleOracle:
    """x -> (1/M) sum |<Y_j, x>|^p over a fixed reference sample.

    With a large fresh reference sample this is the Monte Carlo oracle; with
    the data sample itself it reproduces the empirical moment exactly.
    """

    def __init__(self, rows, p: float):
        self.rows = as_rows(rows)
        self.p = p
        self.ci_halfwidth = 0.0

    def value(self, X: np.ndarray) -> np.ndarray:
        return _abs_pow(self.rows @ np.atleast_2d(X).T, self.p).mean(axis=0)

    def grad(self, X: np.ndarray) -> np.ndarray:
        U = self.rows @ np.atleast_2d(X).T
        return self.p * (self.rows.T @ _signed_pow(U, self.p - 1)).T / len(self.rows)

    def halfwidth(self, X: np.ndarray) -> np.ndarray:
        V = _abs_pow(self.rows @ np.atleast_2d(X).T, self.p)
        return Z99 * V.std(axis=0, ddof=1) / math.sqrt(len(self.rows))


def attach_mc_oracle(spec: DistributionSpec, p: float, M: int, stream: StreamLike,
                     probes: Optional[np.ndarray] = None) -> SampleOracle:
    """A Monte Carlo moment oracle from M fresh draws; its ci is measured on ``probes``
    (basis vectors by default) and stored as ``ci_halfwidth``."""
    if M < 10_000:
        raise ValueError("a Monte Carlo oracle needs M >= 10^4 draws")
    rows = _draw(spec, M, as_generator(stream))
    if not np.all(np.isfinite(rows)):
        raise FloatingPointError("non-finite draws in Monte Carlo oracle")
    orc = SampleOracle(rows, p)
    P = np.eye(spec.n) if probes is None else probes
    orc.ci_halfwidth = float(np.max(orc.halfwidth(P)))
    return orc


def oracle_for(spec: DistributionSpec, p: float, oracle=None):
    if oracle is not None:
        return oracle
    try:
        return ExactOracle(spec, p)
    except NoClosedFormError:
        raise MissingOracleError(
            f"{spec.kind} has no closed-form moment; attach one with attach_mc_oracle()"
        ) from None


def empirical_moment(S, x, p: float) -> float:
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    return float(np.mean(_abs_pow(as_rows(S) @ x, p)))


@dataclass
class DeviationResult:
    sup_value: float
    witness_x: np.ndarray
    trace: list = field(default_factory=list)
    oracle_value: Optional[float] = None
    oracle_mesh: Optional[float] = None
    direction_of_gap: int = 0
    solver_stats: tuple = ()
    probe_value: float = 0.0

    def to_dict(self) -> dict:
        return {"sup_value": self.sup_value, "witness_x": [float(c) for c in self.witness_x],
                "direction_of_gap": self.direction_of_gap, "oracle_value": self.oracle_value,
                "oracle_mesh": self.oracle_mesh, "probe_value": self.probe_value,
                "solver_stats": list(self.solver_stats),
                "trace": [list(t) for t in self.trace]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def probe_directions(S, cfg: SolverConfig, rng=None, rows_cap: Optional[int] = None):
    """Basis vectors, normalized rows (the largest-norm ones when capped) and random directions."""
    A = as_rows(S)
    N, n = A.shape
    cap = cfg.row_starts if rows_cap is None else rows_cap
    rows = A
    if N > cap:
        keep = np.argsort(-np.linalg.norm(A, axis=1), kind="stable")[:cap]
        rows = A[np.sort(keep)]
    parts = [np.eye(n), normalize_rows(rows)]
    labels = ["basis"] * n + ["row"] * len(parts[1])
    if rng is not None and n > 1:
        parts.append(random_directions(rng, cfg.starts, n))
        labels += ["random"] * cfg.starts
    return np.vstack(parts), labels


def deviation_sup(S, spec: DistributionSpec, p: float, cfg: SolverConfig = SolverConfig(),
                  stream: StreamLike = 0, oracle=None, net: bool = True) -> DeviationResult:
    """Certified lower bound on sup_x |(1/N) sum |<X_i,x>|^p - E|<X,x>|^p|.

    Both signed gaps are maximized by geodesic ascent from the best screened
    probes (basis vectors, normalized rows, random directions). For
    n <= cfg.net_dim_cap a net of the sphere is also enumerated and reported.
    """
    A = as_rows(S)
    N, n = A.shape
    orc = oracle_for(spec, p, oracle)
    if orc.ci_halfwidth > 0.1 * cfg.oracle_tol:
        raise OracleTooNoisyError(
            f"oracle 99% half-width {orc.ci_halfwidth:.3g} exceeds 0.1 * oracle_tol "
            f"= {0.1 * cfg.oracle_tol:.3g}; attach an oracle with more draws")
    rng = as_generator(stream)

    def gap(X):
        U = A @ X.T
        emp = _abs_pow(U, p).mean(axis=0)
        return emp - orc.value(X)

    def make_fun(sign):
        def fun(X):
            U = A @ X.T
            a = np.abs(U)
            ap = _pow(a, p - 1)
            emp = (ap * a).mean(axis=0)
            g = (p / N) * (A.T @ (np.sign(U) * ap)).T
            return sign * (emp - orc.value(X)), sign * (g - orc.grad(X))
        return fun

    C, labels = probe_directions(A, cfg, rng)
    g0 = gap(C)
    probe_value = float(np.max(np.abs(g0)))
    if n == 1:
        X = np.ones((1, 1))
        val = float(gap(X)[0])
        return DeviationResult(abs(val), X[0], [("basis", abs(val), 0, True)],
                               direction_of_gap=int(np.sign(val)), solver_stats=(1, 0, 1),
                               probe_value=probe_value)
    finals, vals, trace, tot = [], [], [], [0, 0, 0]
    for sign in (1.0, -1.0):
        order = np.argsort(-sign * g0, kind="stable")
        pick = list(order[: cfg.ascent_starts])
        rnd = [i for i in order if labels[i] == "random" and i not in pick][:4]
        pick = np.array(sorted(set(int(i) for i in pick + rnd)))
        X, v, st = sphere_ascent(make_fun(sign), C[pick], cfg, [labels[i] for i in pick])
        finals.append(X)
        vals.append(v)
        trace += [(("+" if sign > 0 else "-") + t[0],) + t[1:] for t in st.trace]
        tot = [tot[0] + st.starts, tot[1] + st.iterations, tot[2] + st.converged]
    X = np.vstack(finals)
    v = np.concatenate(vals)
    i = best_index(v, X)
    w = X[i]
    g = float(gap(w[None, :])[0])
    res = DeviationResult(abs(g), w, trace, direction_of_gap=int(np.sign(g)),
                          solver_stats=tuple(tot), probe_value=probe_value)
    if net and n <= cfg.net_dim_cap:
        P, mesh = sphere_net(n, cfg.net_mesh, cfg.net_max_points)
        best = 0.0
        for k in range(0, len(P), 20_000):
            best = max(best, float(np.max(np.abs(gap(P[k:k + 20_000])))))
        res.oracle_value, res.oracle_mesh = best, mesh
    return res


def truncated_estimate(S, K: float, x, p: float) -> float:
    """(1/N) sum over rows with ||X_i||_2 <= K sqrt(n) of |<X_i, x>|^p."""
    if not K > 0:
        raise ValueError("K must be positive")
    A = as_rows(S)
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    keep = np.linalg.norm(A, axis=1) <= K * math.sqrt(A.shape[1])
    return float(np.sum(_abs_pow(A[keep] @ x, p)) / A.shape[0])


def truncation_threshold(L: float, p: float, q: float, epsilon: float) -> float:
    """Smallest K with K^(p-q) L^q <= epsilon."""
    if not q > p:
        raise ValueError("truncation_threshold needs q > p")
    if not (L > 0 and 0 < epsilon <= 1):
        raise ValueError("need L > 0 and epsilon in (0, 1]")
    return L ** (q / (q - p)) * epsilon ** (-1.0 / (q - p))


@dataclass(frozen=True)
class LargeCoeffDiag:
    B: float
    E_B: tuple
    size: int
    weak_l2_of_large: float
    x_used: np.ndarray = field(repr=False)


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def bump(self):
        with self._lock:
            self.value += 1


LARGE_COEFF_CALLS = _Counter()


def large_coeff_diag(S, x, B: float) -> LargeCoeffDiag:
    """E_B(x) = {i : |<X_i, x>| >= B} and the weak-l2 norm of those coefficients.

    Every call checks B^2 |E_B| <= ||(<X_i,x>)_{i in E_B}||_(2,inf)^2.
    """
    if not B > 0:
        raise ValueError("B must be positive")
    A = as_rows(S)
    x = np.asarray(x, dtype=float)
    c = A @ x
    idx = np.flatnonzero(np.abs(c) >= B)
    wk = weak_l2_norm(c[idx])
    if idx.size * B * B > wk * wk * (1 + 1e-12):
        raise AssertionError(f"B^2|E_B| = {idx.size * B * B} exceeds weak-l2^2 = {wk * wk}")
    LARGE_COEFF_CALLS.bump()
    return LargeCoeffDiag(B, tuple(int(i) for i in idx), int(idx.size), wk, x)


def choose_B(epsilon: float, N: int, n: int, q: float, t: float) -> float:
    """Level t (epsilon N / n)^(2/(q-4)) for the large coefficients."""
    if not q > 4:
        raise ValueError("choose_B needs q > 4")
    return t * (epsilon * N / n) ** (2.0 / (q - 4))


@dataclass
class DecompositionReport:
    B: float
    t: float
    term1: float
    rows: list  # per probe: (left, emp_large, exp_large, pointwise_ok)
    sup_emp_large: float
    sup_exp_large: float
    holds: bool
    slack: float
    pointwise_holds: bool

    def to_dict(self) -> dict:
        return {"B": self.B, "t": self.t, "term1": self.term1, "rows": self.rows,
                "sup_emp_large": self.sup_emp_large, "sup_exp_large": self.sup_exp_large,
                "holds": self.holds, "slack": self.slack, "pointwise_holds": self.pointwise_holds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def deviation_decomposition(S, spec: DistributionSpec, p: float, B: float, t: float,
                            probes: Iterable, oracle=None, mc_draws: int = 200_000,
                            stream: StreamLike = 0) -> DecompositionReport:
    """Left side and the three right-hand terms of the large-coefficient reduction at probes.

    The bound compared is 16 t B^(p-1) sqrt(n/N) + sup over probes of the
    empirical large-coefficient mass + sup over probes of its expectation.
    """
    A = as_rows(S)
    N, n = A.shape
    P = np.atleast_2d(np.asarray(list(probes), dtype=float))
    if P.size == 0:
        raise ValueError("need at least one probe")
    _check_unit(P)
    orc = oracle_for(spec, p, oracle)
    U = A @ P.T
    emp = _abs_pow(U, p).mean(axis=0)
    left = np.abs(emp - orc.value(P))
    large = np.where(np.abs(U) >= B, _abs_pow(U, p), 0.0).sum(axis=0) / N
    exp_large = np.empty(len(P))
    ref = None
    for j, x in enumerate(P):
        try:
            exp_large[j] = exact_tail_moment(spec, x, p, B)
        except NoClosedFormError:
            if ref is None:
                src = getattr(orc, "rows", None)
                ref = src if src is not None else _draw(spec, mc_draws, as_generator(stream))
            c = ref @ x
            exp_large[j] = float(np.mean(np.where(np.abs(c) >= B, _abs_pow(c, p), 0.0)))
    term1 = 16 * t * B ** (p - 1) * math.sqrt(n / N)
    sup_e, sup_x = float(large.max()), float(exp_large.max())
    rhs = term1 + sup_e + sup_x
    pointwise = left <= term1 + large + exp_large
    rows = [(float(left[j]), float(large[j]), float(exp_large[j]), bool(pointwise[j]))
            for j in range(len(P))]
    return DecompositionReport(B, t, term1, rows, sup_e, sup_x, bool(np.all(left <= rhs)),
                               float(rhs - left.max()), bool(np.all(pointwise)))
