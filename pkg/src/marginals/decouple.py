"""Constructive decoupling: move a direction into the span of a few sample
vectors while keeping large inner products with the others."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import StreamLike, as_generator

EXACT_POINTS = 16
DELTA_ABSORB = 22.0


class DegenerateInputError(ValueError):
    pass


class HypothesisError(ValueError):
    pass


class SeparationError(RuntimeError):
    def __init__(self, msg: str, worst_index: int, worst_value: float):
        super().__init__(msg)
        self.worst_index = worst_index
        self.worst_value = worst_value


class DecouplingFailure(RuntimeError):
    def __init__(self, msg: str, attempts: list):
        super().__init__(msg)
        self.attempts = attempts


# minimum-norm point of a convex hull

def _affine_min(P: np.ndarray) -> np.ndarray:
    """Weights alpha (sum 1, any sign) minimizing ||alpha @ P|| over the affine hull."""
    k = len(P)
    G = P @ P.T
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = G
    K[:k, k] = K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    alpha = sol[:k]
    return alpha / alpha.sum()


def _wolfe(P: np.ndarray, tol: float, max_iter: int = 10_000):
    m = len(P)
    sq = np.einsum("ij,ij->i", P, P)
    scale = max(sq.max(), 1e-300)
    S = [int(np.argmin(sq))]
    w = np.array([1.0])
    for _ in range(max_iter):
        z = w @ P[S]
        zz = z @ z
        ip = P @ z
        j = int(np.argmin(ip))
        if zz - ip[j] <= tol * zz or zz <= 1e-28 * scale or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            alpha = _affine_min(P[S])
            if np.all(alpha > 1e-14):
                w = alpha
                break
            neg = alpha <= 1e-14
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, w / (w - alpha), np.inf)
            theta = min(1.0, float(np.min(ratios)))
            w = w + theta * (alpha - w)
            keep = w > 1e-14
            if not np.any(keep):
                keep[np.argmax(w)] = True
            S = [s for s, k in zip(S, keep) if k]
            w = w[keep]
            w = w / w.sum()
    weights = np.zeros(m)
    weights[S] = w
    return weights


def _pairwise_fw(P: np.ndarray, tol: float, max_iter: int = 200_000):
    m = len(P)
    sq = np.einsum("ij,ij->i", P, P)
    w = np.zeros(m)
    w[int(np.argmin(sq))] = 1.0
    z = w @ P
    converged = False
    for _ in range(max_iter):
        ip = P @ z
        zz = z @ z
        s = int(np.argmin(ip))
        if zz - ip[s] <= tol * zz or zz <= 1e-28 * sq.max():
            converged = True
            break
        supp = np.flatnonzero(w > 0)
        v = int(supp[np.argmax(ip[supp])])
        d = P[s] - P[v]
        dd = d @ d
        if dd == 0:
            converged = True
            break
        gamma = min(max(-(z @ d) / dd, 0.0), w[v])
        w[s] += gamma
        w[v] -= gamma
        if w[v] < 1e-300:
            w[v] = 0.0
        z = w @ P
    return w, converged


def min_norm_hull_point(points, tol: float = 1e-12, method: str = "auto"):
    """The point of conv(points) closest to the origin, and its convex weights.

    Stops when max_i <z - p_i, z> <= tol ||z||^2. Up to 16 points use
    Wolfe's exact active-set method; larger sets run pairwise Frank-Wolfe and
    fall back to the active-set method if it stalls.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.size == 0 or not np.all(np.isfinite(P)):
        raise ValueError("points must be a nonempty finite array")
    if method == "auto":
        method = "wolfe" if len(P) <= EXACT_POINTS else "pairwise"
    if method == "wolfe":
        w = _wolfe(P, tol)
    elif method == "pairwise":
        w, ok = _pairwise_fw(P, tol)
        if not ok:
            w = _wolfe(P, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    return w @ P, w


def separating_direction(points, tol: float = 1e-12):
    """x_bar = z/||z|| for the min-norm point z, with <p_i, x_bar> >= 1 - 10 tol checked.

    Returns (x_bar, lambda) where x_bar = sum lambda_i p_i, lambda >= 0 and
    sum lambda = 1/||z|| <= 1.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    z, w = min_norm_hull_point(P, tol)
    nz = float(np.linalg.norm(z))
    if nz == 0:
        raise SeparationError("origin lies in the hull; no separating direction", 0, 0.0)
    x_bar = z / nz
    ip = P @ x_bar
    j = int(np.argmin(ip))
    if ip[j] < 1 - 10 * tol:
        raise SeparationError(
            f"<p_{j}, x_bar> = {ip[j]:.6g} < 1: hypothesis violated or tol too loose",
            j, float(ip[j]))
    return x_bar, w / nz


# decoupling

@dataclass
class DecouplingInput:
    X: np.ndarray
    x: np.ndarray
    B: float
    M: float
    delta: float
    K1: Optional[float] = None
    K2: Optional[float] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.x = np.asarray(self.x, dtype=float)
        s, n = self.X.shape
        if self.K1 is None:
            self.K1 = float(np.max(np.linalg.norm(self.X, axis=1)) / math.sqrt(n))
        if self.K2 is None:
            G2 = (self.X @ self.X.T) ** 2
            np.fill_diagonal(G2, 0.0)
            self.K2 = float((np.max(G2.sum(axis=1)) / s / n) ** 0.25)

    @property
    def s(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def a(self) -> float:
        return self.B * math.sqrt(self.n / self.s) + self.M

    @property
    def delta_int(self) -> float:
        return self.delta / DELTA_ABSORB

    def effective_C(self) -> float:
        """Largest C with B >= C d^(-3/2) K1 and M >= C d^(-1/2) K2^2/K1 (d = delta_int)."""
        d = self.delta_int
        c1 = self.B * d ** 1.5 / self.K1 if self.K1 > 0 else math.inf
        c2 = self.M * math.sqrt(d) * self.K1 / self.K2 ** 2 if self.K2 > 0 else math.inf
        return min(c1, c2)

    def check(self, C_impl: Optional[float] = None) -> None:
        """Raise if the input violates the hypotheses. The B, M size condition is
        enforced only when ``C_impl`` is given."""
        if not 0 < self.delta < 1:
            raise HypothesisError("delta must lie in (0, 1)")
        if abs(np.linalg.norm(self.x) - 1) > 1e-9:
            raise HypothesisError("x must be a unit vector")
        if self.s < 1 / self.delta_int:
            raise DegenerateInputError(
                f"degenerate input: s = {self.s} < 1/delta_int = {1 / self.delta_int:.1f} "
                f"(delta_int = delta/{DELTA_ABSORB:g}); the subset I would be empty")
        ip = self.X @ self.x
        if np.min(ip) < self.a * (1 - 1e-12):
            i = int(np.argmin(ip))
            raise HypothesisError(f"<X_{i}, x> = {ip[i]:.6g} < a = {self.a:.6g}")
        norms = np.linalg.norm(self.X, axis=1)
        if np.max(norms) > self.K1 * math.sqrt(self.n) * (1 + 1e-12):
            raise HypothesisError("some ||X_k|| exceeds K1 sqrt(n)")
        G2 = (self.X @ self.X.T) ** 2
        np.fill_diagonal(G2, 0.0)
        if np.max(G2.sum(axis=1)) / self.s > self.K2 ** 4 * self.n * (1 + 1e-12):
            raise HypothesisError("off-diagonal Gram condition fails for K2")
        if C_impl is not None and self.effective_C() < C_impl:
            raise HypothesisError(
                f"B, M too small for C_impl = {C_impl}: effective C = {self.effective_C():.3g}")


@dataclass
class DecouplingCertificate:
    I: tuple
    y: np.ndarray
    margin: float
    hull_weights: np.ndarray
    selector_draws: list = field(default_factory=list)
    attempts: int = 1

    def to_dict(self) -> dict:
        return {"I": list(self.I), "y": [float(c) for c in self.y], "margin": self.margin,
                "hull_weights": [float(c) for c in self.hull_weights],
                "selector_draws": [list(d) for d in self.selector_draws],
                "attempts": self.attempts}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DecouplingCertificate":
        d = json.loads(text)
        return cls(tuple(d["I"]), np.array(d["y"]), d["margin"], np.array(d["hull_weights"]),
                   [tuple(s) for s in d["selector_draws"]], d["attempts"])


@dataclass
class VerificationReport:
    ok: bool
    failures: list
    margin: float
    span_residual: float
    norm_error: float

    def __bool__(self):
        return self.ok


def span_residual(y: np.ndarray, V: np.ndarray, rank_tol: float = 1e-10) -> float:
    """Distance from y to span of the rows of V (rank-revealing SVD basis)."""
    if V.size == 0:
        return float(np.linalg.norm(y))
    U, sv, Vt = np.linalg.svd(V, full_matrices=False)
    r = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    Q = Vt[:r]
    return float(np.linalg.norm(y - Q.T @ (Q @ y)))


def verify_certificate(cert: DecouplingCertificate, inp: DecouplingInput) -> VerificationReport:
    """Re-check every certificate condition from the raw vectors."""
    failures = []
    s = inp.s
    y = np.asarray(cert.y, dtype=float)
    I = np.array(sorted(set(int(i) for i in cert.I)), dtype=int)
    if len(I) != len(cert.I):
        failures.append("I has repeated indices")
    if I.size and (I.min() < 0 or I.max() >= s):
        failures.append("I has indices outside 1..s")
        I = I[(I >= 0) & (I < s)]
    norm_err = abs(float(np.linalg.norm(y)) - 1.0)
    if norm_err > 1e-9:
        failures.append(f"||y|| differs from 1 by {norm_err:.3g}")
    if len(I) < (1 - inp.delta) * s:
        failures.append(f"|I| = {len(I)} < (1 - delta) s = {(1 - inp.delta) * s:.2f}")
    margin = float(np.min(inp.X[I] @ y)) if I.size else -math.inf
    if margin < inp.a / 4:
        failures.append(f"margin {margin:.6g} < a/4 = {inp.a / 4:.6g}")
    if abs(margin - cert.margin) > 1e-9 * max(1.0, abs(margin)):
        failures.append("recorded margin does not match the data")
    comp = np.setdiff1d(np.arange(s), I)
    res = span_residual(y, inp.X[comp])
    if res > 1e-8 * max(np.linalg.norm(y), 1e-300):
        failures.append(f"y is not in span(X_i, i not in I): residual {res:.3g}")
    lam = np.asarray(cert.hull_weights, dtype=float)
    if lam.shape != (s,) or np.any(lam < 0) or lam.sum() > 1 + 1e-9:
        failures.append("hull weights must be s non-negative reals with sum <= 1")
    return VerificationReport(not failures, failures, margin, res, norm_err)


def decouple(inp: DecouplingInput, stream: StreamLike, max_attempts: int = 20,
             C_impl: Optional[float] = None, tol: float = 1e-12) -> DecouplingCertificate:
    """Las Vegas decoupling.

    Builds x_bar and hull weights lambda from the min-norm point of
    conv{X_i/a}, keeps E = {lambda_i <= 1/(d s)}, draws i.i.d. Bernoulli(d)
    selectors with d = delta/22, forms
    y_bar = sum_E sel_i lambda_i X_i/a + sum_{E^c} d lambda_i X_i/a and
    I = {k in E : sel_k = 0, <X_k/a, y_bar> >= d/2}, then returns
    y = y_bar/||y_bar|| once the certificate verifies. Failed attempts redraw
    the selectors.
    """
    inp.check(C_impl)
    rng = as_generator(stream)
    s, a, d = inp.s, inp.a, inp.delta_int
    Xa = inp.X / a
    x_bar, lam = separating_direction(Xa, tol)
    E = lam <= 1.0 / (d * s)
    log, draws = [], []
    for attempt in range(1, max_attempts + 1):
        sel = rng.random(s) < d
        draws.append(tuple(int(i) for i in np.flatnonzero(sel)))
        coef = np.where(E, sel * lam, d * lam)
        y_bar = coef @ Xa
        ny = float(np.linalg.norm(y_bar))
        events = {"attempt": attempt, "selected": int(sel.sum()),
                  "norm_y_bar": ny, "norm_dev": float(np.linalg.norm(y_bar - d * x_bar)),
                  "norm_control": ny <= 2 * d}
        if ny == 0:
            events["failure"] = ["y_bar = 0"]
            log.append(events)
            continue
        ip = Xa @ y_bar
        I = np.flatnonzero(E & ~sel & (ip >= d / 2))
        y = y_bar / ny
        margin = float(np.min(inp.X[I] @ y)) if I.size else -math.inf
        cert = DecouplingCertificate(tuple(int(i) for i in I), y, margin, lam, list(draws),
                                     attempt)
        rep = verify_certificate(cert, inp)
        events["cardinality"] = len(I) >= (1 - inp.delta) * s
        events["margin"] = margin
        if rep.ok:
            return cert
        events["failure"] = rep.failures
        log.append(events)
    raise DecouplingFailure(f"no certificate after {max_attempts} attempts", log)


def clustered_ensemble(n: int, s: int, delta: float, rng: np.random.Generator,
                       a: float = 1.0, spread: float = 0.01, M_frac: float = 0.5
                       ) -> DecouplingInput:
    """X_i = a x + w_i with w_i orthogonal to x and ||w_i|| <= spread * a."""
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    W = rng.standard_normal((s, n))
    W -= np.outer(W @ x, x)
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    W *= (spread * a * rng.random(s))[:, None]
    X = a * x[None, :] + W
    M = M_frac * a
    B = (a - M) / math.sqrt(n / s)
    return DecouplingInput(X, x, B, M, delta)


@dataclass
class Calibration:
    C_min: Optional[float]
    table: list  # (threshold C, runs with effective C >= threshold, success rate)


def calibrate_C(inputs: list, streams: list, max_attempts: int = 20,
                target: float = 0.8) -> Calibration:
    """Smallest effective constant C at which the success rate over the given
    inputs reaches ``target``.

    Each input is decoupled once with its stream; runs are grouped by
    thresholds on their effective C (see DecouplingInput.effective_C).
    """
    runs = []
    for inp, st in zip(inputs, streams):
        try:
            decouple(inp, st, max_attempts)
            ok = True
        except (DecouplingFailure, SeparationError, HypothesisError):
            ok = False
        runs.append((inp.effective_C(), ok))
    runs.sort()
    table, C_min = [], None
    for j, (c, _) in enumerate(runs):
        tail = runs[j:]
        rate = sum(ok for _, ok in tail) / len(tail)
        table.append((c, len(tail), rate))
        if C_min is None and rate >= target:
            C_min = c
    return Calibration(C_min, table)
