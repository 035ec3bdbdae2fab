"""Random vectors on R^n, their marginal moments, and assumption checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special

from .rng import Stream, StreamLike, as_generator

KINDS = ("gaussian", "orthobasis", "iid_powerlaw", "multidim_pareto", "constant", "truncated")
CLOSED_FORM_KINDS = ("gaussian", "orthobasis", "constant", "multidim_pareto")

# two-sided 99% normal quantile
Z99 = 2.5758293035489004


class InvalidSpecError(ValueError):
    pass


class NoClosedFormError(LookupError):
    """Raised by exact_moment for laws without a closed form; use moment_mc_oracle."""


def gaussian_abs_moment(p: float) -> float:
    """E|g|^p for a standard normal g."""
    return 2.0 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi)


def gaussian_abs_tail_moment(p: float, B: float) -> float:
    """E |g|^p 1{|g| >= B} for a standard normal g."""
    if B <= 0:
        return gaussian_abs_moment(p)
    a = (p + 1) / 2
    return 2.0 ** (p / 2) * special.gammaincc(a, B * B / 2) * math.gamma(a) / math.sqrt(math.pi)


@dataclass(frozen=True)
class SymmetricPareto:
    """Pareto(alpha) on [1, inf), centred, scaled to unit variance, given a random sign."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 2:
            raise InvalidSpecError(f"tail exponent must exceed 2, got {self.alpha}")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha - 1)

    @property
    def sd(self) -> float:
        a = self.alpha
        return math.sqrt(a / ((a - 1) ** 2 * (a - 2)))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        P = rng.pareto(self.alpha, size) + 1.0
        sign = rng.integers(0, 2, size) * 2 - 1
        return sign * (P - self.mean) / self.sd

    def abs_moment(self, r: float) -> float:
        if r >= self.alpha:
            return math.inf
        a, mu = self.alpha, self.mean
        dens = lambda u: abs(u - mu) ** r * a * u ** (-a - 1)
        lo, _ = integrate.quad(dens, 1.0, mu, epsabs=0, epsrel=1e-12, limit=200)
        hi, _ = integrate.quad(dens, mu, np.inf, epsabs=0, epsrel=1e-12, limit=200)
        return (lo + hi) / self.sd ** r


@dataclass(frozen=True)
class ScaledPareto:
    """Pareto(alpha) on [1, inf) divided by sqrt(E P^2), so that E xi^2 = 1."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 2:
            raise InvalidSpecError(f"tail exponent must exceed 2, got {self.alpha}")

    @property
    def scale(self) -> float:
        return math.sqrt(self.alpha / (self.alpha - 2))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return (rng.pareto(self.alpha, size) + 1.0) / self.scale

    def abs_moment(self, r: float) -> float:
        if r >= self.alpha:
            return math.inf
        return self.alpha / (self.alpha - r) / self.scale ** r

    def density(self, u):
        # density of xi = P / scale at u >= 1/scale
        c = self.scale
        x = np.asarray(u, dtype=float) * c
        return np.where(x >= 1.0, self.alpha * x ** (-self.alpha - 1) * c, 0.0)


@dataclass(frozen=True)
class ModelParams:
    """Constants of the moment model: moment order p, assumption order q, bounds K and L."""

    p: float
    q: Optional[float] = None
    K: float = 1.0
    L: float = 1.0
    epsilon: float = 0.25
    delta: float = 0.1

    def __post_init__(self):
        if self.q is None:
            object.__setattr__(self, "q", 4.0 * self.p)
        if not self.q > 4:
            raise InvalidSpecError(f"q must exceed 4, got {self.q}")
        if not (self.K > 0 and self.L > 0):
            raise InvalidSpecError("K and L must be positive")
        if not (0 < self.epsilon < 1 and 0 < self.delta < 1):
            raise InvalidSpecError("epsilon and delta must lie in (0, 1)")

    @property
    def main_theorem_hypotheses(self) -> bool:
        return self.p > 2 and self.q >= 4 * self.p


@dataclass(frozen=True)
class DistributionSpec:
    kind: str
    n: int
    tail_exponent: Optional[float] = None
    fixed_vector: Optional[tuple] = None
    inner: Optional["DistributionSpec"] = None
    threshold_K: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if int(self.n) != self.n or self.n < 1:
            raise InvalidSpecError(f"dimension n must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        if self.kind in ("iid_powerlaw", "multidim_pareto"):
            if self.tail_exponent is None or not self.tail_exponent > 2:
                raise InvalidSpecError(
                    f"{self.kind} needs tail_exponent > 2, got {self.tail_exponent}")
        if self.kind == "constant":
            if self.fixed_vector is None or len(self.fixed_vector) != self.n:
                raise InvalidSpecError("constant kind needs fixed_vector of length n")
            v = tuple(float(c) for c in self.fixed_vector)
            if not all(math.isfinite(c) for c in v):
                raise InvalidSpecError("fixed_vector must be finite")
            object.__setattr__(self, "fixed_vector", v)
        if self.kind == "truncated":
            if self.inner is None or self.inner.kind == "truncated":
                raise InvalidSpecError("truncated kind needs a non-truncated inner spec")
            if self.inner.n != self.n:
                raise InvalidSpecError("inner spec dimension differs from n")
            if self.threshold_K is None or not self.threshold_K > 0:
                raise InvalidSpecError("truncated kind needs threshold_K > 0")

    # constructors

    @classmethod
    def gaussian(cls, n: int) -> "DistributionSpec":
        return cls("gaussian", n)

    @classmethod
    def orthobasis(cls, n: int) -> "DistributionSpec":
        return cls("orthobasis", n)

    @classmethod
    def iid_powerlaw(cls, n: int, tail_exponent: float) -> "DistributionSpec":
        return cls("iid_powerlaw", n, tail_exponent=tail_exponent)

    @classmethod
    def multidim_pareto(cls, n: int, tail_exponent: float) -> "DistributionSpec":
        return cls("multidim_pareto", n, tail_exponent=tail_exponent)

    @classmethod
    def multidim_pareto_mode(cls, n: int, q: float, compliant: bool,
                             tail_exponent: Optional[float] = None) -> "DistributionSpec":
        """Multidimensional Pareto whose norm either has a finite q-th moment or not.

        ``compliant=True`` needs a tail exponent strictly above q (default q + 1);
        ``compliant=False`` needs one at most q (default min(q, 2.5)).
        """
        if tail_exponent is None:
            tail_exponent = q + 1 if compliant else min(q, 2.5)
        if compliant and not tail_exponent > q:
            raise InvalidSpecError("compliant mode needs tail_exponent > q")
        if not compliant and tail_exponent > q:
            raise InvalidSpecError("failure mode needs tail_exponent <= q")
        return cls.multidim_pareto(n, tail_exponent)

    @classmethod
    def constant(cls, v: Sequence[float]) -> "DistributionSpec":
        v = tuple(float(c) for c in v)
        return cls("constant", len(v), fixed_vector=v)

    @classmethod
    def truncated(cls, inner: "DistributionSpec", threshold_K: float) -> "DistributionSpec":
        return cls("truncated", inner.n, inner=inner, threshold_K=threshold_K)

    def with_n(self, n: int) -> "DistributionSpec":
        if n == self.n:
            return self
        if self.kind == "constant":
            raise InvalidSpecError("a constant spec cannot change dimension")
        if self.kind == "truncated":
            return replace(self, n=n, inner=self.inner.with_n(n))
        return replace(self, n=n)

    @property
    def scalar_law(self):
        if self.kind == "iid_powerlaw":
            return SymmetricPareto(self.tail_exponent)
        if self.kind == "multidim_pareto":
            return ScaledPareto(self.tail_exponent)
        return None

    # flat key-value text form

    def to_dict(self, prefix: str = "") -> dict[str, str]:
        out = {f"{prefix}kind": self.kind, f"{prefix}n": str(self.n)}
        if self.tail_exponent is not None:
            out[f"{prefix}tail_exponent"] = repr(float(self.tail_exponent))
        if self.fixed_vector is not None:
            out[f"{prefix}fixed_vector"] = ",".join(repr(c) for c in self.fixed_vector)
        if self.threshold_K is not None:
            out[f"{prefix}threshold_K"] = repr(float(self.threshold_K))
        if self.inner is not None:
            out.update(self.inner.to_dict(prefix + "inner."))
        return out

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "") -> "DistributionSpec":
        def get(key, conv=str, default=None):
            raw = d.get(prefix + key)
            if raw is None or raw == "":
                return default
            try:
                return conv(raw)
            except ValueError as exc:
                raise InvalidSpecError(f"field {prefix + key}: {exc}") from None

        kind = get("kind")
        if kind is None:
            raise InvalidSpecError(f"field {prefix}kind: missing")
        n = get("n", int)
        if n is None:
            raise InvalidSpecError(f"field {prefix}n: missing")
        fixed = get("fixed_vector", lambda s: tuple(float(c) for c in s.split(",")))
        inner = None
        if any(k.startswith(prefix + "inner.") for k in d):
            inner = cls.from_dict(d, prefix + "inner.")
        return cls(kind, n, tail_exponent=get("tail_exponent", float), fixed_vector=fixed,
                   inner=inner, threshold_K=get("threshold_K", float))

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "DistributionSpec":
        d = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidSpecError(f"line {lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            d[k.strip()] = v.strip()
        return cls.from_dict(d)


@dataclass(frozen=True)
class SampleMatrix:
    """N i.i.d. samples as the rows of an N x n array."""

    rows: np.ndarray = field(repr=False)
    provenance: tuple = ()

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-d array")
        if not np.all(np.isfinite(rows)):
            raise ValueError("sample matrix has non-finite entries")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def N(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    def to_csv(self, path) -> None:
        header = "provenance: " + " ".join(str(x) for x in self.provenance)
        np.savetxt(path, self.rows, delimiter=",", header=header, fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "SampleMatrix":
        path = Path(path)
        prov: tuple = ()
        with open(path) as fh:
            first = fh.readline()
        if first.startswith("# provenance:"):
            prov = tuple(first[len("# provenance:"):].split())
        rows = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(rows, prov)


def as_rows(A) -> np.ndarray:
    if isinstance(A, SampleMatrix):
        return A.rows
    rows = np.asarray(A, dtype=float)
    if rows.ndim != 2:
        raise ValueError("expected an N x n matrix")
    return rows


def _draw(spec: DistributionSpec, N: int, rng: np.random.Generator) -> np.ndarray:
    n = spec.n
    if spec.kind == "gaussian":
        return rng.standard_normal((N, n))
    if spec.kind == "orthobasis":
        X = np.zeros((N, n))
        X[np.arange(N), rng.integers(0, n, N)] = math.sqrt(n)
        return X
    if spec.kind == "iid_powerlaw":
        return spec.scalar_law.sample(rng, (N, n))
    if spec.kind == "multidim_pareto":
        g = rng.standard_normal((N, n))
        return g * spec.scalar_law.sample(rng, (N, 1))
    if spec.kind == "constant":
        return np.tile(np.asarray(spec.fixed_vector), (N, 1))
    X = _draw(spec.inner, N, rng)
    outside = np.linalg.norm(X, axis=1) > spec.threshold_K * math.sqrt(n)
    X[outside] = 0.0
    return X


def sample_matrix(spec: DistributionSpec, N: int, stream: StreamLike) -> SampleMatrix:
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    rng = as_generator(stream)
    X = _draw(spec, int(N), rng)
    if not np.all(np.isfinite(X)):
        raise FloatingPointError(f"non-finite draw from {spec.kind}")
    ident = stream.ident if isinstance(stream, Stream) else "external"
    seed = stream.seed if isinstance(stream, Stream) else None
    return SampleMatrix(X, (spec.kind, spec.n, seed, ident))


def _check_unit(x: np.ndarray, tol: float = 1e-9) -> None:
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("direction must be a unit vector")


def exact_moment(spec: DistributionSpec, x, p: float):
    """E|<X, x>|^p in closed form. ``x`` may be one unit vector or a stack of them."""
    x = np.asarray(x, dtype=float)
    _check_unit(x, 1e-8)
    batch = x.ndim == 2
    X = np.atleast_2d(x)
    if spec.kind == "gaussian":
        out = np.full(len(X), gaussian_abs_moment(p))
    elif spec.kind == "orthobasis":
        out = spec.n ** (p / 2 - 1) * np.sum(np.abs(X) ** p, axis=1)
    elif spec.kind == "constant":
        out = np.abs(X @ np.asarray(spec.fixed_vector)) ** p
    elif spec.kind == "multidim_pareto":
        out = np.full(len(X), gaussian_abs_moment(p) * spec.scalar_law.abs_moment(p))
    else:
        raise NoClosedFormError(f"{spec.kind} has no closed form; use moment_mc_oracle")
    return out if batch else float(out[0])


def exact_tail_moment(spec: DistributionSpec, x, p: float, B: float) -> float:
    """E |<X, x>|^p 1{|<X, x>| >= B} for the closed-form kinds."""
    x = np.asarray(x, dtype=float)
    _check_unit(x, 1e-8)
    if spec.kind == "gaussian":
        return gaussian_abs_tail_moment(p, B)
    if spec.kind == "orthobasis":
        c = math.sqrt(spec.n) * np.abs(x)
        return float(np.sum(np.where(c >= B, c ** p, 0.0)) / spec.n)
    if spec.kind == "constant":
        u = abs(float(np.dot(spec.fixed_vector, x)))
        return u ** p if u >= B else 0.0
    if spec.kind == "multidim_pareto":
        law = spec.scalar_law
        if p >= law.alpha:
            return math.inf
        lo = 1.0 / law.scale
        f = lambda u: law.density(u) * u ** p * gaussian_abs_tail_moment(p, B / u)
        val, _ = integrate.quad(f, lo, np.inf, epsabs=0, epsrel=1e-10, limit=400)
        return val
    raise NoClosedFormError(f"{spec.kind} has no closed form; use moment_mc_oracle")


def moment_mc_oracle(spec: DistributionSpec, x, p: float, M: int,
                     stream: StreamLike, chunk: int = 200_000) -> tuple[float, float]:
    """Monte Carlo mean of |<X, x>|^p over M fresh draws, with a 99% CLT half-width."""
    if M < 10_000:
        raise ValueError("moment_mc_oracle needs M >= 10^4 draws")
    x = np.asarray(x, dtype=float)
    _check_unit(x, 1e-8)
    rng = as_generator(stream)
    total = total_sq = 0.0
    done = 0
    while done < M:
        m = min(chunk, M - done)
        vals = np.abs(_draw(spec, m, rng) @ x) ** p
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite |<X,x>|^p while sampling {spec.kind}")
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += m
    mean = total / M
    var = max(total_sq / M - mean * mean, 0.0) * M / (M - 1)
    return float(mean), float(Z99 * math.sqrt(var / M))


@dataclass(frozen=True)
class AssumptionReport:
    K_hat: float
    L_hat: float
    q_used: float
    norm_tail_index: float
    K_growth: float
    diverging: bool

    def __iter__(self):
        return iter((self.K_hat, self.L_hat, self.q_used))


def hill_tail_index(values: np.ndarray, k: Optional[int] = None) -> float:
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    v = v[v > 0]
    if len(v) < 10:
        return math.inf
    k = k or max(10, int(math.sqrt(len(v))))
    k = min(k, len(v) - 1)
    logs = np.log(v[:k]) - math.log(v[k])
    m = logs.mean()
    return math.inf if m <= 0 else 1.0 / m


def check_assumptions(spec: DistributionSpec, p: float, trials: int, stream: StreamLike,
                      q: Optional[float] = None, n_random_probes: int = 8) -> AssumptionReport:
    """Empirical K and L for a law.

    K_hat is the largest ||X||_2 / sqrt(n) seen in ``trials`` draws and L_hat the
    largest Monte Carlo q-th moment root over basis and random probe directions.
    ``diverging`` flags laws whose norm tail looks heavier than q (Hill estimate),
    for which K_hat keeps growing with the number of draws.
    """
    q = 4.0 * p if q is None else q
    rng = as_generator(stream)
    X = _draw(spec, trials, rng)
    n = spec.n
    norms = np.linalg.norm(X, axis=1) / math.sqrt(n)
    K_hat = float(norms.max())
    head = norms[: max(1, trials // 16)].max()
    K_growth = float(K_hat / head) if head > 0 else 1.0
    probes = [np.eye(n)]
    if n > 1 and n_random_probes:
        R = rng.standard_normal((n_random_probes, n))
        probes.append(R / np.linalg.norm(R, axis=1, keepdims=True))
    P = np.vstack(probes)
    mom = np.mean(np.abs(X @ P.T) ** q, axis=0)
    L_hat = float(np.max(mom) ** (1.0 / q))
    tail = hill_tail_index(norms)
    # Minkowski: E||X||^q <= (L sqrt n)^q, so a finite norm moment of order q is implied
    diverging = bool(tail < q)
    return AssumptionReport(K_hat, L_hat, float(q), float(tail), K_growth, diverging)
