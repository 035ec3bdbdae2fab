"""Seeded Monte Carlo sweeps over (n, N): success probabilities, the smallest
adequate sample size, log-log slope fits and result persistence."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import __version__
from .dist import CLOSED_FORM_KINDS, DistributionSpec, sample_matrix
from .estimate import attach_mc_oracle, choose_B, deviation_sup, large_coeff_diag
from .rng import Stream
from .sphere import SolverConfig

Z95 = 1.959963984540054


@dataclass(frozen=True)
class SweepConfig:
    spec: DistributionSpec
    n_grid: tuple = (8, 16, 32, 64)
    p: float = 3.0
    q: Optional[float] = None
    epsilon: float = 0.25
    delta: float = 0.1
    trials_per_point: int = 50
    N_min: int = 16
    N_max: int = 1 << 20
    bisect_tol: float = 0.25
    master_seed: int = 0
    solver: SolverConfig = SolverConfig.sweep_preset()
    threads: int = 1
    oracle_draws: int = 400_000
    diag_t: float = 1.0
    early_stop: bool = True

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if self.q is None:
            object.__setattr__(self, "q", 4.0 * self.p)
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.trials_per_point < 20:
            raise ValueError("trials_per_point must be at least 20")
        if not 1 <= self.N_min <= self.N_max:
            raise ValueError("need 1 <= N_min <= N_max")
        if not (0 < self.epsilon and 0 < self.delta < 1):
            raise ValueError("need epsilon > 0 and delta in (0, 1)")
        best = wilson_interval(self.trials_per_point, self.trials_per_point)[0]
        if best < 1 - self.delta:
            raise ValueError(
                f"{self.trials_per_point} trials cannot certify success: even "
                f"{self.trials_per_point}/{self.trials_per_point} has Wilson lower bound "
                f"{best:.3f} < 1 - delta = {1 - self.delta:.3f}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["spec"] = self.spec.to_dict()
        d["solver"] = dataclasses.asdict(self.solver)
        d["n_grid"] = list(self.n_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        d["spec"] = DistributionSpec.from_dict(d["spec"])
        d["solver"] = SolverConfig(**d["solver"])
        d["n_grid"] = tuple(d["n_grid"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class TrialRecord:
    trial_id: int
    deviation: float
    probe_deviation: float
    wall_ms: float
    diag_calls: int = 0


_oracle_cache: dict = {}
_oracle_lock = threading.Lock()


def _oracle(config: SweepConfig, spec: DistributionSpec):
    if spec.kind in CLOSED_FORM_KINDS:
        return None
    key = (config.master_seed, spec, config.p, config.oracle_draws)
    with _oracle_lock:
        if key not in _oracle_cache:
            st = Stream(config.master_seed).child("oracle", spec.n)
            _oracle_cache[key] = attach_mc_oracle(spec, config.p, config.oracle_draws, st)
        return _oracle_cache[key]


def _one_trial(config: SweepConfig, spec, n: int, N: int, trial: int, oracle) -> TrialRecord:
    t0 = time.perf_counter()
    base = Stream(config.master_seed).child("trial", n, N, trial)
    try:
        S = sample_matrix(spec, N, base.child("sample"))
        res = deviation_sup(S, spec, config.p, config.solver, base.child("solver"),
                            oracle=oracle, net=False)
        B = choose_B(min(config.epsilon, 0.999), N, n, config.q, config.diag_t)
        calls = 0
        for x in [res.witness_x, *np.eye(n)]:
            large_coeff_diag(S, x, B)
            calls += 1
    except Exception as exc:
        raise RuntimeError(f"trial {trial} (n={n}, N={N}) failed: {exc}") from exc
    ms = (time.perf_counter() - t0) * 1e3
    return TrialRecord(trial, res.sup_value, res.probe_value, ms, calls)


STOP_BLOCK = 8


def _run_ids(config, spec, n, N, ids, oracle):
    task = lambda i: _one_trial(config, spec, n, N, i, oracle)
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            return list(ex.map(task, ids))
    return [task(i) for i in ids]


def run_trial_records(config: SweepConfig, n: int, N: int,
                      early_stop: bool = False) -> list[TrialRecord]:
    """Trials at (n, N) ordered by id.

    With ``early_stop`` the trials run in fixed blocks of STOP_BLOCK ids and
    stop once the Wilson lower bound could not reach 1 - delta even if every
    remaining trial succeeded. Block boundaries do not depend on the thread
    count, so serial and parallel runs return the same records.
    """
    spec = config.spec.with_n(n)
    oracle = _oracle(config, spec)
    T = config.trials_per_point
    if not early_stop:
        return sorted(_run_ids(config, spec, n, N, range(T), oracle), key=lambda r: r.trial_id)
    out: list[TrialRecord] = []
    for start in range(0, T, STOP_BLOCK):
        out += _run_ids(config, spec, n, N, range(start, min(T, start + STOP_BLOCK)), oracle)
        fails = sum(r.deviation > config.epsilon for r in out)
        if wilson_interval(T - fails, T)[0] < 1 - config.delta:
            break
    return sorted(out, key=lambda r: r.trial_id)


def run_trials(config: SweepConfig, n: int, N: int) -> list[float]:
    """Deviation statistic of each trial at (n, N), ordered by trial id."""
    return [r.deviation for r in run_trial_records(config, n, N)]


def wilson_interval(successes: int, total: int, z: float = Z95) -> tuple[float, float]:
    if total == 0:
        return 0.0, 1.0
    ph = successes / total
    den = 1 + z * z / total
    mid = (ph + z * z / (2 * total)) / den
    half = z * math.sqrt(ph * (1 - ph) / total + z * z / (4 * total * total)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def success_probability(deviations, epsilon: float):
    """Fraction of deviations <= epsilon and its 95% Wilson interval."""
    devs = np.asarray(deviations, dtype=float)
    if devs.size == 0:
        raise ValueError("need at least one deviation")
    k = int(np.sum(devs <= epsilon))
    return k / devs.size, wilson_interval(k, devs.size)


@dataclass
class PointRecord:
    n: int
    N: int
    trials: list  # TrialRecord
    success_fraction: float
    ci: tuple

    @property
    def deviations(self) -> list:
        return [t.deviation for t in self.trials]


@dataclass
class NEpsilon:
    N: Optional[int]
    trace: list  # PointRecord in probe order
    exceeds_range: bool = False


def _probe(config, n, N, cache) -> PointRecord:
    if (n, N) not in cache:
        recs = run_trial_records(config, n, N, early_stop=config.early_stop)
        frac, ci = success_probability([r.deviation for r in recs], config.epsilon)
        cache[(n, N)] = PointRecord(n, N, recs, frac, ci)
    return cache[(n, N)]


def find_N_epsilon(config: SweepConfig, n: int, cache: Optional[dict] = None) -> NEpsilon:
    """Smallest probed N whose Wilson lower bound on success is >= 1 - delta.

    N doubles from N_min until a success, then bisects geometrically between
    the last failure and the success down to relative width ``bisect_tol``.
    """
    cache = {} if cache is None else cache
    trace = []

    def ok(N):
        rec = _probe(config, n, N, cache)
        trace.append(rec)
        return rec.ci[0] >= 1 - config.delta

    N = config.N_min
    last_fail = None
    while True:
        if ok(N):
            break
        last_fail = N
        if N >= config.N_max:
            return NEpsilon(None, trace, True)
        N = min(2 * N, config.N_max)
    if last_fail is None:
        return NEpsilon(N, trace)
    lo, hi = last_fail, N
    while hi > lo * (1 + config.bisect_tol) and hi - lo > 1:
        mid = int(round(math.sqrt(lo * hi)))
        if mid in (lo, hi):
            break
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return NEpsilon(hi, trace)


def fit_loglog_slope(points) -> tuple[float, float]:
    """OLS slope of ln N against ln n, and its standard error."""
    pts = [(float(a), float(b)) for a, b in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    if any(a <= 0 or b <= 0 for a, b in pts):
        raise ValueError("points must be positive")
    x = np.log([a for a, _ in pts])
    y = np.log([b for _, b in pts])
    if np.ptp(x) == 0:
        raise ValueError("degenerate fit: all n are equal")
    r = stats.linregress(x, y)
    return float(r.slope), float(r.stderr)


@dataclass
class SweepResult:
    config: SweepConfig
    records: dict = field(default_factory=dict)      # (n, N) -> PointRecord
    N_epsilon: dict = field(default_factory=dict)    # n -> int | None
    slope: Optional[float] = None
    slope_stderr: Optional[float] = None
    manifest: dict = field(default_factory=dict)


def run_sweep(config: SweepConfig) -> SweepResult:
    res = SweepResult(config)
    started = datetime.now(timezone.utc).isoformat()
    for n in config.n_grid:
        cache: dict = {}
        ne = find_N_epsilon(config, n, cache)
        res.records.update(cache)
        res.N_epsilon[n] = ne.N
    pts = [(n, N) for n, N in res.N_epsilon.items() if N is not None]
    if len(pts) >= 3:
        res.slope, res.slope_stderr = fit_loglog_slope(pts)
    res.manifest = {"config_hash": config.hash(), "code_version": __version__,
                    "started": started, "finished": datetime.now(timezone.utc).isoformat()}
    return res


class ResultsLoadError(RuntimeError):
    def __init__(self, problems: list):
        super().__init__("; ".join(f"{f}: {m}" for f, m in problems))
        self.problems = problems


TRIAL_COLUMNS = ["n", "N", "trial_id", "deviation", "wall_ms"]
SUMMARY_COLUMNS = ["n", "N_epsilon", "success_fraction", "ci_lo", "ci_hi"]


def _trials_csv(result: SweepResult, timing: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for (n, N) in sorted(result.records):
        for t in result.records[(n, N)].trials:
            w.writerow([n, N, t.trial_id, repr(float(t.deviation)),
                        repr(round(t.wall_ms, 3)) if timing else ""])
    return buf.getvalue()


def _summary_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for n in sorted(result.N_epsilon):
        N = result.N_epsilon[n]
        rec = result.records.get((n, N)) if N is not None else None
        if rec is None:
            w.writerow([n, "", "", "", ""])
        else:
            w.writerow([n, N, repr(rec.success_fraction), repr(rec.ci[0]), repr(rec.ci[1])])
    return buf.getvalue()


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def persist_results(result: SweepResult, out_dir, timing: bool = False) -> Path:
    """Write manifest.json, trials.csv and summary.csv under ``out_dir``.

    wall_ms is filled only with ``timing=True`` so that by default the tables
    are byte-identical across reruns of the same config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials, summary = _trials_csv(result, timing), _summary_csv(result)
    (out / "trials.csv").write_text(trials)
    (out / "summary.csv").write_text(summary)
    manifest = dict(result.manifest)
    manifest.update({
        "config": result.config.to_dict(),
        "config_hash": result.config.hash(),
        "code_version": __version__,
        "written": datetime.now(timezone.utc).isoformat(),
        "N_epsilon": {str(n): N for n, N in result.N_epsilon.items()},
        "slope": result.slope, "slope_stderr": result.slope_stderr,
        "files": {
            "trials.csv": {"sha256": _sha(trials), "rows": trials.count("\n") - 1},
            "summary.csv": {"sha256": _sha(summary), "rows": summary.count("\n") - 1},
        },
    })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_results(in_dir) -> SweepResult:
    """Inverse of persist_results; every file problem is collected before raising."""
    d = Path(in_dir)
    problems = []
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise ResultsLoadError([("manifest.json", "missing")]) from None
    except json.JSONDecodeError as exc:
        raise ResultsLoadError([("manifest.json", f"corrupt JSON: {exc}")]) from None
    try:
        config = SweepConfig.from_dict(manifest["config"])
    except Exception as exc:
        raise ResultsLoadError([("manifest.json", f"bad config echo: {exc}")]) from None
    if config.hash() != manifest.get("config_hash"):
        problems.append(("manifest.json", "config hash mismatch"))
    texts = {}
    for name in ("trials.csv", "summary.csv"):
        meta = manifest.get("files", {}).get(name, {})
        try:
            text = (d / name).read_text()
        except FileNotFoundError:
            problems.append((name, "missing"))
            continue
        texts[name] = text
        if text.count("\n") - 1 != meta.get("rows"):
            problems.append((name, f"row count {text.count(chr(10)) - 1} != {meta.get('rows')}"))
        if _sha(text) != meta.get("sha256"):
            problems.append((name, "sha256 mismatch"))
    if problems:
        raise ResultsLoadError(problems)

    res = SweepResult(config)
    groups: dict = {}
    for row in csv.DictReader(io.StringIO(texts["trials.csv"])):
        key = (int(row["n"]), int(row["N"]))
        ms = float(row["wall_ms"]) if row["wall_ms"] else 0.0
        groups.setdefault(key, []).append(
            TrialRecord(int(row["trial_id"]), float(row["deviation"]), math.nan, ms))
    for key, trials in groups.items():
        frac, ci = success_probability([t.deviation for t in trials], config.epsilon)
        res.records[key] = PointRecord(key[0], key[1], trials, frac, ci)
    for row in csv.DictReader(io.StringIO(texts["summary.csv"])):
        res.N_epsilon[int(row["n"])] = int(row["N_epsilon"]) if row["N_epsilon"] else None
    res.slope, res.slope_stderr = manifest.get("slope"), manifest.get("slope_stderr")
    res.manifest = {k: manifest[k] for k in ("config_hash", "code_version", "started", "finished")
                    if k in manifest}
    return res


def emit_plot_data(result: SweepResult, out_dir, norm_report=None) -> list[Path]:
    """Whitespace-separated .dat files under out_dir/plots: the complexity curve,
    one deviation-vs-N curve per n, and (optionally) norm-envelope ratios."""
    plots = Path(out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name, header, rows):
        path = plots / name
        lines = ["# " + " ".join(header)] + [" ".join(repr(v) if isinstance(v, float) else str(v)
                                                   for v in r) for r in rows]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    write("complexity.dat", ["n", "N_epsilon"],
          [(n, N) for n, N in sorted(result.N_epsilon.items()) if N is not None])
    for n in result.config.n_grid:
        rows = []
        for (m, N), rec in sorted(result.records.items()):
            if m == n:
                rows.append((N, float(np.median(rec.deviations)), float(rec.success_fraction),
                             float(rec.ci[0]), float(rec.ci[1])))
        write(f"deviation_n{n}.dat", ["N", "median_deviation", "success_fraction", "ci_lo",
                                      "ci_hi"], rows)
    if norm_report is not None:
        write("norm_envelope.dat", ["s", "max_norm", "envelope", "ratio"],
              [(s, float(m), float(e), float(r)) for s, m, e, r, _ in norm_report.rows])
    return written
