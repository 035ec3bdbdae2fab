"""Command-line entry point: ``marginals <subcommand> [--config FILE] [--out DIR] ...``.

Exit codes: 0 on success, 2 on a configuration error or a degenerate
decoupling input, 1 on any other runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, SCHEMA, load_config, validate
from .decouple import (DegenerateInputError, HypothesisError, clustered_ensemble, decouple,
                       verify_certificate)
from .dist import CLOSED_FORM_KINDS, sample_matrix
from .estimate import (attach_mc_oracle, choose_B, deviation_decomposition, deviation_sup,
                       large_coeff_diag)
from .harness import emit_plot_data, persist_results, run_sweep, wilson_interval
from .norms import (ScalarLaw, check_norm_theorem, gram_offdiag_check, opnorm_l2_l2inf,
                    opnorm_l2_lp, rearrangement_failure_rates)
from .rng import Stream
from .sphere import random_directions

log = logging.getLogger("marginals")

SUBCOMMANDS = {
    "sample": "draw N rows from the configured distribution and write samples.csv",
    "deviation": "estimate the sup over the sphere of the p-th moment deviation",
    "opnorm": "estimate the l2 -> lp or l2 -> weak-l2 operator norm of a sample matrix",
    "decouple": "run Las Vegas decoupling on a clustered ensemble and write the certificate",
    "sweep": "Monte Carlo sweep of N_epsilon over n_grid with persisted results",
    "check-rearrangement": "failure rates of the decreasing-rearrangement bound",
    "check-gram": "smallest feasible constant in the off-diagonal Gram bound",
    "diagnose-large": "large-coefficient sets E_B and the deviation decomposition at probes",
}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _oracle(cfg: RunConfig, spec, p):
    if spec.kind in CLOSED_FORM_KINDS:
        return None
    draws = cfg.get("sweep", "oracle_draws")
    log.info("attaching Monte Carlo oracle with %d draws", draws)
    return attach_mc_oracle(spec, p, draws, Stream(cfg.get("run", "seed")).child("oracle"))


def _sample(cfg: RunConfig):
    seed = cfg.get("run", "seed")
    return sample_matrix(cfg.spec(), cfg.get("run", "N"), Stream(seed).child("sample"))


# subcommand handlers: (cfg, out dir) -> summary dict

def cmd_sample(cfg, out):
    S = _sample(cfg)
    path = out / "samples.csv"
    S.to_csv(path)
    return {"N": S.N, "n": S.n, "kind": cfg.spec().kind, "provenance": S.provenance,
            "path": path}


def cmd_deviation(cfg, out):
    spec, p = cfg.spec(), cfg.get("model", "p")
    S = _sample(cfg)
    res = deviation_sup(S, spec, p, cfg.solver(), Stream(cfg.get("run", "seed")).child("solver"),
                        oracle=_oracle(cfg, spec, p))
    (out / "deviation.json").write_text(res.to_json() + "\n")
    return {"N": S.N, "n": S.n, "p": p, "sup_value": res.sup_value,
            "probe_value": res.probe_value, "oracle_value": res.oracle_value,
            "direction_of_gap": res.direction_of_gap}


def cmd_opnorm(cfg, out):
    A = _sample(cfg)
    st = Stream(cfg.get("run", "seed")).child("opnorm")
    target, p = cfg.get("opnorm", "target"), cfg.get("opnorm", "p")
    if target == "lp":
        est = opnorm_l2_lp(A, p, cfg.solver(), st)
        scale = math.sqrt(A.n) + A.N ** (1.0 / p)
    else:
        est = opnorm_l2_l2inf(A, cfg.solver(), st)
        scale = math.sqrt(A.n) + math.sqrt(A.N)
    d = est.to_dict()
    _dump(out / "opnorm.json", d)
    return {"target": target, "p": p, "N": A.N, "n": A.n, "value": est.value,
            "upper_bound": est.upper_bound, "fitted_C": est.value / scale}


def cmd_decouple(cfg, out):
    g = lambda k: cfg.get("decouple", k)
    seed = cfg.get("run", "seed")
    inp = clustered_ensemble(g("n"), g("s"), g("delta"), Stream(seed).child("ensemble").generator(),
                             a=g("a"), spread=g("spread"), M_frac=g("M_frac"))
    cert = decouple(inp, Stream(seed).child("decouple"), g("max_attempts"), C_impl=g("C_impl"))
    rep = verify_certificate(cert, inp)
    (out / "certificate.json").write_text(cert.to_json() + "\n")
    return {"s": inp.s, "n": inp.n, "size_I": len(cert.I), "margin": cert.margin,
            "attempts": cert.attempts, "verified": rep.ok, "effective_C": inp.effective_C()}


def cmd_sweep(cfg, out):
    sc = cfg.sweep()
    res = run_sweep(sc)
    persist_results(res, out)
    emit_plot_data(res, out)
    return {"N_epsilon": {str(n): N for n, N in res.N_epsilon.items()}, "slope": res.slope,
            "slope_stderr": res.slope_stderr, "config_hash": sc.hash()}


def cmd_check_rearrangement(cfg, out):
    g = lambda k: cfg.get("check", k)
    law = ScalarLaw.abs_symmetric_pareto(g("law_alpha"))
    st = Stream(cfg.get("run", "seed")).child("rearrangement")
    table = []
    for N in (g("N"), 2 * g("N")):
        rates = rearrangement_failure_rates(law, N, g("q"), g("t"), g("trials"), st.child(N))
        for t, r in zip(g("t"), rates):
            lo, hi = wilson_interval(int(round(r * g("trials"))), g("trials"))
            hw = (hi - lo) / 2
            table.append({"N": N, "t": t, "rate": float(r), "ci_halfwidth": hw,
                          "reference": t ** (-g("q")) / N})
    _dump(out / "rearrangement.json", table)
    return {"law_alpha": g("law_alpha"), "q": g("q"), "trials": g("trials"), "rates": table}


def cmd_check_gram(cfg, out):
    A = _sample(cfg)
    params = cfg.model()
    t = cfg.get("check", "t")[0]
    C, (k, s) = gram_offdiag_check(A, params, max(t, 1.0))
    rep = check_norm_theorem(A, params, max(t, 1.0))
    rep.to_csv(out / "norm_theorem.csv")
    return {"N": A.N, "n": A.n, "t": t, "min_feasible_C": C, "worst_k": k, "worst_s": s,
            "norm_envelope_C": rep.min_feasible_C}


def cmd_diagnose_large(cfg, out):
    spec, m = cfg.spec(), cfg.model()
    S = _sample(cfg)
    B = cfg.get("check", "B")
    if B is None:
        B = choose_B(min(m.epsilon, 0.999), S.N, S.n, m.q, cfg.get("sweep", "diag_t"))
    rng = Stream(cfg.get("run", "seed")).child("probes").generator()
    P = np.vstack([np.eye(S.n), random_directions(rng, cfg.get("check", "probes"), S.n)])
    diags = []
    for x in P:
        d = large_coeff_diag(S, x, B)
        diags.append({"size": d.size, "weak_l2_of_large": d.weak_l2_of_large,
                      "size_B2": d.size * B * B})
    rep = deviation_decomposition(S, spec, m.p, B, cfg.get("sweep", "diag_t"), P,
                                  oracle=_oracle(cfg, spec, m.p),
                                  stream=Stream(cfg.get("run", "seed")).child("mc"))
    _dump(out / "large_coeff.json", {"B": B, "probes": diags, "decomposition": rep.to_dict()})
    return {"B": B, "probes": len(P), "max_size": max(d["size"] for d in diags),
            "identity_holds": all(d["size_B2"] <= d["weak_l2_of_large"] ** 2 * (1 + 1e-12)
                                  for d in diags),
            "decomposition_holds": rep.holds, "slack": rep.slack}


HANDLERS = {
    "sample": cmd_sample, "deviation": cmd_deviation, "opnorm": cmd_opnorm,
    "decouple": cmd_decouple, "sweep": cmd_sweep,
    "check-rearrangement": cmd_check_rearrangement, "check-gram": cmd_check_gram,
    "diagnose-large": cmd_diagnose_large,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="sectioned key-value config file")
    common.add_argument("--out", metavar="DIR", default="marginals_out",
                        help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="master seed, overrides [run] seed")
    common.add_argument("--threads", type=int, help="worker threads, overrides [run] threads")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--verbose", "-v", action="count", default=0,
                        help="more log output on stderr")
    common.add_argument("--json", action="store_true",
                        help="print the summary as one JSON object on stdout")
    parser = argparse.ArgumentParser(
        prog="marginals",
        description="Sample moments of one-dimensional marginals and the tools around them.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    for name, text in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for item in args.set:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not (sep and dot) or section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError("expected SECTION.KEY=VALUE with a known key", field=key.strip(),
                              source="--set")
        try:
            cfg = cfg.with_value(section, name, SCHEMA[section][name].conv(raw))
        except ValueError as exc:
            raise ConfigError(f"bad value {raw!r}: {exc}", field=key.strip(),
                              source="--set") from None
    # the dedicated flags win over --set
    if args.seed is not None:
        cfg = cfg.with_value("run", "seed", args.seed)
    if args.threads is not None:
        cfg = cfg.with_value("run", "threads", args.threads)
    return cfg


def _setup_logging(verbose: int, logfile: Optional[Path]):
    log.handlers.clear()
    log.setLevel(logging.DEBUG)
    log.propagate = False
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING - 10 * min(verbose, 2))
    err.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log.addHandler(err)
    if logfile is not None:
        fh = logging.FileHandler(logfile, mode="w")
        fh.setLevel(logging.INFO)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(fh)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose, None)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        validate(cfg)
    except ConfigError as exc:
        print(f"marginals: config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"marginals: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 1
    _setup_logging(args.verbose, out / "run.log")
    echo = cfg.to_text()
    (out / "config.ini").write_text(echo)
    log.info("marginals %s %s", __version__, args.command)
    log.info("resolved config:\n%s", echo)
    try:
        summary = HANDLERS[args.command](cfg, out)
    except (DegenerateInputError, HypothesisError) as exc:
        log.error("%s", exc)
        print(f"marginals: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"marginals: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.exception("%s failed", args.command)
        print(f"marginals: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    summary = {"command": args.command, "out": str(out), **summary}
    _dump(out / "summary.json", summary)
    log.info("done")
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=_json_default))
    else:
        for k, v in summary.items():
            if not isinstance(v, (list, dict)):
                print(f"{k}: {v}")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
