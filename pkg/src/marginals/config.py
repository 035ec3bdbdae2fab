"""Sectioned key-value run configuration.

A config file is INI text read with :mod:`configparser`. Every key has a type
and a default; the resolved config is echoed back as INI text that re-parses
to an identical :class:`RunConfig`. Problems are reported as
:class:`ConfigError` with the file line and ``section.key`` involved.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .dist import DistributionSpec, InvalidSpecError, ModelParams
from .sphere import SolverConfig

SEED_ENV = "MARGINALS_SEED"


class ConfigError(ValueError):
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None,
                 source: str = "<config>"):
        where = source + (f":{line}" if line is not None else "")
        if field:
            where += f": {field}"
        super().__init__(f"{where}: {message}")
        self.field, self.line, self.source = field, line, source


# value types: (parse from text, format to text)

def _opt(conv):
    return lambda s: None if s.strip() in ("", "none", "None") else conv(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    return lambda s: tuple(conv(c) for c in s.split(",") if c.strip())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(c) for c in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    conv: Callable[[str], Any]
    default: Any
    help: str = ""


_SOLVER_DEFAULTS = SolverConfig.sweep_preset()

SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(int, 0, "master seed (env MARGINALS_SEED, --seed override)"),
        "threads": Key(int, 1, "worker threads for trials"),
        "N": Key(int, 1024, "sample size for single-matrix subcommands"),
    },
    "dist": {
        "kind": Key(str, "gaussian"),
        "n": Key(int, 8),
        "tail_exponent": Key(_opt(float), None),
        "fixed_vector": Key(_opt(_list(float)), None),
        "threshold_K": Key(_opt(float), None),
        "inner_kind": Key(_opt(str), None, "inner kind of a truncated spec"),
        "inner_tail_exponent": Key(_opt(float), None),
    },
    "model": {
        "p": Key(float, 3.0),
        "q": Key(_opt(float), None, "defaults to 4p"),
        "K": Key(float, 1.0),
        "L": Key(float, 1.0),
        "epsilon": Key(float, 0.25),
        "delta": Key(float, 0.1),
    },
    "solver": {f.name: Key(type(getattr(_SOLVER_DEFAULTS, f.name)), getattr(_SOLVER_DEFAULTS, f.name))
               for f in dataclasses.fields(SolverConfig)},
    "sweep": {
        "n_grid": Key(_list(int), (8, 16, 32, 64)),
        "trials_per_point": Key(int, 40),
        "N_min": Key(int, 16),
        "N_max": Key(int, 1 << 20),
        "bisect_tol": Key(float, 0.25),
        "oracle_draws": Key(int, 400_000),
        "diag_t": Key(float, 1.0),
        "early_stop": Key(_bool, True),
    },
    "opnorm": {
        "target": Key(str, "lp", "lp or l2inf"),
        "p": Key(float, 4.0),
    },
    "decouple": {
        "n": Key(int, 20),
        "s": Key(int, 400),
        "delta": Key(float, 0.1),
        "a": Key(float, 1.0),
        "spread": Key(float, 0.01),
        "M_frac": Key(float, 0.5),
        "max_attempts": Key(int, 20),
        "C_impl": Key(_opt(float), None, "enforce the B, M size condition with this C"),
    },
    "check": {
        "t": Key(_list(float), (1.0, 2.0)),
        "trials": Key(int, 10_000),
        "law_alpha": Key(float, 10.0, "tail exponent of the symmetrized Pareto law"),
        "q": Key(float, 8.0),
        "N": Key(int, 64),
        "B": Key(_opt(float), None, "large-coefficient level; default choose_B"),
        "probes": Key(int, 8, "random probe directions for diagnose-large"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict  # section -> key -> typed value

    def get(self, section: str, key: str):
        return self.values[section][key]

    def with_value(self, section: str, key: str, value) -> "RunConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals[section][key] = value
        return RunConfig(vals)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    # typed views

    def spec(self) -> DistributionSpec:
        d = self.values["dist"]
        try:
            inner = None
            if d["kind"] == "truncated":
                if d["inner_kind"] is None:
                    raise InvalidSpecError("truncated kind needs inner_kind")
                inner = DistributionSpec(d["inner_kind"], d["n"],
                                         tail_exponent=d["inner_tail_exponent"])
            return DistributionSpec(d["kind"], d["n"], tail_exponent=d["tail_exponent"],
                                    fixed_vector=d["fixed_vector"], inner=inner,
                                    threshold_K=d["threshold_K"])
        except InvalidSpecError as exc:
            raise ConfigError(str(exc), field="dist") from None

    def model(self) -> ModelParams:
        try:
            return ModelParams(**self.values["model"])
        except InvalidSpecError as exc:
            raise ConfigError(str(exc), field="model") from None

    def solver(self) -> SolverConfig:
        try:
            return SolverConfig(**self.values["solver"])
        except ValueError as exc:
            raise ConfigError(str(exc), field="solver") from None

    def sweep(self):
        from .harness import SweepConfig
        m, s = self.values["model"], self.values["sweep"]
        try:
            return SweepConfig(self.spec(), n_grid=s["n_grid"], p=m["p"], q=m["q"],
                               epsilon=m["epsilon"], delta=m["delta"],
                               trials_per_point=s["trials_per_point"], N_min=s["N_min"],
                               N_max=s["N_max"], bisect_tol=s["bisect_tol"],
                               master_seed=self.get("run", "seed"), solver=self.solver(),
                               threads=self.get("run", "threads"),
                               oracle_draws=s["oracle_draws"], diag_t=s["diag_t"],
                               early_stop=s["early_stop"])
        except (ValueError, InvalidSpecError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), field="sweep") from None

    def to_text(self) -> str:
        """INI echo listing every key, defaults included."""
        out = []
        for section, keys in SCHEMA.items():
            out.append(f"[{section}]")
            for k in keys:
                out.append(f"{k} = {_fmt(self.values[section][k])}".rstrip())
            out.append("")
        return "\n".join(out)


def defaults() -> RunConfig:
    return RunConfig({s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()})


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, for diagnostics."""
    idx, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            idx.setdefault((section, None), i)
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            idx.setdefault((section, m.group(1)), i)
    return idx


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keys are case sensitive (N, K, L)
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", f"{exc.section}.{exc.option}", exc.lineno,
                          source) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", exc.section, exc.lineno, source) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", None, exc.lineno, source) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("cannot parse line", None, line, source) from None
    lines = _line_index(text)
    cfg = defaults()
    vals = {s: dict(kv) for s, kv in cfg.values.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section; expected one of {sorted(SCHEMA)}", section,
                              lines.get((section, None)), source)
        for k, raw in parser.items(section):
            line = lines.get((section, k))
            if k not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{k}", line, source)
            try:
                vals[section][k] = SCHEMA[section][k].conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r}: {exc}", f"{section}.{k}", line,
                                  source) from None
    return RunConfig(vals)


def load_config(path: Optional[str]) -> RunConfig:
    """Defaults, then the file (if any), then the seed environment variable when the
    file does not set one."""
    if path is None:
        cfg, text = defaults(), ""
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read: {exc.strerror}", source=str(path)) from None
        cfg = parse_config(text, source=str(path))
    if os.environ.get(SEED_ENV) and not re.search(r"^\s*seed\s*[=:]", text, re.M):
        try:
            cfg = cfg.with_value("run", "seed", int(os.environ[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", field=SEED_ENV) from None
    return cfg


def validate(cfg: RunConfig) -> None:
    """Build every typed view so that bad combinations fail before any computation."""
    cfg.spec()
    cfg.model()
    cfg.solver()
    if cfg.get("run", "N") < 1:
        raise ConfigError("must be positive", "run.N")
    if cfg.get("run", "threads") < 1:
        raise ConfigError("must be positive", "run.threads")
    if cfg.get("opnorm", "target") not in ("lp", "l2inf"):
        raise ConfigError("must be 'lp' or 'l2inf'", "opnorm.target")
    if not cfg.get("opnorm", "p") >= 1:
        raise ConfigError("must be at least 1", "opnorm.p")
