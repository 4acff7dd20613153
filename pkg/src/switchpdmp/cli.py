"""Configuration-driven command line front end.

Config format
-------------
A flat INI-like file with four sections. Values are numbers, ``true`` or
``false``, double-quoted strings, or comma-separated lists of those. ``#``
and ``;`` start comment lines. Unknown sections or keys are errors.

``[model]``
    Either ``example = "<name>"`` plus that example's parameters (matrix
    parameters flattened row by row), or an inline model::

        d = 2
        lo = 0, 0
        hi = 1, 1
        wrap = false, false
        lambda_bar = 3
        field0 = "-x1", "-x2"
        field1 = "1 - x1", "-x2"
        rate0_1 = "1 + x1^2"
        rate1_0 = 2

    ``wrap`` is optional. Fields are numbered ``field0 .. fieldN`` without
    gaps. ``rateI_J`` is the rate from regime I to J, a number or a quoted
    expression; missing rates are zero. Comments must be on their own line.

``[simulation]``
    ``seed`` (mandatory), ``horizon``, ``n_steps``, ``output_dt``,
    ``n_replicas``, ``start``, ``start_regime``, ``h``.

``[analysis]``
    ``h``, ``order``, ``cutoff``, ``test_function``, ``gap_times``, ``bins``,
    ``k_max``, ``rank_tol``, ``grid_per_axis``, ``kinds``, ``resolution``,
    ``tau``, ``reach_mode``, ``n_starts``, ``closure``, ``burn_in``,
    ``max_iters``.

``[output]``
    ``dir``.

Exit codes are 0 on success, 1 on a configuration or validation failure and
2 on a runtime error. Every output file is written to a temporary name and
renamed into place; ``manifest.json`` records the config text and hash, the
seed, the tool version and the SHA-256 of each output.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import inspect
import json
import math
import os
import re
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import __version__
from . import brackets as br
from . import examples as ex
from . import measure as ms
from . import reach as rc
from . import simulate as sm
from .expr import parse
from .flow import DEFAULT_RANK_TOL, DEFAULT_STEP
from .system import Box, InvariantViolation, SwitchingSystem

__all__ = ["ConfigError", "RunConfig", "load_config", "main", "parse_config"]

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


class ValidationFailed(RuntimeError):
    """The model loaded but failed validation or its checks."""


# --------------------------------------------------------------------------
# values

_ITEM = re.compile(r'\s*("(?:[^"\\]|\\.)*"|[^,]+?)\s*(?:,|$)')


def _scalar(tok: str) -> Any:
    if tok.startswith('"'):
        if len(tok) < 2 or not tok.endswith('"'):
            raise ConfigError(f"unterminated string {tok!r}")
        return json.loads(tok)
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise ConfigError(f"expected a number, bool or quoted string, got {tok!r}") from None


def parse_value(text: str) -> Any:
    """A scalar, or a tuple when the value contains top-level commas."""
    text = text.strip()
    if not text:
        raise ConfigError("empty value")
    items = []
    pos = 0
    while pos < len(text):
        m = _ITEM.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"cannot parse value {text!r}")
        items.append(_scalar(m.group(1)))
        pos = m.end()
    if text.rstrip().endswith(","):
        raise ConfigError(f"trailing comma in {text!r}")
    return items[0] if len(items) == 1 else tuple(items)


# --------------------------------------------------------------------------
# schema

SECTIONS = ("model", "simulation", "analysis", "output")

# key: (kind, default); kind is one of int, float, bool, str, floats, strs
SIMULATION_KEYS = {
    "seed": ("int", None),
    "horizon": ("float", 100.0),
    "n_steps": ("int", None),
    "output_dt": ("float", 0.1),
    "n_replicas": ("int", 1),
    "start": ("floats", None),
    "start_regime": ("int", None),
    "h": ("float", DEFAULT_STEP),
}
ANALYSIS_KEYS = {
    "h": ("float", DEFAULT_STEP),
    "order": ("int", ms.DEFAULT_ORDER),
    "cutoff": ("float", 0.0),
    "test_function": ("str", "x1"),
    "gap_times": ("floats", None),
    "bins": ("int", None),
    "k_max": ("int", br.DEFAULT_K_MAX),
    "rank_tol": ("float", DEFAULT_RANK_TOL),
    "grid_per_axis": ("int", 5),
    "kinds": ("strs", ("weak", "strong")),
    "resolution": ("int", rc.DEFAULT_RESOLUTION),
    "tau": ("float", None),
    "reach_mode": ("str", "accessible"),
    "n_starts": ("int", rc.DEFAULT_STARTS),
    "closure": ("int", 1),
    "burn_in": ("float", 10.0),
    "max_iters": ("int", None),
}
OUTPUT_KEYS = {"dir": ("str", "out")}
INLINE_KEYS = {"d", "lo", "hi", "wrap", "lambda_bar", "name"}
_FIELD_KEY = re.compile(r"field(\d+)$")
_RATE_KEY = re.compile(r"rate(\d+)_(\d+)$")

# documented ranges: (low, high, low inclusive)
RANGES = {
    "horizon": (0.0, math.inf, False),
    "output_dt": (0.0, math.inf, False),
    "n_replicas": (1, 10_000, True),
    "n_steps": (0, 10**9, True),
    "h": (0.0, 1.0, False),
    "order": (1, 256, True),
    "cutoff": (0.0, 1.0, True),
    "bins": (1, 4096, True),
    "k_max": (0, 8, True),
    "rank_tol": (0.0, 1.0, False),
    "grid_per_axis": (1, 1024, True),
    "resolution": (4, 4096, True),
    "tau": (0.0, math.inf, False),
    "n_starts": (1, 4096, True),
    "closure": (0, 16, True),
    "burn_in": (0.0, math.inf, True),
    "max_iters": (0, 10**7, True),
}


def _coerce(section: str, key: str, kind: str, value: Any) -> Any:
    where = f"[{section}] {key}"
    if kind == "floats":
        vals = value if isinstance(value, tuple) else (value,)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            raise ConfigError(f"{where}: expected numbers")
        return tuple(float(v) for v in vals)
    if kind == "strs":
        vals = value if isinstance(value, tuple) else (value,)
        if not all(isinstance(v, str) for v in vals):
            raise ConfigError(f"{where}: expected quoted strings")
        return tuple(vals)
    if isinstance(value, tuple):
        raise ConfigError(f"{where}: expected a single value")
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a quoted string")
        return value
    raise AssertionError(kind)


def _check_range(section: str, key: str, value: Any) -> None:
    if value is None or key not in RANGES:
        return
    lo, hi, incl = RANGES[key]
    ok = (value >= lo if incl else value > lo) and value <= hi
    if not ok:
        raise ConfigError(f"[{section}] {key} = {value} is outside the allowed range")


def _section(raw: dict, section: str, schema: dict) -> dict:
    given = raw.get(section, {})
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in given:
            out[key] = _coerce(section, key, kind, given[key])
        else:
            out[key] = default
        _check_range(section, key, out[key])
    return out


@dataclass
class RunConfig:
    """Parsed and range-checked configuration."""

    model: dict
    simulation: dict
    analysis: dict
    output_dir: str
    text: str = ""
    sha256: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.simulation["seed"]


def parse_config(text: str) -> RunConfig:
    """Parse config text; every error raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    unknown = sorted(set(cp.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if "model" not in cp:
        raise ConfigError("missing [model] section")
    raw: dict[str, dict] = {}
    for sec in cp.sections():
        raw[sec] = {}
        for key, val in cp.items(sec):
            try:
                raw[sec][key] = parse_value(val)
            except ConfigError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from None
    sim = _section(raw, "simulation", SIMULATION_KEYS)
    if sim["seed"] is None:
        raise ConfigError("[simulation] seed is mandatory")
    if sim["seed"] < 0:
        raise ConfigError("[simulation] seed must be non-negative")
    ana = _section(raw, "analysis", ANALYSIS_KEYS)
    if ana["reach_mode"] not in ("accessible", "reachable", "omega"):
        raise ConfigError("[analysis] reach_mode must be accessible, reachable or omega")
    for k in ana["kinds"]:
        if k not in ("weak", "strong"):
            raise ConfigError(f"[analysis] kinds: unknown kind {k!r}")
    if ana["gap_times"] is not None and any(t <= 0 for t in ana["gap_times"]):
        raise ConfigError("[analysis] gap_times must be positive")
    out = _section(raw, "output", OUTPUT_KEYS)
    model = _model_section(raw["model"])
    return RunConfig(model, sim, ana, out["dir"], text, hashlib.sha256(text.encode()).hexdigest())


def _model_section(given: dict) -> dict:
    if "example" in given:
        name = given["example"]
        if not isinstance(name, str):
            raise ConfigError("[model] example must be a quoted string")
        if name not in ex.CATALOG:
            raise ConfigError(f"[model] unknown example {name!r}; known: {', '.join(sorted(ex.CATALOG))}")
        allowed = set(inspect.signature(ex.CATALOG[name]).parameters)
        params = {k: v for k, v in given.items() if k != "example"}
        unknown = sorted(set(params) - allowed)
        if unknown:
            raise ConfigError(f"unknown key(s) in [model] for example {name!r}: {', '.join(unknown)}")
        return {"example": name, "params": params}
    for key in given:
        if key not in INLINE_KEYS and not _FIELD_KEY.match(key) and not _RATE_KEY.match(key):
            raise ConfigError(f"unknown key in [model]: {key}")
    for key in ("d", "lo", "hi", "lambda_bar"):
        if key not in given:
            raise ConfigError(f"[model] {key} is required for an inline model")
    return {"inline": dict(given)}


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


# --------------------------------------------------------------------------
# model construction


def _example_params(name: str, params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            arr = np.asarray(v, dtype=float)
            n = int(round(math.sqrt(arr.size)))
            if k == "A" and n * n == arr.size:
                v = tuple(tuple(row) for row in arr.reshape(n, n).tolist())
            else:
                v = tuple(arr.tolist())
        out[k] = v
    return out


def build_example(name: str, params: dict) -> ex.ExampleSpec:
    try:
        return ex.get_example(name, **_example_params(name, params))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"example {name!r}: {exc}") from None


def _inline_system(m: dict) -> SwitchingSystem:
    d = m["d"]
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        raise ConfigError("[model] d must be a positive integer")
    lo = _coerce("model", "lo", "floats", m["lo"])
    hi = _coerce("model", "hi", "floats", m["hi"])
    wrap_raw = m.get("wrap", (False,) * d)
    wrap = wrap_raw if isinstance(wrap_raw, tuple) else (wrap_raw,)
    if not all(isinstance(w, bool) for w in wrap):
        raise ConfigError("[model] wrap must be true/false values")
    if not (len(lo) == len(hi) == len(wrap) == d):
        raise ConfigError("[model] lo, hi and wrap need d entries each")
    lam = _coerce("model", "lambda_bar", "float", m["lambda_bar"])
    fields = {}
    rates = {}
    for key, val in m.items():
        fm = _FIELD_KEY.match(key)
        rm = _RATE_KEY.match(key)
        if fm:
            comps = val if isinstance(val, tuple) else (val,)
            if not all(isinstance(c, str) for c in comps) or len(comps) != d:
                raise ConfigError(f"[model] {key} needs {d} quoted expressions")
            fields[int(fm.group(1))] = [parse(c, d) for c in comps]
        elif rm:
            if isinstance(val, tuple) or isinstance(val, bool):
                raise ConfigError(f"[model] {key} must be a number or a quoted expression")
            rates[(int(rm.group(1)), int(rm.group(2)))] = parse(val, d) if isinstance(val, str) else float(val)
    n = len(fields)
    if sorted(fields) != list(range(n)):
        raise ConfigError("[model] fields must be numbered field0 .. fieldN without gaps")
    for i, j in rates:
        if i >= n or j >= n or i == j:
            raise ConfigError(f"[model] rate{i}_{j} does not name two distinct regimes")
    table = [[rates.get((i, j), 0.0) for j in range(n)] for i in range(n)]
    name = m.get("name", "inline")
    try:
        box = Box(lo, hi, wrap=wrap)
        return SwitchingSystem([fields[i] for i in range(n)], table, lam, box, name=str(name))
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


@dataclass
class Model:
    system: SwitchingSystem
    spec: Optional[ex.ExampleSpec]
    start: tuple


def build_model(cfg: RunConfig) -> Model:
    if "example" in cfg.model:
        spec = build_example(cfg.model["example"], cfg.model["params"])
        sysm = spec.system
        default_start = spec.start
    else:
        spec = None
        sysm = _inline_system(cfg.model["inline"])
        default_start = (tuple((np.asarray(sysm.box.lo) + np.asarray(sysm.box.hi)) / 2), 0)
    x0 = cfg.simulation["start"]
    if x0 is None:
        x0 = tuple(default_start[0])
    i0 = cfg.simulation["start_regime"]
    if i0 is None:
        i0 = default_start[1] if cfg.simulation["start"] is None else 0
    if len(x0) != sysm.d:
        raise ConfigError(f"[simulation] start needs {sysm.d} coordinates")
    if not 0 <= i0 < sysm.n_regimes:
        raise ConfigError(f"[simulation] start_regime must be in 0..{sysm.n_regimes - 1}")
    if not sysm.box.contains(np.asarray(x0, dtype=float)):
        raise ConfigError("[simulation] start lies outside the box")
    return Model(sysm, spec, (tuple(float(v) for v in x0), int(i0)))


# --------------------------------------------------------------------------
# output


class Outputs:
    """Collects files for one run and writes them atomically."""

    def __init__(self, directory: str):
        self.dir = directory
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data) -> None:
        self.files[name] = data.encode("utf-8") if isinstance(data, str) else bytes(data)

    def add_json(self, name: str, obj: Any) -> None:
        self.add(name, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def write(self, name: str, data) -> None:
        os.makedirs(self.dir, exist_ok=True)
        if isinstance(data, str):
            data = data.encode("utf-8")
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=self.dir)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, os.path.join(self.dir, name))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def flush(self, manifest: dict) -> None:
        manifest = dict(manifest)
        manifest["outputs"] = {k: hashlib.sha256(v).hexdigest() for k, v in sorted(self.files.items())}
        for name, data in sorted(self.files.items()):
            self.write(name, data)
        self.write("manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _manifest(command: str, cfg: Optional[RunConfig], seed: Optional[int], extra: Optional[dict] = None) -> dict:
    out = {
        "tool": "switchpdmp",
        "version": __version__,
        "stream": sm.STREAM_VERSION,
        "command": command,
        "seed": seed,
    }
    if cfg is not None:
        out["config"] = cfg.text
        out["config_sha256"] = cfg.sha256
    if extra:
        out.update(extra)
    return out


# --------------------------------------------------------------------------
# subcommands


def _threads(args) -> int:
    return args.threads if args.threads is not None else sm.default_threads()


def cmd_validate(cfg: RunConfig, args, out: Outputs) -> int:
    model = build_model(cfg)
    report = model.system.report
    blocking = report.kinds() - {"not irreducible"}
    payload = report.as_dict()
    payload["blocking"] = sorted(blocking)
    payload["system"] = model.system.describe()
    if model.spec is not None:
        payload["references"] = {k: _refcheck_dict(v) for k, v in model.spec.check_references().items()}
    out.add_json("validation.json", payload)
    out.flush(_manifest("validate", cfg, cfg.seed))
    print(report.summary())
    return EXIT_INVALID if blocking else EXIT_OK


def _paths(cfg: RunConfig, model: Model, args, dense: bool) -> list:
    sysm = model.system
    sysm.ensure_valid()
    sim = cfg.simulation
    if sim["n_steps"] is not None and not dense:
        def op(s, z0, rng):
            return sm.sample_embedded(s, z0, sim["n_steps"], rng, h=sim["h"])
    else:
        def op(s, z0, rng):
            return sm.sample_path(s, z0, sim["horizon"], sim["output_dt"], rng, h=sim["h"])
    return sm.ensemble(sysm, model.start, sim["n_replicas"], op, cfg.seed, threads=_threads(args))


def cmd_simulate(cfg: RunConfig, args, out: Outputs) -> int:
    model = build_model(cfg)
    paths = _paths(cfg, model, args, dense=False)
    summary = []
    for k, p in enumerate(paths):
        out.add(f"skeleton_r{k}.json", p.skeleton_json())
        if p.has_dense:
            out.add(f"path_r{k}.csv", p.dense_csv())
        summary.append({"replica": k, "n_jumps": p.n_jumps, "true_switches": int(p.true_switch.sum()), "clamps": p.clamps})
    out.add_json("simulate.json", {"replicas": summary})
    out.flush(_manifest("simulate", cfg, cfg.seed))
    return EXIT_OK


def _test_function(cfg: RunConfig, d: int):
    try:
        return parse(cfg.analysis["test_function"], d)
    except ValueError as exc:
        raise ConfigError(f"[analysis] test_function: {exc}") from None


def cmd_occupation(cfg: RunConfig, args, out: Outputs) -> int:
    model = build_model(cfg)
    sysm = model.system
    ana = cfg.analysis
    f = _test_function(cfg, sysm.d)
    paths = _paths(cfg, model, args, dense=True)
    T = cfg.simulation["horizon"]
    times = ana["gap_times"] or (T,)
    if any(t > T for t in times):
        raise ConfigError("[analysis] gap_times must not exceed the horizon")
    gaps = []
    for k, p in enumerate(paths):
        cont = ms.continuous_occupation(p, T, box=sysm.box, n_regimes=sysm.n_regimes)
        n_t = p.count(T)
        disc = ms.discrete_occupation(p, n_t, box=sysm.box, n_regimes=sysm.n_regimes)
        out.add(f"continuous_r{k}.csv", cont.to_csv())
        out.add(f"discrete_r{k}.csv", disc.to_csv())
        if sysm.d <= 3:
            out.add(f"histogram_r{k}.csv", ms.histogram(cont, ana["bins"]).to_csv())
        row = {"replica": k, "gaps": []}
        for t in times:
            g = ms.correspondence_gap(sysm, p, f, t, ana["order"], ana["h"], ana["cutoff"])
            row["gaps"].append({"t": t, "n_t": p.count(t), "gap": g})
        gaps.append(row)
    out.add_json("gap.json", {"test_function": ana["test_function"], "order": ana["order"], "replicas": gaps})
    out.flush(_manifest("occupation", cfg, cfg.seed))
    return EXIT_OK


def cmd_brackets(cfg: RunConfig, args, out: Outputs) -> int:
    model = build_model(cfg)
    sysm = model.system
    ana = cfg.analysis
    pts = br.grid_points(sysm, ana["grid_per_axis"])
    reports = br.scan_region(sysm, pts, ana["kinds"], ana["k_max"], ana["rank_tol"])
    out.add("brackets.csv", br.verdict_csv(reports))
    summary = {
        kind: {
            "points": sum(r.kind == kind for r in reports),
            "satisfied": sum(r.satisfied for r in reports if r.kind == kind),
            "low_confidence": sum(bool(r.low_confidence) for r in reports if r.kind == kind),
        }
        for kind in ana["kinds"]
    }
    out.add_json("brackets.json", {"k_max": ana["k_max"], "rank_tol": ana["rank_tol"], "summary": summary})
    out.flush(_manifest("brackets", cfg, cfg.seed))
    return EXIT_OK


def cmd_reach(cfg: RunConfig, args, out: Outputs) -> int:
    model = build_model(cfg)
    sysm = model.system
    ana = cfg.analysis
    h = ana["h"]
    common = dict(resolution=ana["resolution"], tau=ana["tau"], max_iters=ana["max_iters"], h=h)
    mode = ana["reach_mode"]
    if mode == "accessible":
        grid = rc.accessible_set(sysm, closure=ana["closure"], n_starts=ana["n_starts"], threads=_threads(args), **common)
    elif mode == "reachable":
        grid = rc.reachable(sysm, model.start[0], **common)
    else:
        grid = rc.omega_limit(sysm, model.start[0], burn_in_time=ana["burn_in"], **common)
    out.add("reach.csv", grid.to_csv())
    if sysm.d == 2:
        out.add("reach.pgm", grid.to_pgm())
    out.add_json(
        "reach.json",
        {
            "mode": mode,
            "resolution": grid.resolution,
            "tau": grid.tau,
            "h": grid.h,
            "n_occupied": grid.n_occupied,
            "fraction": grid.fraction,
            "iterations": grid.iterations,
            "converged": bool(grid.converged),
        },
    )
    out.flush(_manifest("reach", cfg, cfg.seed))
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def _refcheck_dict(r: ex.RefCheck) -> dict:
    return {"value": r.value, "oracle": r.oracle, "error": r.error, "tolerance": r.tolerance, "pass": r.ok}


VERIFY_HORIZON = 5e4
VERIFY_STEP = 0.02
VERIFY_DT = 0.01
VERIFY_KS = 0.02


def verify_example(name: str, params: dict, seed: Optional[int], horizon: float = VERIFY_HORIZON) -> dict:
    """Run the named example's checks and return a JSON-ready verdict."""
    spec = build_example(name, params)
    checks = {k: _refcheck_dict(v) for k, v in spec.check_references().items()}
    result: dict[str, Any] = {"example": name, "params": spec.params, "references": checks}
    ok = all(c["pass"] for c in checks.values())
    sysm = spec.system
    if name == "interval_beta":
        if seed is None:
            raise ConfigError("verify interval_beta needs --seed")
        path = sm.sample_path(sysm, spec.start, horizon, VERIFY_DT, seed, h=VERIFY_STEP)
        occ = ms.continuous_occupation(path, horizon, box=sysm.box, n_regimes=2)
        vals, w = occ.marginal(0, regime=0)
        ks = ms.ks_distance_1d(vals, spec.extras["cdf"][0], w)
        result.update({"ks": ks, "ks_threshold": VERIFY_KS, "horizon": horizon, "seed": seed})
        ok = ok and ks < VERIFY_KS
    elif name in ("torus", "planar_linear"):
        pts = br.grid_points(sysm, 5)
        reps = br.scan_region(sysm, pts, ("weak", "strong"), br.DEFAULT_K_MAX)
        weak = [r for r in reps if r.kind == "weak"]
        strong = [r for r in reps if r.kind == "strong"]
        if name == "torus":
            expect = all(r.satisfied and r.order_achieved == 0 for r in weak) and not any(r.satisfied for r in strong)
        else:
            A = np.asarray(spec.extras["A"])
            a = np.asarray(spec.extras["a"])
            generic = abs(np.linalg.det(np.column_stack([A @ a, A @ A @ a]))) > 1e-12
            if generic:
                expect = all(r.satisfied and r.order_achieved <= 1 for r in strong)
            else:
                expect = all(r.satisfied for r in weak)
        result["brackets"] = {
            "points": len(pts),
            "weak_satisfied": sum(r.satisfied for r in weak),
            "strong_satisfied": sum(r.satisfied for r in strong),
            "pass": bool(expect),
        }
        ok = ok and expect
    result["pass"] = bool(ok)
    return result


# --------------------------------------------------------------------------
# entry point

CONFIG_COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "occupation": cmd_occupation,
    "brackets": cmd_brackets,
    "reach": cmd_reach,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switchpdmp", description="Switching PDMP simulation and analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in CONFIG_COMMANDS:
        s = sub.add_parser(name, help=f"{name} from a config file")
        s.add_argument("config", help="path to the config file")
        s.add_argument("--out", help="output directory (overrides [output] dir)")
        s.add_argument("--threads", type=int, help="worker cap (default: PDMP_THREADS or 1)")
    v = sub.add_parser("verify", help="run the checks of a catalog example")
    v.add_argument("example", help=f"one of {', '.join(sorted(ex.CATALOG))}")
    v.add_argument("--lambda", dest="lam", type=float, help="switching rate (interval_beta, torus)")
    v.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="example parameter override")
    v.add_argument("--seed", type=int, help="master seed (needed for sampled checks)")
    v.add_argument("--horizon", type=float, default=VERIFY_HORIZON, help="simulation horizon for sampled checks")
    v.add_argument("--out", help="also write verify.json and manifest.json here")
    v.add_argument("--threads", type=int, help="worker cap (unused by current checks)")
    return p


def _verify_params(args) -> dict:
    params: dict[str, Any] = {}
    for item in args.param:
        if "=" not in item:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = parse_value(v)
    if args.lam is not None:
        key = {"interval_beta": "lam", "torus": "rate"}.get(args.example)
        if key is None:
            raise ConfigError(f"--lambda is not a parameter of {args.example!r}; use --param")
        params[key] = args.lam
    if args.example not in ex.CATALOG:
        raise ConfigError(f"unknown example {args.example!r}; known: {', '.join(sorted(ex.CATALOG))}")
    allowed = set(inspect.signature(ex.CATALOG[args.example]).parameters)
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ConfigError(f"unknown parameter(s) for {args.example!r}: {', '.join(unknown)}")
    return params


def _error(exc: BaseException, code: int, out_dir: Optional[str]) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    if out_dir:
        try:
            Outputs(out_dir).write("error.json", json.dumps(payload, indent=1, sort_keys=True) + "\n")
        except OSError:
            pass
    return code


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    out_dir = getattr(args, "out", None)
    if args.threads is not None and args.threads < 1:
        return _error(ConfigError("--threads must be >= 1"), EXIT_INVALID, out_dir)
    try:
        if args.command == "verify":
            result = verify_example(args.example, _verify_params(args), args.seed, args.horizon)
            print(json.dumps(result, sort_keys=True))
            if out_dir:
                out = Outputs(out_dir)
                out.add_json("verify.json", result)
                out.flush(_manifest("verify", None, args.seed, {"example": args.example, "params": result["params"]}))
            return EXIT_OK if result["pass"] else EXIT_INVALID
        cfg = load_config(args.config)
        out_dir = out_dir or cfg.output_dir
        return CONFIG_COMMANDS[args.command](cfg, args, Outputs(out_dir))
    except (ConfigError, InvariantViolation, ValidationFailed) as exc:
        return _error(exc, EXIT_INVALID, out_dir)
    except Exception as exc:  # runtime failures map to exit code 2
        return _error(exc, EXIT_RUNTIME, out_dir)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
