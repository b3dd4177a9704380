"""Experiment configuration: TOML with a closed, validated schema.

Unknown keys are hard errors, not warnings — a silently ignored typo in
an experiment file is the classic way a sweep quietly runs the wrong
settings.  Error messages carry ``file:line`` of the offending key
whenever the key can be located in the source text.

Grammar (all sections top-level tables):

    mode = "static" | "continuous"      # required
    p = 0 | 1 | 2                       # optional, default 1
    seed = <64-bit integer>             # required; may be a digit string
    output_dir = "path"                 # optional, default "out"
    workers = <int >= 1>                # optional, default 1

    [model]                             # required
    kind = "lq_static" | "discrete_flip" | "lq_continuous" | "discrete_table"
    ... builtin parameters by kind ...

    [solver]                            # required
    x0_grid = [..] or {min=, max=, step=}
    particles = N          # static     paths = N, steps = K  # continuous
    damping, tol, max_iters, xi_bins, br_draws, value_batches
    policy_paths, [solver.policy]                  # continuous only

    [sweep]                             # required for `run`
    n = [10, 100, ...]                  # nonempty, ascending
    delta = [0.4, inf]                  # entries > 0, inf allowed
    epsilon = 0.05                      # > 0
    replications = 2000
    x0_eval = [..] or {min=, max=, step=}
    [sweep.deviation]                   # optional candidate class
    kind = "offsets" | "all_maps"
    offsets = [0.0, 0.5, ...]
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:            # Python < 3.11
    import tomli as tomllib

from .rng import SEED_MAX

__all__ = ["ConfigError", "ExperimentConfig", "load_config"]


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 3)."""


# Allowed keys, by section.  Model sections vary by kind.
_TOP_KEYS = {"mode", "p", "seed", "output_dir", "workers",
             "model", "solver", "sweep"}
_MODEL_KEYS = {
    "lq_static": {"kind", "rho", "kappa", "sigma", "action_min", "action_max",
                  "action_step", "mu0_mean", "mu0_std"},
    "discrete_flip": {"kind", "bias"},
    "lq_continuous": {"kind", "theta", "kappa", "horizon", "action_min",
                      "action_max", "action_step", "mu0_mean", "mu0_std",
                      "clip_radius", "u_cap"},
    "discrete_table": {"kind", "name", "states", "actions", "noise_values",
                       "noise_probs", "mu0_probs", "summary", "payoff",
                       "monotone", "transition", "eta_symmetric"},
}
_SOLVER_KEYS = {
    "static": {"particles", "x0_grid", "damping", "tol", "max_iters",
               "xi_bins", "br_draws", "value_batches"},
    "continuous": {"paths", "steps", "x0_grid", "damping", "tol", "max_iters",
                   "policy_paths", "value_batches", "policy"},
}
_SWEEP_KEYS = {"n", "delta", "epsilon", "replications", "x0_eval", "deviation"}
_DEVIATION_KEYS = {"offsets": {"kind", "offsets"}, "all_maps": {"kind"}}
_POLICY_KEYS = {"linear_gain": {"kind", "g1_values", "g0_values"},
                "constant": {"kind", "values"},
                "table": {"kind", "x_edges", "time_bins"}}


@dataclass
class ExperimentConfig:
    """Validated, normalized experiment settings."""

    mode: str
    p: int
    seed: int
    model: dict
    solver: dict
    sweep: Optional[dict]
    output_dir: str = "out"
    workers: int = 1
    path: str = "<config>"


def _find_line(lines, key: str, section: Optional[str] = None) -> int:
    """Best-effort 1-based line of ``key = ...``, searched after its
    section header when one is named.  Falls back to the header line,
    then to 1."""
    start = 0
    fallback = 1
    if section is not None:
        sec = re.compile(r"^\s*\[+\s*" + re.escape(section) + r"\s*\]+")
        for i, ln in enumerate(lines):
            if sec.match(ln):
                start, fallback = i, i + 1
                break
    pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i in range(start, len(lines)):
        if pat.match(lines[i]):
            return i + 1
    return fallback


def _grid_values(raw, where: str) -> list:
    """A grid is either an explicit list or {min, max, step}."""
    if isinstance(raw, dict):
        extra = set(raw) - {"min", "max", "step"}
        if extra:
            raise ConfigError(f"unknown grid key(s) {sorted(extra)} in {where}")
        try:
            lo, hi, step = float(raw["min"]), float(raw["max"]), float(raw["step"])
        except KeyError as e:
            raise ConfigError(f"grid in {where} needs min/max/step, missing {e}")
        if step <= 0 or hi < lo:
            raise ConfigError(f"grid in {where} needs step > 0 and max >= min")
        count = int(round((hi - lo) / step)) + 1
        return [float(v) for v in lo + step * np.arange(count)]
    if isinstance(raw, list) and raw and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        return [float(v) for v in raw]
    raise ConfigError(f"{where} must be a nonempty number list or a min/max/step table")


def _reject_unknown(section: dict, allowed: set, name: str, lines) -> None:
    for k in section:
        if k not in allowed:
            ln = _find_line(lines, k, name)
            raise ConfigError(f"line {ln}: unknown key {k!r} in [{name}]")


def _positive_number(v, what: str, line: int) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"line {line}: {what} must be a positive number, got {v!r}")
    return float(v)


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate an experiment file; raises ConfigError."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    try:
        data = tomllib.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: parse error: {e}")
    lines = blob.decode("utf-8", errors="replace").splitlines()

    def fail(key, section, msg):
        raise ConfigError(f"{path}:{_find_line(lines, key, section)}: {msg}")

    for k in data:
        if k not in _TOP_KEYS:
            fail(k, None, f"unknown top-level key {k!r}")

    mode = data.get("mode")
    if mode not in ("static", "continuous"):
        fail("mode", None, f"mode must be 'static' or 'continuous', got {mode!r}")

    p = data.get("p", 1)
    if isinstance(p, bool) or p not in (0, 1, 2):
        fail("p", None, f"p must be 0, 1 or 2, got {p!r}")

    if "seed" not in data:
        fail("mode", None, "seed is required (no implicit time-based seeds)")
    seed = data["seed"]
    if isinstance(seed, str) and seed.isdigit():
        seed = int(seed)                   # escape hatch for seeds > 2^63-1
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= SEED_MAX:
        fail("seed", None, f"seed must be an integer in [0, {SEED_MAX}]")

    workers = data.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        fail("workers", None, "workers must be an integer >= 1")
    output_dir = data.get("output_dir", "out")
    if not isinstance(output_dir, str) or not output_dir:
        fail("output_dir", None, "output_dir must be a nonempty string")

    # --- model ---
    model = data.get("model")
    if not isinstance(model, dict):
        fail("mode", None, "missing [model] section")
    kind = model.get("kind")
    if kind not in _MODEL_KEYS:
        fail("kind", "model", f"unknown model kind {kind!r}; expected one of "
             f"{sorted(_MODEL_KEYS)}")
    _reject_unknown(model, _MODEL_KEYS[kind], "model", lines)
    static_kind = kind in ("lq_static", "discrete_flip", "discrete_table")
    if static_kind != (mode == "static"):
        fail("kind", "model", f"model kind {kind!r} does not fit mode {mode!r}")

    # --- solver ---
    solver = data.get("solver")
    if not isinstance(solver, dict):
        fail("mode", None, "missing [solver] section")
    _reject_unknown(solver, _SOLVER_KEYS[mode], "solver", lines)
    if "x0_grid" not in solver:
        fail("x0_grid", "solver", "solver needs an x0_grid")
    solver = dict(solver)
    solver["x0_grid"] = _grid_values(solver["x0_grid"], "[solver] x0_grid")
    size_key = "particles" if mode == "static" else "paths"
    if size_key not in solver:
        fail(size_key, "solver", f"solver needs {size_key}")
    for key in (size_key, "steps", "max_iters", "xi_bins", "br_draws",
                "value_batches", "policy_paths"):
        if key in solver:
            v = solver[key]
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                fail(key, "solver", f"{key} must be an integer >= 1, got {v!r}")
    for key in ("damping", "tol"):
        if key in solver:
            solver[key] = _positive_number(solver[key], key,
                                           _find_line(lines, key, "solver"))
    pol = solver.get("policy")
    if pol is not None:
        pk = pol.get("kind")
        if pk not in _POLICY_KEYS:
            fail("kind", "solver.policy", f"unknown policy kind {pk!r}")
        _reject_unknown(pol, _POLICY_KEYS[pk], "solver.policy", lines)

    # --- sweep ---
    sweep = data.get("sweep")
    if sweep is not None:
        _reject_unknown(sweep, _SWEEP_KEYS, "sweep", lines)
        for key in ("n", "delta", "epsilon", "replications", "x0_eval"):
            if key not in sweep:
                fail(key, "sweep", f"[sweep] needs {key}")
        sweep = dict(sweep)

        ns = sweep["n"]
        ok = (isinstance(ns, list) and ns
              and all(isinstance(v, int) and not isinstance(v, bool) and v >= 1
                      for v in ns)
              and all(a < b for a, b in zip(ns, ns[1:])))
        if not ok:
            fail("n", "sweep", "n must be a nonempty ascending list of integers >= 1")

        deltas = sweep["delta"]
        if not isinstance(deltas, list) or not deltas:
            fail("delta", "sweep", "delta must be a nonempty list")
        norm = []
        for d in deltas:
            if isinstance(d, str) and d.lower() in ("inf", "infinity"):
                d = math.inf
            if isinstance(d, bool) or not isinstance(d, (int, float)) or not d > 0:
                fail("delta", "sweep",
                     f"delta entries must be > 0 (inf allowed), got {d!r}")
            norm.append(float(d))
        sweep["delta"] = norm

        eps = sweep["epsilon"]
        if isinstance(eps, bool) or not isinstance(eps, (int, float)) or not eps > 0:
            fail("epsilon", "sweep", f"epsilon must be > 0, got {eps!r}")
        sweep["epsilon"] = float(eps)

        reps = sweep["replications"]
        if isinstance(reps, bool) or not isinstance(reps, int) or reps < 1:
            fail("replications", "sweep", "replications must be an integer >= 1")

        sweep["x0_eval"] = _grid_values(sweep["x0_eval"], "[sweep] x0_eval")

        dev = sweep.get("deviation")
        if dev is not None:
            dk = dev.get("kind")
            if dk not in _DEVIATION_KEYS:
                fail("kind", "sweep.deviation",
                     f"unknown deviation kind {dk!r}")
            _reject_unknown(dev, _DEVIATION_KEYS[dk], "sweep.deviation", lines)
            if dk == "offsets":
                offs = dev.get("offsets")
                if not isinstance(offs, list) or not offs or not all(
                        isinstance(v, (int, float)) and not isinstance(v, bool)
                        for v in offs):
                    fail("offsets", "sweep.deviation",
                         "offsets must be a nonempty number list")
                if not any(float(v) == 0.0 for v in offs):
                    fail("offsets", "sweep.deviation",
                         "offsets must include 0 (the incumbent)")

    return ExperimentConfig(mode=mode, p=int(p), seed=seed,
                            model=dict(model), solver=solver, sweep=sweep,
                            output_dir=output_dir, workers=workers, path=path)
