"""Experiment harness: config-driven sweeps with strict seed discipline.

Verbs: ``run`` (certificate + solve + deviation sweep + chart),
``verify`` (exact oracle vs Monte Carlo agreement table), ``mfe``
(solve only), ``simulate`` (one population realization dump).

Exit codes: 0 success; 2 solver non-convergence; 3 configuration error;
4 verification disagreement.  Partial outputs are removed on failure.
Output bytes are a pure function of (config, seed): worker counts only
reschedule work, wall-clock timings go to stderr, and every CSV row
carries the seed and the build identifier.

Negative-control hook: setting MEANFIELD_VERIFY_CORRUPT=1 makes
``verify`` deliberately mis-index its estimated law (the kind of
bookkeeping slip a seed mismatch would cause) to prove the 3-SE gate
actually trips.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from fractions import Fraction

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .continuous_game import (ct_deviation_report, save_flow,
                              simulate_n_player_openloop, solve_mfg_flow)
from .measures import MeasureBatch
from .models import check_assumptions, model_from_dict
from .oracle import (DiscreteInstance, exact_conditional_law,
                     exact_deviation_gain, exact_mfe, exact_payoff,
                     flip_instance)
from .rng import SEED_MAX, substream
from .static_game import (Strategy, audit_grid, class_label,
                          default_deviation_class, estimate_conditional_law,
                          estimate_deviation_gain, induce_profile,
                          report_from_audits, solve_mfe,
                          solve_population_state)

__all__ = ["main"]

BUILD_ID = f"meanfield-{__version__}"

SWEEP_HEADER = ["n", "delta", "x0", "gain", "gain_se", "gap", "gap_se",
                "dbar_delta", "gbar_delta", "classification", "seed", "build"]
SUMMARY_HEADER = ["n", "delta", "dbar_delta", "dbar_se", "gbar_delta",
                  "gbar_se", "classification", "dbar_ratio", "gbar_ratio",
                  "seed", "build"]


class Failure(Exception):
    """Terminal harness failure carrying its exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# =====================================================================
# Output bookkeeping
# =====================================================================

class _Sink:
    """Tracks written files so a failed run leaves nothing behind."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.paths = []
        self.made_dirs = []

    def ensure_dir(self, d: str) -> str:
        pending = []
        cur = os.path.abspath(d)
        while cur and not os.path.isdir(cur):
            pending.append(cur)
            cur = os.path.dirname(cur)
        os.makedirs(d, exist_ok=True)
        self.made_dirs.extend(reversed(pending))
        return d

    def path(self, *parts) -> str:
        self.ensure_dir(self.out_dir)
        return os.path.join(self.out_dir, *parts)

    def write_csv(self, path: str, header, rows) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        self.paths.append(path)

    def write_text(self, path: str, text: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        self.paths.append(path)

    def track_tree(self, directory: str) -> None:
        for root, _dirs, files in os.walk(directory):
            for f in files:
                self.paths.append(os.path.join(root, f))

    def discard(self) -> None:
        for p in self.paths:
            try:
                os.unlink(p)
            except OSError:
                pass
        for d in reversed(self.made_dirs):
            try:
                os.rmdir(d)
            except OSError:
                pass


def _cell(v) -> str:
    """Deterministic CSV cell: shortest round-trip floats, plain ints."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# =====================================================================
# Config plumbing shared by the verbs
# =====================================================================

def _static_solver_kwargs(cfg: ExperimentConfig) -> dict:
    s = cfg.solver
    kw = {"particles": s["particles"],
          "x0_grid": np.asarray(s["x0_grid"], dtype=np.float64),
          "seed": cfg.seed}
    for src, dst in (("xi_bins", "xi_bins"), ("damping", "damping"),
                     ("tol", "tol"), ("max_iters", "max_br_iters"),
                     ("br_draws", "br_draws"),
                     ("value_batches", "value_batches")):
        if src in s:
            kw[dst] = s[src]
    return kw


def _flow_solver_kwargs(cfg: ExperimentConfig) -> dict:
    s = cfg.solver
    kw = {"paths": s["paths"],
          "x0_grid": np.asarray(s["x0_grid"], dtype=np.float64),
          "seed": cfg.seed}
    for key in ("steps", "damping", "tol", "max_iters", "policy_paths",
                "value_batches"):
        if key in s:
            kw[key] = s[key]
    if "policy" in s:
        kw["policy_class"] = s["policy"]
    return kw


def _sweep_settings(cfg: ExperimentConfig) -> dict:
    if cfg.sweep is None:
        raise ConfigError(f"{cfg.path}: this verb needs a [sweep] section")
    sw = cfg.sweep
    dev = sw.get("deviation")
    if dev is not None and cfg.mode == "continuous" and dev["kind"] != "offsets":
        raise ConfigError(f"{cfg.path}: continuous sweeps support only "
                          f"offset deviation classes")
    return {"ns": list(sw["n"]), "deltas": list(sw["delta"]),
            "epsilon": sw["epsilon"], "reps": sw["replications"],
            "x0_eval": list(sw["x0_eval"]), "deviation": dev}


def _se_of_max(audits, delta: float, n: int):
    """Standard errors attached to the truncated max gain / max gap."""
    radius = math.inf if math.isinf(delta) else float(n) ** delta
    sel = [a for a in audits if abs(a.x0) <= radius]
    if not sel:
        return "", ""
    top_gain = max(sel, key=lambda a: a.gain)
    top_gap = max(sel, key=lambda a: a.gap)
    return top_gain.gain_se, top_gap.gap_se


def _run_sweep(cfg, sink, audits_for_n, label):
    """Shared sweep loop: reports per (n, delta), CSVs, decay chart.

    ``audits_for_n`` maps a population size to its per-pin audit list;
    audits are delta-independent, so each n is audited once and every
    delta reuses the same audits.
    """
    st = _sweep_settings(cfg)
    sweep_rows, summary_rows = [], []
    series = {}
    last = {}
    for n in st["ns"]:
        t0 = time.monotonic()
        audits = audits_for_n(n, st)
        for d in st["deltas"]:
            rep = report_from_audits(audits, n, d, st["epsilon"], st["reps"],
                                     cfg.seed, label)
            for row in rep.rows():
                sweep_rows.append([row[k] for k in SWEEP_HEADER[:-1]] + [BUILD_ID])
            dbar_se, gbar_se = _se_of_max(audits, d, n)
            prev = last.get(d)
            dbar_ratio = ("" if prev is None or prev[0] == 0.0
                          else rep.dbar_delta / prev[0])
            gbar_ratio = ("" if prev is None or prev[1] == 0.0
                          else rep.gbar_delta / prev[1])
            last[d] = (rep.dbar_delta, rep.gbar_delta)
            summary_rows.append([n, d, rep.dbar_delta, dbar_se,
                                 rep.gbar_delta, gbar_se, rep.classification,
                                 dbar_ratio, gbar_ratio, cfg.seed, BUILD_ID])
            key = "inf" if math.isinf(d) else f"{d:g}"
            series.setdefault(f"max gain, delta={key}", ([], []))
            series.setdefault(f"value gap, delta={key}", ([], []))
            series[f"max gain, delta={key}"][0].append(n)
            series[f"max gain, delta={key}"][1].append(rep.dbar_delta)
            series[f"value gap, delta={key}"][0].append(n)
            series[f"value gap, delta={key}"][1].append(rep.gbar_delta)
        print(f"sweep n={n}: {time.monotonic() - t0:.2f}s", file=sys.stderr)

    sink.write_csv(sink.path("sweep.csv"), SWEEP_HEADER, sweep_rows)
    sink.write_csv(sink.path("sweep_summary.csv"), SUMMARY_HEADER, summary_rows)
    from .svg import decay_chart
    chart = decay_chart([{"label": k, "xs": xs, "ys": ys}
                         for k, (xs, ys) in series.items()],
                        title="deviation decay vs population size")
    sink.write_text(sink.path("decay.svg"), chart)


# =====================================================================
# Static-mode verbs
# =====================================================================

def _solve_static(cfg: ExperimentConfig, sink: _Sink):
    model = model_from_dict(cfg.model)
    mfe = solve_mfe(model, cfg.p, **_static_solver_kwargs(cfg))
    if not mfe.converged:
        raise Failure(2, f"equilibrium solve did not converge: residual "
                         f"{mfe.fixed_point_residual:.3g} after "
                         f"{mfe.br_iterations} iterations")
    rows = []
    table = mfe.strategy.table
    for gi, x0 in enumerate(mfe.x0_grid):
        for b in range(mfe.strategy.xi_bins):
            rows.append([float(x0), b, float(table[gi, b]),
                         float(mfe.values[gi]), float(mfe.value_ses[gi]),
                         mfe.fixed_point_residual, mfe.br_iterations,
                         mfe.converged, cfg.seed, BUILD_ID])
    sink.write_csv(sink.path("mfe.csv"),
                   ["x0", "xi_bin", "action", "value", "value_se", "residual",
                    "iterations", "converged", "seed", "build"], rows)
    return model, mfe


def _write_static_certificate(cfg: ExperimentConfig, sink: _Sink, model):
    cert = check_assumptions(model, cfg.p, 4096, cfg.seed)
    sink.write_csv(sink.path("certificate.csv"),
                   ["model", "p", "sample_size", "c_mean", "c_max",
                    "integrability_mean", "integrability_flagged",
                    "growth_violations", "verdict", "seed", "build"],
                   [[cert.model_name, cert.p, cert.sample_size, cert.c_mean,
                     cert.c_max, cert.integrability_mean,
                     cert.integrability_flagged, cert.growth_violations,
                     cert.verdict, cfg.seed, BUILD_ID]])


def _run_static(cfg: ExperimentConfig, sink: _Sink) -> int:
    model, mfe = _solve_static(cfg, sink)
    _write_static_certificate(cfg, sink, model)

    def audits_for_n(n, st):
        dev = st["deviation"] or default_deviation_class(model)
        return audit_grid(model, mfe, n, st["x0_eval"], st["reps"], cfg.seed,
                          dev, workers=cfg.workers)

    st_dev = _sweep_settings(cfg)["deviation"]
    label_cls = st_dev or default_deviation_class(model)
    _run_sweep(cfg, sink, audits_for_n, class_label(label_cls))
    return 0


def _simulate_static(cfg: ExperimentConfig, sink: _Sink) -> int:
    model, mfe = _solve_static(cfg, sink)
    n = _sweep_settings(cfg)["ns"][-1]
    rng_x0 = substream(cfg.seed, "simulate", "x0")
    rng_xi = substream(cfg.seed, "simulate", "xi")
    rng_eta = substream(cfg.seed, "simulate", "eta")
    x0 = np.asarray(model.mu0_sampler(rng_x0, n), dtype=np.float64).reshape(n)
    xi = rng_xi.random(n)
    eta = np.asarray(model.eta_sampler(rng_eta, n), dtype=np.float64).reshape(n)
    state = solve_population_state(model, induce_profile(mfe, n), (x0, xi, eta))
    rows = [[j, float(state.x0[j]), float(state.xi[j]), float(state.eta[j]),
             float(state.actions[j]), float(state.x1[j]), cfg.seed, BUILD_ID]
            for j in range(n)]
    sink.write_csv(sink.path("population.csv"),
                   ["agent", "x0", "xi", "eta", "action", "x1", "seed", "build"],
                   rows)
    return 0


# =====================================================================
# Continuous-mode verbs
# =====================================================================

def _write_drift_certificate(cfg: ExperimentConfig, sink: _Sink, model):
    """Sampled audit of the declared drift growth bound.

    The one-period assumption checker does not apply to diffusions, so
    the certificate here records violations of
    |b(t, x0, x, m, a)| <= drift_bound * (1 + |x| + |mean|) + |a|
    over random probe points.
    """
    rng = substream(cfg.seed, "certificate")
    count = 4096
    # Batch layout: one single-atom probe measure per sampled row.
    x0 = np.asarray(model.mu0_sampler(rng, count),
                    dtype=np.float64).reshape(count, 1)
    x = x0 + rng.standard_normal((count, 1))
    m1 = 3.0 * rng.standard_normal((count, 1))
    lo, hi = model.action_range
    a = rng.uniform(lo, hi, (count, 1))
    probe = MeasureBatch(np.stack([np.zeros((count, 1)), m1], axis=-1),
                         split=(1, 1, 0))
    violations = 0
    for t in (0.0, 0.5 * model.horizon, model.horizon):
        b = np.asarray(model.drift(t, x0, x, probe, a), dtype=np.float64)
        b = np.broadcast_to(b, x.shape)
        cap = model.drift_bound * (1.0 + np.abs(x) + np.abs(m1)) + np.abs(a)
        violations += int(np.sum(np.abs(b) > cap + 1e-9))
    verdict = "pass" if violations == 0 else "fail"
    sink.write_csv(sink.path("certificate.csv"),
                   ["model", "p", "sample_size", "drift_bound",
                    "drift_lipschitz", "growth_violations", "verdict",
                    "seed", "build"],
                   [[model.name, cfg.p, 3 * count, model.drift_bound,
                     model.drift_lipschitz, violations, verdict, cfg.seed,
                     BUILD_ID]])


def _solve_continuous(cfg: ExperimentConfig, sink: _Sink):
    model = model_from_dict(cfg.model)
    mfg = solve_mfg_flow(model, cfg.p, **_flow_solver_kwargs(cfg))
    if not mfg.converged:
        raise Failure(2, f"flow solve did not converge: residual "
                         f"{mfg.residual:.3g} after {mfg.iterations} "
                         f"iterations")
    rows = [[float(x0), mfg.policy_label, float(v), float(se), mfg.residual,
             mfg.iterations, mfg.converged, cfg.seed, BUILD_ID]
            for x0, v, se in zip(mfg.x0_grid, mfg.values, mfg.value_ses)]
    sink.write_csv(sink.path("mfe.csv"),
                   ["x0", "policy", "value", "value_se", "residual",
                    "iterations", "converged", "seed", "build"], rows)
    flow_dir = sink.path("flow")
    sink.ensure_dir(flow_dir)
    save_flow(mfg.flow, flow_dir)
    sink.track_tree(flow_dir)
    return model, mfg


def _run_continuous(cfg: ExperimentConfig, sink: _Sink) -> int:
    model, mfg = _solve_continuous(cfg, sink)
    _write_drift_certificate(cfg, sink, model)

    def audits_for_n(n, st):
        dev = st["deviation"]
        rep = ct_deviation_report(model, mfg, n, st["deltas"][0],
                                  st["epsilon"], st["x0_eval"], st["reps"],
                                  cfg.seed, deviation_class=dev,
                                  workers=cfg.workers)
        return rep.pins

    st_dev = _sweep_settings(cfg)["deviation"]
    label_cls = st_dev or {"kind": "offsets",
                           "offsets": [0.0, -1.0, -0.5, 0.5, 1.0]}
    _run_sweep(cfg, sink, audits_for_n, class_label(label_cls))
    return 0


def _simulate_continuous(cfg: ExperimentConfig, sink: _Sink) -> int:
    model, mfg = _solve_continuous(cfg, sink)
    n = _sweep_settings(cfg)["ns"][-1]
    run = simulate_n_player_openloop(model, mfg, n, cfg.seed)
    dt = run.grid.dt
    rows = []
    for j in range(n):
        for k in range(run.grid.steps + 1):
            act = float(run.actions[j, k]) if k < run.grid.steps else ""
            rows.append([j, 0, k, k * dt, float(run.actual[j, k]),
                         float(run.shadow[j, k]), act, cfg.seed, BUILD_ID])
    sink.write_csv(sink.path("trajectories.csv"),
                   ["agent", "path", "step", "t", "x", "shadow_x", "action",
                    "seed", "build"], rows)
    return 0


# =====================================================================
# verify: oracle vs Monte Carlo
# =====================================================================

def _instance_from_table(params: dict) -> DiscreteInstance:
    """Oracle twin of a discrete_table model declaration.

    Probabilities must be exactly representable (dyadic floats are);
    anything else fails the oracle's exact-sum invariant by design.
    """
    def fracs(values):
        return tuple(Fraction(float(v)) for v in values)

    summary = params["summary"]
    pay = params.get("payoff", {"kind": "mass_at",
                                "value": float(params["states"][0])})
    return DiscreteInstance(
        states=tuple(float(v) for v in params["states"]),
        actions=tuple(float(v) for v in params["actions"]),
        noise_values=tuple(float(v) for v in params["noise_values"]),
        noise_probs=fracs(params["noise_probs"]),
        xi_levels=1,
        mu0_probs=fracs(params["mu0_probs"]),
        transition=tuple(tuple(tuple(tuple(int(a) for a in s) for s in x)
                               for x in e) for e in params["transition"]),
        summary_value=float(summary["value"]),
        summary_threshold=Fraction(float(summary["threshold"])),
        payoff_value=float(pay["value"]),
        monotone=bool(params.get("monotone", False)))


def _verify(cfg: ExperimentConfig, sink: _Sink) -> int:
    kind = cfg.model["kind"]
    if kind == "discrete_flip":
        inst = flip_instance(cfg.model["bias"])
    elif kind == "discrete_table":
        inst = _instance_from_table(cfg.model)
    else:
        raise ConfigError(f"{cfg.path}: verify requires a discrete model, "
                          f"got {kind!r}")
    model = model_from_dict(cfg.model)
    corrupt = os.environ.get("MEANFIELD_VERIFY_CORRUPT", "") not in ("", "0")

    n = cfg.sweep["n"][0] if cfg.sweep else 2
    reps = cfg.sweep["replications"] if cfg.sweep else 4000

    points = exact_mfe(inst)
    if not points:
        raise Failure(4, "verification failed: oracle found no lattice "
                         "fixed point to compare against")
    idx_map = np.asarray(points[0].strategy).reshape(len(inst.states),
                                                     inst.xi_levels)
    actions = np.asarray(inst.actions, dtype=np.float64)
    strategy = Strategy.lookup(np.asarray(inst.states, dtype=np.float64),
                               actions[idx_map], xi_bins=inst.xi_levels)
    profile = induce_profile(strategy, n)
    maps = [idx_map] * n
    pin_state = float(inst.states[0])

    exact_law = exact_conditional_law(inst, n, maps, 0)
    est_measure, _ = estimate_conditional_law(model, profile, 0, pin_state,
                                              n, reps, cfg.seed)
    samples = est_measure.points[:, 0]
    p_hat = np.asarray([float(np.mean(np.abs(samples - s) < 1e-9))
                        for s in inst.states])
    if corrupt:
        p_hat = np.roll(p_hat, 1)

    checks = []
    for si, s in enumerate(inst.states):
        exact = float(exact_law[si])
        est = float(p_hat[si])
        se = math.sqrt(max(est * (1.0 - est), 0.0) / reps)
        checks.append((f"conditional_law[x1={s:g}]", exact, est, se))

    pay_idx = inst.state_index(inst.payoff_value)
    checks.append(("payoff", float(exact_payoff(inst, exact_law)),
                   float(p_hat[pay_idx]),
                   math.sqrt(max(float(p_hat[pay_idx])
                                 * (1.0 - float(p_hat[pay_idx])), 0.0) / reps)))

    dev = exact_deviation_gain(inst, n, idx_map, 0)
    gain_est, gain_se = estimate_deviation_gain(
        model, profile, 0, pin_state, n, reps, {"kind": "all_maps"}, cfg.seed)
    checks.append(("deviation_gain", float(dev.gain), float(gain_est), gain_se))

    failed = []
    print(f"{'quantity':<28}{'oracle':>12}{'estimate':>12}{'se':>12}"
          f"{'z':>8}  result")
    for name, exact, est, se in checks:
        diff = abs(est - exact)
        z = 0.0 if diff == 0.0 else (math.inf if se < 1e-300 else diff / se)
        ok = z <= 3.0
        if not ok:
            failed.append(name)
        zs = "inf" if math.isinf(z) else f"{z:.2f}"
        print(f"{name:<28}{exact:>12.6f}{est:>12.6f}{se:>12.2e}{zs:>8}  "
              f"{'pass' if ok else 'FAIL'}")
    if failed:
        raise Failure(4, f"verification failed: {', '.join(failed)} "
                         f"outside 3 standard errors")
    return 0


# =====================================================================
# Entry point
# =====================================================================

class _Parser(argparse.ArgumentParser):
    def error(self, message):            # usage errors are config errors
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="meanfield",
                     description="mean-field game experiment harness")
    subs = parser.add_subparsers(dest="verb", required=True)
    for verb, text in (("run", "certificate, solve, sweep, decay chart"),
                       ("verify", "oracle vs Monte Carlo agreement table"),
                       ("mfe", "solve the equilibrium only"),
                       ("simulate", "dump one population realization")):
        sp = subs.add_parser(verb, help=text)
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the config seed")
        sp.add_argument("--workers", type=int, default=None, metavar="INT")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="override the config output directory")
    return parser


def main(argv=None) -> int:
    t0 = time.monotonic()
    sink = None
    try:
        args = _build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed <= SEED_MAX:
                raise ConfigError(f"--seed must lie in [0, {SEED_MAX}]")
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg.workers = args.workers
        if args.out is not None:
            cfg.output_dir = args.out
        sink = _Sink(cfg.output_dir)
        verb = {"run": {"static": _run_static,
                        "continuous": _run_continuous},
                "mfe": {"static": lambda c, s: (_solve_static(c, s), 0)[1],
                        "continuous": lambda c, s: (_solve_continuous(c, s), 0)[1]},
                "simulate": {"static": _simulate_static,
                             "continuous": _simulate_continuous},
                "verify": {"static": _verify,
                           "continuous": _verify}}[args.verb][cfg.mode]
        return verb(cfg, sink)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        if sink is not None:
            sink.discard()
        return 3
    except Failure as e:
        print(str(e), file=sys.stderr)
        if sink is not None:
            sink.discard()
        return e.code
    finally:
        print(f"wall time: {time.monotonic() - t0:.2f}s", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
