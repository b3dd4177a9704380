"""Controlled-diffusion counterpart of the one-period population game.

The building blocks mirror the static module one level up in time: an
Euler scheme simulates paths of dX = b(t, X_0, X_t, m_t, a) dt + dW
against a frozen flow of (X_0, X_t) measures, a damped fixed-point
iteration alternates policy improvement over a declared finite feedback
class with flow resimulation, and the n-player system is induced
open-loop: each agent co-simulates a shadow mean-field state from its
own noise and always acts through the shadow, never through its actual
state.  Deviation audits reuse the static report machinery — common
random numbers across candidates, incumbent-in-class exact
nonnegativity, truncated maxima, and the shadow-paired gap estimate.

Everything shares one time grid.  There is no interpolation between
grids anywhere in this module; mixing grids is an error.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .measures import EmpiricalMeasure, MeasureBatch, save_measure
from .models import ContinuousModel
from .rng import substream
from .static_game import (PinAudit, _key_of_pin, class_label,
                          report_from_audits)

__all__ = [
    "FeedbackControl",
    "MeasureFlow",
    "MfgFlowSolution",
    "OpenLoopRun",
    "TimeGrid",
    "ct_deviation_report",
    "flow_from_paths",
    "policy_candidates",
    "save_flow",
    "simulate_mean_field_sde",
    "simulate_n_player_openloop",
    "solve_mfg_flow",
]

# Enumerated lookup-table policy classes may not exceed this many members.
TABLE_CLASS_GUARD = 4096


# =====================================================================
# Time grid and measure flows
# =====================================================================

@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, horizon] into ``steps`` Euler steps."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


@dataclass
class MeasureFlow:
    """One joint (X_0, X_t) empirical measure per grid time.

    Built from a path ensemble whose particles keep their initial
    coordinate, so the X_0-marginal is identical — the same floats —
    at every step.
    """

    grid: TimeGrid
    measures: list

    def __post_init__(self):
        if len(self.measures) != self.grid.steps + 1:
            raise ValueError(f"{len(self.measures)} measures for "
                             f"{self.grid.steps + 1} grid times")
        for m in self.measures:
            if m.split[0] != 1 or m.split[1] != 1:
                raise ValueError("flow measures need (x0, x_t) blocks")

    def at(self, k: int) -> EmpiricalMeasure:
        return self.measures[k]

    @property
    def terminal(self) -> EmpiricalMeasure:
        return self.measures[-1]

    def mean_path(self) -> np.ndarray:
        """Per-step mean of the running-state marginal."""
        return np.asarray([float(m.marginal_mean("x1")[0]) for m in self.measures])


def flow_from_paths(grid: TimeGrid, x0: np.ndarray, paths: np.ndarray) -> MeasureFlow:
    """Wrap an (N, steps+1) path ensemble as a measure flow."""
    x0 = np.asarray(x0, dtype=np.float64)
    paths = np.asarray(paths, dtype=np.float64)
    if paths.shape != (x0.size, grid.steps + 1):
        raise ValueError(f"paths shape {paths.shape}, expected "
                         f"({x0.size}, {grid.steps + 1})")
    ms = [EmpiricalMeasure(np.column_stack([x0, paths[:, k]]), split=(1, 1, 0))
          for k in range(grid.steps + 1)]
    return MeasureFlow(grid=grid, measures=ms)


def save_flow(flow: MeasureFlow, directory) -> str:
    """Write one measure file per step plus an index manifest.

    Returns the manifest path.  Files are plain text in the measure
    serialization format; the manifest records the grid so a flow can
    be reassembled without guessing.
    """
    import os
    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "flow_manifest.txt")
    with open(manifest, "w", encoding="ascii") as fh:
        fh.write(f"horizon={flow.grid.horizon!r} steps={flow.grid.steps}\n")
        for k, m in enumerate(flow.measures):
            name = f"flow_{k:05d}.txt"
            save_measure(m, os.path.join(directory, name))
            fh.write(f"{k} {name}\n")
    return manifest


# =====================================================================
# Feedback controls and policy classes
# =====================================================================

@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """State feedback a(t, x0, x), evaluated on whatever state the
    caller supplies — the flow solver feeds actual states, the n-player
    induction feeds shadow states.

    ``grid_valued`` marks rules whose range lies on the model's action
    grid; parametric families (linear gains) are exempt and flagged
    False, with their output clipped to the grid's hull instead.
    """

    kind: str                  # "linear_gain" | "constant" | "table"
    grid_valued: bool
    lo: float
    hi: float
    g1: float = 0.0
    g0: float = 0.0
    value: float = 0.0
    x_edges: Optional[np.ndarray] = None     # inner state-cell edges
    time_edges: Optional[np.ndarray] = None  # inner time-bin edges
    table: Optional[np.ndarray] = None       # (time_bins, cells) actions

    @classmethod
    def linear(cls, g1: float, g0: float, lo: float, hi: float) -> "FeedbackControl":
        return cls(kind="linear_gain", grid_valued=False, lo=lo, hi=hi,
                   g1=float(g1), g0=float(g0))

    @classmethod
    def constant_action(cls, value: float, action_grid: np.ndarray) -> "FeedbackControl":
        value = float(value)
        lo, hi = float(action_grid[0]), float(action_grid[-1])
        if not lo <= value <= hi:
            raise ValueError(f"constant action {value} outside [{lo}, {hi}]")
        on_grid = bool(np.any(np.abs(action_grid - value) < 1e-12))
        return cls(kind="constant", grid_valued=on_grid, lo=lo, hi=hi, value=value)

    @classmethod
    def lookup_table(cls, table: np.ndarray, x_edges: np.ndarray,
                     time_edges: np.ndarray, action_grid: np.ndarray) -> "FeedbackControl":
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError("lookup table must be (time_bins, state_cells)")
        off = np.min(np.abs(np.asarray(action_grid)[None, None, :]
                            - table[:, :, None]), axis=-1)
        if np.any(off > 1e-12):
            raise ValueError("table entries must be action-grid values")
        return cls(kind="table", grid_valued=True,
                   lo=float(action_grid[0]), hi=float(action_grid[-1]),
                   x_edges=np.asarray(x_edges, dtype=np.float64),
                   time_edges=np.asarray(time_edges, dtype=np.float64),
                   table=table)

    def actions(self, t: float, x0, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "linear_gain":
            return np.clip(self.g1 * x + self.g0, self.lo, self.hi)
        if self.kind == "constant":
            return np.full(x.shape, self.value)
        tb = int(np.searchsorted(self.time_edges, t, side="right"))
        xc = np.searchsorted(self.x_edges, x)
        return self.table[tb][xc]

    def describe(self) -> str:
        if self.kind == "linear_gain":
            return f"linear_gain(g1={self.g1:g},g0={self.g0:g})"
        if self.kind == "constant":
            return f"constant({self.value:g})"
        return f"table({self.table.shape[0]}x{self.table.shape[1]})"


def policy_candidates(model: ContinuousModel, policy_class: dict) -> list:
    """Materialize a declared finite policy class.

    ``linear_gain`` takes the product of the gain grids (slope-major
    order, which fixes argmax tie-breaking); ``constant`` lists the
    given levels; ``table`` enumerates every assignment of action-grid
    values to (time-bin, state-cell) pairs under a hard size guard.
    """
    kind = policy_class.get("kind")
    lo, hi = model.action_range
    if kind == "linear_gain":
        g1s = [float(v) for v in policy_class["g1_values"]]
        g0s = [float(v) for v in policy_class["g0_values"]]
        if not g1s or not g0s:
            raise ValueError("linear_gain class needs nonempty gain grids")
        return [FeedbackControl.linear(g1, g0, lo, hi)
                for g1 in g1s for g0 in g0s]
    if kind == "constant":
        vals = [float(v) for v in policy_class["values"]]
        if not vals:
            raise ValueError("constant class needs at least one level")
        return [FeedbackControl.constant_action(v, model.action_grid) for v in vals]
    if kind == "table":
        import itertools
        x_edges = np.asarray(policy_class["x_edges"], dtype=np.float64)
        bins = int(policy_class["time_bins"])
        if bins < 1:
            raise ValueError("time_bins must be positive")
        cells = x_edges.size + 1
        grid = model.action_grid
        count = grid.size ** (bins * cells)
        if count > TABLE_CLASS_GUARD:
            raise ValueError(f"table policy class has {count} members, "
                             f"guard is {TABLE_CLASS_GUARD}")
        time_edges = model.horizon * (np.arange(1, bins) / bins)
        out = []
        for combo in itertools.product(range(grid.size), repeat=bins * cells):
            tab = grid[np.asarray(combo)].reshape(bins, cells)
            out.append(FeedbackControl.lookup_table(tab, x_edges, time_edges, grid))
        return out
    raise ValueError(f"unknown policy class kind {kind!r}")


def _stacked_evaluator(controls: Sequence[FeedbackControl]):
    """Action evaluator over a candidate axis: (t, x0, x (C, P)) -> (C, P).

    Uniform linear-gain lists collapse to one vectorized expression; any
    other composition falls back to a per-candidate loop.
    """
    if all(c.kind == "linear_gain" for c in controls):
        g1 = np.asarray([c.g1 for c in controls])[:, None]
        g0 = np.asarray([c.g0 for c in controls])[:, None]
        lo, hi = controls[0].lo, controls[0].hi

        def fast(t, x0, x):
            return np.clip(g1 * x + g0, lo, hi)
        return fast

    def slow(t, x0, x):
        return np.stack([c.actions(t, x0[i], x[i]) for i, c in enumerate(controls)])
    return slow


# =====================================================================
# Path simulation
# =====================================================================

def _mirrored_rows(rng: np.random.Generator, count: int, cols: int) -> np.ndarray:
    """(count, cols) standard normals in sign-mirrored row pairs.

    Rows (2i, 2i+1) negate each other; the increment law is symmetric,
    so pairing is exact variance reduction, never a model assumption.
    """
    half = (count + 1) // 2
    base = rng.standard_normal((half, cols))
    out = np.empty((2 * half, cols))
    out[0::2] = base
    out[1::2] = -base
    return out[:count]


def _mu0_draws(model: ContinuousModel, rng: np.random.Generator,
               count: int) -> np.ndarray:
    """Initial draws; mirrored pairs when the model declares mu0 symmetric."""
    if not model.mu0_symmetric or count < 2:
        return np.asarray(model.mu0_sampler(rng, count),
                          dtype=np.float64).reshape(count)
    half = (count + 1) // 2
    base = np.asarray(model.mu0_sampler(rng, half), dtype=np.float64).reshape(half)
    out = np.empty(2 * half)
    out[0::2] = base
    out[1::2] = -base
    return out[:count]


def _euler_paths(model: ContinuousModel, flow: MeasureFlow,
                 control: FeedbackControl, x0: np.ndarray,
                 z: np.ndarray) -> np.ndarray:
    """Euler ensemble against a frozen flow; returns (N, steps+1)."""
    grid = flow.grid
    dt, sq = grid.dt, math.sqrt(grid.dt)
    out = np.empty((x0.size, grid.steps + 1))
    out[:, 0] = x0
    x = x0.astype(np.float64, copy=True)
    for k in range(grid.steps):
        t = k * dt
        a = control.actions(t, x0, x)
        b = np.asarray(model.drift(t, x0, x, flow.measures[k], a), dtype=np.float64)
        x = x + dt * np.broadcast_to(b, x.shape) + sq * z[:, k]
        out[:, k + 1] = x
    return out


def simulate_mean_field_sde(model: ContinuousModel, flow: MeasureFlow,
                            control: FeedbackControl, paths: int, seed: int,
                            x0_pin: Optional[float] = None,
                            grid: Optional[TimeGrid] = None):
    """Simulate ``paths`` independent Euler paths against a frozen flow.

    Returns (x0 draws, (paths, steps+1) states).  The step-k increment
    of path j is the k-th draw of substream (seed, "sde", "path", j) —
    reproducible per (seed, path, step), so ensembles can be extended
    or re-sliced without disturbing existing paths.  ``x0_pin`` fixes
    every initial state; otherwise initials come from the model's mu0
    sampler on substream (seed, "sde", "x0").
    """
    if grid is not None and grid != flow.grid:
        raise ValueError(f"flow is on {flow.grid}, caller asked for {grid}")
    if paths < 1:
        raise ValueError("need at least one path")
    g = flow.grid
    if x0_pin is None:
        x0 = np.asarray(model.mu0_sampler(substream(seed, "sde", "x0"), paths),
                        dtype=np.float64).reshape(paths)
    else:
        x0 = np.full(paths, float(x0_pin))
    z = np.empty((paths, g.steps))
    for j in range(paths):
        z[j] = substream(seed, "sde", "path", j).standard_normal(g.steps)
    return x0, _euler_paths(model, flow, control, x0, z)


# =====================================================================
# Mean-field flow fixed point
# =====================================================================

@dataclass
class MfgFlowSolution:
    """Feedback rule plus the flow it reproduces, with diagnostics."""

    control: FeedbackControl
    flow: MeasureFlow
    residual: float                 # last successive-iterate flow distance
    iterations: int
    x0_grid: np.ndarray
    values: np.ndarray
    value_ses: np.ndarray
    converged: bool
    p: int = 1
    seed: Optional[int] = None
    paths: int = 0
    policy_label: str = ""
    residual_history: list = field(default_factory=list)
    full_residual_history: list = field(default_factory=list)

    @property
    def value_table(self) -> dict:
        return {float(g): (float(v), float(s))
                for g, v, s in zip(self.x0_grid, self.values, self.value_ses)}

    def value_at(self, x0: float) -> float:
        gi = int(np.argmin(np.abs(self.x0_grid - x0)))
        if abs(float(self.x0_grid[gi]) - float(x0)) > 1e-9:
            raise ValueError(f"x0={x0} is not a value-table grid point")
        return float(self.values[gi])


def _flow_distance(a: np.ndarray, b: np.ndarray, p: int) -> float:
    """Sup over grid times of the identity-coupling W_p bound between
    two path ensembles sharing initial draws."""
    d = np.abs(a - b)
    if p == 0:
        per_t = np.mean(np.minimum(d, 1.0), axis=0)
    elif p == 1:
        per_t = np.mean(d, axis=0)
    else:
        per_t = np.sqrt(np.mean(d * d, axis=0))
    return float(np.max(per_t))


def _ct_payoff(model: ContinuousModel, samples: np.ndarray) -> float:
    """Terminal-law payoff of a sample cloud; non-finite maps to -inf."""
    s = np.asarray(samples, dtype=np.float64)
    if model.U_samples is not None:
        v = float(model.U_samples(s))
    else:
        v = float(model.U(EmpiricalMeasure(s)))
    return -math.inf if (math.isnan(v) or v == math.inf) else v


def _scan_policies(model: ContinuousModel, flow: MeasureFlow,
                   controls: Sequence[FeedbackControl], pins: np.ndarray,
                   z_by_pin: list) -> tuple:
    """Per-candidate, per-pin conditional terminal payoffs (CRN).

    Every candidate sees the same increments within a pin, and the same
    increments persist across flow iterations, so score changes reflect
    the flow and the policy, never resampling.
    """
    act = _stacked_evaluator(controls)
    grid = flow.grid
    dt, sq = grid.dt, math.sqrt(grid.dt)
    c_count = len(controls)
    vals = np.empty((c_count, pins.size))
    for pi, pin in enumerate(pins):
        z = z_by_pin[pi]
        x = np.full((c_count, z.shape[0]), float(pin))
        x0 = np.full((c_count, z.shape[0]), float(pin))
        for k in range(grid.steps):
            t = k * dt
            a = act(t, x0, x)
            b = np.asarray(model.drift(t, x0, x, flow.measures[k], a),
                           dtype=np.float64)
            x = x + dt * np.broadcast_to(b, x.shape) + sq * z[None, :, k]
        for ci in range(c_count):
            vals[ci, pi] = _ct_payoff(model, x[ci])
    return vals.mean(axis=1), vals


def _pin_values(model: ContinuousModel, flow: MeasureFlow,
                control: FeedbackControl, pins: np.ndarray,
                z_by_pin: list, batches: int) -> tuple:
    """Value table under one control: per-pin payoff and batch SE."""
    values = np.empty(pins.size)
    ses = np.empty(pins.size)
    for pi, pin in enumerate(pins):
        z = z_by_pin[pi]
        x0 = np.full(z.shape[0], float(pin))
        terminal = _euler_paths(model, flow, control, x0, z)[:, -1]
        values[pi] = _ct_payoff(model, terminal)
        bvals = [_ct_payoff(model, c) for c in np.array_split(terminal, batches)]
        ses[pi] = float(np.std(bvals, ddof=1) / math.sqrt(len(bvals)))
    return values, ses


def solve_mfg_flow(model: ContinuousModel, p: int = 1, *, paths: int,
                   x0_grid, seed: int, steps: int = 50, damping: float = 0.5,
                   tol: float = 1e-3, max_iters: int = 25,
                   policy_class: Optional[dict] = None,
                   policy_paths: int = 2048,
                   value_batches: int = 16) -> MfgFlowSolution:
    """Damped policy-improvement / flow-resimulation fixed point.

    Each round scans the declared policy class for the best average of
    per-pin conditional terminal payoffs against the current flow, then
    resimulates the flow ensemble under the winner and mixes it into
    the old ensemble by per-path Bernoulli(damping) selection.  One
    increment tensor drives every round (and every candidate), so the
    round map is deterministic and the iteration can land on an exact
    fixed point: measure-free drifts converge with residual 0.0 on the
    second round.

    Converged means the successive mixed ensembles moved at most
    ``tol`` and the undamped update moved at most 2*tol, both measured
    as sup-over-time identity-coupling W_p; exhaustion returns the last
    iterate flagged, with both residual histories attached.
    """
    if p not in (0, 1, 2):
        raise ValueError("p must be 0, 1 or 2")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if paths < 2 or policy_paths < 2 * value_batches:
        raise ValueError("path counts too small for batch diagnostics")
    spec = policy_class if policy_class is not None else model.default_policy_class
    if spec is None:
        raise ValueError("model declares no default policy class; pass one")
    controls = policy_candidates(model, spec)

    grid = TimeGrid(model.horizon, steps)
    pins = np.asarray(x0_grid, dtype=np.float64).reshape(-1)
    if pins.size == 0:
        raise ValueError("x0_grid must be nonempty")

    x0_flow = _mu0_draws(model, substream(seed, "flow", "x0"), paths)
    z_flow = _mirrored_rows(substream(seed, "flow", "w"), paths, steps)
    z_by_pin = [_mirrored_rows(substream(seed, "policy", _key_of_pin(v)),
                               policy_paths, steps) for v in pins]

    # Flat start: every particle sits at its initial state for all t.
    flow_paths = np.tile(x0_flow[:, None], (1, steps + 1))
    flow = flow_from_paths(grid, x0_flow, flow_paths)

    control = controls[0]
    hist, full_hist = [], []
    converged = False
    residual = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        scores, _ = _scan_policies(model, flow, controls, pins, z_by_pin)
        control = controls[int(np.argmax(scores))]
        new_paths = _euler_paths(model, flow, control, x0_flow, z_flow)
        if it == 1:
            # Replaces the artificial flat start; residuals begin next round.
            flow_paths = new_paths
        else:
            full_res = _flow_distance(new_paths, flow_paths, p)
            keep = substream(seed, "flow", "damp", it).random(paths) < damping
            mixed = np.where(keep[:, None], new_paths, flow_paths)
            residual = _flow_distance(mixed, flow_paths, p)
            hist.append(residual)
            full_hist.append(full_res)
            flow_paths = mixed
            if residual <= tol and full_res <= 2.0 * tol:
                converged = True
        flow = flow_from_paths(grid, x0_flow, flow_paths)
        if converged:
            break

    values, ses = _pin_values(model, flow, control, pins, z_by_pin, value_batches)
    return MfgFlowSolution(
        control=control, flow=flow, residual=residual, iterations=it,
        x0_grid=pins, values=values, value_ses=ses, converged=converged,
        p=p, seed=seed, paths=paths, policy_label=control.describe(),
        residual_history=hist, full_residual_history=full_hist)


# =====================================================================
# Induced open-loop n-player system
# =====================================================================

@dataclass
class OpenLoopRun:
    """One realized n-player trajectory set with its shadow ensemble."""

    grid: TimeGrid
    x0: np.ndarray              # (n,)
    actual: np.ndarray          # (n, steps+1)
    shadow: np.ndarray          # (n, steps+1)
    actions: np.ndarray         # (n, steps), evaluated on the shadow
    empirical_flow: MeasureFlow
    pin: Optional[tuple]
    seed: int


def simulate_n_player_openloop(model: ContinuousModel, mfg: MfgFlowSolution,
                               n: int, seed: int,
                               pin: Optional[tuple] = None) -> OpenLoopRun:
    """Co-simulate the induced n-player system and its shadow ensemble.

    Each agent carries two states driven by the same Brownian
    increments: the shadow evolves against the frozen equilibrium flow,
    the actual state against the running empirical measure of the
    population.  The step-k action of agent i is the equilibrium
    feedback evaluated at (t_k, X_0^i, shadow_i) — open-loop in the
    agent's own information, by construction blind to the actual state.

    Agent draws are keyed per index, so the first m agents of a larger
    run reproduce a smaller run's draws exactly.
    """
    if not mfg.converged:
        raise ValueError("open-loop induction requires a converged flow solution")
    if n < 1:
        raise ValueError("need at least one agent")
    grid = mfg.flow.grid
    dt, sq = grid.dt, math.sqrt(grid.dt)

    x0 = np.empty(n)
    z = np.empty((n, grid.steps))
    for j in range(n):
        x0[j] = float(np.asarray(model.mu0_sampler(
            substream(seed, "nplayer", "x0", j), 1)).reshape(1)[0])
        z[j] = substream(seed, "nplayer", "w", j).standard_normal(grid.steps)
    if pin is not None:
        i, v = pin
        if not 0 <= int(i) < n:
            raise ValueError(f"pinned agent {i} out of range for n={n}")
        x0[int(i)] = float(v)

    actual = np.empty((n, grid.steps + 1))
    shadow = np.empty((n, grid.steps + 1))
    acts = np.empty((n, grid.steps))
    actual[:, 0] = x0
    shadow[:, 0] = x0
    x = x0.copy()
    s = x0.copy()
    flows = []
    for k in range(grid.steps):
        t = k * dt
        a = mfg.control.actions(t, x0, s)
        acts[:, k] = a
        mu_n = EmpiricalMeasure(np.column_stack([x0, x]), split=(1, 1, 0))
        flows.append(mu_n)
        bx = np.asarray(model.drift(t, x0, x, mu_n, a), dtype=np.float64)
        bs = np.asarray(model.drift(t, x0, s, mfg.flow.measures[k], a),
                        dtype=np.float64)
        x = x + dt * np.broadcast_to(bx, x.shape) + sq * z[:, k]
        s = s + dt * np.broadcast_to(bs, s.shape) + sq * z[:, k]
        actual[:, k + 1] = x
        shadow[:, k + 1] = s
    flows.append(EmpiricalMeasure(np.column_stack([x0, x]), split=(1, 1, 0)))

    return OpenLoopRun(grid=grid, x0=x0, actual=actual, shadow=shadow,
                       actions=acts,
                       empirical_flow=MeasureFlow(grid=grid, measures=flows),
                       pin=pin, seed=seed)


# =====================================================================
# Deviation audit
# =====================================================================

def _ct_audit_pin(model: ContinuousModel, mfg: MfgFlowSolution, n: int,
                  x0_pin: float, reps: int, offsets: Sequence[float],
                  seed: int, batches: int = 20) -> PinAudit:
    """CRN deviation audit of one pinned agent in the open-loop system.

    Candidates add a constant offset to the pinned agent's incumbent
    action path (clipped to the action hull); every candidate rides the
    same replication tensor of initials and increments, the incumbent
    is candidate zero, and the payoff gap pairs the incumbent's actual
    terminal cloud with the co-simulated shadow cloud.
    """
    if reps < 2 * batches:
        raise ValueError(f"need reps >= {2 * batches} for batched standard errors")
    if reps % 2:
        raise ValueError("replication count must be even (mirrored increment pairs)")
    offs = [float(o) for o in offsets]
    if not any(o == 0.0 for o in offs):
        raise ValueError("deviation class must contain the incumbent (offset 0)")
    cands = [("incumbent", 0.0)] + [(f"offset{o:+g}", o) for o in offs if o != 0.0]

    grid = mfg.flow.grid
    dt, sq = grid.dt, math.sqrt(grid.dt)
    lo, hi = model.action_range
    key = _key_of_pin(float(x0_pin))

    x0 = np.empty((reps, n))
    x0[:, 0] = float(x0_pin)
    z = np.empty((n, reps, grid.steps))
    for j in range(n):
        if j > 0:
            x0[:, j] = np.asarray(model.mu0_sampler(
                substream(seed, "ctdev", key, "x0", j), reps),
                dtype=np.float64).reshape(reps)
        z[j] = _mirrored_rows(substream(seed, "ctdev", key, "w", j),
                              reps, grid.steps)

    c_count = len(cands)
    s = x0.copy()                                   # (reps, n) shadow
    x = np.broadcast_to(x0, (c_count, reps, n)).copy()
    for k in range(grid.steps):
        t = k * dt
        zk = z[:, :, k].T                           # (reps, n)
        a_sh = np.asarray(mfg.control.actions(t, x0, s), dtype=np.float64)
        a_sh = np.broadcast_to(a_sh, (reps, n))
        for ci, (_, off) in enumerate(cands):
            if off == 0.0:
                a = a_sh
            else:
                a = a_sh.copy()
                a[:, 0] = np.clip(a_sh[:, 0] + off, lo, hi)
            mb = MeasureBatch(np.stack([x0, x[ci]], axis=-1), split=(1, 1, 0))
            b = np.asarray(model.drift(t, x0, x[ci], mb, a), dtype=np.float64)
            x[ci] = x[ci] + dt * np.broadcast_to(b, (reps, n)) + sq * zk
        bs = np.asarray(model.drift(t, x0, s, mfg.flow.measures[k], a_sh),
                        dtype=np.float64)
        s = s + dt * np.broadcast_to(bs, (reps, n)) + sq * zk

    own = x[:, :, 0]                                # (cands, reps)
    payoffs = np.asarray([_ct_payoff(model, own[ci]) for ci in range(c_count)])
    batch_payoffs = [np.asarray([_ct_payoff(model, c)
                                 for c in np.array_split(own[ci], batches)])
                     for ci in range(c_count)]
    best = int(np.argmax(payoffs))
    gain = float(payoffs[best] - payoffs[0])
    assert gain >= 0.0
    if best == 0:
        gain_se = 0.0
    else:
        bg = batch_payoffs[best] - batch_payoffs[0]
        gain_se = float(np.std(bg, ddof=1) / math.sqrt(bg.size))

    shadow_own = s[:, 0]
    gap = abs(float(_ct_payoff(model, own[0])) -
              float(_ct_payoff(model, shadow_own)))
    bdiffs = np.asarray([
        _ct_payoff(model, cn) - _ct_payoff(model, cs)
        for cn, cs in zip(np.array_split(own[0], batches),
                          np.array_split(shadow_own, batches))])
    gap_se = float(np.std(bdiffs, ddof=1) / math.sqrt(bdiffs.size))

    return PinAudit(x0=float(x0_pin), gain=gain, gain_se=gain_se,
                    gap=gap, gap_se=gap_se, best_label=cands[best][0],
                    picard_max_ratio=math.nan)


def ct_deviation_report(model: ContinuousModel, mfg: MfgFlowSolution, n: int,
                        delta: float, epsilon: float, x0_eval_grid, reps: int,
                        seed: int, deviation_class: Optional[dict] = None,
                        grid: Optional[TimeGrid] = None, workers: int = 1):
    """Open-loop deviation audit over an evaluation grid of initial pins.

    Same report shape and classification as the static audit; the
    candidate class here is constant offsets on the pinned agent's
    open-loop action path.  ``grid``, when passed, must equal the
    solution's grid — flows are never interpolated.
    """
    if not (delta > 0 or math.isinf(delta)):
        raise ValueError("delta must be positive or math.inf")
    if grid is not None and grid != mfg.flow.grid:
        raise ValueError(f"solution flow is on {mfg.flow.grid}, caller asked "
                         f"for {grid}")
    if not mfg.converged:
        raise ValueError("deviation audit requires a converged flow solution")
    if deviation_class is None:
        deviation_class = {"kind": "offsets",
                           "offsets": [0.0, -1.0, -0.5, 0.5, 1.0]}
    if deviation_class.get("kind") != "offsets":
        raise ValueError("open-loop deviation classes are constant offsets")
    offsets = deviation_class["offsets"]
    pins = [float(v) for v in np.asarray(x0_eval_grid, dtype=np.float64)]
    if not pins:
        raise ValueError("evaluation grid must be nonempty")

    def one(pin):
        return _ct_audit_pin(model, mfg, n, pin, reps, offsets, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            audits = list(ex.map(one, pins))
    else:
        audits = [one(v) for v in pins]
    return report_from_audits(audits, n, delta, epsilon, reps, seed,
                              class_label(deviation_class))
