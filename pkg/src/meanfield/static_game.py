"""One-period population games: solves, equilibria, deviation audits.

The population state solves the implicit system

    X1_i = F(eta_i, X0_i, (1/n) sum_j delta_{(X0_j, X1_j, a_j)}, a_i)

by Picard iteration, batched across Monte Carlo replications.  The
equilibrium solver iterates damped best-response pushforwards on a
particle measure.  Deviation audits pin one agent's initial state,
replay the population under every candidate action rule with common
random numbers (identical draws across candidates, incumbent included),
and report max gains that are exactly nonnegative by construction.

The gap-to-limit estimator pairs each n-player replication with a
shadow sample pushed through the frozen equilibrium measure using the
same per-replication noise, so the difference estimator's error scales
with the gap itself rather than with the payoff's raw variance.

Determinism: every sampling site owns a keyed substream, agents are
keyed by index (a smaller population's draws are a prefix of a larger
one's), and reductions are ordered, so results are a pure function of
(model, arguments, seed) at any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .measures import EmpiricalMeasure, MeasureBatch
from .models import StaticModel
from .rng import substream

__all__ = [
    "DeviationReport",
    "MfeSolution",
    "PinAudit",
    "PopulationState",
    "Strategy",
    "apply_equilibrium_map_once",
    "audit_grid",
    "estimate_conditional_law",
    "estimate_deviation_gain",
    "induce_profile",
    "max_deviation",
    "payoff",
    "report_from_audits",
    "solve_mfe",
    "solve_population_state",
]

PICARD_TOL = 1e-10
PICARD_MAX_ITERS = 200

# Residuals below this floor (times scale) are numerical dust and are
# excluded from contraction-ratio diagnostics.
RATIO_FLOOR = 1e-12


# =====================================================================
# Strategies
# =====================================================================

@dataclass
class Strategy:
    """Own-information action rule a = s(x0, xi).

    Two representations: a piecewise-constant lookup over an x0-grid
    (nearest node) times uniform xi-bins, or an arbitrary closed-form
    callable for benchmark references.  Lookup tables are snapped to
    the model's action grid at construction time by the caller; closed
    forms are exempt and flagged ``off_grid``.
    """

    kind: str                              # "lookup" | "closed_form"
    x0_grid: Optional[np.ndarray] = None   # (G,)
    xi_bins: int = 1
    table: Optional[np.ndarray] = None     # (G, B) action values
    fn: Optional[Callable] = None
    off_grid: bool = False

    @classmethod
    def lookup(cls, x0_grid, table, xi_bins: int = 1) -> "Strategy":
        x0_grid = np.asarray(x0_grid, dtype=np.float64)
        table = np.asarray(table, dtype=np.float64)
        if x0_grid.ndim != 1 or x0_grid.size == 0:
            raise ValueError("x0_grid must be a nonempty 1-d array")
        if table.shape != (x0_grid.size, xi_bins):
            raise ValueError(f"table shape {table.shape} != ({x0_grid.size}, {xi_bins})")
        return cls(kind="lookup", x0_grid=x0_grid, xi_bins=xi_bins, table=table)

    @classmethod
    def closed_form(cls, fn: Callable) -> "Strategy":
        return cls(kind="closed_form", fn=fn, off_grid=True)

    def actions_for(self, x0s: np.ndarray, xis: np.ndarray) -> np.ndarray:
        if self.kind == "closed_form":
            return np.asarray(self.fn(x0s, xis), dtype=np.float64)
        g = self.x0_grid
        # Nearest grid node: cell edges sit at midpoints.
        edges = (g[1:] + g[:-1]) / 2.0
        gi = np.searchsorted(edges, np.asarray(x0s, dtype=np.float64))
        bi = np.minimum((np.asarray(xis) * self.xi_bins).astype(np.int64),
                        self.xi_bins - 1)
        return self.table[gi, bi]

    def describe(self) -> str:
        if self.kind == "closed_form":
            return "closed_form"
        return (f"lookup[{self.x0_grid.size}x{self.xi_bins} on "
                f"[{self.x0_grid[0]:g},{self.x0_grid[-1]:g}]]")


def induce_profile(strategy_or_solution, n: int) -> list:
    """Symmetric profile: n references to one equilibrium strategy."""
    if n < 1:
        raise ValueError("profile needs at least one agent")
    s = getattr(strategy_or_solution, "strategy", strategy_or_solution)
    if not isinstance(s, Strategy):
        raise TypeError("expected a Strategy or an object with .strategy")
    return [s] * n


def _profile_actions(profile, x0, xi) -> np.ndarray:
    """Per-agent actions; shared strategy objects are evaluated in one
    vectorized call per distinct object."""
    x0 = np.asarray(x0, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    out = np.empty_like(x0)
    by_obj = {}
    for j, s in enumerate(profile):
        by_obj.setdefault(id(s), (s, []))[1].append(j)
    for s, cols in by_obj.values():
        cols = np.asarray(cols)
        out[..., cols] = s.actions_for(x0[..., cols], xi[..., cols])
    return out


# =====================================================================
# Population state (implicit terminal system)
# =====================================================================

@dataclass
class PopulationState:
    """One solved population: draws, actions, terminal states."""

    x0: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    actions: np.ndarray
    x1: np.ndarray
    residual: float
    picard_iters: int
    residual_history: list

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    def measure(self, action_cap: float = 1.0) -> EmpiricalMeasure:
        pts = np.column_stack([self.x0, self.x1, self.actions])
        return EmpiricalMeasure(pts, split=(1, 1, 1), action_cap=action_cap)


@dataclass
class SolveDiagnostics:
    iters: int
    final_residual: float
    max_ratio: float          # worst consecutive-residual ratio observed
    history: list
    converged: bool


def _init_block(model: StaticModel, x0: np.ndarray) -> np.ndarray:
    if model.picard_init == "bottom":
        return np.full_like(x0, float(np.min(model.terminal_values)))
    return x0.copy()


def _solve_batched(model: StaticModel, x0, xi, eta, actions,
                   tol: float = PICARD_TOL, max_iters: int = PICARD_MAX_ITERS,
                   x1_init: Optional[np.ndarray] = None):
    """Picard-solve a (B, n) batch of populations; returns (x1, diagnostics).

    The uncounted initialization sweep evaluates F at the atom measure
    whose x1-slot holds x0 (or the declared bottom value); counted
    sweeps then iterate x1 <- F(measure(x0, x1, a)).  The residual is
    the sup over agents and batch rows of |x1_new - x1|; the ratio
    diagnostic tracks consecutive residual quotients while both sides
    sit above numerical dust.

    Measure summaries are summed in a canonical per-row agent order
    derived from the draws (lexsort of (x0, xi, eta), ties by column),
    so swapping agents permutes the summation terms without changing
    their sequence: summaries, and therefore every iterate, are exactly
    invariant under agent exchange at a gather instead of a per-sweep
    value sort.
    """
    b, n = x0.shape
    order = np.lexsort((eta, xi, x0))
    weights = np.full((b, n), 1.0 / n)
    buf = np.empty((b, n, 3))
    buf[:, :, 0] = x0
    buf[:, :, 2] = actions

    def sweep(x1_cur):
        buf[:, :, 1] = x1_cur
        mb = MeasureBatch(buf, split=(1, 1, 1), weights=weights, sum_order=order)
        out = np.asarray(model.F(eta, x0, mb, actions), dtype=np.float64)
        if out.shape != x0.shape:
            out = np.broadcast_to(out, x0.shape).copy()
        return out

    x1 = sweep(_init_block(model, x0)) if x1_init is None else x1_init.copy()
    prev_res = None
    max_ratio = 0.0
    history = []
    for iters in range(1, max_iters + 1):
        x1_new = sweep(x1)
        if np.any(np.isnan(x1_new)):
            raise FloatingPointError("population Picard produced NaN")
        res = float(np.max(np.abs(x1_new - x1)))
        history.append(res)
        floor = RATIO_FLOOR * max(1.0, float(np.max(np.abs(x1_new))))
        if prev_res is not None and prev_res > floor and res > floor:
            max_ratio = max(max_ratio, res / prev_res)
        prev_res = res
        x1 = x1_new
        if res <= tol:
            return x1, SolveDiagnostics(iters=iters, final_residual=res,
                                        max_ratio=max_ratio, history=history,
                                        converged=True)
    # Name an offending replication row in the failure message.
    rows = np.max(np.abs(sweep(x1) - x1), axis=tuple(range(1, x1.ndim)))
    raise RuntimeError(
        f"population Picard did not reach {tol} in {max_iters} iterations "
        f"(worst replication {int(np.argmax(rows))}, residual {history[-1]:.3e})")


def solve_population_state(model: StaticModel, profile: Sequence[Strategy],
                           draws, tol: float = PICARD_TOL,
                           max_iters: int = PICARD_MAX_ITERS) -> PopulationState:
    """Solve one population given draws (x0, xi, eta), each shape (n,)."""
    x0, xi, eta = (np.asarray(v, dtype=np.float64).reshape(-1) for v in draws)
    n = x0.shape[0]
    if len(profile) != n:
        raise ValueError(f"profile of {len(profile)} strategies for {n} agents")
    if not (xi.shape[0] == n and eta.shape[0] == n):
        raise ValueError("draw arrays must share length n")
    if tol <= 0:
        raise ValueError("tol must be positive")
    actions = _profile_actions(profile, x0, xi)
    x1, diag = _solve_batched(model, x0[None, :], xi[None, :], eta[None, :],
                              actions[None, :], tol=tol, max_iters=max_iters)
    return PopulationState(x0=x0, xi=xi, eta=eta, actions=actions, x1=x1[0],
                           residual=diag.final_residual,
                           picard_iters=diag.iters,
                           residual_history=diag.history)


# =====================================================================
# Conditional laws and payoffs
# =====================================================================

def _population_draws(model: StaticModel, n: int, reps: int, seed: int,
                      tag: str, pin_agent: Optional[int] = None,
                      pin_value: Optional[float] = None):
    """(reps, n) draw matrices with per-agent substreams.

    Streams are keyed by agent index, so a smaller population's draws
    are a prefix of a larger one's under the same seed and tag.
    """
    x0 = np.empty((reps, n))
    xi = np.empty((reps, n))
    eta = np.empty((reps, n))
    for j in range(n):
        x0[:, j] = np.asarray(model.mu0_sampler(
            substream(seed, tag, "x0", j), reps), dtype=np.float64).reshape(reps)
        xi[:, j] = substream(seed, tag, "xi", j).random(reps)
        eta[:, j] = np.asarray(model.eta_sampler(
            substream(seed, tag, "eta", j), reps), dtype=np.float64).reshape(reps)
    if pin_agent is not None:
        x0[:, pin_agent] = pin_value
    return x0, xi, eta


def _key_of_pin(pin: float) -> int:
    # Stable integer stream key for a float pin (exact bits, not repr).
    return int(np.float64(pin).view(np.int64))


def payoff(model: StaticModel, law: EmpiricalMeasure) -> float:
    """U(law) under the lower-completion convention: non-finite -> -inf."""
    v = float(model.U(law))
    return v if math.isfinite(v) else -math.inf


def _payoff_samples(model: StaticModel, samples: np.ndarray):
    """Payoffs of empirical laws along the last axis (vectorized U)."""
    samples = np.asarray(samples, dtype=np.float64)
    if model.U_samples is not None:
        vals = np.asarray(model.U_samples(samples), dtype=np.float64)
    else:
        flat = samples.reshape(-1, samples.shape[-1])
        vals = np.asarray([payoff(model, EmpiricalMeasure(row)) for row in flat])
        vals = vals.reshape(samples.shape[:-1])
    return np.where(np.isnan(vals) | np.isposinf(vals), -np.inf, vals)


def estimate_conditional_law(model: StaticModel, profile: Sequence[Strategy],
                             i: int, x0_pin: float, n: int, reps: int,
                             seed: int, tol: float = PICARD_TOL,
                             max_iters: int = PICARD_MAX_ITERS):
    """Law of agent i's terminal state given its pinned initial state.

    Pins X0_i to ``x0_pin``, redraws all other initial states and all
    noise across ``reps`` independent populations, and returns the
    empirical measure of agent i's terminal samples (uniform atoms)
    together with solve diagnostics.
    """
    if reps < 1:
        raise ValueError("need at least one replication")
    if len(profile) != n:
        raise ValueError(f"profile of {len(profile)} strategies for {n} agents")
    if not 0 <= i < n:
        raise ValueError(f"agent index {i} out of range for n={n}")
    tag = f"cond-{_key_of_pin(x0_pin)}"
    x0, xi, eta = _population_draws(model, n, reps, seed, tag,
                                    pin_agent=i, pin_value=float(x0_pin))
    actions = _profile_actions(profile, x0, xi)
    x1, diag = _solve_batched(model, x0, xi, eta, actions,
                              tol=tol, max_iters=max_iters)
    return EmpiricalMeasure(x1[:, i]), diag


# =====================================================================
# Equilibrium solver
# =====================================================================

@dataclass
class MfeSolution:
    """Converged equilibrium: strategy, particle measure, value table."""

    strategy: Strategy
    mu_hat: EmpiricalMeasure
    fixed_point_residual: float     # distance between last two iterates
    br_iterations: int
    particle_count: int
    x0_grid: np.ndarray
    values: np.ndarray
    value_ses: np.ndarray
    converged: bool
    p: int = 1
    br_draws: int = 0
    seed: Optional[int] = None
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


def _antithetic(draw: Callable, count: int, symmetric: bool) -> np.ndarray:
    """Draw ``count`` samples; under a symmetric law, mirror pairs
    (2i, 2i+1) carry opposite signs — exact first-moment cancellation."""
    if not symmetric or count < 2:
        return np.asarray(draw(count), dtype=np.float64).reshape(count)
    half = (count + 1) // 2
    base = np.asarray(draw(half), dtype=np.float64).reshape(half)
    out = np.empty(2 * half)
    out[0::2] = base
    out[1::2] = -base
    return out[:count]


def _paired_distance(x1_a, a_a, x1_b, a_b, p: int, cap: float) -> float:
    """Identity-coupling W_p upper bound between paired particle clouds."""
    d = np.sqrt((x1_a - x1_b) ** 2 + np.minimum(np.abs(a_a - a_b), cap) ** 2)
    if p == 0:
        return float(np.mean(np.minimum(1.0, d)))
    if p == 1:
        return float(np.mean(d))
    return float(math.sqrt(float(np.mean(d ** 2))))


def _br_table(model: StaticModel, mu, x0_grid: np.ndarray,
              noise: np.ndarray, chunk: int = 64):
    """Action-grid argmax of the sampled conditional payoff per x0 node.

    Common noise across actions and nodes; ties resolve to the lowest
    grid index.  Returns (actions (G,), values (G,)).
    """
    grid = model.action_grid
    acts = np.empty(x0_grid.size)
    best = np.empty(x0_grid.size)
    for gi, g in enumerate(x0_grid):
        vals = np.empty(grid.size)
        for lo in range(0, grid.size, chunk):
            ga = grid[lo:lo + chunk]
            e = np.broadcast_to(noise, (ga.size, noise.size))
            x0 = np.full((ga.size, noise.size), float(g))
            a = np.broadcast_to(ga[:, None], (ga.size, noise.size))
            x1 = np.asarray(model.F(e, x0, mu, a), dtype=np.float64)
            x1 = np.broadcast_to(x1, (ga.size, noise.size))
            vals[lo:lo + chunk] = _payoff_samples(model, x1)
        k = int(np.argmax(vals))
        acts[gi] = grid[k]
        best[gi] = vals[k]
    return acts, best


def solve_mfe(model: StaticModel, p: int = 1, *, particles: int,
              x0_grid, seed: int, xi_bins: int = 1, damping: float = 0.5,
              tol: float = 5e-3, max_br_iters: int = 60,
              br_draws: Optional[int] = None,
              value_batches: int = 16) -> MfeSolution:
    """Damped best-response iteration on a particle measure.

    Each sweep: (a) best response — exact argmax over the action grid
    of the Monte Carlo conditional payoff at every x0 node, with one
    noise block shared across actions, nodes, and sweeps; (b) particle
    pushforward under the new rule; (c) damped update — each particle
    keeps its old (x1, a) atom or takes the new one by an independent
    Bernoulli(damping) draw, realizing the measure mixture while
    preserving particle pairing and the X0-marginal exactly.

    Stops once the distance between successive iterates is at most
    ``tol`` and the full (undamped) update moves the measure by at most
    2*tol, so a converged solution satisfies the one-extra-application
    bound by construction.  Distances are identity-coupling W_p upper
    bounds over the paired particle streams.  On iteration exhaustion
    the best-seen iterate is returned flagged ``converged=False``.

    The dynamics never read the randomizer, so the best response is
    computed once per x0 node and tiled across xi-bins.  When the model
    declares symmetric driver noise, particle and best-response noise
    arrive in antithetic pairs (pairs share their x0 draw), cancelling
    driver-noise means exactly.
    """
    x0_grid = np.asarray(x0_grid, dtype=np.float64)
    if x0_grid.ndim != 1 or x0_grid.size == 0:
        raise ValueError("x0_grid must be a nonempty 1-d array")
    if particles < 1:
        raise ValueError("need at least one particle")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if p not in (0, 1, 2):
        raise ValueError("p must be 0, 1 or 2")
    if br_draws is None:
        # Antithetic noise makes smooth best responses exact at modest
        # draw counts; cap the default so huge particle clouds don't
        # multiply into the action-grid scan.
        br_draws = min(particles, 4096)

    sym = model.eta_symmetric
    if sym and particles >= 2:
        # Antithetic pairs share the initial draw and mirror the driver.
        half = (particles + 1) // 2
        x0_half = np.asarray(model.mu0_sampler(
            substream(seed, "mfe", "x0"), half), dtype=np.float64).reshape(half)
        x0_p = np.repeat(x0_half, 2)[:particles]
    else:
        x0_p = np.asarray(model.mu0_sampler(
            substream(seed, "mfe", "x0"), particles), dtype=np.float64).reshape(particles)
    xi_p = substream(seed, "mfe", "xi").random(particles)
    eta_p = _antithetic(lambda k: model.eta_sampler(substream(seed, "mfe", "eta"), k),
                        particles, sym)
    br_noise = _antithetic(lambda k: model.eta_sampler(substream(seed, "mfe", "br-noise"), k),
                           br_draws, sym)

    x1_p = _init_block(model, x0_p)
    a_p = np.full(particles, model.action_midpoint)

    strategy = None
    succ_res = math.inf
    best_snapshot = None
    succ_history, full_history = [], []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_br_iters + 1):
        mu = EmpiricalMeasure(np.column_stack([x0_p, x1_p, a_p]), split=(1, 1, 1),
                              action_cap=model.action_cap)
        acts, _ = _br_table(model, mu, x0_grid, br_noise)
        strategy = Strategy.lookup(x0_grid, np.tile(acts[:, None], (1, xi_bins)),
                                   xi_bins)
        a_new = strategy.actions_for(x0_p, xi_p)
        x1_new = np.asarray(model.F(eta_p, x0_p, mu, a_new), dtype=np.float64)
        if x1_new.shape != x0_p.shape:
            x1_new = np.broadcast_to(x1_new, x0_p.shape).copy()
        full_res = _paired_distance(x1_p, a_p, x1_new, a_new, p, model.action_cap)
        keep_new = substream(seed, "mfe", "damp", sweeps).random(particles) < damping
        x1_next = np.where(keep_new, x1_new, x1_p)
        a_next = np.where(keep_new, a_new, a_p)
        succ_res = _paired_distance(x1_p, a_p, x1_next, a_next, p, model.action_cap)
        full_history.append(full_res)
        succ_history.append(succ_res)
        if best_snapshot is None or full_res < best_snapshot[0]:
            best_snapshot = (full_res, succ_res, x1_p.copy(), a_p.copy(), strategy)
        if succ_res <= tol and full_res <= 2.0 * tol:
            converged = True
            break
        x1_p, a_p = x1_next, a_next

    if not converged:
        _, succ_res, x1_p, a_p, strategy = best_snapshot

    mu_hat = EmpiricalMeasure(np.column_stack([x0_p, x1_p, a_p]), split=(1, 1, 1),
                              action_cap=model.action_cap)
    # Value table with batch standard errors, on the converged measure.
    values = np.empty(x0_grid.size)
    ses = np.empty(x0_grid.size)
    acts = strategy.actions_for(x0_grid, np.zeros(x0_grid.size))
    for gi, g in enumerate(x0_grid):
        x1 = np.asarray(model.F(br_noise, np.full(br_noise.size, float(g)),
                                mu_hat, np.full(br_noise.size, acts[gi])),
                        dtype=np.float64)
        x1 = np.broadcast_to(x1, br_noise.shape)
        values[gi] = float(_payoff_samples(model, x1))
        bvals = np.asarray([float(_payoff_samples(model, c))
                            for c in np.array_split(x1, value_batches)])
        ses[gi] = float(np.std(bvals, ddof=1) / math.sqrt(bvals.size))
    return MfeSolution(strategy=strategy, mu_hat=mu_hat,
                       fixed_point_residual=succ_res, br_iterations=sweeps,
                       particle_count=particles, x0_grid=x0_grid,
                       values=values, value_ses=ses, converged=converged,
                       p=p, br_draws=br_draws, seed=seed,
                       residual_history=succ_history,
                       full_residual_history=full_history)


def apply_equilibrium_map_once(model: StaticModel, sol: MfeSolution) -> float:
    """Motion of the converged measure under one more best-response sweep.

    Recomputes the best response at mu_hat and the particle pushforward
    with the solver's own streams, returning the paired W_p distance.
    For a converged solution this is at most twice the solver tolerance.
    """
    seed, n = sol.seed, sol.particle_count
    sym = model.eta_symmetric
    xi_p = substream(seed, "mfe", "xi").random(n)
    eta_p = _antithetic(lambda k: model.eta_sampler(substream(seed, "mfe", "eta"), k),
                        n, sym)
    br_noise = _antithetic(lambda k: model.eta_sampler(substream(seed, "mfe", "br-noise"), k),
                           sol.br_draws, sym)
    x0_p = sol.mu_hat.block("x0")[:, 0]
    x1_p = sol.mu_hat.block("x1")[:, 0]
    a_p = sol.mu_hat.block("a")[:, 0]
    acts, _ = _br_table(model, sol.mu_hat, sol.x0_grid, br_noise)
    strat = Strategy.lookup(sol.x0_grid,
                            np.tile(acts[:, None], (1, sol.strategy.xi_bins)),
                            sol.strategy.xi_bins)
    a_new = strat.actions_for(x0_p, xi_p)
    x1_new = np.asarray(model.F(eta_p, x0_p, sol.mu_hat, a_new), dtype=np.float64)
    x1_new = np.broadcast_to(x1_new, x0_p.shape)
    return _paired_distance(x1_p, a_p, x1_new, a_new, sol.p, model.action_cap)


# =====================================================================
# Deviation audit
# =====================================================================

@dataclass
class PinAudit:
    """Per-pin deviation estimates (one evaluation-grid point)."""

    x0: float
    gain: float
    gain_se: float
    gap: float
    gap_se: float
    best_label: str
    picard_max_ratio: float


@dataclass
class DeviationReport:
    """Truncated max deviation gains and gaps over an evaluation grid."""

    n: int
    delta: float                    # truncation exponent; math.inf = none
    epsilon: float
    replication_count: int
    deviation_class: str
    per_agent_gain: list            # [(agent index, x0, gain, se), ...]
    pins: list                      # full per-pin audits, same order
    dbar_inf: float
    dbar_delta: float
    gbar_delta: float
    classification: str
    seed: int

    def rows(self) -> list:
        """CSV-ready dicts, one per evaluation-grid point."""
        return [{
            "n": self.n, "delta": self.delta, "x0": a.x0,
            "gain": a.gain, "gain_se": a.gain_se,
            "gap": a.gap, "gap_se": a.gap_se,
            "dbar_delta": self.dbar_delta, "gbar_delta": self.gbar_delta,
            "classification": self.classification, "seed": self.seed,
        } for a in self.pins]


def _offset_candidates(model: StaticModel, inc_actions: np.ndarray,
                       offsets: Sequence[float]):
    """Pinned-agent action candidates: incumbent first, snapped offsets after.

    The class must contain the incumbent (offset 0), or the max-minus-
    incumbent construction loses its sign guarantee.
    """
    offs = [float(o) for o in offsets]
    if not any(o == 0.0 for o in offs):
        raise ValueError("deviation class must contain the incumbent (offset 0)")
    cands = [("incumbent", inc_actions)]
    for off in offs:
        if off == 0.0:
            continue
        cands.append((f"offset{off:+g}", model.snap_action(inc_actions + off)))
    return cands


def _map_candidates(model: StaticModel, xi_col: np.ndarray,
                    inc_actions: np.ndarray, xi_bins: int):
    """All own-information rules at the pin: one action choice per xi-bin.

    At a pinned initial state only the rule's slice there matters, so
    the enumeration runs over action-grid choices per bin.  Rules whose
    realized action vector equals the incumbent's fold into it.
    """
    import itertools as _it
    grid = model.action_grid
    if grid.size ** xi_bins > 10 ** 4:
        raise ValueError(f"deviation map class too large: {grid.size ** xi_bins}")
    bins = np.minimum((xi_col * xi_bins).astype(np.int64), xi_bins - 1)
    cands = [("incumbent", inc_actions)]
    for combo in _it.product(range(grid.size), repeat=xi_bins):
        acts = grid[np.asarray(combo)][bins]
        if np.array_equal(acts, inc_actions):
            continue
        cands.append(("map" + "".join(str(c) for c in combo), acts))
    return cands


def _audit_pin(model: StaticModel, solution: MfeSolution, n: int,
               x0_pin: float, reps: int, deviation_class: dict, seed: int,
               batches: int = 20) -> PinAudit:
    """CRN deviation audit of one pinned initial state (agent 0).

    Every candidate, incumbent first, is evaluated on identical draws;
    the gain is the max candidate payoff minus the incumbent's, exactly
    nonnegative.  The gap pairs the incumbent's n-player samples with
    shadow samples pushed through the frozen equilibrium measure under
    the same pinned-agent noise, estimating |J_n - V| with noise that
    shrinks with the gap.
    """
    if reps < batches:
        raise ValueError(f"need reps >= {batches} for batched standard errors")
    tag = f"dev-{_key_of_pin(x0_pin)}"
    x0, xi, eta = _population_draws(model, n, reps, seed, tag,
                                    pin_agent=0, pin_value=float(x0_pin))
    profile = induce_profile(solution.strategy, n)
    actions = _profile_actions(profile, x0, xi)
    inc_pin_actions = actions[:, 0].copy()

    kind = deviation_class.get("kind", "offsets")
    if kind == "offsets":
        cands = _offset_candidates(model, inc_pin_actions, deviation_class["offsets"])
    elif kind == "all_maps":
        cands = _map_candidates(model, xi[:, 0], inc_pin_actions,
                                solution.strategy.xi_bins)
    else:
        raise ValueError(f"unknown deviation class kind {kind!r}")

    warm_ok = model.contraction is not None   # unique fixed point => warm start
    payoffs = np.empty(len(cands))
    batch_payoffs = []
    max_ratio = 0.0
    x1_inc = None
    for ci, (label, cand_actions) in enumerate(cands):
        acts = actions.copy()
        acts[:, 0] = cand_actions
        warm = x1_inc if (warm_ok and x1_inc is not None) else None
        x1, diag = _solve_batched(model, x0, xi, eta, acts, x1_init=warm)
        if ci == 0:
            x1_inc = x1
        max_ratio = max(max_ratio, diag.max_ratio)
        own = x1[:, 0]
        payoffs[ci] = float(_payoff_samples(model, own))
        batch_payoffs.append(np.asarray(
            [float(_payoff_samples(model, c)) for c in np.array_split(own, batches)]))

    best = int(np.argmax(payoffs))
    gain = float(payoffs[best] - payoffs[0])
    assert gain >= 0.0
    if best == 0:
        gain_se = 0.0
    else:
        bg = batch_payoffs[best] - batch_payoffs[0]
        gain_se = float(np.std(bg, ddof=1) / math.sqrt(bg.size))

    # Shadow pass: same pinned-agent noise through the frozen measure.
    shadow = np.asarray(model.F(eta[:, 0], x0[:, 0], solution.mu_hat,
                                inc_pin_actions), dtype=np.float64)
    shadow = np.broadcast_to(shadow, (reps,))
    own_inc = x1_inc[:, 0]
    bdiffs = np.asarray([
        float(_payoff_samples(model, cn)) - float(_payoff_samples(model, cs))
        for cn, cs in zip(np.array_split(own_inc, batches),
                          np.array_split(shadow, batches))])
    gap = abs(float(_payoff_samples(model, own_inc)) -
              float(_payoff_samples(model, shadow)))
    gap_se = float(np.std(bdiffs, ddof=1) / math.sqrt(bdiffs.size))

    return PinAudit(x0=float(x0_pin), gain=gain, gain_se=gain_se,
                    gap=gap, gap_se=gap_se, best_label=cands[best][0],
                    picard_max_ratio=max_ratio)


def default_deviation_class(model: StaticModel) -> dict:
    """Model-appropriate default candidate class.

    Small action grids enumerate every own-information rule; continuous
    grids probe snapped offsets spanning coarse-to-unit perturbations.
    """
    if model.action_grid.size <= 8:
        return {"kind": "all_maps"}
    return {"kind": "offsets", "offsets": [0.0, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0]}


def class_label(deviation_class: dict) -> str:
    kind = deviation_class.get("kind", "offsets")
    if kind == "offsets":
        return "offsets[" + ",".join(f"{float(o):g}"
                                     for o in deviation_class["offsets"]) + "]"
    return kind


def estimate_deviation_gain(model: StaticModel, profile: Sequence[Strategy],
                            i: int, x0_pin: float, n: int, reps: int,
                            deviation_class: dict, seed: int):
    """Max CRN payoff gain of agent i over the declared candidate class.

    Returns (gain, standard error).  The gain is exactly nonnegative
    because the incumbent is one of the compared candidates on shared
    draws.  Exchangeability makes the agent index immaterial --
    substreams are keyed so any index audits one pinned agent against
    the same symmetric environment.
    """
    if len(profile) != n:
        raise ValueError(f"profile of {len(profile)} strategies for {n} agents")
    if not 0 <= i < n:
        raise ValueError(f"agent index {i} out of range for n={n}")
    if len(set(id(s) for s in profile)) != 1:
        raise ValueError("deviation audit expects a symmetric incumbent profile")
    shim = _solution_shim(model, profile[0], reps, seed)
    audit = _audit_pin(model, shim, n, float(x0_pin), reps, deviation_class, seed)
    return audit.gain, audit.gain_se


def _solution_shim(model: StaticModel, strategy: Strategy,
                   reps: int, seed: int) -> MfeSolution:
    """Minimal solution stand-in for profile-only deviation calls.

    The shadow gap needs an equilibrium measure; absent one, the
    incumbent's own pushforward serves (the gap column is then a
    self-consistency residual, not used by the public gain return).
    """
    x0 = np.asarray(model.mu0_sampler(substream(seed, "shim", "x0"), reps),
                    dtype=np.float64).reshape(reps)
    xi = substream(seed, "shim", "xi").random(reps)
    eta = np.asarray(model.eta_sampler(substream(seed, "shim", "eta"), reps),
                     dtype=np.float64).reshape(reps)
    a = strategy.actions_for(x0, xi)
    x1, _ = _solve_batched(model, x0[None, :], xi[None, :], eta[None, :],
                           a[None, :])
    mu = EmpiricalMeasure(np.column_stack([x0, x1[0], a]), split=(1, 1, 1),
                          action_cap=model.action_cap)
    grid = np.array([0.0])
    return MfeSolution(strategy=strategy, mu_hat=mu,
                       fixed_point_residual=math.nan, br_iterations=0,
                       particle_count=reps, x0_grid=grid,
                       values=np.array([math.nan]),
                       value_ses=np.array([math.nan]),
                       converged=True, seed=seed)


def audit_grid(model: StaticModel, solution: MfeSolution, n: int,
               x0_eval_grid, reps: int, seed: int, deviation_class: dict,
               workers: int = 1) -> list:
    """Per-pin audits over an evaluation grid (threaded, order-stable)."""
    pins = [float(v) for v in np.asarray(x0_eval_grid, dtype=np.float64)]
    if not pins:
        raise ValueError("evaluation grid must be nonempty")

    def one(pin):
        return _audit_pin(model, solution, n, pin, reps, deviation_class, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, pins))
    return [one(v) for v in pins]


def report_from_audits(audits: Sequence[PinAudit], n: int, delta: float,
                       epsilon: float, reps: int, seed: int,
                       label: str) -> DeviationReport:
    """Assemble truncated maxima and a classification from per-pin audits.

    Truncated maxima reuse the untruncated per-pin floats, so the
    subset max can never exceed the full max even in the last bit.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    gains = np.asarray([a.gain for a in audits])
    gaps = np.asarray([a.gap for a in audits])
    xs = np.asarray([a.x0 for a in audits])
    assert np.all(gains >= 0.0)
    dbar_inf = float(np.max(gains))
    radius = math.inf if math.isinf(delta) else float(n) ** float(delta)
    inside = np.abs(xs) <= radius
    dbar_delta = float(np.max(gains[inside])) if np.any(inside) else 0.0
    gbar_delta = float(np.max(gaps[inside])) if np.any(inside) else 0.0
    assert dbar_delta <= dbar_inf
    if dbar_inf == 0.0:
        cls = "NE"
    elif dbar_inf <= epsilon:
        cls = "NE_eps"
    elif dbar_delta <= epsilon:
        cls = "NE_eps_delta"
    else:
        cls = "none"
    per_agent = [(0, a.x0, a.gain, a.gain_se) for a in audits]
    return DeviationReport(n=n, delta=float(delta), epsilon=float(epsilon),
                           replication_count=reps, deviation_class=label,
                           per_agent_gain=per_agent, pins=list(audits),
                           dbar_inf=dbar_inf, dbar_delta=dbar_delta,
                           gbar_delta=gbar_delta, classification=cls, seed=seed)


def max_deviation(model: StaticModel, mfe: MfeSolution, n: int, delta: float,
                  epsilon: float, x0_eval_grid, reps: int, seed: int,
                  deviation_class: Optional[dict] = None,
                  workers: int = 1) -> DeviationReport:
    """Deviation audit of the induced n-player profile on a pin grid.

    Each grid point is pinned as the audited agent's initial state
    (exchangeability makes the index immaterial; index 0 is used).
    ``delta`` is the truncation exponent restricting the reported
    maxima to pins inside the radius-n^delta ball, with math.inf as
    the no-truncation sentinel.  Classification, most specific first:
    "NE" when the untruncated max gain is exactly zero, "NE_eps" when
    it is at most epsilon, "NE_eps_delta" when only the truncated max
    is, else "none".
    """
    if not (delta > 0 or math.isinf(delta)):
        raise ValueError("delta must be positive or math.inf")
    if deviation_class is None:
        deviation_class = default_deviation_class(model)
    audits = audit_grid(model, mfe, n, x0_eval_grid, reps, seed,
                        deviation_class, workers=workers)
    return report_from_audits(audits, n, delta, epsilon, reps, seed,
                              class_label(deviation_class))
