"""Model declarations: one-period implicit systems and controlled diffusions.

A static model owns the primitives of the one-period population game:
the terminal-state map ``F(e, x0, m, a)`` in which the population
measure ``m`` (a joint law over (X_0, X_1, a)) appears as an argument of
its own output, the payoff functional ``U`` on terminal laws, the
initial and noise samplers, and the declared audit constants (a
contraction certificate for the measure argument and an affine growth
bound).  A continuous model owns the drift of a unit-diffusion SDE, the
horizon, and the terminal payoff functional.

Dynamics callables are vectorized: sample arguments carry arbitrary
leading axes, and the measure argument is either a single
:class:`~meanfield.measures.EmpiricalMeasure` shared by every sample or
a :class:`~meanfield.measures.MeasureBatch` aligned with the first axis.
Models only read the measure through block summaries, which both types
serve.

Shipped population solvers handle scalar states (state_dim == 1).
TODO: lift the population solvers to vector states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .measures import EmpiricalMeasure, MeasureBatch
from .rng import substream

__all__ = [
    "AssumptionCertificate",
    "ContinuousModel",
    "StaticModel",
    "builtin_discrete_flip",
    "builtin_lq_continuous",
    "builtin_lq_static",
    "check_assumptions",
    "model_from_dict",
    "table_model_from_dict",
]


# =====================================================================
# Model containers
# =====================================================================

@dataclass
class StaticModel:
    """One-period game primitives.

    ``F(e, x0, m, a)`` returns the terminal state; it must be vectorized
    over leading sample axes.  ``U`` maps an empirical terminal law to a
    float; ``U_samples`` is an optional fast path evaluating U on raw
    sample arrays along the last axis.  ``contraction`` is the declared
    certificate c(x0, a, e) bounding F's measure-Lipschitz constant; a
    model with no certificate (None) fails assumption checks by
    definition.  ``picard_init`` selects the population-solve seeding:
    "x0" starts from the (x0, x0, a) atom measure, "bottom" from the
    declared minimum terminal value (monotone systems converge to their
    least solution from there).
    """

    name: str
    state_dim: int
    action_grid: np.ndarray
    F: Callable
    U: Callable[[EmpiricalMeasure], float]
    mu0_sampler: Callable
    eta_sampler: Callable
    contraction: Optional[Callable] = None
    K_affine: float = 10.0
    U_samples: Optional[Callable] = None
    moment_order_mu0: int = 2
    moment_order_eta: int = 2
    action_cap: float = 1.0
    picard_init: str = "x0"
    monotone: bool = False
    terminal_values: Optional[np.ndarray] = None
    # Declares eta's law symmetric under negation, unlocking antithetic
    # particle pairing in the equilibrium solver.
    eta_symmetric: bool = False

    def __post_init__(self):
        self.action_grid = np.asarray(self.action_grid, dtype=np.float64)
        if self.action_grid.ndim != 1 or self.action_grid.size == 0:
            raise ValueError("action_grid must be a nonempty 1-d array")
        if np.any(np.diff(self.action_grid) <= 0):
            raise ValueError("action_grid must be strictly increasing")
        if self.state_dim != 1:
            raise ValueError("population solvers support state_dim == 1")
        if self.picard_init not in ("x0", "bottom"):
            raise ValueError(f"unknown picard_init {self.picard_init!r}")
        if self.picard_init == "bottom" and self.terminal_values is None:
            raise ValueError("bottom init requires declared terminal_values")
        if self.terminal_values is not None:
            self.terminal_values = np.asarray(self.terminal_values, dtype=np.float64)

    @property
    def action_midpoint(self) -> float:
        return float(self.action_grid[self.action_grid.size // 2])

    def snap_action(self, a):
        """Nearest action-grid values (ties to the lower grid point)."""
        a = np.asarray(a, dtype=np.float64)
        idx = np.searchsorted(self.action_grid, a)
        idx = np.clip(idx, 1, self.action_grid.size - 1)
        left = self.action_grid[idx - 1]
        right = self.action_grid[idx]
        use_right = (a - left) > (right - a)
        return np.where(use_right, right, left)


@dataclass
class ContinuousModel:
    """Controlled unit-diffusion dX = b(t, X_0, X_t, m_t, a) dt + dW.

    ``drift`` must be vectorized like StaticModel.F; it receives the
    running joint law of (X_0, X_t).  ``drift_bound`` and
    ``drift_lipschitz`` are declared audit constants.  States are
    clipped at ``clip_radius`` inside the drift, payoffs capped at
    ``u_cap``, both keeping long horizons finite.
    """

    name: str
    state_dim: int
    horizon: float
    action_grid: np.ndarray
    drift: Callable
    U: Callable[[EmpiricalMeasure], float]
    mu0_sampler: Callable
    drift_bound: float
    drift_lipschitz: float
    U_samples: Optional[Callable] = None
    clip_radius: float = 1e3
    u_cap: float = 1e6
    # Feedback class the flow solver searches when the caller declares
    # none; models without one require an explicit policy_class.
    default_policy_class: Optional[dict] = None
    # Declares mu0 symmetric under negation, unlocking mirrored
    # (initial, increments) path pairs in the flow solver.
    mu0_symmetric: bool = False

    def __post_init__(self):
        self.action_grid = np.asarray(self.action_grid, dtype=np.float64)
        if self.action_grid.ndim != 1 or self.action_grid.size == 0:
            raise ValueError("action_grid must be a nonempty 1-d array")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.state_dim != 1:
            raise ValueError("simulators support state_dim == 1")

    @property
    def action_range(self) -> tuple[float, float]:
        return float(self.action_grid[0]), float(self.action_grid[-1])


# =====================================================================
# Assumption audit
# =====================================================================

@dataclass(frozen=True)
class AssumptionCertificate:
    """Sampled audit of the declared growth/contraction guards."""

    model_name: str
    p: int
    sample_size: int
    c_mean: float                 # mean of c^(1 v p) over sampled triples
    c_max: float
    integrability_mean: float     # mean of 1 / (1 - c^(1 v p))
    integrability_flagged: bool   # some sample sat within 1e-9 of 1
    growth_violations: int
    verdict: str                  # "pass" | "fail"
    seed: int


def check_assumptions(model: StaticModel, p: int, n_samples: int,
                      seed: int) -> AssumptionCertificate:
    """Monte Carlo audit of the model's declared assumption constants.

    Draws (x0, eta) pairs, evaluates the contraction certificate at the
    action-grid midpoint, and checks the affine growth bound
    |F| <= K * (1 + |x0| + |eta|) on the sampled triples.  Verdict fails
    if any contraction sample reaches 1, if the mean certificate is not
    below 1, or if any growth violation shows up.
    """
    if p not in (0, 1, 2):
        raise ValueError("p must be 0, 1 or 2")
    rng = substream(seed, "certificate")
    x0 = np.asarray(model.mu0_sampler(rng, n_samples), dtype=np.float64).reshape(n_samples)
    eta = np.asarray(model.eta_sampler(rng, n_samples), dtype=np.float64).reshape(n_samples)
    a_mid = np.full(n_samples, model.action_midpoint)

    if model.contraction is None:
        return AssumptionCertificate(
            model_name=model.name, p=p, sample_size=n_samples,
            c_mean=math.nan, c_max=math.nan, integrability_mean=math.nan,
            integrability_flagged=True, growth_violations=0,
            verdict="fail", seed=seed)

    c = np.asarray(model.contraction(x0, a_mid, eta), dtype=np.float64)
    c = np.broadcast_to(c, (n_samples,))
    power = max(1, p)
    cbar = c**power
    c_mean = float(np.mean(cbar))
    c_max = float(np.max(cbar))
    near_one = cbar >= 1.0 - 1e-9
    flagged = bool(np.any(near_one))
    with np.errstate(divide="ignore"):
        integ = np.where(cbar < 1.0, 1.0 / (1.0 - cbar), np.inf)
    integ_mean = float(np.mean(integ))

    # Growth audit against a reference measure made from the sample itself.
    ref_pts = np.column_stack([x0, x0, a_mid])
    ref = EmpiricalMeasure(ref_pts, split=(1, 1, 1), action_cap=model.action_cap)
    x1 = np.asarray(model.F(eta, x0, ref, a_mid), dtype=np.float64)
    bound = model.K_affine * (1.0 + np.abs(x0) + np.abs(eta))
    violations = int(np.sum(np.abs(x1) > bound))

    ok = (c_mean < 1.0) and (c_max < 1.0) and violations == 0
    return AssumptionCertificate(
        model_name=model.name, p=p, sample_size=n_samples,
        c_mean=c_mean, c_max=c_max, integrability_mean=integ_mean,
        integrability_flagged=flagged, growth_violations=violations,
        verdict="pass" if ok else "fail", seed=seed)


# =====================================================================
# Built-in benchmark models
# =====================================================================

def _measure_x1_mean(m):
    """X_1-marginal mean of a single measure or per-row means of a batch."""
    if isinstance(m, MeasureBatch):
        return m.marginal_mean("x1")[:, 0:1]  # (B, 1), broadcasts over agents
    return float(m.marginal_mean("x1")[0])


def builtin_lq_static(rho: float, kappa: float, sigma: float,
                      action_min: float = -3.0, action_max: float = 3.0,
                      action_step: float = 0.01,
                      mu0_mean: float = 0.0, mu0_std: float = 1.0) -> StaticModel:
    """Linear-quadratic one-period benchmark.

    Terminal state rho*x0 + a + kappa*mean(X_1-marginal) + sigma*eta with
    standard normal initials and noise, payoff minus the second moment of
    the terminal law.  The measure feedback is a kappa-contraction, so
    |kappa| >= 1 is rejected.  Closed form: the equilibrium strategy is
    a = -rho*x0, the equilibrium terminal mean is 0 and the value is
    -sigma^2 at every x0.
    """
    if abs(kappa) >= 1.0:
        raise ValueError(f"|kappa| must be < 1 for well-posedness, got {kappa}")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    count = int(round((action_max - action_min) / action_step)) + 1
    grid = action_min + action_step * np.arange(count)

    def F(e, x0, m, a):
        m1 = _measure_x1_mean(m)
        return rho * np.asarray(x0) + np.asarray(a) + kappa * m1 + sigma * np.asarray(e)

    def U(law: EmpiricalMeasure) -> float:
        x = law.points[:, 0]
        return float(-np.sum(law.weights * x * x))

    def U_samples(x1s: np.ndarray) -> np.ndarray:
        return -np.mean(np.asarray(x1s) ** 2, axis=-1)

    def contraction(x0, a, e):
        return np.full(np.broadcast(np.asarray(x0), np.asarray(e)).shape, abs(kappa))

    def mu0(rng, size):
        return mu0_mean + mu0_std * rng.standard_normal(size)

    def eta(rng, size):
        return rng.standard_normal(size)

    k_aff = 1.0 + abs(rho) + sigma + 8.0 * abs(kappa) + max(abs(action_min), abs(action_max))
    return StaticModel(
        name=f"lq_static(rho={rho},kappa={kappa},sigma={sigma})",
        state_dim=1, action_grid=grid, F=F, U=U, U_samples=U_samples,
        mu0_sampler=mu0, eta_sampler=eta, contraction=contraction,
        K_affine=k_aff, moment_order_mu0=4, moment_order_eta=4,
        eta_symmetric=True)


def builtin_discrete_flip(bias: float) -> StaticModel:
    """Binary-state benchmark with a threshold measure coupling.

    The pre-coupling state is the parity (x0 + a + 1{eta > 0}) mod 2; the
    population coupling then forces state 1 whenever the terminal-law
    mass at 1 reaches ``bias``:

        F(e, x0, m, a) = max(parity, 1{f1(m) >= bias}),  f1 = mass at 1.

    The coupling is a threshold, not a contraction, so no contraction
    certificate is declared and assumption checks fail by design; the
    system is monotone in the coupling, and its defined solution is the
    least fixed point (population solves start from the bottom summary,
    and the exact oracle selects the same solution).  For bias > 1 the
    indicator never fires and the model decouples into a fair parity
    coin; for bias <= 0 it always fires and the terminal law is the
    point mass at 1.
    """
    grid = np.array([0.0, 1.0])

    def F(e, x0, m, a):
        f1 = _measure_x1_mean(m)
        parity = np.mod(np.asarray(x0) + np.asarray(a) + (np.asarray(e) > 0), 2.0)
        fires = np.asarray(f1 >= bias, dtype=np.float64)
        return np.maximum(parity, fires)

    def U(law: EmpiricalMeasure) -> float:
        at_zero = law.points[:, 0] < 0.5
        return float(np.sum(law.weights[at_zero]))

    def U_samples(x1s: np.ndarray) -> np.ndarray:
        return np.mean(np.asarray(x1s) < 0.5, axis=-1)

    def mu0(rng, size):
        return rng.integers(0, 2, size=size).astype(np.float64)

    def eta(rng, size):
        return rng.choice(np.array([-1.0, 1.0]), size=size)

    return StaticModel(
        name=f"discrete_flip(bias={bias})",
        state_dim=1, action_grid=grid, F=F, U=U, U_samples=U_samples,
        mu0_sampler=mu0, eta_sampler=eta, contraction=None,
        K_affine=2.0, picard_init="bottom", monotone=True,
        terminal_values=np.array([0.0, 1.0]), eta_symmetric=True)


def builtin_lq_continuous(theta: float, kappa: float, horizon: float,
                          action_min: float = -3.0, action_max: float = 3.0,
                          action_step: float = 0.05,
                          mu0_mean: float = 0.0, mu0_std: float = 1.0,
                          clip_radius: float = 1e3,
                          u_cap: float = 1e6) -> ContinuousModel:
    """Mean-reverting linear diffusion with mean-field drift feedback.

    dX = (a - theta*X + kappa*mean(X_t-marginal)) dt + dW, payoff minus
    the (capped) second moment of the terminal law.  With kappa = 0 and
    zero control this is the standard mean-reverting diffusion whose
    terminal variance from X_0 = 0 is (1 - exp(-2*theta*T))/(2*theta).
    """
    if abs(kappa) >= 1.0:
        raise ValueError(f"|kappa| must be < 1 for well-posedness, got {kappa}")
    count = int(round((action_max - action_min) / action_step)) + 1
    grid = action_min + action_step * np.arange(count)

    def drift(t, x0, x, m, a):
        m1 = _measure_x1_mean(m)
        m1 = np.clip(m1, -clip_radius, clip_radius)
        xc = np.clip(np.asarray(x), -clip_radius, clip_radius)
        return np.asarray(a) - theta * xc + kappa * m1

    def U(law: EmpiricalMeasure) -> float:
        x = law.points[:, 0]
        return float(-min(np.sum(law.weights * x * x), u_cap))

    def U_samples(x1s: np.ndarray) -> np.ndarray:
        return -np.minimum(np.mean(np.asarray(x1s) ** 2, axis=-1), u_cap)

    def mu0(rng, size):
        return mu0_mean + mu0_std * rng.standard_normal(size)

    bound = max(abs(action_min), abs(action_max)) + (abs(theta) + abs(kappa)) * clip_radius
    # Linear state-feedback family a = clip(g1*x + g0); wide negative
    # gains approximate the bang-bang rule the terminal cost favors.
    gains = {"kind": "linear_gain",
             "g1_values": [round(-0.25 * k, 2) for k in range(13)],
             "g0_values": [0.0]}
    return ContinuousModel(
        name=f"lq_continuous(theta={theta},kappa={kappa},T={horizon})",
        state_dim=1, horizon=horizon, action_grid=grid, drift=drift,
        U=U, U_samples=U_samples, mu0_sampler=mu0,
        drift_bound=bound, drift_lipschitz=abs(theta) + abs(kappa),
        clip_radius=clip_radius, u_cap=u_cap,
        default_policy_class=gains, mu0_symmetric=(mu0_mean == 0.0))


# =====================================================================
# Table-driven discrete models (config route, no runtime code loading)
# =====================================================================

def table_model_from_dict(spec: dict) -> StaticModel:
    """Build a finite static model from plain config data.

    Expected keys: ``states``, ``actions``, ``noise_values``,
    ``noise_probs``, ``mu0_probs``, ``summary`` (``{"kind":
    "x1_mass_threshold", "value": v, "threshold": t}``), ``monotone``
    (bool), and ``transition`` — a nested list indexed
    ``[noise][x0][summary][action]`` yielding a state index.  The
    measure enters the dynamics only through the declared binary
    summary, which is what makes exact enumeration of the same system
    feasible on the oracle side.
    """
    states = np.asarray(spec["states"], dtype=np.float64)
    actions = np.asarray(spec["actions"], dtype=np.float64)
    noise_vals = np.asarray(spec["noise_values"], dtype=np.float64)
    noise_probs = np.asarray(spec["noise_probs"], dtype=np.float64)
    mu0_probs = np.asarray(spec["mu0_probs"], dtype=np.float64)
    summary = spec["summary"]
    if summary.get("kind") != "x1_mass_threshold":
        raise ValueError(f"unsupported summary kind {summary.get('kind')!r}")
    s_value = float(summary["value"])
    s_threshold = float(summary["threshold"])
    monotone = bool(spec.get("monotone", False))
    table = np.asarray(spec["transition"], dtype=np.int64)
    expected = (noise_vals.size, states.size, 2, actions.size)
    if table.shape != expected:
        raise ValueError(f"transition table shape {table.shape}, expected {expected}")
    if np.any((table < 0) | (table >= states.size)):
        raise ValueError("transition table entries must be state indices")
    if abs(float(noise_probs.sum()) - 1.0) > 1e-12 or np.any(noise_probs < 0):
        raise ValueError("noise_probs must be a probability vector")
    if abs(float(mu0_probs.sum()) - 1.0) > 1e-12 or np.any(mu0_probs < 0):
        raise ValueError("mu0_probs must be a probability vector")

    pay = spec.get("payoff", {"kind": "mass_at", "value": float(states[0])})
    if pay.get("kind") != "mass_at":
        raise ValueError(f"unsupported payoff kind {pay.get('kind')!r}")
    pay_value = float(pay["value"])

    def index_of(values, grid, label):
        idx = np.searchsorted(grid, values)
        idx = np.clip(idx, 0, grid.size - 1)
        if not np.allclose(grid[idx], values, atol=1e-9):
            raise ValueError(f"{label} values off the declared grid")
        return idx

    def F(e, x0, m, a):
        if isinstance(m, MeasureBatch):
            x1m = m.block("x1")[:, :, 0]
            w = m.weights
            mass = np.sum(w * (np.abs(x1m - s_value) < 1e-9), axis=1)[:, None]
        else:
            x1m = m.block("x1")[:, 0]
            mass = float(np.sum(m.weights[np.abs(x1m - s_value) < 1e-9]))
        s_idx = np.asarray(mass >= s_threshold, dtype=np.int64)
        e_arr, x0_arr, a_arr = np.broadcast_arrays(
            np.asarray(e), np.asarray(x0), np.asarray(a))
        ei = index_of(e_arr.ravel(), noise_vals, "noise")
        xi = index_of(x0_arr.ravel(), states, "state")
        ai = index_of(a_arr.ravel(), actions, "action")
        si = np.broadcast_to(s_idx, e_arr.shape).ravel()
        out = table[ei, xi, si, ai]
        return states[out].reshape(e_arr.shape)

    def U(law: EmpiricalMeasure) -> float:
        hit = np.abs(law.points[:, 0] - pay_value) < 1e-9
        return float(np.sum(law.weights[hit]))

    def U_samples(x1s: np.ndarray) -> np.ndarray:
        return np.mean(np.abs(np.asarray(x1s) - pay_value) < 1e-9, axis=-1)

    def mu0(rng, size):
        return rng.choice(states, size=size, p=mu0_probs)

    def eta(rng, size):
        return rng.choice(noise_vals, size=size, p=noise_probs)

    return StaticModel(
        name=spec.get("name", "discrete_table"),
        state_dim=1, action_grid=actions, F=F, U=U, U_samples=U_samples,
        mu0_sampler=mu0, eta_sampler=eta, contraction=None,
        K_affine=float(np.max(np.abs(states))) + 1.0,
        picard_init="bottom" if monotone else "x0",
        monotone=monotone, terminal_values=states,
        eta_symmetric=bool(spec.get("eta_symmetric", False)))


def model_from_dict(spec: dict):
    """Instantiate a model from a plain declaration dict (config route)."""
    kind = spec.get("kind")
    params = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "lq_static":
        return builtin_lq_static(**params)
    if kind == "discrete_flip":
        return builtin_discrete_flip(**params)
    if kind == "lq_continuous":
        return builtin_lq_continuous(**params)
    if kind == "discrete_table":
        return table_model_from_dict(params)
    raise ValueError(f"unknown model kind {kind!r}")
