"""Exact brute-force reference for tiny finite instances.

Everything here enumerates: initial states, randomizer levels, noise
atoms, candidate terminal configurations, deviation maps, equilibrium
lattice points.  Probabilities are `fractions.Fraction`, so results are
exact rationals and comparisons against Monte Carlo estimates carry no
reference error of their own.  Nothing in this module touches the
simulation engine — the two routes to every number stay independent.

The implicit one-period system is resolved per draw by consistency
search over candidate coupling summaries.  Zero consistent candidates
is always an error.  Multiple candidates are an error unless the
instance declares a monotone coupling, in which case the least
(summary-off-first) solution is the defined one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DiscreteInstance",
    "OracleDeviation",
    "OracleMfePoint",
    "exact_conditional_law",
    "exact_deviation_gain",
    "exact_mfe",
    "exact_population_law",
    "flip_instance",
]

ENUM_GUARD = 10**7
MAP_GUARD = 10**4
LATTICE_GUARD = 10**4


@dataclass(frozen=True)
class DiscreteInstance:
    """A finite one-period system small enough to enumerate.

    ``transition[e_idx][x0_idx][s][a_idx]`` is the terminal state index
    given noise atom, initial state, coupling summary bit s and action.
    The coupling summary is the indicator {mass at ``summary_value`` >=
    ``summary_threshold``} of the terminal empirical law.  ``payoff_value``
    names the state whose terminal mass the payoff functional reports.
    """

    states: tuple
    actions: tuple
    noise_values: tuple
    noise_probs: tuple          # Fractions summing to 1
    xi_levels: int
    mu0_probs: tuple            # Fractions over states
    transition: tuple           # nested (E, S, 2, A) of state indices
    summary_value: float
    summary_threshold: Fraction
    payoff_value: float
    monotone: bool = False

    def __post_init__(self):
        if not (1 <= len(self.states) <= 4):
            raise ValueError("instance supports 1..4 states")
        if not (1 <= len(self.actions) <= 3):
            raise ValueError("instance supports 1..3 actions")
        if not (1 <= len(self.noise_values) <= 3):
            raise ValueError("instance supports 1..3 noise atoms")
        if not (1 <= self.xi_levels <= 3):
            raise ValueError("instance supports 1..3 randomizer levels")
        if sum(self.noise_probs) != 1:
            raise ValueError("noise_probs must sum to exactly 1")
        if sum(self.mu0_probs) != 1:
            raise ValueError("mu0_probs must sum to exactly 1")
        tr = np.asarray(self.transition, dtype=np.int64)
        expected = (len(self.noise_values), len(self.states), 2, len(self.actions))
        if tr.shape != expected:
            raise ValueError(f"transition shape {tr.shape}, expected {expected}")
        if self.monotone:
            # Monotone coupling: switching the summary on may only move
            # terminal states toward the summary value, never away.
            sv = self.summary_value
            hit0 = np.asarray([abs(self.states[i] - sv) < 1e-9 for i in tr[:, :, 0, :].ravel()])
            hit1 = np.asarray([abs(self.states[i] - sv) < 1e-9 for i in tr[:, :, 1, :].ravel()])
            if np.any(hit0 & ~hit1):
                raise ValueError("declared monotone, but coupling is not monotone")

    @property
    def table(self) -> np.ndarray:
        return np.asarray(self.transition, dtype=np.int64)

    def state_index(self, value: float) -> int:
        for i, s in enumerate(self.states):
            if abs(s - value) < 1e-9:
                return i
        raise ValueError(f"{value} is not a state of this instance")


def flip_instance(bias: float) -> DiscreteInstance:
    """Enumeration twin of the binary flip benchmark.

    Built directly from the defining formula
    ``x1 = max((x0 + a + 1{e>0}) mod 2, s)`` — independently of the
    simulation-side model object.
    """
    states = (0.0, 1.0)
    actions = (0.0, 1.0)
    noise = (-1.0, 1.0)
    table = [[[[0] * 2 for _ in range(2)] for _ in range(2)] for _ in range(2)]
    for ei, e in enumerate(noise):
        for xi, x0 in enumerate(states):
            for s in (0, 1):
                for ai, a in enumerate(actions):
                    parity = (x0 + a + (1.0 if e > 0 else 0.0)) % 2.0
                    x1 = max(parity, float(s))
                    table[ei][xi][s][ai] = 1 if x1 > 0.5 else 0
    return DiscreteInstance(
        states=states, actions=actions,
        noise_values=noise, noise_probs=(Fraction(1, 2), Fraction(1, 2)),
        xi_levels=1, mu0_probs=(Fraction(1, 2), Fraction(1, 2)),
        transition=_deep_tuple(table),
        summary_value=1.0, summary_threshold=Fraction(bias).limit_denominator(10**9),
        payoff_value=0.0, monotone=True)


def _deep_tuple(obj):
    if isinstance(obj, (list, tuple)):
        return tuple(_deep_tuple(v) for v in obj)
    return obj


# =====================================================================
# Per-draw resolution of the implicit system
# =====================================================================

def _resolve_draw(inst: DiscreteInstance, n: int, x0_idx, a_idx, e_idx):
    """Terminal state indices for one joint draw, or raise.

    Tries the summary-off branch first; under a monotone coupling that
    order makes the accepted solution the least fixed point.
    """
    table = inst.table
    sv_idx = inst.state_index(inst.summary_value)
    consistent = []
    for s in (0, 1):
        x1 = [int(table[e_idx[i], x0_idx[i], s, a_idx[i]]) for i in range(n)]
        mass = Fraction(sum(1 for v in x1 if v == sv_idx), n)
        if (mass >= inst.summary_threshold) == bool(s):
            consistent.append((s, tuple(x1)))
    if not consistent:
        raise RuntimeError("draw admits no self-consistent terminal configuration")
    distinct = {cfg for _, cfg in consistent}
    if len(distinct) > 1 and not inst.monotone:
        raise RuntimeError("draw admits multiple self-consistent terminal "
                           "configurations and the coupling is not monotone")
    return consistent[0][1]


def _iter_agent_draws(inst: DiscreteInstance, pinned_x0_idx: Optional[int]):
    """Yield per-agent atoms (x0_idx, xi_level, e_idx, prob) for agent slots.

    Returns a pair (pinned_atoms, free_atoms); the pinned list fixes x0.
    """
    xi_p = Fraction(1, inst.xi_levels)
    free = []
    for x0i, p0 in enumerate(inst.mu0_probs):
        if p0 == 0:
            continue
        for xl in range(inst.xi_levels):
            for ei, pe in enumerate(inst.noise_probs):
                if pe == 0:
                    continue
                free.append((x0i, xl, ei, p0 * xi_p * pe))
    pinned = None
    if pinned_x0_idx is not None:
        pinned = []
        for xl in range(inst.xi_levels):
            for ei, pe in enumerate(inst.noise_probs):
                if pe == 0:
                    continue
                pinned.append((pinned_x0_idx, xl, ei, xi_p * pe))
    return pinned, free


def _check_enum_guard(inst: DiscreteInstance, n: int) -> None:
    per_agent = len(inst.states) * inst.xi_levels * len(inst.noise_values)
    if n * per_agent**n > ENUM_GUARD:
        raise ValueError(f"enumeration budget exceeded: n={n}, {per_agent}^n atoms")


def _profile_actions(maps, x0_idx, xi_lvl):
    return [int(maps[i][x0_idx[i], xi_lvl[i]]) for i in range(len(x0_idx))]


def exact_population_law(inst: DiscreteInstance, n: int, maps,
                         pinned_x0_idx: Optional[int] = None) -> dict:
    """Exact joint law of (X0 vector, X1 vector) under the given maps.

    ``maps`` is one (S, xi_levels) action-index array per agent.  Agent
    1 (index 0) can be pinned to a fixed initial state.  Returns a dict
    {(x0_indices, x1_indices): Fraction} summing to exactly 1.
    """
    if n < 1:
        raise ValueError("need at least one agent")
    if len(maps) != n:
        raise ValueError(f"{len(maps)} maps for {n} agents")
    _check_enum_guard(inst, n)
    pinned, free = _iter_agent_draws(inst, pinned_x0_idx)
    per_agent = [pinned if (i == 0 and pinned is not None) else free
                 for i in range(n)]
    law: dict = {}
    for combo in itertools.product(*per_agent):
        x0_idx = [c[0] for c in combo]
        xi_lvl = [c[1] for c in combo]
        e_idx = [c[2] for c in combo]
        prob = Fraction(1)
        for c in combo:
            prob *= c[3]
        a_idx = _profile_actions(maps, x0_idx, xi_lvl)
        x1 = _resolve_draw(inst, n, x0_idx, a_idx, e_idx)
        key = (tuple(x0_idx), x1)
        law[key] = law.get(key, Fraction(0)) + prob
    assert sum(law.values()) == 1
    return law


def exact_conditional_law(inst: DiscreteInstance, n: int, maps,
                          pinned_x0_idx: int) -> list:
    """Exact law of agent 1's terminal state given its pinned x0.

    Returns one Fraction per state index; sums to exactly 1.
    """
    joint = exact_population_law(inst, n, maps, pinned_x0_idx=pinned_x0_idx)
    out = [Fraction(0) for _ in inst.states]
    for (_, x1), p in joint.items():
        out[x1[0]] += p
    assert sum(out) == 1
    return out


def exact_payoff(inst: DiscreteInstance, law: Sequence[Fraction]) -> Fraction:
    """Terminal-mass payoff of an exact conditional law."""
    return law[inst.state_index(inst.payoff_value)]


# =====================================================================
# Deviations
# =====================================================================

@dataclass(frozen=True)
class OracleDeviation:
    """Exact deviation audit at one pinned initial state."""

    gain: Fraction                     # max over the map class, >= 0
    best_map: tuple
    incumbent_payoff: Fraction
    candidate_gains: tuple             # (map, Fraction gain) per candidate


def _all_maps(inst: DiscreteInstance):
    cells = len(inst.states) * inst.xi_levels
    count = len(inst.actions) ** cells
    if count > MAP_GUARD:
        raise ValueError(f"deviation class too large to enumerate: {count}")
    shape = (len(inst.states), inst.xi_levels)
    for combo in itertools.product(range(len(inst.actions)), repeat=cells):
        yield np.asarray(combo, dtype=np.int64).reshape(shape)


def exact_deviation_gain(inst: DiscreteInstance, n: int, incumbent,
                         pinned_x0_idx: int) -> OracleDeviation:
    """Exact max payoff gain of agent 1 over all own-information maps.

    Everyone else keeps the incumbent map; agent 1 tries every map
    (x0, xi-level) -> action.  The incumbent is in the class, so the
    gain is exactly nonnegative.
    """
    incumbent = np.asarray(incumbent, dtype=np.int64)
    base_maps = [incumbent] * n
    inc_law = exact_conditional_law(inst, n, base_maps, pinned_x0_idx)
    inc_pay = exact_payoff(inst, inc_law)
    best_gain = Fraction(0)
    best_map = tuple(incumbent.ravel())
    gains = []
    for cand in _all_maps(inst):
        maps = [cand] + [incumbent] * (n - 1)
        law = exact_conditional_law(inst, n, maps, pinned_x0_idx)
        gain = exact_payoff(inst, law) - inc_pay
        gains.append((tuple(cand.ravel()), gain))
        if gain > best_gain:
            best_gain = gain
            best_map = tuple(cand.ravel())
    return OracleDeviation(gain=best_gain, best_map=best_map,
                           incumbent_payoff=inc_pay,
                           candidate_gains=tuple(gains))


# =====================================================================
# Mean field equilibrium on the summary lattice
# =====================================================================

@dataclass(frozen=True)
class OracleMfePoint:
    """One exact equilibrium candidate on the summary-mass lattice."""

    fraction: Fraction            # lattice mass at the summary value
    strategy: tuple               # flattened (S, xi_levels) action indices
    pushforward: Fraction         # exact T(fraction) before re-quantization
    values: tuple                 # optimal payoff per initial state


def exact_mfe(inst: DiscreteInstance, lattice: int = 64) -> list:
    """All lattice fixed points of the one-step equilibrium map.

    For each lattice value f of the terminal summary mass: compute the
    exact best response per (initial state, randomizer level) with ties
    to the lowest action index, push the population forward under that
    response, and keep f when the pushforward re-quantizes to f.
    """
    if lattice + 1 > LATTICE_GUARD:
        raise ValueError("summary lattice too large")
    table = inst.table
    sv_idx = inst.state_index(inst.summary_value)
    pay_idx = inst.state_index(inst.payoff_value)
    xi_p = Fraction(1, inst.xi_levels)
    out = []
    for k in range(lattice + 1):
        f = Fraction(k, lattice)
        s = 1 if f >= inst.summary_threshold else 0
        # Best response per state (the randomizer carries no information
        # here, so every xi level shares the state's best action).
        strat = np.zeros((len(inst.states), inst.xi_levels), dtype=np.int64)
        values = []
        for x0i in range(len(inst.states)):
            best_a, best_v = 0, None
            for ai in range(len(inst.actions)):
                v = Fraction(0)
                for ei, pe in enumerate(inst.noise_probs):
                    if table[ei, x0i, s, ai] == pay_idx:
                        v += pe
                if best_v is None or v > best_v:
                    best_a, best_v = ai, v
            strat[x0i, :] = best_a
            values.append(best_v)
        # Exact pushforward mass at the summary value.
        push = Fraction(0)
        for x0i, p0 in enumerate(inst.mu0_probs):
            for xl in range(inst.xi_levels):
                ai = int(strat[x0i, xl])
                for ei, pe in enumerate(inst.noise_probs):
                    if table[ei, x0i, s, ai] == sv_idx:
                        push += p0 * xi_p * pe
        # Nearest lattice point (ties toward the lower index).
        scaled = push * lattice
        lo = int(scaled)
        near = lo if (scaled - lo) * 2 <= 1 else lo + 1
        if near == k:
            out.append(OracleMfePoint(
                fraction=f, strategy=tuple(strat.ravel()),
                pushforward=push, values=tuple(values)))
    return out
