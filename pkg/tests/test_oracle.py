"""Exact enumeration oracle for small discrete instances.

Every expected value below is hand-derived from the flip transition
rule x1 = max((x0 + a + 1{e>0}) mod 2, s) with the threshold summary
s = 1{mass at 1 >= 1/2} resolved to its least solution:

  * any action map leaves the parity uniform on {0,1}, because the
    noise indicator is an independent fair coin;
  * hence with all-zero incumbents, agent 1's terminal state is 0
    exactly when its own parity is 0 and the population summary stays
    off, i.e. at most floor(n/2) of the n parities are 1;
  * n=2: P(X1=0 | pinned x0) = P(p1=0) * P(p2=0)         = 1/4
  * n=3: P(X1=0 | pinned x0) = P(p1=0) * P(p2+p3 <= 1)   = 3/8
  * the parity argument is map-free, so every deviation gain is 0;
  * on the summary lattice only f=1 is a fixed point: f < 1/2 pushes
    forward to 1/2, and any f >= 1/2 pushes forward to 1.
"""

from fractions import Fraction

import numpy as np
import pytest

from meanfield import (
    DiscreteInstance,
    exact_conditional_law,
    exact_deviation_gain,
    exact_mfe,
    exact_payoff,
    exact_population_law,
    flip_instance,
)

HALF = Fraction(1, 2)
ZEROS = np.zeros((2, 1), dtype=np.int64)       # all-zero action map


def test_flip_transition_table_entries():
    inst = flip_instance(0.5)
    t = inst.table
    assert t.shape == (2, 2, 2, 2)
    assert t[1, 0, 0, 0] == 1      # e>0, x0=0, s off, a=0: parity 1
    assert t[0, 0, 0, 0] == 0      # e<0: parity 0
    assert t[0, 0, 1, 0] == 1      # summary on forces state 1
    assert t[1, 1, 0, 1] == 1      # x0=1, a=1, e>0: (1+1+1) mod 2


def test_conditional_law_two_agents():
    inst = flip_instance(0.5)
    law = exact_conditional_law(inst, 2, [ZEROS] * 2, pinned_x0_idx=0)
    assert law == [Fraction(1, 4), Fraction(3, 4)]


def test_conditional_law_three_agents():
    inst = flip_instance(0.5)
    law = exact_conditional_law(inst, 3, [ZEROS] * 3, pinned_x0_idx=0)
    assert law == [Fraction(3, 8), Fraction(5, 8)]


def test_conditional_law_pin_invariance():
    # The parity is uniform whatever the pinned initial state is.
    inst = flip_instance(0.5)
    for n in (2, 3):
        assert (exact_conditional_law(inst, n, [ZEROS] * n, 0)
                == exact_conditional_law(inst, n, [ZEROS] * n, 1))


def test_payoff_reads_mass_at_payoff_state():
    inst = flip_instance(0.5)
    law = exact_conditional_law(inst, 2, [ZEROS] * 2, pinned_x0_idx=0)
    assert exact_payoff(inst, law) == Fraction(1, 4)


def test_single_agent_joint_law():
    """n=1: (x0, x1) is uniform on the four corner pairs."""
    inst = flip_instance(0.5)
    joint = exact_population_law(inst, 1, [ZEROS])
    assert len(joint) == 4
    assert all(p == Fraction(1, 4) for p in joint.values())
    assert sum(joint.values()) == 1


def test_deviation_gains_all_exactly_zero():
    inst = flip_instance(0.5)
    for n in (2, 3):
        dev = exact_deviation_gain(inst, n, ZEROS, pinned_x0_idx=0)
        assert dev.gain == 0
        assert dev.incumbent_payoff == (Fraction(1, 4) if n == 2 else Fraction(3, 8))
        # 2 states x 1 level x 2 actions: 4 candidate maps, none gains.
        assert len(dev.candidate_gains) == 4
        assert all(g == 0 for _, g in dev.candidate_gains)
        assert dev.best_map == (0, 0)


def test_mfe_lattice_has_unique_fixed_point():
    inst = flip_instance(0.5)
    points = exact_mfe(inst, lattice=64)
    assert len(points) == 1
    pt = points[0]
    assert pt.fraction == 1
    assert pt.pushforward == 1
    assert pt.strategy == (0, 0)      # ties resolve to the lowest action
    assert pt.values == (Fraction(0), Fraction(0))


def test_mfe_lattice_coarse_and_fine_agree():
    inst = flip_instance(0.5)
    assert [p.fraction for p in exact_mfe(inst, lattice=8)] == [Fraction(1)]
    assert [p.fraction for p in exact_mfe(inst, lattice=256)] == [Fraction(1)]


# ---------------------------------------------------------------------
# Consistency resolution of the implicit summary
# ---------------------------------------------------------------------

def _one_action_instance(x1_when_off, x1_when_on, monotone=False):
    # One state pair {0,1}, one action, one noise atom; the transition
    # depends on the summary bit only.
    table = (((  (x1_when_off,), (x1_when_on,) ),
              ( (x1_when_off,), (x1_when_on,) )),)
    return DiscreteInstance(
        states=(0.0, 1.0), actions=(0.0,), noise_values=(1.0,),
        noise_probs=(Fraction(1),), xi_levels=1,
        mu0_probs=(Fraction(1), Fraction(0)), transition=table,
        summary_value=1.0, summary_threshold=HALF,
        payoff_value=0.0, monotone=monotone)


def test_contrarian_coupling_has_no_solution():
    # Summary off -> state 1 (summary should be on); summary on ->
    # state 0 (summary should be off).  No consistent configuration.
    inst = _one_action_instance(x1_when_off=1, x1_when_on=0)
    one = np.zeros((2, 1), dtype=np.int64)
    with pytest.raises(RuntimeError, match="no self-consistent"):
        exact_population_law(inst, 1, [one])


def test_follower_coupling_is_ambiguous_without_monotonicity():
    # Summary off -> state 0, summary on -> state 1: both branches are
    # self-consistent, and nothing selects one without monotonicity.
    inst = _one_action_instance(x1_when_off=0, x1_when_on=1)
    one = np.zeros((2, 1), dtype=np.int64)
    with pytest.raises(RuntimeError, match="multiple self-consistent"):
        exact_population_law(inst, 1, [one])


def test_follower_coupling_monotone_takes_least_solution():
    inst = _one_action_instance(x1_when_off=0, x1_when_on=1, monotone=True)
    law = exact_conditional_law(inst, 1, [ZEROS], pinned_x0_idx=0)
    assert law == [Fraction(1), Fraction(0)]


def test_monotonicity_declaration_is_validated():
    with pytest.raises(ValueError, match="not monotone"):
        _one_action_instance(x1_when_off=1, x1_when_on=0, monotone=True)


# ---------------------------------------------------------------------
# Instance validation and enumeration guards
# ---------------------------------------------------------------------

def test_probabilities_must_sum_to_one():
    with pytest.raises(ValueError):
        DiscreteInstance(
            states=(0.0, 1.0), actions=(0.0,), noise_values=(1.0,),
            noise_probs=(HALF,), xi_levels=1,
            mu0_probs=(HALF, HALF), transition=(((((0,), (0,)),
                                                  ((0,), (0,)))),),
            summary_value=1.0, summary_threshold=HALF, payoff_value=0.0)


def test_transition_shape_checked():
    with pytest.raises(ValueError, match="transition shape"):
        DiscreteInstance(
            states=(0.0, 1.0), actions=(0.0,), noise_values=(1.0,),
            noise_probs=(Fraction(1),), xi_levels=1,
            mu0_probs=(HALF, HALF), transition=(((0,), (0,)),),
            summary_value=1.0, summary_threshold=HALF, payoff_value=0.0)


def test_state_index_requires_known_value():
    inst = flip_instance(0.5)
    assert inst.state_index(1.0) == 1
    with pytest.raises(ValueError):
        inst.state_index(0.25)


def test_enumeration_guard_trips_for_large_n():
    inst = flip_instance(0.5)
    # 4 atoms per agent: n * 4^n passes 10^7 around n = 12.
    with pytest.raises(ValueError, match="enumeration budget"):
        exact_population_law(inst, 13, [ZEROS] * 13)


def test_lattice_guard():
    with pytest.raises(ValueError):
        exact_mfe(flip_instance(0.5), lattice=10**5)
