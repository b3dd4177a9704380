"""One-period population solves, the damped equilibrium iteration, and
the common-random-numbers deviation audits."""

import math

import numpy as np
import pytest

from meanfield import (
    PinAudit,
    Strategy,
    apply_equilibrium_map_once,
    builtin_discrete_flip,
    builtin_lq_static,
    estimate_conditional_law,
    estimate_deviation_gain,
    exact_conditional_law,
    flip_instance,
    induce_profile,
    max_deviation,
    report_from_audits,
    solve_mfe,
    solve_population_state,
)
from meanfield.models import StaticModel
from meanfield.static_game import payoff


def zeros_strategy():
    return Strategy.lookup([0.0, 1.0], np.zeros((2, 1)))


def lq_model(step=0.05):
    return builtin_lq_static(rho=0.3, kappa=0.5, sigma=1.0, action_step=step)


# ---------------------------------------------------------------------
# Strategies and profiles
# ---------------------------------------------------------------------

def test_lookup_nearest_node():
    s = Strategy.lookup([0.0, 1.0, 2.0], np.array([[10.0], [20.0], [30.0]]))
    out = s.actions_for(np.array([-5.0, 0.49, 0.51, 1.6, 9.0]), np.zeros(5))
    assert np.array_equal(out, [10.0, 10.0, 20.0, 30.0, 30.0])


def test_lookup_xi_bins():
    s = Strategy.lookup([0.0], np.array([[1.0, 2.0]]), xi_bins=2)
    out = s.actions_for(np.zeros(3), np.array([0.0, 0.49, 0.99]))
    assert np.array_equal(out, [1.0, 1.0, 2.0])


def test_lookup_validates_table_shape():
    with pytest.raises(ValueError):
        Strategy.lookup([0.0, 1.0], np.zeros((3, 1)))
    with pytest.raises(ValueError):
        Strategy.lookup([], np.zeros((0, 1)))


def test_induce_profile_shares_one_strategy():
    s = zeros_strategy()
    profile = induce_profile(s, 5)
    assert len(profile) == 5
    assert all(q is s for q in profile)
    with pytest.raises(ValueError):
        induce_profile(s, 0)
    with pytest.raises(TypeError):
        induce_profile(lambda x0, xi: 0.0, 3)


# ---------------------------------------------------------------------
# Population solves (implicit terminal system)
# ---------------------------------------------------------------------

def test_flip_population_solve_by_hand():
    """Two hand-resolvable draws of the two-agent flip system."""
    model = builtin_discrete_flip(0.5)
    profile = induce_profile(zeros_strategy(), 2)

    # Both parities 0: the summary stays off and states stay 0.
    st = solve_population_state(model, profile,
                                ([0.0, 0.0], [0.1, 0.9], [-1.0, -1.0]))
    assert np.array_equal(st.x1, [0.0, 0.0])
    assert st.residual == 0.0

    # Parities (1, 1): mass reaches the threshold, forcing both to 1.
    st = solve_population_state(model, profile,
                                ([0.0, 1.0], [0.1, 0.9], [1.0, -1.0]))
    assert np.array_equal(st.x1, [1.0, 1.0])
    assert st.residual == 0.0
    assert st.picard_iters == 1
    mu = st.measure()
    assert mu.split == (1, 1, 1)
    assert mu.marginal_mean("x1")[0] == 1.0


def test_population_solve_exchangeability_bitwise():
    """Permuting agents permutes the solved states exactly."""
    model = lq_model()
    n = 6
    rng = np.random.default_rng(17)
    x0 = rng.normal(size=n)
    xi = rng.random(n)
    eta = rng.normal(size=n)
    s = Strategy.closed_form(lambda x, u: -0.3 * x)
    base = solve_population_state(model, [s] * n, (x0, xi, eta))
    perm = rng.permutation(n)
    swapped = solve_population_state(model, [s] * n, (x0[perm], xi[perm], eta[perm]))
    assert np.array_equal(swapped.x1, base.x1[perm])
    assert np.array_equal(swapped.actions, base.actions[perm])


def test_population_solve_validates_draws():
    model = builtin_discrete_flip(0.5)
    profile = induce_profile(zeros_strategy(), 2)
    with pytest.raises(ValueError):
        solve_population_state(model, profile, ([0.0], [0.5], [1.0]))
    with pytest.raises(ValueError):
        solve_population_state(model, profile, ([0.0, 1.0], [0.5], [1.0, -1.0]))
    with pytest.raises(ValueError):
        solve_population_state(model, profile, ([0.0, 1.0], [0.5, 0.5], [1.0, -1.0]),
                               tol=-1.0)


def test_payoff_lower_completion():
    bad = StaticModel(name="nan_payoff", state_dim=1, action_grid=[0.0, 1.0],
                      F=lambda e, x0, m, a: x0, U=lambda law: float("nan"),
                      mu0_sampler=lambda rng, k: rng.normal(size=k),
                      eta_sampler=lambda rng, k: rng.normal(size=k))
    from meanfield import EmpiricalMeasure
    assert payoff(bad, EmpiricalMeasure([0.0])) == -math.inf


# ---------------------------------------------------------------------
# Conditional laws against the oracle
# ---------------------------------------------------------------------

def test_flip_conditional_law_matches_oracle():
    model = builtin_discrete_flip(0.5)
    inst = flip_instance(0.5)
    reps = 4000
    for n in (2, 3):
        profile = induce_profile(zeros_strategy(), n)
        law, diag = estimate_conditional_law(model, profile, i=0, x0_pin=0.0,
                                             n=n, reps=reps, seed=902)
        exact = exact_conditional_law(inst, n, [np.zeros((2, 1), int)] * n, 0)
        p_hat = float(np.sum(law.weights[law.points[:, 0] > 0.5]))
        p = float(exact[1])
        se = math.sqrt(p * (1 - p) / reps)
        assert abs(p_hat - p) <= 3 * se
        assert diag.converged


def test_conditional_law_validates_arguments():
    model = builtin_discrete_flip(0.5)
    profile = induce_profile(zeros_strategy(), 2)
    with pytest.raises(ValueError):
        estimate_conditional_law(model, profile, i=0, x0_pin=0.0, n=2,
                                 reps=0, seed=1)
    with pytest.raises(ValueError):
        estimate_conditional_law(model, profile, i=5, x0_pin=0.0, n=2,
                                 reps=8, seed=1)
    with pytest.raises(ValueError):
        estimate_conditional_law(model, profile, i=0, x0_pin=0.0, n=3,
                                 reps=8, seed=1)


# ---------------------------------------------------------------------
# Equilibrium solver
# ---------------------------------------------------------------------

def test_lq_equilibrium_small_particle_run():
    """Equilibrium strategy -0.3*x0, centered measure, value near -1."""
    model = lq_model()
    grid = np.arange(-2.0, 2.5, 0.5)
    sol = solve_mfe(model, particles=8192, x0_grid=grid, seed=404,
                    br_draws=2048)
    assert sol.converged
    acts = sol.strategy.actions_for(grid, np.zeros(grid.size))
    assert np.max(np.abs(acts + 0.3 * grid)) <= 0.05
    assert abs(sol.mu_hat.marginal_mean("x1")[0]) <= 0.05
    assert np.max(np.abs(sol.values + 1.0)) <= 0.1
    assert sol.value_at(0.5) == sol.value_table[0.5][0]
    with pytest.raises(ValueError):
        sol.value_at(0.123)          # not a grid node
    # Residual histories shrink toward the tolerance.
    assert sol.residual_history[-1] <= 5e-3
    assert sol.full_residual_history[-1] <= 1e-2


def test_equilibrium_map_once_bound():
    """One more best-response sweep moves a converged measure < 2*tol."""
    model = lq_model()
    sol = solve_mfe(model, particles=4096, x0_grid=[-1.0, 0.0, 1.0],
                    seed=11, br_draws=1024)
    assert sol.converged
    assert apply_equilibrium_map_once(model, sol) <= 2.0 * 5e-3


def test_flip_equilibrium_hits_lattice_fixed_point():
    """The particle iteration lands on the oracle's unique fixed point
    (all mass at state 1)."""
    model = builtin_discrete_flip(0.5)
    sol = solve_mfe(model, particles=512, x0_grid=[0.0, 1.0], seed=7,
                    tol=5e-4, max_br_iters=40)
    assert sol.converged
    mass_one = float(np.sum(sol.mu_hat.weights[sol.mu_hat.block("x1")[:, 0] > 0.5]))
    assert mass_one >= 1.0 - 9.0 / 512
    # At the fixed point every initial state is forced to 1: value 0.
    assert np.max(np.abs(sol.values)) <= 0.01


def test_solver_validates_arguments():
    model = lq_model()
    with pytest.raises(ValueError):
        solve_mfe(model, particles=0, x0_grid=[0.0], seed=1)
    with pytest.raises(ValueError):
        solve_mfe(model, particles=16, x0_grid=[], seed=1)
    with pytest.raises(ValueError):
        solve_mfe(model, particles=16, x0_grid=[0.0], seed=1, damping=0.0)
    with pytest.raises(ValueError):
        solve_mfe(model, p=7, particles=16, x0_grid=[0.0], seed=1)


def test_exhaustion_returns_flagged_best_iterate():
    model = lq_model()
    sol = solve_mfe(model, particles=512, x0_grid=[0.0], seed=3,
                    tol=1e-12, max_br_iters=2)
    assert not sol.converged
    assert len(sol.residual_history) == 2


# ---------------------------------------------------------------------
# Deviation audits
# ---------------------------------------------------------------------

def test_equilibrium_incumbent_audit_is_clean():
    """At the solved equilibrium no offset candidate wins: gains are 0
    exactly and the Picard ratio stays at the coupling strength 0.5."""
    model = lq_model()
    sol = solve_mfe(model, particles=8192, x0_grid=np.arange(-2.0, 2.5, 0.5),
                    seed=404, br_draws=2048)
    rep = max_deviation(model, sol, n=20, delta=0.4, epsilon=0.05,
                        x0_eval_grid=[-2.0, 0.0, 2.0], reps=400, seed=31)
    assert all(a.gain >= 0.0 for a in rep.pins)
    assert rep.dbar_delta <= rep.dbar_inf
    assert rep.dbar_inf <= 0.02
    for a in rep.pins:
        assert a.picard_max_ratio == pytest.approx(0.5, abs=1e-3)


def test_detuned_incumbent_shows_a_real_gain():
    """An all-zero incumbent at x0 = 2 leaves ~0.35 payoff on the table
    (best response is near -0.6); the audit must find it."""
    model = lq_model()
    tuned = Strategy.closed_form(lambda x0, xi: np.zeros_like(x0))
    profile = induce_profile(tuned, 10)
    gain, se = estimate_deviation_gain(
        model, profile, i=0, x0_pin=2.0, n=10, reps=2000,
        deviation_class={"kind": "offsets", "offsets": [0.0, -0.5, 0.5]},
        seed=77)
    assert gain >= 0.25
    assert se <= 0.05


def test_deviation_class_must_contain_incumbent():
    model = lq_model()
    profile = induce_profile(Strategy.closed_form(lambda x0, xi: 0.0 * x0), 4)
    with pytest.raises(ValueError):
        estimate_deviation_gain(model, profile, i=0, x0_pin=0.0, n=4,
                                reps=40, deviation_class={"kind": "offsets",
                                                          "offsets": [0.5]},
                                seed=5)


def test_deviation_audit_requires_symmetric_profile():
    model = lq_model()
    s1 = Strategy.closed_form(lambda x0, xi: 0.0 * x0)
    s2 = Strategy.closed_form(lambda x0, xi: 0.0 * x0)
    with pytest.raises(ValueError):
        estimate_deviation_gain(model, [s1, s2], i=0, x0_pin=0.0, n=2,
                                reps=40, deviation_class={"kind": "all_maps"},
                                seed=5)


def test_flip_deviation_gain_matches_zero_oracle():
    """Oracle gain is exactly 0 for every map; the estimate must sit
    within 3 standard errors of that."""
    model = builtin_discrete_flip(0.5)
    profile = induce_profile(zeros_strategy(), 2)
    gain, se = estimate_deviation_gain(model, profile, i=0, x0_pin=0.0,
                                       n=2, reps=4000,
                                       deviation_class={"kind": "all_maps"},
                                       seed=902)
    assert gain >= 0.0
    assert gain <= 3.0 * se + 1e-12


# ---------------------------------------------------------------------
# Report assembly: truncation and classification
# ---------------------------------------------------------------------

def _audit(x0, gain, gap=0.0):
    return PinAudit(x0=x0, gain=gain, gain_se=0.0, gap=gap, gap_se=0.0,
                    best_label="incumbent", picard_max_ratio=0.0)


def test_truncation_drops_far_pins():
    # Radius n^delta = 10^0.4 ~ 2.51: the pin at 5 is outside.
    audits = [_audit(0.0, 0.0, gap=0.01), _audit(2.0, 0.0, gap=0.02),
              _audit(5.0, 0.2, gap=0.5)]
    rep = report_from_audits(audits, n=10, delta=0.4, epsilon=0.1,
                             reps=100, seed=0, label="offsets")
    assert rep.dbar_inf == 0.2
    assert rep.dbar_delta == 0.0
    assert rep.gbar_delta == 0.02
    assert rep.classification == "NE_eps_delta"


def test_untruncated_report_keeps_every_pin():
    audits = [_audit(0.0, 0.0), _audit(5.0, 0.2, gap=0.5)]
    rep = report_from_audits(audits, n=10, delta=math.inf, epsilon=0.1,
                             reps=100, seed=0, label="offsets")
    assert rep.dbar_delta == rep.dbar_inf == 0.2
    assert rep.classification == "none"


def test_classification_ladder():
    mk = lambda g, eps, delta=0.4: report_from_audits(
        [_audit(0.0, g)], n=10, delta=delta, epsilon=eps,
        reps=10, seed=0, label="offsets").classification
    assert mk(0.0, 0.1) == "NE"
    assert mk(0.05, 0.1) == "NE_eps"
    assert mk(0.5, 0.1) == "none"


def test_report_rows_schema():
    rep = report_from_audits([_audit(0.0, 0.0)], n=4, delta=0.4, epsilon=0.1,
                             reps=10, seed=9, label="offsets")
    (row,) = rep.rows()
    assert row["n"] == 4 and row["seed"] == 9
    assert set(row) == {"n", "delta", "x0", "gain", "gain_se", "gap",
                        "gap_se", "dbar_delta", "gbar_delta",
                        "classification", "seed"}


def test_report_validates_epsilon_and_delta():
    with pytest.raises(ValueError):
        report_from_audits([_audit(0.0, 0.0)], n=2, delta=0.4, epsilon=0.0,
                           reps=10, seed=0, label="x")
    model = lq_model()
    sol = solve_mfe(model, particles=256, x0_grid=[0.0], seed=1,
                    br_draws=256)
    with pytest.raises(ValueError):
        max_deviation(model, sol, n=2, delta=-0.1, epsilon=0.1,
                      x0_eval_grid=[0.0], reps=40, seed=0)
    with pytest.raises(ValueError):
        max_deviation(model, sol, n=2, delta=0.4, epsilon=0.1,
                      x0_eval_grid=[], reps=40, seed=0)
