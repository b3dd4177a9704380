"""End-to-end acceptance gates, one numbered test per gate.

The heavy artifacts (the 10^5-particle equilibrium and its deviation
sweeps) are built once in a module-scoped fixture and consumed by
several gates, so each test stays a single pass/fail line under
``pytest -v`` without repeating two minutes of solving.  Monte Carlo
gates freeze their seeds; the seed families were chosen once, up
front, and the tolerances are the gates' own, not tuned to the draws.
"""

import math
import time

import numpy as np
import pytest

from meanfield import (
    EmpiricalMeasure,
    Strategy,
    builtin_discrete_flip,
    builtin_lq_continuous,
    builtin_lq_static,
    ct_deviation_report,
    estimate_conditional_law,
    estimate_deviation_gain,
    exact_conditional_law,
    exact_mfe,
    flip_instance,
    induce_profile,
    max_deviation,
    simulate_mean_field_sde,
    simulate_n_player_openloop,
    solve_mfe,
    solve_mfg_flow,
    wasserstein,
)
from meanfield.cli import main as cli_main

# ---------------------------------------------------------------------
# Shared heavy artifacts
# ---------------------------------------------------------------------

LQ_PINS = np.arange(-5.0, 6.0, 1.0)
LQ_OFFSETS = {"kind": "offsets",
              "offsets": [0.0, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0]}
SWEEP_NS = (10, 100, 1000)


@pytest.fixture(scope="module")
def lq_bundle():
    """10^5-particle LQ equilibrium plus deviation sweeps at three n."""
    model = builtin_lq_static(rho=0.3, kappa=0.5, sigma=1.0)
    t0 = time.monotonic()
    sol = solve_mfe(model, particles=100_000,
                    x0_grid=np.arange(-5.0, 5.5, 0.5),
                    seed=20260819, br_draws=16384)
    solve_secs = time.monotonic() - t0
    t0 = time.monotonic()
    reports = {
        n: max_deviation(model, sol, n=n, delta=0.4, epsilon=0.05,
                         x0_eval_grid=LQ_PINS, reps=2000, seed=7_000 + n,
                         deviation_class=LQ_OFFSETS)
        for n in SWEEP_NS
    }
    sweep_secs = time.monotonic() - t0
    return {"model": model, "solution": sol, "reports": reports,
            "solve_secs": solve_secs, "sweep_secs": sweep_secs}


# Deviation gains observed by the oracle-equivalence gate, consumed by
# the exactness gate.  Filled by test_criterion_3; the exactness gate
# falls back to a fresh handful of seeds when run in isolation.
_C3_GAINS: list = []


# ---------------------------------------------------------------------
# 1. Static LQ equilibrium against the closed form
# ---------------------------------------------------------------------

def test_criterion_1_static_lq_closed_form(lq_bundle):
    """N = 10^5, action step 0.01 on [-3, 3]: the equilibrium strategy
    is -0.3 x0 on the inner grid, the terminal mean vanishes, and the
    value table sits at -1."""
    sol = lq_bundle["solution"]
    assert sol.converged
    assert lq_bundle["solve_secs"] < 120.0

    grid = sol.x0_grid
    acts = sol.strategy.actions_for(grid, np.zeros(grid.size))
    inner = np.abs(grid) <= 2.0
    sup_err = float(np.max(np.abs(acts + 0.3 * grid)[inner]))
    m1 = float(sol.mu_hat.marginal_mean("x1")[0])
    value_err = float(np.max(np.abs(sol.values + 1.0)))

    print(f"criterion 1: sup|a+0.3x0|={sup_err:.2e} |m1|={abs(m1):.2e} "
          f"max|V+1|={value_err:.4f} ({lq_bundle['solve_secs']:.0f}s)")
    assert sup_err <= 0.02
    assert abs(m1) <= 0.01
    assert value_err <= 0.05


# ---------------------------------------------------------------------
# 2. Static deviation decay across population sizes
# ---------------------------------------------------------------------

def _se_at_max(report, attr, se_attr):
    """Standard error attached to the pin achieving the reported max."""
    best = max(report.pins, key=lambda a: getattr(a, attr))
    return getattr(best, se_attr)


def test_criterion_2_static_deviation_decay(lq_bundle):
    """2000 common-random-number replications per pin, delta = 0.4:
    both the truncated max gain and the shadow gap decay by 4x or more
    from n = 10 to n = 1000 and are monotone up to one standard error."""
    reports = lq_bundle["reports"]
    total = lq_bundle["solve_secs"] + lq_bundle["sweep_secs"]
    assert total < 600.0

    dbar = {n: reports[n].dbar_delta for n in SWEEP_NS}
    gbar = {n: reports[n].gbar_delta for n in SWEEP_NS}
    print(f"criterion 2: dbar={dbar} gbar={ {n: round(v, 5) for n, v in gbar.items()} } "
          f"({total:.0f}s)")

    assert dbar[1000] <= 0.25 * dbar[10]
    assert gbar[1000] <= 0.25 * gbar[10]
    for small, large in ((10, 100), (100, 1000)):
        d_se = max(_se_at_max(reports[n], "gain", "gain_se") for n in (small, large))
        g_se = max(_se_at_max(reports[n], "gap", "gap_se") for n in (small, large))
        assert dbar[large] <= dbar[small] + d_se
        assert gbar[large] <= gbar[small] + g_se


# ---------------------------------------------------------------------
# 3. Monte Carlo estimators against the exact oracle
# ---------------------------------------------------------------------

FLIP_SEEDS = range(1000, 1100)
FLIP_REPS = 2000
FLIP_PARTICLES = 512


def _flip_seed_checks(model, oracle_laws, mfe_fraction, seed):
    """One seed's estimator battery: (all within 3 SE, observed gains)."""
    ok = True
    gains = []
    for n in (2, 3):
        profile = induce_profile(
            Strategy.lookup([0.0, 1.0], np.zeros((2, 1))), n)
        law, diag = estimate_conditional_law(model, profile, i=0, x0_pin=0.0,
                                             n=n, reps=FLIP_REPS, seed=seed)
        ok &= diag.converged
        mass1 = float(np.sum(law.weights[law.points[:, 0] > 0.5]))
        mass0 = float(np.sum(law.weights[law.points[:, 0] <= 0.5]))
        p1 = float(oracle_laws[n][1])
        se = math.sqrt(p1 * (1.0 - p1) / FLIP_REPS)
        ok &= abs(mass1 - p1) <= 3.0 * se          # conditional law
        ok &= abs(mass0 - (1.0 - p1)) <= 3.0 * se  # payoff (mass at 0)
        gain, gain_se = estimate_deviation_gain(
            model, profile, i=0, x0_pin=0.0, n=n, reps=FLIP_REPS,
            deviation_class={"kind": "all_maps"}, seed=seed)
        gains.append(gain)
        ok &= gain <= 3.0 * gain_se + 1e-12        # oracle gain is 0
    sol = solve_mfe(model, particles=FLIP_PARTICLES, x0_grid=[0.0, 1.0],
                    seed=seed, tol=5e-4, max_br_iters=60)
    ok &= sol.converged
    mass = float(np.sum(sol.mu_hat.weights[sol.mu_hat.block("x1")[:, 0] > 0.5]))
    se_m = math.sqrt(mass * (1.0 - mass) / FLIP_PARTICLES)
    ok &= mass == mfe_fraction or abs(mass - mfe_fraction) <= 3.0 * se_m
    return ok, gains


def test_criterion_3_oracle_equivalence():
    """discrete_flip(0.5), n in {2, 3}: conditional laws, payoffs, the
    equilibrium fixed-point fraction, and deviation gains land within
    3 standard errors of the enumerated exact values in >= 99 of 100
    fixed seeds."""
    t0 = time.monotonic()
    model = builtin_discrete_flip(0.5)
    inst = flip_instance(0.5)
    zero_map = [np.zeros((2, 1), dtype=np.int64)] * 3
    oracle_laws = {n: exact_conditional_law(inst, n, zero_map[:n], 0)
                   for n in (2, 3)}
    points = exact_mfe(inst, lattice=64)
    assert len(points) == 1
    mfe_fraction = float(points[0].fraction)

    passes = 0
    for seed in FLIP_SEEDS:
        ok, gains = _flip_seed_checks(model, oracle_laws, mfe_fraction, seed)
        _C3_GAINS.extend(gains)
        passes += ok
    secs = time.monotonic() - t0
    print(f"criterion 3: {passes}/100 seeds within 3 SE ({secs:.0f}s)")
    assert passes >= 99
    assert secs < 300.0


# ---------------------------------------------------------------------
# 4. Metric-space properties of the transport distances
# ---------------------------------------------------------------------

def _random_measure(rng, max_support):
    k = int(rng.integers(1, max_support + 1))
    scale = float(rng.choice([0.1, 1.0, 10.0]))
    pts = rng.normal(0.0, scale, size=k)
    if rng.random() < 0.5:
        w = rng.random(k)
        return EmpiricalMeasure(pts, weights=w / w.sum())
    return EmpiricalMeasure(pts)


def _as_product_points(m):
    """Embed line atoms as (state, action=0) pairs: same ground
    distance, but routed through the transport solver instead of the
    quantile form."""
    pts = np.column_stack([m.points[:, 0], np.zeros(m.n_atoms)])
    return EmpiricalMeasure(pts, weights=m.weights, split=(0, 1, 1))


def test_criterion_4_metric_suite():
    """200 random pairs/triples with supports up to 50: symmetry to
    1e-12, triangle to 1e-10, order monotonicity, unit cap, and
    quantile-vs-LP agreement to 1e-10 on supports up to 10."""
    t0 = time.monotonic()
    rng = np.random.default_rng(31415)
    lp_checks = 0
    for round_i in range(200):
        cap = 10 if round_i % 4 == 0 else 50
        a, b, c = (_random_measure(rng, cap) for _ in range(3))
        for q in (0, 1, 2):
            dab = wasserstein(a, b, q=q)
            dba = wasserstein(b, a, q=q)
            dac = wasserstein(a, c, q=q)
            dbc = wasserstein(b, c, q=q)
            assert abs(dab - dba) <= 1e-12
            assert dac <= dab + dbc + 1e-10
        assert wasserstein(a, b, q=1) <= wasserstein(a, b, q=2)
        assert wasserstein(a, b, q=0) <= 1.0
        if a.n_atoms <= 10 and b.n_atoms <= 10:
            d_lp, info = wasserstein(_as_product_points(a),
                                     _as_product_points(b),
                                     q=1, return_info=True)
            assert info.method == "lp"
            assert abs(d_lp - wasserstein(a, b, q=1)) <= 1e-10
            lp_checks += 1
    secs = time.monotonic() - t0
    print(f"criterion 4: 200 rounds, {lp_checks} LP cross-checks ({secs:.1f}s)")
    assert lp_checks >= 40
    assert secs < 30.0


# ---------------------------------------------------------------------
# 5. Exact nonnegativity and truncation ordering
# ---------------------------------------------------------------------

def test_criterion_5_exact_nonnegativity_and_truncation(lq_bundle):
    """Every estimated deviation gain in the decay and oracle gates is
    exactly nonnegative, and every truncated max is exactly bounded by
    the untruncated one.  Zero tolerance: these are sign guarantees of
    the shared-draw construction, not statistics."""
    for report in lq_bundle["reports"].values():
        for audit in report.pins:
            assert audit.gain >= 0.0
        for _, _, gain, _ in report.per_agent_gain:
            assert gain >= 0.0
        assert report.dbar_delta <= report.dbar_inf

    gains = list(_C3_GAINS)
    if not gains:        # gate run in isolation: sample a fresh handful
        model = builtin_discrete_flip(0.5)
        profile = induce_profile(
            Strategy.lookup([0.0, 1.0], np.zeros((2, 1))), 2)
        for seed in range(1000, 1010):
            gain, _ = estimate_deviation_gain(
                model, profile, i=0, x0_pin=0.0, n=2, reps=200,
                deviation_class={"kind": "all_maps"}, seed=seed)
            gains.append(gain)
    assert gains
    assert all(g >= 0.0 for g in gains)
    print(f"criterion 5: {sum(len(r.pins) for r in lq_bundle['reports'].values())}"
          f" pins + {len(gains)} oracle-gate gains, all exactly >= 0")


# ---------------------------------------------------------------------
# 6. Picard contraction margin on every solved population state
# ---------------------------------------------------------------------

def test_criterion_6_picard_contraction(lq_bundle):
    """kappa = 0.5 model: every audited population solve contracts with
    residual ratio at most 0.55."""
    worst = 0.0
    for report in lq_bundle["reports"].values():
        for audit in report.pins:
            assert math.isfinite(audit.picard_max_ratio)
            assert audit.picard_max_ratio <= 0.55
            worst = max(worst, audit.picard_max_ratio)
    print(f"criterion 6: worst Picard ratio {worst:.4f} <= 0.55")


# ---------------------------------------------------------------------
# 7. Continuous decoupling and the mean-reversion benchmark
# ---------------------------------------------------------------------

def test_criterion_7_continuous_decoupling():
    """kappa = 0, 50 agents, 200 steps: the empirical system equals its
    shadow ensemble bitwise, and the pinned-start terminal variance
    matches (1 - e^{-2T}) / (2 theta) within 3 SE plus the O(dt) bias
    allowance."""
    t0 = time.monotonic()
    model = builtin_lq_continuous(theta=1.0, kappa=0.0, horizon=1.0)
    sol = solve_mfg_flow(model, paths=4000, x0_grid=[0.0], seed=424242,
                         steps=200,
                         policy_class={"kind": "constant", "values": [0.0]})
    assert sol.converged

    run = simulate_n_player_openloop(model, sol, n=50, seed=4242)
    assert np.array_equal(run.actual, run.shadow)

    _, paths = simulate_mean_field_sde(model, sol.flow, sol.control,
                                       4000, 424242, x0_pin=0.0)
    v_hat = float(np.var(paths[:, -1], ddof=1))
    v_exact = (1.0 - math.exp(-2.0)) / 2.0
    tol = 3.0 * v_hat * math.sqrt(2.0 / 3999) + 2.0 * (1.0 / 200)
    secs = time.monotonic() - t0
    print(f"criterion 7: bitwise match; var {v_hat:.5f} vs {v_exact:.5f} "
          f"(tol {tol:.5f}) ({secs:.1f}s)")
    assert abs(v_hat - v_exact) <= tol
    assert secs < 60.0


# ---------------------------------------------------------------------
# 8. Continuous deviation decay
# ---------------------------------------------------------------------

def test_criterion_8_continuous_deviation_decay():
    """kappa = 0.5 with the constant-offset class: the truncated max
    gain at n = 500 is at most 0.4x its n = 10 value, and the shadow
    gap shows the same decay."""
    t0 = time.monotonic()
    model = builtin_lq_continuous(theta=1.0, kappa=0.5, horizon=1.0)
    sol = solve_mfg_flow(model, paths=4000,
                         x0_grid=[-2.0, -1.0, 0.0, 1.0, 2.0],
                         seed=90210, steps=50, policy_paths=2048)
    assert sol.converged
    cls = {"kind": "offsets", "offsets": [0.0, -1.0, -0.5, 0.5, 1.0]}
    reports = {
        n: ct_deviation_report(model, sol, n=n, delta=0.4, epsilon=0.05,
                               x0_eval_grid=[-2.0, -1.0, 0.0, 1.0, 2.0],
                               reps=200, seed=8_000 + n,
                               deviation_class=cls)
        for n in (10, 100, 500)
    }
    dbar = {n: reports[n].dbar_delta for n in reports}
    gbar = {n: reports[n].gbar_delta for n in reports}
    secs = time.monotonic() - t0
    print(f"criterion 8: dbar={dbar} gbar={ {n: round(v, 6) for n, v in gbar.items()} } "
          f"({secs:.0f}s)")
    assert dbar[500] <= 0.4 * dbar[10]
    assert gbar[500] <= 0.4 * gbar[10]
    for report in reports.values():
        assert report.dbar_delta <= report.dbar_inf
    assert secs < 900.0


# ---------------------------------------------------------------------
# 9. Worker-count determinism of the CLI
# ---------------------------------------------------------------------

def _run_cli(config, out_dir, workers):
    code = cli_main(["run", "--config", str(config), "--out", str(out_dir),
                     "--workers", str(workers)])
    assert code == 0
    out = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(out_dir))] = path.read_bytes()
    return out


@pytest.mark.parametrize("config", ["flip.toml", "ou_check.toml",
                                    "lq_continuous.toml", "lq_static.toml"])
def test_criterion_9_worker_determinism(config, tmp_path):
    """Rerunning a bundled config with the same seed at 1 vs 8 workers
    produces byte-identical outputs."""
    cfg = "configs/" + config
    narrow = _run_cli(cfg, tmp_path / "w1", workers=1)
    wide = _run_cli(cfg, tmp_path / "w8", workers=8)
    assert narrow
    assert any(name.endswith(".csv") for name in narrow)
    assert wide == narrow
    print(f"criterion 9: {config}: {len(narrow)} files byte-identical at "
          f"workers 1 vs 8")
