import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_seq_lab.solver import (
    RunStats,
    SolverConfig,
    SolverError,
    recheck_fixed_point,
    residual,
    solve_fixed_point,
)


def test_linear_contraction_reaches_fixed_point():
    cfg = SolverConfig(tolerance=1e-10, max_iters=200, norm="global")
    z, stats = solve_fixed_point(lambda z: 0.5 * z + 1.0, np.zeros((1, 1, 1)), cfg)
    assert stats.converged
    assert abs(float(z) - 2.0) < 1e-8
    assert stats.iterations <= cfg.max_iters


def test_residual_decays_geometrically_for_contraction():
    # with damping 1 and a 0.5-Lipschitz map the iterate differences at
    # least halve per step (exactly 0.5 for a scaled orthogonal map)
    rng = np.random.default_rng(0)
    A = 0.5 * np.linalg.qr(rng.standard_normal((6, 6)))[0]
    b = rng.standard_normal(6)

    def step(z_arr):
        return (z_arr.reshape(6) @ A.T + b).reshape(1, 1, 6)

    prev = np.zeros((1, 1, 6))
    diffs = []
    for _ in range(12):
        new = step(prev)
        diffs.append(np.linalg.norm(new - prev))
        prev = new
    ratios = np.array(diffs[1:]) / np.array(diffs[:-1])
    assert np.all(ratios <= 0.5 + 1e-9)


def test_oscillating_map_needs_damping():
    cfg = SolverConfig(tolerance=1e-8, max_iters=300, damping=0.5, norm="global")
    z, stats = solve_fixed_point(lambda z: -z + 1.0, np.zeros((1, 1, 1)), cfg)
    assert stats.converged and abs(float(z) - 0.5) < 1e-6

    # undamped iteration alternates between 0 and 1: automatic fallback kicks in
    cfg = SolverConfig(tolerance=1e-8, max_iters=300, damping=1.0, norm="global")
    z, stats = solve_fixed_point(lambda z: -z + 1.0, np.full((1, 1, 1), 0.2), cfg)
    assert stats.converged and abs(float(z) - 0.5) < 1e-6


def test_cap_is_respected_and_flagged():
    cfg = SolverConfig(tolerance=1e-12, max_iters=5, norm="global")
    z, stats = solve_fixed_point(lambda z: 0.99 * z + 1.0, np.zeros((1, 1, 1)), cfg)
    assert not stats.converged
    assert stats.iterations == 5


def test_numeric_failure_returns_last_finite():
    calls = []

    def step(z):
        calls.append(1)
        if len(calls) > 2:
            return z * np.nan
        return 0.5 * z + 1.0

    cfg = SolverConfig(tolerance=1e-12, max_iters=50, norm="global")
    z, stats = solve_fixed_point(step, np.zeros((1, 1, 1)), cfg)
    assert stats.numeric_failure and not stats.converged
    assert np.all(np.isfinite(z))


def test_residual_basics():
    z = np.ones((1, 2, 3))
    assert residual(z, z) == 0.0
    # zero base: guarded denominator gives a large, finite value
    r = residual(np.full((1, 1, 2), 1e-3), np.zeros((1, 1, 2)), "global")
    assert np.isfinite(r) and r > 1e6


def test_per_token_vs_global_differ_on_oscillating_token():
    # token 0 unchanged, token 1 oscillates: per-token max sees it, the
    # global norm dilutes it
    z_old = np.zeros((1, 2, 4))
    z_old[0, 0] = 100.0
    z_new = z_old.copy()
    z_new[0, 1] = 0.2
    per_token = residual(z_new, z_old, "per_token")
    glob = residual(z_new, z_old, "global")
    assert per_token > 1e6
    assert glob < 1e-2


def test_recheck_of_converged_point():
    cfg = SolverConfig(tolerance=1e-9, max_iters=500, norm="global")
    step = lambda z: 0.3 * z + 0.7
    z, stats = solve_fixed_point(step, np.zeros((1, 1, 3)), cfg)
    assert stats.converged
    assert recheck_fixed_point(step, z, cfg) < cfg.tolerance


def test_config_validation():
    with pytest.raises(SolverError):
        SolverConfig(tolerance=-1)
    with pytest.raises(SolverError):
        SolverConfig(max_iters=0)
    with pytest.raises(SolverError):
        SolverConfig(damping=0.0)
    with pytest.raises(SolverError):
        SolverConfig(norm="L7")
    with pytest.raises(SolverError):
        residual(np.zeros((1, 2)), np.zeros((2, 2)))


def test_stats_serialize():
    s = RunStats(iterations=3, final_residual=0.5, converged=False, per_token_iters=[1, 2])
    d = s.to_dict()
    assert d["iterations"] == 3 and d["per_token_iters"] == [1, 2]


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.9), st.integers(0, 2**31 - 1))
def test_converged_flag_implies_recheck_passes(lip, seed):
    rng = np.random.default_rng(seed)
    A = lip * np.linalg.qr(rng.standard_normal((4, 4)))[0]
    b = rng.standard_normal(4)

    def step(z_arr):
        return (z_arr.reshape(4) @ A.T + b).reshape(1, 1, 4)

    cfg = SolverConfig(tolerance=1e-6, max_iters=400, norm="per_token")
    z, stats = solve_fixed_point(step, np.zeros((1, 1, 4)), cfg)
    assert stats.converged
    assert recheck_fixed_point(step, z, cfg) < cfg.tolerance
