"""Tests for the fixed-selection lower-level solvers."""

import numpy as np
import pytest

from cardcvar import lower, numeric
from cardcvar.model import (
    Instance,
    SelectionVector,
    build_feasible_set,
    objective,
)


def two_asset_instance():
    """Single scenario r = (0.1, 0.2), beta = 0.5, gamma = 1."""
    return Instance(n_assets=2, scenarios=[[0.1, 0.2]], probs=[1.0],
                    side_A=np.zeros((0, 2)), side_b=[], beta=0.5, gamma=1.0,
                    k=2)


def random_instance(rng, n, s, beta=0.9, with_return_row=False):
    scen = rng.normal(0.01, 0.05, size=(s, n))
    inst = Instance(n_assets=n, scenarios=scen, probs=np.full(s, 1.0 / s),
                    side_A=np.zeros((0, n)), side_b=[], beta=beta,
                    gamma=10.0 / np.sqrt(n), k=n)
    if with_return_row:
        A, b = build_feasible_set(inst, float(inst.expected_returns.min()))
        inst = Instance(n_assets=n, scenarios=scen, probs=inst.probs,
                        side_A=A, side_b=b, beta=beta, gamma=inst.gamma, k=n)
    return inst


def random_selection(rng, n):
    count = int(rng.integers(1, n + 1))
    support = rng.choice(n, size=count, replace=False)
    bits = np.zeros(n, dtype=int)
    bits[support] = 1
    return SelectionVector(bits)


def test_scenario_cut_splits_on_threshold():
    inst = two_asset_instance()
    z = SelectionVector([1, 1])
    J, v_prime = lower.scenario_cut([0.0, 1.0], -0.2, z, inst)
    assert J.size == 0
    assert v_prime == 0.0
    J, v_prime = lower.scenario_cut([0.0, 1.0], -0.25, z, inst)
    assert J.tolist() == [0]
    assert v_prime == pytest.approx(0.1)


def test_scenario_cut_masks_unselected_assets():
    inst = two_asset_instance()
    J, v_prime = lower.scenario_cut([0.0, 1.0], -0.15, SelectionVector([1, 0]),
                                    inst)
    assert J.tolist() == [0]
    assert v_prime == pytest.approx(0.3)


def test_two_asset_example_converges_in_one_iteration():
    inst = two_asset_instance()
    res = lower.solve_lower_cp(SelectionVector([1, 1]), inst, delta=1e-6)
    assert res.iters == 1
    assert res.f_lo == pytest.approx(0.0975, abs=1e-7)
    assert res.f_hi == pytest.approx(0.0975, abs=1e-7)
    assert res.portfolio.weights == pytest.approx([0.45, 0.55], abs=1e-6)
    assert res.portfolio.var_level == pytest.approx(-0.155, abs=1e-6)
    assert res.portfolio.cvar_excess == pytest.approx(0.0, abs=1e-9)
    assert np.array_equal(res.subsets[0], np.arange(1))


def test_two_asset_example_certificate_values():
    inst = two_asset_instance()
    res = lower.solve_lower_cp(SelectionVector([1, 1]), inst, delta=1e-6)
    cert = res.certificate
    assert cert.alpha[0] == pytest.approx(0.5, abs=1e-6)
    assert cert.lam == pytest.approx(0.35, abs=1e-6)
    assert cert.omega == pytest.approx([0.45, 0.55], abs=1e-6)
    value = lower.certificate_objective(cert, SelectionVector([1, 1]), inst)
    assert value == pytest.approx(0.0975, abs=1e-7)


def test_two_asset_example_zero_delta():
    inst = two_asset_instance()
    res = lower.solve_lower_cp(SelectionVector([1, 1]), inst, delta=0.0)
    assert res.f_hi - res.f_lo <= 1e-9
    assert res.f_lo == pytest.approx(0.0975, abs=1e-7)


def test_single_selected_asset_values():
    inst = two_asset_instance()
    res = lower.solve_lower_cp(SelectionVector([0, 1]), inst, delta=1e-8)
    assert res.f_lo == pytest.approx(0.3, abs=1e-7)
    assert res.portfolio.weights == pytest.approx([0.0, 1.0], abs=1e-8)
    res = lower.solve_lower_cp(SelectionVector([1, 0]), inst, delta=1e-8)
    assert res.f_lo == pytest.approx(0.4, abs=1e-7)


def test_one_asset_two_scenarios():
    inst = Instance(n_assets=1, scenarios=[[0.1], [-0.2]], probs=[0.5, 0.5],
                    side_A=np.zeros((0, 1)), side_b=[], beta=0.5, gamma=1.0,
                    k=1)
    res = lower.solve_lower_cp(SelectionVector([1]), inst, delta=1e-8)
    assert res.f_lo <= 0.7 + 1e-9
    assert res.f_hi >= 0.7 - 1e-9
    assert res.f_hi - res.f_lo <= 1e-8 + 1e-9
    exact = lower.solve_lower_lifted(SelectionVector([1]), inst)
    assert exact[0] == pytest.approx(0.7, abs=1e-7)
    assert exact[1].weights == pytest.approx([1.0], abs=1e-8)


def test_empty_selection_is_infeasible():
    inst = two_asset_instance()
    assert lower.solve_lower_cp(SelectionVector([0, 0]), inst, 1e-5) is None
    assert lower.solve_lower_lifted(SelectionVector([0, 0]), inst) is None


def test_unreachable_return_row_is_infeasible():
    inst = two_asset_instance()
    A, b = build_feasible_set(inst, 0.5)
    tight = Instance(n_assets=2, scenarios=inst.scenarios, probs=inst.probs,
                     side_A=A, side_b=b, beta=0.5, gamma=1.0, k=2)
    assert lower.solve_lower_cp(SelectionVector([1, 1]), tight, 1e-5) is None
    assert lower.solve_lower_lifted(SelectionVector([1, 1]), tight) is None


def test_return_row_restricts_only_low_return_selections():
    inst = two_asset_instance()
    A, b = build_feasible_set(inst, 0.15)
    mid = Instance(n_assets=2, scenarios=inst.scenarios, probs=inst.probs,
                   side_A=A, side_b=b, beta=0.5, gamma=1.0, k=2)
    assert lower.solve_lower_cp(SelectionVector([1, 0]), mid, 1e-5) is None
    res = lower.solve_lower_cp(SelectionVector([1, 1]), mid, 1e-8)
    assert res is not None
    assert inst.expected_returns @ res.portfolio.weights >= 0.15 - 1e-8


def test_solver_failure_is_not_reported_as_infeasible():
    inst = two_asset_instance()
    orig = numeric.solve

    def failing(prog, skip_phase1=False):
        return numeric.Solution(status=numeric.ITER_LIMIT, x=None, obj=np.nan,
                                ineq_duals=None, eq_duals=None)

    numeric.solve = failing
    try:
        with pytest.raises(lower.SolverError):
            lower.solve_lower_cp(SelectionVector([1, 1]), inst, 1e-5)
    finally:
        numeric.solve = orig


def test_sandwich_bounds_against_exact_solve():
    rng = np.random.default_rng(7)
    for trial in range(25):
        n = int(rng.integers(2, 9))
        s = int(rng.integers(5, 61))
        inst = random_instance(rng, n, s, beta=(0.9 if trial % 2 else 0.5),
                               with_return_row=bool(trial % 3 == 0))
        z = random_selection(rng, n)
        delta = 1e-3 if trial % 2 else 1e-5
        res = lower.solve_lower_cp(z, inst, delta)
        exact = lower.solve_lower_lifted(z, inst)
        assert (res is None) == (exact is None)
        if res is None:
            continue
        f = exact[0]
        assert res.f_lo <= f + 1e-9
        assert f <= res.f_hi + 1e-9
        assert res.f_hi <= res.f_lo + delta + 1e-9
        assert res.f_hi == pytest.approx(objective(res.portfolio, inst),
                                         abs=1e-12)
        res.portfolio.validate()


def test_certificate_invariants_on_random_instances():
    rng = np.random.default_rng(11)
    for trial in range(25):
        n = int(rng.integers(2, 9))
        s = int(rng.integers(5, 61))
        inst = random_instance(rng, n, s, with_return_row=bool(trial % 2))
        z = random_selection(rng, n)
        res = lower.solve_lower_cp(z, inst, 1e-5)
        if res is None:
            continue
        cert = res.certificate
        assert len(cert.alpha) == len(res.subsets)
        assert np.all(cert.alpha >= 0.0)
        assert cert.alpha.sum() <= 1.0 + 1e-9
        weighted = sum(a * inst.probs[J].sum()
                       for a, J in zip(cert.alpha, res.subsets))
        assert weighted == pytest.approx(1.0 - inst.beta, abs=1e-8)
        assert np.all(cert.zeta >= 0.0)
        assert np.all(cert.omega >= 0.0)
        value = lower.certificate_objective(cert, z, inst)
        assert value == pytest.approx(res.f_lo, abs=1e-6 * (1 + abs(res.f_lo)))


def test_certificate_omega_matches_scaled_weights_on_support():
    rng = np.random.default_rng(13)
    for trial in range(10):
        n = int(rng.integers(2, 7))
        inst = random_instance(rng, n, int(rng.integers(5, 40)))
        z = random_selection(rng, n)
        res = lower.solve_lower_cp(z, inst, 1e-6)
        x = res.portfolio.weights
        held = (x > 1e-6) & (z.bits == 1)
        assert res.certificate.omega[held] == pytest.approx(
            x[held] / inst.gamma, abs=1e-5)


def test_subgradient_cut_is_globally_valid():
    rng = np.random.default_rng(17)
    for trial in range(20):
        n = int(rng.integers(2, 8))
        inst = random_instance(rng, n, int(rng.integers(5, 50)))
        z_hat = random_selection(rng, n)
        z = random_selection(rng, n)
        res = lower.solve_lower_cp(z_hat, inst, 1e-4)
        exact = lower.solve_lower_lifted(z, inst)
        g = lower.subgradient(res.certificate, inst.gamma)
        assert np.all(g <= 1e-12)
        lhs = exact[0]
        rhs = res.f_lo + g @ (z.bits - z_hat.bits)
        assert lhs >= rhs - 1e-7


def test_lifted_duals_satisfy_dual_feasibility():
    rng = np.random.default_rng(19)
    for trial in range(15):
        n = int(rng.integers(2, 8))
        s = int(rng.integers(5, 80))
        inst = random_instance(rng, n, s, with_return_row=bool(trial % 2))
        z = random_selection(rng, n)
        f, portfolio, duals = lower.solve_lower_lifted(z, inst)
        cap = inst.probs / (1.0 - inst.beta)
        assert np.all(duals["alpha"] >= -1e-9)
        assert np.all(duals["alpha"] <= cap + 1e-8)
        assert duals["alpha"].sum() == pytest.approx(1.0, abs=1e-7)
        assert np.all(duals["zeta"] >= 0.0)
        dual_obj = (-(inst.gamma / 2.0)
                    * float(z.bits @ (duals["omega"] ** 2))
                    - float(inst.side_b @ duals["zeta"]) + duals["lambda"])
        assert dual_obj == pytest.approx(f, abs=1e-7 * (1 + abs(f)))


def test_binding_side_row_reflected_in_certificate():
    rng = np.random.default_rng(23)
    inst = random_instance(rng, 5, 30)
    mu = inst.expected_returns
    mu_bar = float(0.95 * mu.max() + 0.05 * mu.mean())
    A, b = build_feasible_set(inst, mu_bar)
    tight = Instance(n_assets=5, scenarios=inst.scenarios, probs=inst.probs,
                     side_A=A, side_b=b, beta=inst.beta, gamma=inst.gamma,
                     k=5)
    z = SelectionVector(np.ones(5, dtype=int))
    res = lower.solve_lower_cp(z, tight, 1e-7)
    assert mu @ res.portfolio.weights >= mu_bar - 1e-7
    assert res.certificate.zeta[0] > 1e-8
    value = lower.certificate_objective(res.certificate, z, tight)
    assert value == pytest.approx(res.f_lo, abs=1e-6 * (1 + abs(res.f_lo)))


def test_iteration_budget_and_subset_bookkeeping():
    rng = np.random.default_rng(29)
    for trial in range(10):
        n = int(rng.integers(2, 10))
        s = int(rng.integers(10, 200))
        inst = random_instance(rng, n, s)
        z = random_selection(rng, n)
        res = lower.solve_lower_cp(z, inst, 1e-5)
        assert 1 <= res.iters <= 60
        assert np.array_equal(res.subsets[0], np.arange(inst.n_scenarios))
        seen = {J.tobytes() for J in res.subsets}
        assert len(seen) == len(res.subsets)


def test_rejects_negative_delta():
    inst = two_asset_instance()
    with pytest.raises(ValueError):
        lower.solve_lower_cp(SelectionVector([1, 1]), inst, -1e-6)
