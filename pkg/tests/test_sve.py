import numpy as np
import pytest
from scipy import stats

from hawkes_scaling.bernstein import PotentialMeasure, ebf_affine, potential_measure_closed_form
from hawkes_scaling.grid import GridFunction
from hawkes_scaling.riccati import TestFunctions, solve_limit
from hawkes_scaling.sve import (LimitBaseline, baseline_from_gamma, limit_characteristic_check, mean_volterra,
                                power_potential_cells, simulate_atom_form, simulate_density_form,
                                simulate_pi0_form, simulate_rough_cir)


def affine_pi(b, sigma, delta, T):
    return potential_measure_closed_form(ebf_affine(b, sigma), delta, T)


def linear_base(delta, T, rate=1.0):
    return LimitBaseline.from_function(lambda t: rate * t, delta, T)


def within(ens, k, target, n_se=3.0):
    m, se = ens.mean_Xi(k)
    return np.all(np.abs(m - target) <= n_se * se)


def rk4(fn, y0, T, steps=2000):
    h, y, t = T / steps, float(y0), 0.0
    for _ in range(steps):
        k1 = fn(t, y)
        k2 = fn(t + h / 2, y + h * k1 / 2)
        k3 = fn(t + h / 2, y + h * k2 / 2)
        k4 = fn(t + h, y + h * k3)
        y += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        t += h
    return y


def test_zero_input_is_absorbing():
    delta, T = 0.01, 1.0
    base = LimitBaseline(GridFunction(delta, np.zeros((101, 1))))
    ens = simulate_density_form(affine_pi(1.0, 1.0, delta, T), base, T, delta, 20, seed=1)
    assert not np.any(ens.Xi) and not np.any(ens.M) and not np.any(ens.xi)


def test_density_form_mean_identity():
    delta, T = 0.01, 1.0
    ens = simulate_density_form(affine_pi(1.0, 1.0, delta, T), linear_base(delta, T), T, delta, 10_000, seed=3)
    for k in (25, 50, 100):
        assert within(ens, k, k * delta)
    assert np.all(np.diff(ens.Xi, axis=1) >= 0)


def test_quadratic_variation_audit():
    delta, T = 0.01, 1.0
    ens = simulate_density_form(affine_pi(1.0, 1.0, delta, T), linear_base(delta, T), T, delta, 10_000, seed=5)
    var, se = ens.var_M(100)
    assert abs(var[0] - ens.mean_Xi(100)[0][0]) <= 5 * se[0]
    assert abs(ens.M[:, 100].mean()) <= 3 * ens.M[:, 100].std() / 100


def test_classical_cir_mean_against_ode():
    a, b, c = 1.0, 0.5, 1.0
    delta, T = 0.01, 2.0
    ups = lambda t: a * (t / b - c * (1 - np.exp(-b * t / c)) / b ** 2)
    ens = simulate_density_form(affine_pi(b, c, delta, T), LimitBaseline.from_function(ups, delta, T),
                                T, delta, 10_000, seed=7)
    m_mid = rk4(lambda t, m: (a - b * m) / c, 0.0, T - delta / 2)
    last = ens.xi[:, -1, 0]
    assert abs(last.mean() - m_mid) <= 3 * last.std(ddof=1) / np.sqrt(last.size) + delta ** 2


def test_rough_cir_zero_drift():
    ens = simulate_rough_cir(0.75, 0.0, 0.0, 0.5, 1.0, 1.0, 0.01, 10, seed=2)
    assert not np.any(ens.Xi) and not np.any(ens.xi)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.2])
def test_rough_cir_rejects_alpha(alpha):
    with pytest.raises(ValueError):
        simulate_rough_cir(alpha, 0.0, 1.0, 0.5, 1.0, 1.0, 0.01, 10)


def test_rough_cir_mean_against_volterra():
    delta, T = 0.005, 1.0
    K = 200
    ens = simulate_rough_cir(0.75, 0.0, 1.0, 0.5, 1.0, T, delta, 10_000, seed=4)
    pi0 = power_potential_cells(1.0, 0.75, 0.0, delta, K)
    gamma = GridFunction(delta, (delta * np.arange(K + 1))[:, None])
    mean = np.concatenate([[0.0], np.cumsum(mean_volterra(pi0, 0.5, gamma, T)[:, 0])])
    for k in (100, 200):
        assert within(ens, k, mean[k])


def test_rough_cir_approaches_classical():
    delta, T = 0.01, 1.0
    classical = simulate_rough_cir(1.0, 0.0, 1.0, 0.5, 1.0, T, delta, 4000, seed=6, allow_classical=True)
    target = classical.Xi[:, -1, 0].mean()
    gaps = {}
    for alpha in (0.75, 0.99):
        ens = simulate_rough_cir(alpha, 0.0, 1.0, 0.5, 1.0, T, delta, 4000, seed=6)
        gaps[alpha] = abs(ens.Xi[:, -1, 0].mean() - target)
    assert gaps[0.99] < gaps[0.75]


def test_atom_form_without_atom_matches_density_form():
    delta, T = 0.01, 1.0
    pi = affine_pi(1.0, 1.0, delta, T)
    base = linear_base(delta, T)
    a = simulate_density_form(pi, base, T, delta, 50, seed=9)
    b = simulate_atom_form(pi, base, T, delta, 50, seed=9)
    assert np.array_equal(a.Xi, b.Xi) and np.array_equal(a.M, b.M)


def test_atom_form_mean_identity():
    delta, T = 0.01, 1.0
    pi = PotentialMeasure(delta, np.array([[0.2]]), affine_pi(0.0, 1.0, delta, T).cell_masses)
    ens = simulate_atom_form(pi, linear_base(delta, T), T, delta, 10_000, seed=10)
    for k in (50, 100):
        assert within(ens, k, k * delta)
    assert np.all(np.diff(ens.Xi, axis=1) >= 0)
    assert "clip_rate" in ens.audit
    assert abs(ens.M[:, 100].mean()) <= 3 * ens.M[:, 100].std() / 100


def test_atom_form_is_scalar_only():
    pi = PotentialMeasure(0.1, 0.1 * np.eye(2), np.zeros((10, 2, 2)))
    base = LimitBaseline(GridFunction(0.1, np.zeros((11, 2))))
    with pytest.raises(ValueError):
        simulate_atom_form(pi, base, 1.0, 0.1, 5)


def test_density_form_rejects_atom():
    pi = PotentialMeasure(0.1, 0.1 * np.eye(1), np.zeros((10, 1, 1)))
    with pytest.raises(ValueError):
        simulate_density_form(pi, linear_base(0.1, 1.0), 1.0, 0.1, 5)


def test_pi0_form_without_drift_matches_density_form():
    delta, T = 0.01, 1.0
    pi0 = affine_pi(0.0, 1.0, delta, T)
    gamma = GridFunction(delta, (0.7 * delta * np.arange(101))[:, None])
    a = simulate_pi0_form(pi0, 0.0, gamma, T, delta, 40, seed=12)
    b = simulate_density_form(pi0, baseline_from_gamma(pi0, gamma), T, delta, 40, seed=12)
    assert np.array_equal(a.Xi, b.Xi) and np.array_equal(a.M, b.M)


def test_pi0_form_mean_against_volterra():
    delta, T = 0.01, 1.0
    pi0 = affine_pi(0.0, 1.0, delta, T)
    gamma = GridFunction(delta, (delta * np.arange(101))[:, None])
    ens = simulate_pi0_form(pi0, 0.3, gamma, T, delta, 10_000, seed=13)
    mean = np.concatenate([[0.0], np.cumsum(mean_volterra(pi0, 0.3, gamma, T)[:, 0])])
    for k in (50, 100):
        assert within(ens, k, mean[k])
    # the noise-free scheme reproduces Upsilon = Pi * Gamma for Pi(dt) = exp(-0.3 t) dt
    exact = (1.0 - (1 - np.exp(-0.3)) / 0.3) / 0.3
    assert mean[100] == pytest.approx(exact, abs=1e-4)


def test_pi0_and_pi_forms_agree_in_law():
    delta, T = 0.01, 1.0
    pi = affine_pi(0.3, 1.0, delta, T)
    ups = LimitBaseline.from_function(lambda t: (t - (1 - np.exp(-0.3 * t)) / 0.3) / 0.3, delta, T)
    a = simulate_density_form(pi, ups, T, delta, 3000, seed=100)
    gamma = GridFunction(delta, (delta * np.arange(101))[:, None])
    b = simulate_pi0_form(affine_pi(0.0, 1.0, delta, T), 0.3, gamma, T, delta, 3000, seed=200)
    assert stats.ks_2samp(a.Xi[:, -1, 0], b.Xi[:, -1, 0]).pvalue > 0.01


def test_pi0_form_block_condition_needs_structure():
    pi0 = PotentialMeasure(0.1, np.zeros((2, 2)), np.full((10, 2, 2), 0.05))
    gamma = GridFunction(0.1, np.zeros((11, 2)))
    with pytest.raises(ValueError):
        simulate_pi0_form(pi0, np.array([[0.1, 0.2], [0.0, 0.1]]), gamma, 1.0, 0.1, 5)


def test_seed_determinism():
    delta, T = 0.01, 1.0
    pi = affine_pi(1.0, 1.0, delta, T)
    a = simulate_density_form(pi, linear_base(delta, T), T, delta, 30, seed=42)
    b = simulate_density_form(pi, linear_base(delta, T), T, delta, 30, seed=42)
    c = simulate_density_form(pi, linear_base(delta, T), T, delta, 10, seed=42)
    assert np.array_equal(a.Xi, b.Xi)
    # a path depends on its own index only, not on the ensemble size
    assert np.array_equal(a.Xi[:10], c.Xi)


def test_characteristic_check_trivial_cases():
    delta, T = 0.01, 1.0
    pi = affine_pi(1.0, 1.0, delta, T)
    base = linear_base(delta, T)
    ens = simulate_density_form(pi, base, T, delta, 100, seed=1)
    tf0 = TestFunctions.constant(0, 0, delta, T)
    rep = limit_characteristic_check(ens, tf0, solve_limit(pi, tf0, T), base.Upsilon, T)
    assert rep.gap == 0 and rep.z == 0
    zero = PotentialMeasure(delta, np.zeros((1, 1)), np.zeros((100, 1, 1)))
    ens = simulate_density_form(zero, base, T, delta, 10, seed=1)
    assert np.allclose(ens.Xi[:, :, 0], base.Upsilon.values[:, 0])
    tf = TestFunctions.constant(-0.7, 0.0, delta, T)
    rep = limit_characteristic_check(ens, tf, solve_limit(zero, tf, T), base.Upsilon, T)
    assert rep.gap <= 1e-12
    assert rep.target == pytest.approx(np.exp(-0.7 * T), abs=1e-12)
    # with h != 0 the noise M = B(Upsilon) still enters, so agreement is statistical
    tf = TestFunctions.constant(-0.7, 0.3j, delta, T)
    ens = simulate_density_form(zero, base, T, delta, 4000, seed=1)
    rep = limit_characteristic_check(ens, tf, solve_limit(zero, tf, T), base.Upsilon, T)
    assert rep.target == pytest.approx(np.exp((-0.7 - 0.045) * T), abs=1e-12)
    assert rep.gap <= 3 * rep.std_err


def test_characteristic_check_classical_cir():
    a, b, c = 1.0, 0.5, 1.0
    delta, T = 0.01, 1.0
    pi = affine_pi(b, c, delta, T)
    base = LimitBaseline.from_function(lambda t: a * (t / b - c * (1 - np.exp(-b * t / c)) / b ** 2), delta, T)
    tf = TestFunctions.constant(-0.5, 0.5j, delta, T)
    ens = simulate_density_form(pi, base, T, delta, 10_000, seed=2)
    rep = limit_characteristic_check(ens, tf, solve_limit(pi, tf, T), base.Upsilon, T)
    assert rep.gap <= 3 * rep.std_err + 5 * delta


def test_baseline_validation():
    with pytest.raises(ValueError):
        LimitBaseline(GridFunction(0.1, np.array([[0.0], [1.0], [0.5]])))
