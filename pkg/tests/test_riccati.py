import numpy as np
import pytest

from hawkes_scaling.bernstein import PotentialMeasure, build_prelimit_kernels, ebf_affine, potential_measure_closed_form
from hawkes_scaling.grid import GridFunction, lagged_sum
from hawkes_scaling.hawkes import ExogenousInput, baseline_H
from hawkes_scaling.kernels import Exponential, Kernel, PowerLaw, ScalingScheme, kernel_samples, resolvent_grid
from hawkes_scaling.matlin import NumericalGuardError
from hawkes_scaling.riccati import (TestFunctions, fourier_laplace_hawkes, fourier_laplace_limit,
                                    riccati_convergence_report, solve_limit, solve_prelimit, solve_rescaled,
                                    w_exp)

EXP = Kernel(Exponential(0.5, 1.0))


def lebesgue(delta, horizon):
    return potential_measure_closed_form(ebf_affine(0.0, 1.0), delta, horizon)


def test_w_exp_examples():
    assert w_exp(np.array([0.0]))[0] == 0
    assert w_exp(np.array([-1.0]))[0] == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert w_exp(np.array([1j * np.pi]))[0] == pytest.approx(-2 - 1j * np.pi, abs=1e-14)
    x = np.array([1e-5 + 2e-5j, 3e-4])
    assert np.allclose(w_exp(x), np.expm1(x) - x, rtol=1e-9, atol=0)


def test_w_exp_rescaled_limit():
    x, g2 = 1 + 1j, 1e3 * 1e3
    approx = g2 * w_exp(np.array([x / np.sqrt(g2)]))[0]
    assert abs(approx - x * x / 2) / abs(x * x / 2) <= 2 * abs(x) / np.sqrt(g2)


def test_prelimit_zero_test_functions():
    R = resolvent_grid(EXP, 0.01, 2.0)
    sol = solve_prelimit(R, TestFunctions.constant(0, 0, 0.01, 2.0), 2.0)
    assert not np.any(sol.V.values)
    H = baseline_H(EXP, ExogenousInput.constant(1.0), 0.01, 2.0, R)
    assert fourier_laplace_hawkes(sol, H, 2.0) == 1


def discrete_bounds(phi, tf, n):
    """``g * phi`` with the same discrete kernel the resolvent stepping uses."""
    delta = tf.delta
    masses = delta * kernel_samples(phi, delta, n)[1:]
    conv = lambda g: np.array([lagged_sum(g, masses, k) for k in range(n + 1)])
    f, h = tf.f.values[:n + 1], tf.h.values[:n + 1]
    return conv(f.real), conv(np.ones_like(f.real)), conv(np.abs((f - h).imag))


@pytest.mark.parametrize("phi", [EXP, Kernel(PowerLaw(0.8, 1.5, 0.5)),
                                 Kernel([[Exponential(0.3, 1.0), Exponential(0.2, 2.0)],
                                         [Exponential(0.1, 1.0), Exponential(0.4, 1.5)]])])
def test_prelimit_sandwich(phi):
    delta, T = 0.01, 3.0
    n = 300
    tf = TestFunctions.constant(-1.0, 0.5j, delta, T, d=phi.d)
    sol = solve_prelimit(resolvent_grid(phi, delta, T), tf, T)
    V = sol.V.values
    f_phi, one_phi, im_phi = discrete_bounds(phi, tf, n)
    assert np.all(V.real <= f_phi + 1e-12)
    assert np.all(V.real >= f_phi - 2 * one_phi - 1e-12)
    assert np.all(np.abs(V.imag) <= im_phi + one_phi + 1e-12)
    H = baseline_H(phi, ExogenousInput.constant(np.ones(phi.d)), delta, T)
    assert abs(fourier_laplace_hawkes(sol, H, T)) <= 1.0


def test_prelimit_sign_guard():
    R = resolvent_grid(EXP, 0.01, 1.0)
    bad = TestFunctions(GridFunction(0.01, np.full((101, 1), 0.5 + 0j)),
                        GridFunction(0.01, np.zeros((101, 1), complex)), tol=1.0)
    with pytest.raises(NumericalGuardError):
        solve_prelimit(R, bad, 1.0)


def test_test_function_validation():
    with pytest.raises(ValueError):
        TestFunctions.constant(0.1, 0.0, 0.01, 1.0)
    with pytest.raises(ValueError):
        TestFunctions.constant(-0.1, 0.5, 0.01, 1.0)


def test_rescaled_zero_and_bounded():
    tf0 = TestFunctions.constant(0, 0, 0.01, 2.0)
    tf = TestFunctions.constant(-0.5, 0.5j, 0.01, 2.0)
    sups = []
    for n in (100, 1000, 10000):
        phi, s = build_prelimit_kernels(ebf_affine(0.5, 1.0), 1.0, n)
        assert not np.any(solve_rescaled(phi, s, tf0, 2.0).V.values)
        sups.append(np.max(np.abs(solve_rescaled(phi, s, tf, 2.0).V.values)))
    assert max(sups) <= 2 * min(sups)


def test_limit_tanh_oracle():
    delta = 1e-3
    tf = TestFunctions.constant(-0.5, 0.0, delta, 2.0)
    sol = solve_limit(lebesgue(delta, 2.0), tf, 2.0)
    assert sol.V(1.0)[0].real == pytest.approx(-np.tanh(0.5), abs=1e-3)
    ups = GridFunction(delta, sol.V.times[:, None])
    log_val = np.log(fourier_laplace_limit(sol, ups, 2.0)).real
    assert log_val == pytest.approx(-np.tanh(1.0), abs=1e-3)


def test_limit_atom_oracle():
    pi = PotentialMeasure(0.01, np.eye(1), np.zeros((100, 1, 1)))
    sol = solve_limit(pi, TestFunctions.constant(-0.5, 0.0, 0.01, 1.0), 1.0)
    assert np.max(np.abs(sol.V.values - (1 - np.sqrt(2)))) <= 1e-12


def test_limit_zero_and_modulus():
    pi = lebesgue(0.01, 1.0)
    sol = solve_limit(pi, TestFunctions.constant(0, 0, 0.01, 1.0), 1.0)
    assert not np.any(sol.V.values)
    ups = GridFunction(0.01, 0.01 * np.arange(101)[:, None])
    assert fourier_laplace_limit(sol, ups, 1.0) == 1
    sol = solve_limit(pi, TestFunctions.constant(-0.3, 1.2j, 0.01, 1.0), 1.0)
    assert np.all(sol.V.values.real <= 1e-12)
    assert abs(fourier_laplace_limit(sol, ups, 1.0)) <= 1.0


def test_limit_small_atom_continuity():
    delta, T = 0.01, 1.0
    base = lebesgue(delta, T)
    tf = TestFunctions.constant(-0.5, 0.5j, delta, T)
    v0 = solve_limit(base, tf, T).V.values
    gaps = []
    for eps in (1e-2, 1e-3):
        pi = PotentialMeasure(delta, eps * np.eye(1), base.cell_masses)
        gaps.append(np.max(np.abs(solve_limit(pi, tf, T).V.values - v0)))
    assert gaps[1] < gaps[0] / 5
    assert gaps[0] <= 0.1


def scaling_inputs(delta=0.01, T=2.0, a=1.0):
    pi = potential_measure_closed_form(ebf_affine(0.5, 1.0), delta, T)
    ups = GridFunction(delta, a * pi.cumulative().values[:, :, 0]).integral()
    built = [build_prelimit_kernels(ebf_affine(0.5, 1.0), 1.0, n) for n in (100, 1000, 10000)]
    return pi, ups, [k for k, _ in built], [s for _, s in built]


def test_convergence_report():
    pi, ups, phis, schemes = scaling_inputs()
    rows, decreasing = riccati_convergence_report(phis, schemes, pi, ups,
                                                  TestFunctions.constant(-0.5, 0.5j, 0.01, 2.0), 2.0, mu_n=1.0)
    assert decreasing and rows[-1]["gap"] <= 5e-2
    rows, _ = riccati_convergence_report(phis, schemes, pi, ups,
                                         TestFunctions.constant(0, 0, 0.01, 2.0), 2.0, mu_n=1.0)
    assert all(r["gap"] == 0 for r in rows)
    with pytest.raises(ValueError):
        riccati_convergence_report(phis, schemes, pi, ups, TestFunctions.constant(0, 0, 0.01, 2.0), 2.0)
