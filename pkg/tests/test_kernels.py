import numpy as np
import pytest
from scipy import integrate

from hawkes_scaling.bernstein import build_prelimit_kernels, ebf_affine, potential_measure_closed_form
from hawkes_scaling.kernels import (Boxes, Exponential, GammaDensity, Kernel, Mixture, PowerLaw, ScalingScheme,
                                    Zero, discrete_residual, entry_from_spec, is_m_matrix_regime,
                                    kernel_samples, l1_norm, laplace_identity_check, laplace_kernel, psi_n,
                                    rescaled_resolvent, resolvent_grid, varphi_n_limit)

EXP = Kernel(Exponential(0.5, 1.0))
ZERO = Kernel(Zero())


def test_l1_norm_examples():
    assert l1_norm(EXP)[0, 0] == pytest.approx(0.5, abs=1e-14)
    assert np.all(l1_norm(Kernel([[Zero(), Zero()], [Zero(), Zero()]])) == 0)
    assert l1_norm(Kernel(PowerLaw(1.0, 2.0, 0.0)))[0, 0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("entry", [
    Exponential(0.3, 2.0), PowerLaw(0.7, 1.5, 0.4), GammaDensity(0.6, 0.5, 1.5), GammaDensity(0.4, 2.0, 1.0),
    Boxes((0.0, 0.5, 2.0), (0.4, 0.1)), Mixture((Exponential(0.2, 1.0), GammaDensity(0.3, 0.7, 2.0))),
])
def test_entry_integrals_match_quadrature(entry):
    dens = lambda t: float(entry.value(np.array(t)))
    l1, _ = integrate.quad(dens, 0, np.inf, limit=400)
    assert entry.l1() == pytest.approx(l1, rel=1e-8)
    lap, _ = integrate.quad(lambda t: dens(t) * np.exp(-0.7 * t), 0, np.inf, limit=400)
    assert entry.laplace(0.7) == pytest.approx(lap, rel=1e-8)
    edges = np.array([0.0, 0.1, 0.35, 1.0])
    cells = [integrate.quad(dens, a, b, limit=200)[0] for a, b in zip(edges[:-1], edges[1:])]
    assert np.allclose(entry.cell_masses(edges), cells, rtol=1e-8, atol=1e-12)
    assert entry.cumulative(np.array(1.0)) == pytest.approx(sum(cells), rel=1e-8)


def test_entry_spec_roundtrip():
    for e in [Exponential(0.3, 2.0), PowerLaw(0.7, 1.5, 0.4), GammaDensity(0.6, 0.5, 1.5),
              Boxes((0.0, 1.0), (0.2,)), Mixture((Exponential(0.2, 1.0), Zero()))]:
        again = entry_from_spec(e.to_spec())
        assert again.to_spec() == e.to_spec()
    with pytest.raises(ValueError):
        entry_from_spec({"family": "nope"})
    with pytest.raises(ValueError):
        entry_from_spec({"family": "exponential", "a": 1.0})


def test_laplace_kernel_examples():
    assert laplace_kernel(EXP, 1.0)[0, 0] == pytest.approx(0.25, abs=1e-14)
    phi = Kernel([[Exponential(0.2, 1.0), PowerLaw(0.3, 2.0, 0.0)], [GammaDensity(0.1, 0.5, 1.0), Zero()]])
    assert np.array_equal(laplace_kernel(phi, 0.0), l1_norm(phi))
    vals = [laplace_kernel(phi, lam) for lam in (0.0, 0.5, 2.0, 10.0, 100.0)]
    assert all(np.all(b <= a + 1e-15) for a, b in zip(vals, vals[1:]))
    assert laplace_kernel(EXP, 1e8)[0, 0] < 1e-8


def test_resolvent_exponential_closed_form():
    R = resolvent_grid(EXP, 1e-3, 5.0)
    assert R(1.0)[0, 0] == pytest.approx(0.5 * np.exp(-0.5), abs=5e-4)
    t = R.times
    assert np.max(np.abs(R.values[:, 0, 0] - 0.5 * np.exp(-0.5 * t))) <= 5e-4


def test_resolvent_first_order_convergence():
    errs = []
    for delta in (2e-3, 1e-3, 5e-4):
        R = resolvent_grid(EXP, delta, 5.0)
        errs.append(np.max(np.abs(R.values[:, 0, 0] - 0.5 * np.exp(-0.5 * R.times))))
    for a, b in zip(errs, errs[1:]):
        assert 1.7 <= a / b <= 2.3


def test_resolvent_integral_of_subcritical_kernel():
    delta, T = 1e-3, 5.0
    R = resolvent_grid(EXP, delta, T)
    exact = 0.5 / 0.5 * (1 - np.exp(-0.5 * T))
    assert R.integral().values[-1, 0, 0] == pytest.approx(exact, abs=10 * delta)


def test_resolvent_zero_kernel():
    assert not np.any(resolvent_grid(ZERO, 0.01, 1.0).values)


def test_discrete_resolvent_equation_is_exact():
    phi = Kernel([[Exponential(0.2, 1.0), PowerLaw(0.3, 2.0, 0.0)], [GammaDensity(0.1, 2.0, 1.0), Zero()]])
    R = resolvent_grid(phi, 0.01, 3.0)
    samples = kernel_samples(phi, 0.01, R.n_steps)
    assert discrete_residual(samples, R.values, 0.01) <= 1e-14


def test_laplace_identity_examples():
    R = resolvent_grid(EXP, 1e-3, 40.0)
    assert laplace_identity_check(EXP, R, 1.0) <= 1e-3
    assert laplace_identity_check(ZERO, resolvent_grid(ZERO, 1e-3, 1.0), 1.0) == 0.0
    near = Kernel(Exponential(0.99, 1.0))
    assert laplace_identity_check(near, resolvent_grid(near, 1e-3, 40.0), 2.0) <= 1e-2


def test_singular_kernel_uses_cell_averages():
    phi = Kernel(GammaDensity(0.5, 0.5, 1.0))
    assert phi.singular
    s = kernel_samples(phi, 0.01, 10)
    assert np.all(np.isfinite(s))
    assert s[1, 0, 0] * 0.01 == pytest.approx(phi.entries[0][0].cell_masses(np.array([0.0, 0.01]))[0])


def test_psi_examples():
    s = ScalingScheme(100, 100.0)
    phi = Kernel(Exponential(1.0, 1.0))
    assert psi_n(phi, s, 0.0)[0, 0] == pytest.approx(0.0, abs=1e-12)
    a = 1 - 1 / s.gamma
    assert psi_n(Kernel(Exponential(a, 1.0)), s, 1.0)[0, 0] == pytest.approx(1.9802, abs=1e-4)
    phi2 = Kernel([[Exponential(0.6, 1.0), Exponential(0.3, 2.0)], [Exponential(0.2, 1.0), Exponential(0.5, 3.0)]])
    vals = [psi_n(phi2, s, lam) for lam in (0.0, 1.0, 2.0)]
    assert all(np.all(b >= a - 1e-12) for a, b in zip(vals, vals[1:]))
    assert is_m_matrix_regime(phi2, s, 1.0)


def test_varphi_limits():
    ns = [100, 1000, 10000]
    built = [build_prelimit_kernels(ebf_affine(0.0, 1.0), 1.0, n) for n in ns]
    vals = varphi_n_limit([k for k, _ in built], np.eye(1), [s for _, s in built], 1.0)
    errs = [abs(v[0, 0] - 1.0) for v in vals]
    assert errs[0] > errs[1] > errs[2]
    zero_lam = varphi_n_limit([k for k, _ in built], np.eye(1), [s for _, s in built], 0.0)
    assert all(abs(v[0, 0]) <= 1e-9 for v in zero_lam)
    built = [build_prelimit_kernels(ebf_affine(0.5, 1.0), 1.0, n) for n in ns]
    for lam, target in ((0.0, 0.5), (1.0, 1.5)):
        v = varphi_n_limit([k for k, _ in built], np.eye(1), [s for _, s in built], lam)[-1]
        assert v[0, 0] == pytest.approx(target, abs=1e-3)


def test_rescaled_resolvent_converges_to_potential_measure():
    delta, T = 0.01, 2.0
    target = potential_measure_closed_form(ebf_affine(0.5, 1.0), delta, T).cumulative().values[:, 0, 0]
    gaps = []
    for n in (100, 1000, 10000):
        phi, s = build_prelimit_kernels(ebf_affine(0.5, 1.0), 1.0, n)
        IR = rescaled_resolvent(phi, s, delta, T, method="laplace").integral().values[:, 0, 0]
        assert np.all(np.diff(IR) >= -1e-12)
        gaps.append(np.max(np.abs(IR - target)))
    assert gaps[0] > gaps[1] > gaps[2]


def test_rescaled_resolvent_grid_and_laplace_agree():
    phi, s = build_prelimit_kernels(ebf_affine(0.5, 1.0), 1.0, 100)
    g = rescaled_resolvent(phi, s, 0.01, 1.0, method="grid", inner_delta=0.01).integral().values
    l = rescaled_resolvent(phi, s, 0.01, 1.0, method="laplace").integral().values
    assert np.max(np.abs(g - l)) <= 1e-2


def test_rescaled_resolvent_zero_kernel():
    R = rescaled_resolvent(ZERO, ScalingScheme(10, 10.0), 0.01, 1.0)
    assert not np.any(R.values)


def test_scheme_validation():
    with pytest.raises(ValueError):
        ScalingScheme(0, 1.0)
    with pytest.raises(ValueError):
        ScalingScheme(10, 0.0)
