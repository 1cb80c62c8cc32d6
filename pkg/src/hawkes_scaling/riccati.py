"""Riccati-Volterra solvers and the exponential-affine Fourier-Laplace formulas.

All three equations (prelimit, rescaled, limit) are stepped forward explicitly:
the value at ``t_k`` only uses the companion function at strictly earlier grid
points, except for an atom of the limit measure at zero, which turns each step
into a scalar quadratic solved in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridFunction, n_steps_for
from .kernels import Kernel, ScalingScheme, rescaled_resolvent
from .matlin import NumericalGuardError

TOL_POS = 1e-8


def w_exp(x):
    """Componentwise ``exp(x) - 1 - x``, with a series near zero to avoid cancellation."""
    x = np.asarray(x)
    small = np.abs(x) < 1e-3
    series = x * x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0)))
    return np.where(small, series, np.expm1(x) - x)


@dataclass(frozen=True)
class TestFunctions:
    """``f`` with ``Re f <= 0`` and purely imaginary ``h``, as grids of row vectors."""

    f: GridFunction
    h: GridFunction
    tol: float = 1e-12

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.f.values.shape != self.h.values.shape or abs(self.f.delta - self.h.delta) > 1e-15:
            raise ValueError("f and h must live on the same grid")
        if self.f.values.ndim != 2:
            raise ValueError("f and h must be grids of d-vectors")
        if np.any(self.f.values.real > self.tol):
            raise ValueError("Re f must be <= 0")
        if np.any(np.abs(self.h.values.real) > self.tol):
            raise ValueError("h must be purely imaginary")

    @property
    def delta(self) -> float:
        return self.f.delta

    @property
    def d(self) -> int:
        return self.f.values.shape[1]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.f.values) and not np.any(self.h.values)

    @classmethod
    def constant(cls, f, h, delta: float, horizon: float, d: int = 1) -> "TestFunctions":
        n = n_steps_for(delta, horizon)
        fv = np.broadcast_to(np.asarray(f, dtype=complex), (d,))
        hv = np.broadcast_to(np.asarray(h, dtype=complex), (d,))
        return cls(GridFunction(delta, np.tile(fv, (n + 1, 1))),
                   GridFunction(delta, np.tile(hv, (n + 1, 1))))

    @classmethod
    def from_callables(cls, f, h, delta: float, horizon: float) -> "TestFunctions":
        n = n_steps_for(delta, horizon)
        t = delta * np.arange(n + 1)
        fv = np.asarray(f(t), dtype=complex).reshape(n + 1, -1)
        hv = np.asarray(h(t), dtype=complex).reshape(n + 1, -1)
        return cls(GridFunction(delta, fv), GridFunction(delta, hv))


@dataclass(frozen=True)
class RiccatiSolution:
    V: GridFunction
    W: GridFunction
    kind: str
    info: dict = field(default_factory=dict)

    @property
    def delta(self) -> float:
        return self.V.delta

    def to_rows(self):
        rows = []
        for t, v, w in zip(self.V.times, self.V.values, self.W.values):
            row = [t]
            for vi, wi in zip(v, w):
                row += [vi.real, vi.imag, wi.real, wi.imag]
            rows.append(row)
        return rows


def _check_grid(tf: TestFunctions, delta: float, horizon: float) -> int:
    if abs(tf.delta - delta) > 1e-12 * delta:
        raise ValueError("test functions and kernel grid use different steps")
    n = n_steps_for(delta, horizon)
    if tf.f.n_steps < n:
        raise ValueError("test functions do not cover the horizon")
    return n


def _step_explicit(masses: np.ndarray, tf: TestFunctions, n: int, nonlinearity):
    """``V_k = sum_{m<k} W_{k-1-m} @ masses[m]``, ``W_k = f_k + nonlinearity(V_k + h_k)``."""
    d = tf.d
    f, h = tf.f.values, tf.h.values
    V = np.zeros((n + 1, d), dtype=complex)
    W = np.zeros((n + 1, d), dtype=complex)
    W[0] = f[0] + nonlinearity(h[0])
    for k in range(1, n + 1):
        V[k] = np.einsum("mi,mij->j", W[k - 1::-1], masses[:k])
        W[k] = f[k] + nonlinearity(V[k] + h[k])
    return V, W


def _check_sign(V: np.ndarray, what: str):
    worst = float(np.max(V.real)) if V.size else 0.0
    if worst > TOL_POS:
        raise NumericalGuardError(f"Re {what} reached {worst:.3g} > 0; grid too coarse or inputs invalid")
    return worst


def solve_prelimit(R: GridFunction, tf: TestFunctions, horizon: float) -> RiccatiSolution:
    """``V = W * R`` with ``W = f + w_exp(V + h)`` on the grid of ``R``."""
    n = _check_grid(tf, R.delta, horizon)
    if R.n_steps < n:
        raise ValueError("resolvent grid shorter than the horizon")
    masses = R.delta * R.values[1:n + 1]
    V, W = _step_explicit(masses, tf, n, w_exp)
    worst = _check_sign(V, "V")
    return RiccatiSolution(GridFunction(R.delta, V), GridFunction(R.delta, W), "prelimit",
                           {"max_re": worst})


def rescaled_nonlinearity(scheme: ScalingScheme):
    g = scheme.gamma
    return lambda x: (g * g) * w_exp(x / g)


def solve_rescaled(phi_n: Kernel, scheme: ScalingScheme, tf: TestFunctions, horizon: float,
                   R_n: GridFunction | None = None, method: str = "laplace", **kw) -> RiccatiSolution:
    """Rescaled equation ``V = W * R^(n)``, ``W = f + n theta_n w_exp((V + h) / sqrt(n theta_n))``.

    ``R_n`` (the rescaled resolvent) is computed with ``rescaled_resolvent`` unless given.
    """
    delta = tf.delta
    n = _check_grid(tf, delta, horizon)
    if R_n is None:
        R_n = rescaled_resolvent(phi_n, scheme, delta, horizon, method=method, **kw)
    masses = R_n.delta * R_n.values[1:n + 1]
    V, W = _step_explicit(masses, tf, n, rescaled_nonlinearity(scheme))
    worst = _check_sign(V, "V")
    return RiccatiSolution(GridFunction(delta, V), GridFunction(delta, W),
                           f"rescaled(n={scheme.n}, theta_n={scheme.theta_n:g})",
                           {"max_re": worst, "R": R_n})


def _atom_root(a: float, h: complex, C: complex):
    """Roots of ``(a/2) v^2 - (1 - a h) v + C = 0``: the branch continuous as a -> 0, and the other."""
    p = 1.0 - a * h
    disc = np.sqrt(complex(p * p - 2.0 * a * C))
    denom = p + disc
    chosen = 2.0 * C / denom if denom != 0 else p / a
    other = (p + disc) / a
    return chosen, other


def solve_limit(Pi, tf: TestFunctions, horizon: float) -> RiccatiSolution:
    """``V = W * Pi`` with ``W = f + (V + h)^2 / 2`` for a grid potential measure ``Pi``."""
    n = _check_grid(tf, Pi.delta, horizon)
    if Pi.n_cells < n:
        raise ValueError("potential measure grid shorter than the horizon")
    atom = np.diag(Pi.atom0)
    if np.max(np.abs(Pi.atom0 - np.diag(atom))) > 0:
        raise ValueError("atom at zero must be diagonal")
    masses = Pi.cell_masses[:n]
    f, h = tf.f.values, tf.h.values
    d = tf.d
    V = np.zeros((n + 1, d), dtype=complex)
    W = np.zeros((n + 1, d), dtype=complex)
    ambiguous = 0
    for k in range(n + 1):
        hist = np.einsum("mi,mij->j", W[k - 1::-1], masses[:k]) if k else np.zeros(d, complex)
        for i in range(d):
            a = atom[i]
            if a > 0:
                C = a * f[k, i] + 0.5 * a * h[k, i] ** 2 + hist[i]
                v, other = _atom_root(a, h[k, i], C)
                if other.real <= TOL_POS:
                    ambiguous += 1
            else:
                v = hist[i]
            V[k, i] = v
        W[k] = f[k] + 0.5 * (V[k] + h[k]) ** 2
    worst = _check_sign(V, "V")
    return RiccatiSolution(GridFunction(Pi.delta, V), GridFunction(Pi.delta, W), "limit",
                           {"max_re": worst, "ambiguous_roots": ambiguous})


def fourier_laplace_hawkes(sol: RiccatiSolution, H: GridFunction, T: float) -> complex:
    """``exp{delta sum_{j=1}^K W(T - t_j) . H(t_j)}``."""
    K = H.index_of(T)
    if abs(H.delta - sol.delta) > 1e-12 * H.delta or sol.W.n_steps < K:
        raise ValueError("grid mismatch between the Riccati solution and H")
    W = sol.W.values
    hv = H.values.reshape(H.n_steps + 1, -1)
    return complex(np.exp(H.delta * np.einsum("ji,ji->", W[K - 1::-1], hv[1:K + 1]))) if K else 1.0 + 0j


def fourier_laplace_limit(sol: RiccatiSolution, Upsilon: GridFunction, T: float) -> complex:
    """``exp{W(T) Upsilon(0) + sum_j W(T - t_{j+1}) . (Upsilon(t_{j+1}) - Upsilon(t_j))}``."""
    K = Upsilon.index_of(T)
    up = Upsilon.values.reshape(Upsilon.n_steps + 1, -1)
    if np.any(np.diff(up[:K + 1], axis=0) < -1e-14) or np.any(up[0] < 0):
        raise ValueError("Upsilon must be nonnegative and nondecreasing")
    if abs(Upsilon.delta - sol.delta) > 1e-12 * sol.delta or sol.W.n_steps < K:
        raise ValueError("grid mismatch between the Riccati solution and Upsilon")
    W = sol.W.values
    log_val = W[K] @ up[0]
    if K:
        log_val = log_val + np.einsum("ji,ji->", W[K - 1::-1], np.diff(up[:K + 1], axis=0))
    return complex(np.exp(log_val))


def riccati_convergence_report(phi_n_seq, schemes, Pi, Upsilon: GridFunction, tf: TestFunctions, T: float,
                               H_seq=None, R_seq=None, mu_n=None, method: str = "laplace"):
    """Gaps between rescaled and limit solutions for each member of a kernel sequence.

    ``H_seq`` gives the rescaled baselines ``H^(n)``; alternatively pass ``mu_n``
    (constant prelimit baseline) and they are assembled from the rescaled resolvents.
    """
    from .hawkes import rescaled_baseline  # local import: hawkes depends on this module

    limit = solve_limit(Pi, tf, T)
    target = fourier_laplace_limit(limit, Upsilon, T)
    rows = []
    for idx, (phi_n, scheme) in enumerate(zip(phi_n_seq, schemes)):
        R_n = R_seq[idx] if R_seq is not None else None
        sol = solve_rescaled(phi_n, scheme, tf, T, R_n=R_n, method=method)
        if H_seq is not None:
            H = H_seq[idx]
        elif mu_n is not None:
            H = rescaled_baseline(sol.info["R"], mu_n, scheme)
        else:
            raise ValueError("give H_seq or mu_n")
        value = fourier_laplace_hawkes(sol, H, T)
        K = sol.V.index_of(T)
        rows.append({
            "n": scheme.n,
            "theta_n": scheme.theta_n,
            "sup_gap_V": float(np.max(np.abs(sol.V.values[:K + 1] - limit.V.values[:K + 1]))),
            "gap": abs(value - target),
            "rescaled_value": value,
            "limit_value": target,
        })
    gaps = [r["gap"] for r in rows]
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    return rows, decreasing
