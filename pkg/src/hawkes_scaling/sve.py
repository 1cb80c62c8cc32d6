"""Simulation of the limit stochastic Volterra equations.

Every scheme is written in increment form: on cell ``(t_k, t_{k+1}]`` the
candidate increment of the integrated process is

    x_k = dUpsilon_k + sum_{j<k} m_{k-1-j} @ dM_j            (Pi form)
    x_k = sum_{j<=k} h_{k-j} @ (dGamma_j - b x_j^+)
          + sum_{j<k} m0_{k-1-j} @ dM_j                      (Pi_0 form)

with ``m`` the cell masses of the potential measure and ``h_l = (m_l + m_{l-1}) / 2``
(``m_{-1} = 0``): a cell product is split evenly between the two cells it
straddles, which keeps the drift second-order accurate.  The same-cell drift
term is solved implicitly.  ``dXi_k = max(x_k, 0)``
(full truncation) and ``dM_k = sqrt(dXi_k) Z_k``.  With an atom ``a`` at zero
the increment solves ``x = c + a dM`` jointly with the noise; it is sampled
exactly as the first passage of ``u - a B(u)`` to the level ``c``, an inverse
Gaussian law, so that ``dM`` keeps zero mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .bernstein import PotentialMeasure, _as_square, pi0_block_condition
from .grid import GridFunction, n_steps_for
from .hawkes import path_rng
from .matlin import AdmissibleStructure
from .riccati import RiccatiSolution, TestFunctions, fourier_laplace_limit


@dataclass(frozen=True)
class LimitBaseline:
    Upsilon: GridFunction
    Upsilon_prime: GridFunction | None = None
    Gamma: GridFunction | None = None

    def __post_init__(self):
        up = self.Upsilon.values.reshape(self.Upsilon.n_steps + 1, -1)
        if np.any(up[0] < 0) or np.any(np.diff(up, axis=0) < -1e-14):
            raise ValueError("Upsilon must start nonnegative and be nondecreasing")
        object.__setattr__(self, "Upsilon", GridFunction(self.Upsilon.delta, up))

    @property
    def d(self) -> int:
        return self.Upsilon.values.shape[1]

    @classmethod
    def from_function(cls, upsilon, delta: float, horizon: float, upsilon_prime=None) -> "LimitBaseline":
        n = n_steps_for(delta, horizon)
        t = delta * np.arange(n + 1)
        up = np.asarray(upsilon(t), dtype=float).reshape(n + 1, -1)
        der = None
        if upsilon_prime is not None:
            der = GridFunction(delta, np.asarray(upsilon_prime(t), dtype=float).reshape(n + 1, -1))
        return cls(GridFunction(delta, up), der)


@dataclass
class SvePath:
    delta: float
    Xi: np.ndarray
    M: np.ndarray
    xi: np.ndarray | None = None
    seed: tuple = ()


@dataclass
class SveEnsemble:
    """Trajectories of all paths: ``Xi`` and ``M`` have shape ``(paths, K + 1, d)``.

    ``xi`` holds the (untruncated) density on each cell, shape ``(paths, K, d)``.
    """

    delta: float
    Xi: np.ndarray
    M: np.ndarray
    xi: np.ndarray | None
    seed: int
    scheme: str
    audit: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.Xi.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(self.Xi.shape[1])

    def path(self, i: int) -> SvePath:
        xi = None if self.xi is None else self.xi[i]
        return SvePath(self.delta, self.Xi[i], self.M[i], xi, (self.seed, i))

    def mean_Xi(self, k: int):
        x = self.Xi[:, k]
        return x.mean(axis=0), x.std(axis=0, ddof=1) / np.sqrt(self.n_paths)

    def var_M(self, k: int):
        """Sample variance of ``M(t_k)`` and its standard error."""
        m = self.M[:, k]
        centered = m - m.mean(axis=0)
        var = (centered ** 2).sum(axis=0) / (self.n_paths - 1)
        se = np.sqrt(np.maximum((centered ** 4).mean(axis=0) - var ** 2, 0.0) / self.n_paths)
        return var, se

    def summary_rows(self):
        rows = []
        for k, t in enumerate(self.times):
            mx, se = self.mean_Xi(k)
            mm = self.M[:, k].mean(axis=0)
            vm, _ = self.var_M(k) if self.n_paths > 1 else (np.zeros_like(mx), None)
            rows.append([t, *mx, *se, *mm, *vm])
        return rows


def _noise(seed: int, n_paths: int, n_steps: int, d: int, uniforms: bool = False):
    z = np.empty((n_paths, n_steps, d))
    u = np.empty((n_paths, n_steps, d)) if uniforms else None
    for i in range(n_paths):
        rng = path_rng(seed, i)
        z[i] = rng.standard_normal((n_steps, d))
        if uniforms:
            u[i] = rng.random((n_steps, d))
    return z, u


def _inverse_gaussian(mean, shape, z, u):
    """Michael-Schucany-Haas transform of a normal and a uniform draw."""
    y = z * z
    x1 = mean + mean * mean * y / (2 * shape) - mean / (2 * shape) * np.sqrt(
        4 * mean * shape * y + (mean * y) ** 2)
    return np.where(u <= mean / (mean + x1), x1, mean * mean / x1)


def _run(masses, drift_inc, xi0, delta, n_paths, seed, scheme, b=None, atom=None):
    """Shared stepping engine (see module docstring)."""
    K, d = drift_inc.shape
    z, u = _noise(seed, n_paths, K, d, uniforms=atom is not None)
    noise_acc = np.zeros((n_paths, K, d))
    drift_acc = np.zeros((n_paths, K, d)) if b is not None else None
    x_all = np.empty((n_paths, K, d))
    dxi = np.empty((n_paths, K, d))
    dm = np.empty((n_paths, K, d))
    if b is not None:
        half = 0.5 * (masses + np.concatenate([np.zeros_like(masses[:1]), masses[:-1]]))
        implicit = np.linalg.inv(np.eye(d) + 0.5 * masses[0] @ b)
    clipped = 0
    for k in range(K):
        x = drift_inc[k] + noise_acc[:, k]
        if drift_acc is not None:
            x = x + drift_acc[:, k]
            # same-cell half of the mean-reversion term, solved implicitly
            x = np.where(x > 0, x @ implicit.T, x)
        if atom is not None and atom > 0:
            pos = x > 0
            safe = np.where(pos, x, 1.0)
            ig = _inverse_gaussian(safe, safe * safe / (atom * atom), z[:, k], u[:, k])
            inc = np.where(pos, ig, 0.0)
            m_inc = np.where(pos, (inc - x) / atom, 0.0)
            clipped += int(np.sum(~pos))
        else:
            inc = np.maximum(x, 0.0)
            m_inc = np.sqrt(inc) * z[:, k]
            clipped += int(np.sum(x < 0))
        x_all[:, k], dxi[:, k], dm[:, k] = x, inc, m_inc
        rest = K - k - 1
        if rest:
            noise_acc[:, k + 1:] += np.einsum("lij,pj->pli", masses[:rest], m_inc)
            if drift_acc is not None:
                drift_acc[:, k + 1:] -= np.einsum("lij,pj->pli", half[1:rest + 1], inc @ b.T)
    Xi = np.concatenate([np.broadcast_to(xi0, (n_paths, 1, d)), xi0 + np.cumsum(dxi, axis=1)], axis=1)
    M = np.concatenate([np.zeros((n_paths, 1, d)), np.cumsum(dm, axis=1)], axis=1)
    audit = {"truncation_rate": clipped / float(n_paths * K * d)}
    audit["flagged"] = audit["truncation_rate"] > 0.2
    return SveEnsemble(delta, Xi, M, x_all / delta, seed, scheme, audit)


def _masses_for(Pi: PotentialMeasure, delta: float, K: int) -> np.ndarray:
    if abs(Pi.delta - delta) > 1e-12 * delta or Pi.n_cells < K:
        raise ValueError("potential measure grid does not cover the simulation grid")
    return Pi.cell_masses[:K]


def _drift_from_base(base: LimitBaseline, delta: float, K: int):
    up = base.Upsilon
    if abs(up.delta - delta) > 1e-12 * delta or up.n_steps < K:
        raise ValueError("baseline grid does not cover the simulation grid")
    vals = up.values[:K + 1]
    return np.diff(vals, axis=0), vals[0]


def simulate_density_form(pi: PotentialMeasure, base: LimitBaseline, T: float, delta: float,
                          n_paths: int, seed: int = 0) -> SveEnsemble:
    """Atomless ``Pi``: ``xi = Upsilon' + pi * dM`` by explicit Volterra Euler with full truncation.

    The deterministic input on each cell is the cell average of ``Upsilon'``
    (the increment of ``Upsilon``), so ``E[Xi] = Upsilon`` holds on the grid up
    to truncation.
    """
    if np.any(pi.atom0 != 0):
        raise ValueError("density form needs an atomless potential measure; use simulate_atom_form")
    K = n_steps_for(delta, T)
    inc, xi0 = _drift_from_base(base, delta, K)
    return _run(_masses_for(pi, delta, K), inc, xi0, delta, n_paths, seed, "density")


def simulate_atom_form(Pi: PotentialMeasure, base: LimitBaseline, T: float, delta: float,
                       n_paths: int, seed: int = 0) -> SveEnsemble:
    """Scalar ``Xi = Upsilon + Pi * M`` with an atom ``a`` of ``Pi`` at zero."""
    if Pi.d != 1:
        raise ValueError("the atom form is implemented for d = 1 only")
    K = n_steps_for(delta, T)
    inc, xi0 = _drift_from_base(base, delta, K)
    a = float(Pi.atom0[0, 0])
    ens = _run(_masses_for(Pi, delta, K), inc, xi0, delta, n_paths, seed, "atom", atom=a if a > 0 else None)
    ens.audit["clip_rate"] = ens.audit["truncation_rate"]
    return ens


def baseline_from_gamma(Pi: PotentialMeasure, Gamma: GridFunction) -> LimitBaseline:
    """``Upsilon = Pi * Gamma`` on the grid, with the same lag convention as the simulators.

    A nonzero ``Gamma(0)`` acts as a jump at time zero.
    """
    K = Gamma.n_steps
    g = Gamma.values.reshape(K + 1, -1)
    dg = np.diff(g, axis=0)
    m = _masses_for(Pi, Gamma.delta, K)
    half = 0.5 * (m + np.concatenate([np.zeros_like(m[:1]), m[:-1]]))
    inc = dg @ Pi.atom0.T + m @ g[0]
    for k in range(K):
        inc[k] += np.einsum("jab,jb->a", half[k::-1], dg[:k + 1])
    up = np.vstack([Pi.atom0 @ g[0], Pi.atom0 @ g[0] + np.cumsum(inc, axis=0)])
    return LimitBaseline(GridFunction(Gamma.delta, up), Gamma=Gamma)


def simulate_pi0_form(Pi0: PotentialMeasure, bPhi, Gamma: GridFunction, T: float, delta: float,
                      n_paths: int, seed: int = 0, structure: AdmissibleStructure | None = None,
                      tol: float = 1e-8) -> SveEnsemble:
    """``xi = pi0 * (Gamma' - b xi) + pi0 * dM``: drift separated through ``Pi_0``."""
    if np.any(Pi0.atom0 != 0):
        raise ValueError("the Pi_0 density form needs an atomless Pi_0")
    d = Pi0.d
    b = _as_square(bPhi, d, "bPhi")
    if structure is not None:
        viol = pi0_block_condition(structure, b)
        if viol > tol:
            raise ValueError(f"block condition for the Pi_0 form violated by {viol:.3g}")
    elif d > 1 and np.any(b != np.diag(np.diag(b))):
        raise ValueError("pass the admissible structure to verify the block condition")
    K = n_steps_for(delta, T)
    if abs(Gamma.delta - delta) > 1e-12 * delta or Gamma.n_steps < K:
        raise ValueError("Gamma grid does not cover the simulation grid")
    gamma = GridFunction(delta, Gamma.values.reshape(Gamma.n_steps + 1, -1)[:K + 1])
    base = baseline_from_gamma(PotentialMeasure(delta, Pi0.atom0, Pi0.cell_masses[:K]), gamma)
    inc, xi0 = _drift_from_base(base, delta, K)
    return _run(_masses_for(Pi0, delta, K), inc, xi0, delta, n_paths, seed, "pi0", b=b)


def power_potential_cells(c, alpha: float, beta: float, delta: float, K: int) -> PotentialMeasure:
    """Cells of ``t^(alpha-1) e^(-beta t) / (Gamma(alpha) c)`` (diagonal ``c``)."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    edges = delta * np.arange(K + 1)
    cells = np.zeros((K, c.size, c.size))
    for i, ci in enumerate(c):
        if beta == 0:
            cells[:, i, i] = np.diff(edges ** alpha) / (ci * special.gamma(alpha + 1))
        else:
            cells[:, i, i] = np.diff(special.gammainc(alpha, beta * edges)) / (ci * beta ** alpha)
    return PotentialMeasure(delta, np.zeros((c.size, c.size)), cells)


def simulate_rough_cir(alpha: float, beta: float, a, b, c, T: float, delta: float, n_paths: int,
                       seed: int = 0, allow_classical: bool = False) -> SveEnsemble:
    """``xi = pi0 * (a - b xi) + pi0 * dM`` with ``pi0(t) = t^(alpha-1) e^(-beta t) / (Gamma(alpha) c)``."""
    if not (0.5 < alpha < 1 or (allow_classical and alpha == 1)):
        raise ValueError("rough CIR needs 1/2 < alpha < 1")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = c.size
    a = np.broadcast_to(np.asarray(a, dtype=float), (d,))
    K = n_steps_for(delta, T)
    pi0 = power_potential_cells(c, alpha, beta, delta, K)
    gamma = GridFunction(delta, np.outer(delta * np.arange(K + 1), a))
    return simulate_pi0_form(pi0, _as_square(b, d, "b"), gamma, T, delta, n_paths, seed)


def mean_volterra(Pi0: PotentialMeasure, bPhi, Gamma: GridFunction, T: float) -> np.ndarray:
    """Noise-free run of the ``Pi_0`` scheme: increments of ``x = Pi_0 * Gamma - Pi_0 * (b x)`` per cell."""
    delta = Gamma.delta
    K = n_steps_for(delta, T)
    b = _as_square(bPhi, Pi0.d, "bPhi")
    m = _masses_for(Pi0, delta, K)
    dg = np.diff(Gamma.values.reshape(Gamma.n_steps + 1, -1)[:K + 1], axis=0)
    half = 0.5 * (m + np.concatenate([np.zeros_like(m[:1]), m[:-1]]))
    implicit = np.linalg.inv(np.eye(b.shape[0]) + 0.5 * m[0] @ b)
    x = np.zeros_like(dg)
    for k in range(K):
        c = np.einsum("jab,jb->a", half[k::-1], dg[:k + 1])
        if k:
            c -= np.einsum("jab,jb->a", half[k:0:-1], np.maximum(x[:k], 0) @ b.T)
        x[k] = implicit @ c if np.all(c > 0) else c
    return x


@dataclass(frozen=True)
class CharacteristicReport:
    mc_mean: complex
    std_err: float
    target: complex
    gap: float

    @property
    def z(self) -> float:
        return self.gap / self.std_err if self.std_err > 0 else (0.0 if self.gap == 0 else np.inf)


def limit_characteristic_check(ens: SveEnsemble, tf: TestFunctions, sol: RiccatiSolution,
                               Upsilon: GridFunction, T: float) -> CharacteristicReport:
    """MC mean of ``exp{f * dXi(T) + h * dM(T)}`` against the Riccati formula."""
    K = n_steps_for(ens.delta, T)
    f, h = tf.f.values, tf.h.values
    dxi = np.diff(ens.Xi[:, :K + 1], axis=1)
    dm = np.diff(ens.M[:, :K + 1], axis=1)
    lag_f, lag_h = f[K - 1::-1], h[K - 1::-1]
    expo = (np.einsum("ki,pki->p", lag_f, dxi) + np.einsum("ki,pki->p", lag_h, dm)
            + ens.Xi[:, 0] @ f[K])
    vals = np.exp(expo)
    mean = vals.mean()
    se = float(np.sqrt(np.mean(np.abs(vals - mean) ** 2) / max(ens.n_paths - 1, 1)))
    target = fourier_laplace_limit(sol, Upsilon, T)
    return CharacteristicReport(complex(mean), se, target, float(abs(mean - target)))
