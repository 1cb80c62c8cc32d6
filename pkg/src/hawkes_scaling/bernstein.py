"""Extended Bernstein matrices, potential measures and prelimit kernel sequences.

A potential measure is stored as an atom at zero plus masses of the cells
``(t_k, t_{k+1}]`` of a uniform grid.  Convolutions of such measures use the
rule that the product of cells ``i`` and ``j`` lands half in cell ``i + j`` and
half in cell ``i + j + 1`` (the exact split for uniform densities); this keeps
the grid algebra associative, so resolvent identities hold to rounding error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import integrate, special

from .grid import GridFunction, gaver_stehfest, n_steps_for
from .kernels import Boxes, Exponential, Kernel, KernelEntry, Mixture, PowerLaw, ScalingScheme, Zero
from .matlin import AdmissibleStructure, NumericalGuardError, as_matrix

ATOM_LEAK_TOL = 1e-8


# --------------------------------------------------------------------------
# Levy measures and extended Bernstein matrices


def _as_square(x, d=None, name="matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr * np.eye(d or 1)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    m = as_matrix(arr, name)
    if m.shape[0] != m.shape[1] or (d is not None and m.shape[0] != d):
        raise ValueError(f"{name} must be {d} x {d}")
    return m


@dataclass(frozen=True)
class LevyMeasure:
    """Atoms ``(t, W)`` plus cell masses on ``(edges[m], edges[m+1]]``."""

    d: int = 1
    atom_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atom_weights: np.ndarray | None = None
    cell_edges: np.ndarray = field(default_factory=lambda: np.zeros(1))
    cell_masses: np.ndarray | None = None

    def __post_init__(self):
        d = self.d
        at = np.atleast_1d(np.asarray(self.atom_times, dtype=float))
        aw = (np.zeros((0, d, d)) if self.atom_weights is None
              else np.asarray(self.atom_weights, dtype=float).reshape(-1, d, d))
        ce = np.atleast_1d(np.asarray(self.cell_edges, dtype=float))
        cm = (np.zeros((max(ce.size - 1, 0), d, d)) if self.cell_masses is None
              else np.asarray(self.cell_masses, dtype=float).reshape(-1, d, d))
        if at.size != aw.shape[0] or np.any(at <= 0):
            raise ValueError("atoms need positive times and one weight matrix each")
        if cm.shape[0] != max(ce.size - 1, 0) or np.any(np.diff(ce) <= 0) or (ce.size and ce[0] < 0):
            raise ValueError("cells need increasing nonnegative edges and one mass per cell")
        if np.any(aw < 0) or np.any(cm < 0):
            raise ValueError("Levy measure masses must be nonnegative")
        for name, val in (("atom_times", at), ("atom_weights", aw), ("cell_edges", ce), ("cell_masses", cm)):
            object.__setattr__(self, name, val)
        if not np.isfinite(self.small_jump_moment()).all():
            raise ValueError("Levy measure must integrate min(1, t)")

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.cell_edges[:-1] + self.cell_edges[1:])

    def small_jump_moment(self) -> np.ndarray:
        w = np.minimum(1.0, self.atom_times)
        return (np.einsum("k,kij->ij", w, self.atom_weights)
                + np.einsum("k,kij->ij", np.minimum(1.0, self.mids), self.cell_masses))

    def total_mass(self) -> np.ndarray:
        return self.atom_weights.sum(axis=0) + self.cell_masses.sum(axis=0)

    def jump_part(self, lam: float) -> np.ndarray:
        """``sum (1 - exp(-lam t)) * mass``; atoms exact, cells at their midpoints."""
        return (np.einsum("k,kij->ij", -np.expm1(-lam * self.atom_times), self.atom_weights)
                + np.einsum("k,kij->ij", -np.expm1(-lam * self.mids), self.cell_masses))

    def entry(self, i: int, j: int) -> "LevyMeasure":
        return LevyMeasure(1, self.atom_times, self.atom_weights[:, i, j],
                           self.cell_edges, self.cell_masses[:, i, j])

    @classmethod
    def from_density(cls, density: Callable, t_min: float, t_max: float, n_cells: int = 400,
                     d: int = 1) -> "LevyMeasure":
        """Cell masses of a density on a log-spaced grid over ``[t_min, t_max]``."""
        edges = np.geomspace(t_min, t_max, n_cells + 1)
        masses = np.empty((n_cells, d, d))
        for m in range(n_cells):
            for i in range(d):
                for j in range(d):
                    fn = (lambda t, i=i, j=j: np.asarray(density(t), float).reshape(d, d)[i, j])
                    masses[m, i, j] = integrate.quad(fn, edges[m], edges[m + 1], epsrel=1e-10)[0]
        return cls(d, cell_edges=edges, cell_masses=masses)


@dataclass(frozen=True)
class ExtendedBernsteinMatrix:
    """``F(lam) = b + sigma lam + int (1 - exp(-lam t)) nu(dt)``.

    ``closed_form`` (when set) is used for evaluation instead of the discretized
    Levy measure; ``family``/``params`` describe closed-form families understood
    by :func:`potential_measure_closed_form` and :func:`build_prelimit_kernels`.
    """

    b: np.ndarray
    sigma: np.ndarray
    nu: LevyMeasure | None = None
    closed_form: Callable | None = None
    family: str = "triplet"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        b = _as_square(self.b, name="b")
        d = b.shape[0]
        sigma = _as_square(self.sigma, d, "sigma")
        if np.any(sigma < 0):
            raise ValueError("sigma must be entrywise nonnegative")
        nu = self.nu if self.nu is not None else LevyMeasure(d)
        if nu.d != d:
            raise ValueError("Levy measure dimension does not match b")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "nu", nu)

    @property
    def d(self) -> int:
        return self.b.shape[0]


def eval_ebf(F: ExtendedBernsteinMatrix, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("extended Bernstein functions are evaluated at lam >= 0")
    if F.closed_form is not None:
        return np.asarray(F.closed_form(float(lam)), dtype=float).reshape(F.d, F.d)
    return F.b + F.sigma * lam + F.nu.jump_part(lam)


def ebf_affine(b, sigma) -> ExtendedBernsteinMatrix:
    """``b + sigma lam``."""
    bm = _as_square(b, name="b")
    sm = _as_square(sigma, bm.shape[0], "sigma")
    return ExtendedBernsteinMatrix(bm, sm, family="affine", params={"b": bm, "sigma": sm})


def ebf_power(c, alpha: float, beta: float = 0.0, b=0.0, d: int | None = None,
              n_cells: int = 400) -> ExtendedBernsteinMatrix:
    """``b + diag(c) (lam + beta)^alpha`` with ``0 < alpha <= 1``."""
    if not 0 < alpha <= 1 or beta < 0:
        raise ValueError("power family needs 0 < alpha <= 1 and beta >= 0")
    c_diag = np.atleast_1d(np.asarray(c, dtype=float))
    if d is not None and c_diag.size == 1:
        c_diag = np.full(d, c_diag[0])
    if np.any(c_diag <= 0):
        raise ValueError("power family needs c > 0")
    d = c_diag.size
    cm = np.diag(c_diag)
    bm = _as_square(b, d, "b")
    drift = bm + cm * beta ** alpha
    if alpha == 1.0:
        sigma, nu = cm, LevyMeasure(d)
    else:
        sigma = np.zeros((d, d))
        scale = alpha / special.gamma(1.0 - alpha)
        nu = LevyMeasure.from_density(
            lambda t: cm * scale * t ** (-1.0 - alpha) * np.exp(-beta * t), 1e-8, 1e3, n_cells, d)

    def closed(lam):
        return bm + cm * (lam + beta) ** alpha

    return ExtendedBernsteinMatrix(drift, sigma, nu, closed, "power",
                                   {"c": c_diag, "alpha": float(alpha), "beta": float(beta), "b": bm})


def drift_split(F: ExtendedBernsteinMatrix):
    """Split a power-family ``b + c (lam + beta)^alpha`` into ``(c (lam + beta)^alpha, b)``."""
    if F.family != "power":
        raise ValueError("drift split is defined for the power family")
    p = F.params
    return ebf_power(p["c"], p["alpha"], p["beta"]), p["b"].copy()


# --------------------------------------------------------------------------
# reduced function and Laplace transform of the potential measure


def _block_terms(S: AdmissibleStructure, F: ExtendedBernsteinMatrix, lam: float):
    if S.d != F.d:
        raise ValueError("structure and Bernstein matrix dimensions differ")
    g = S.Q.T @ eval_ebf(F, lam) @ S.Q
    ell = S.ell
    if ell == S.d:
        return g, np.zeros((ell, 0))
    gap = np.eye(S.d - ell) - S.U_JJ
    if np.linalg.cond(gap) > 1e12:
        raise NumericalGuardError("Id - U_JJ is singular")
    coupling = S.U_IJ @ np.linalg.inv(gap)
    return g[:ell, :ell] + coupling @ g[ell:, :ell], coupling


def reduced_varphi(S: AdmissibleStructure, F: ExtendedBernsteinMatrix, lam: float) -> np.ndarray:
    return _block_terms(S, F, lam)[0]


def is_admissible(S: AdmissibleStructure, F: ExtendedBernsteinMatrix, lambda_grid: Iterable | None = None,
                  det_floor: float = 1e-10):
    """Scan ``det`` of the reduced function over ``lam >= lambda_plus``.

    Returns ``(ok, report)``; the report lists near-singular points and sign changes.
    """
    lo = max(S.lambda_plus, 1e-8)
    grid = np.geomspace(lo, 1e4, 400) if lambda_grid is None else np.asarray(list(lambda_grid), float)
    grid = grid[grid >= S.lambda_plus]
    dets = np.array([np.linalg.det(reduced_varphi(S, F, x)) for x in grid])
    near = grid[np.abs(dets) <= det_floor]
    flips = grid[1:][np.sign(dets[1:]) * np.sign(dets[:-1]) < 0]
    ok = bool(grid.size) and near.size == 0 and flips.size == 0
    return ok, {"lambda": grid, "det": dets, "near_singular": near, "sign_changes": flips}


def potential_laplace(S: AdmissibleStructure, F: ExtendedBernsteinMatrix, lam: float) -> np.ndarray:
    if lam < S.lambda_plus:
        raise ValueError(f"lam={lam} below lambda_plus={S.lambda_plus}")
    red, coupling = _block_terms(S, F, lam)
    if np.linalg.cond(red) > 1e13:
        raise NumericalGuardError(f"reduced function singular at lam={lam}")
    inv = np.linalg.inv(red)
    block = np.zeros((S.d, S.d))
    block[:S.ell, :S.ell] = inv
    block[:S.ell, S.ell:] = inv @ coupling
    return S.Q @ block @ S.Q.T


# --------------------------------------------------------------------------
# potential measures on a grid


@dataclass(frozen=True)
class PotentialMeasure:
    delta: float
    atom0: np.ndarray
    cell_masses: np.ndarray

    def __post_init__(self):
        atom = np.atleast_2d(np.asarray(self.atom0, dtype=float))
        d = atom.shape[0]
        cells = np.asarray(self.cell_masses, dtype=float).reshape(-1, d, d)
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if np.max(np.abs(atom - np.diag(np.diag(atom)))) > ATOM_LEAK_TOL:
            raise ValueError("atom at zero must be diagonal")
        if np.any(np.diag(atom) < 0) or np.any(cells < -1e-14):
            raise ValueError("potential measure masses must be nonnegative")
        object.__setattr__(self, "atom0", np.diag(np.diag(atom)))
        object.__setattr__(self, "cell_masses", np.maximum(cells, 0.0))

    @property
    def d(self) -> int:
        return self.atom0.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cell_masses.shape[0]

    @property
    def horizon(self) -> float:
        return self.n_cells * self.delta

    def cumulative(self) -> GridFunction:
        """``Pi([0, t_k])`` at ``t_k``, starting from the atom."""
        vals = np.empty((self.n_cells + 1, self.d, self.d))
        vals[0] = self.atom0
        vals[1:] = self.atom0 + np.cumsum(self.cell_masses, axis=0)
        return GridFunction(self.delta, vals)

    def laplace(self, lam: float) -> np.ndarray:
        """Grid Laplace transform (cells at their midpoints, truncated at the horizon)."""
        mids = self.delta * (np.arange(self.n_cells) + 0.5)
        return self.atom0 + np.einsum("k,kij->ij", np.exp(-lam * mids), self.cell_masses)

    def as_measure(self):
        return self.atom0, self.cell_masses

    def to_rows(self):
        cum = self.cumulative()
        return [[t] + list(v.ravel()) for t, v in zip(cum.times, cum.values)]


def _cells_affine(b: float, sigma: float, edges: np.ndarray) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("affine potential density needs sigma > 0")
    rate = b / sigma
    if rate == 0:
        return np.diff(edges) / sigma
    return np.exp(-rate * edges[:-1]) * -np.expm1(-rate * np.diff(edges)) / b


def _cells_power(c: float, alpha: float, beta: float, edges: np.ndarray) -> np.ndarray:
    if beta == 0:
        return np.diff(edges ** alpha) / (c * special.gamma(alpha + 1.0))
    lower = special.gammainc(alpha, beta * edges)
    upper = special.gammaincc(alpha, beta * edges)
    use_upper = lower[:-1] > 0.5
    diff = np.where(use_upper, upper[:-1] - upper[1:], lower[1:] - lower[:-1])
    return diff / (c * beta ** alpha)


def potential_measure_closed_form(F: ExtendedBernsteinMatrix, delta: float, horizon: float) -> PotentialMeasure:
    """Exact cell masses for the affine and (drift-free) power families."""
    n = n_steps_for(delta, horizon)
    edges = delta * np.arange(n + 1)
    cells = np.zeros((n, F.d, F.d))
    if F.family == "affine":
        b, s = F.params["b"], F.params["sigma"]
        if np.any(b != np.diag(np.diag(b))) or np.any(s != np.diag(np.diag(s))):
            raise ValueError("closed-form affine potential measure needs diagonal b and sigma")
        for i in range(F.d):
            cells[:, i, i] = _cells_affine(b[i, i], s[i, i], edges)
    elif F.family == "power":
        p = F.params
        if np.any(p["b"] != 0):
            raise ValueError("closed form covers c (lam + beta)^alpha only; split off the drift first "
                             "and use potential_from_resolvent_eq")
        for i in range(F.d):
            cells[:, i, i] = _cells_power(p["c"][i], p["alpha"], p["beta"], edges)
    else:
        raise ValueError(f"no closed-form potential measure for family {F.family!r}")
    return PotentialMeasure(delta, np.zeros((F.d, F.d)), cells)


def _atom_at_zero(laplace_fn, lam_big: float) -> np.ndarray:
    # geometric (Aitken) extrapolation of L(lam) towards lam -> infinity
    l1, l2, l3 = (laplace_fn(lam_big * s) for s in (1.0, 10.0, 100.0))
    d1, d2 = l1 - l2, l2 - l3
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.abs(d1) > 0, d2 / d1, 0.0)
    ratio = np.clip(ratio, 0.0, 0.95)
    return l3 - d2 * ratio / (1.0 - ratio)


def potential_inversion_gs(S: AdmissibleStructure, F: ExtendedBernsteinMatrix, delta: float, horizon: float,
                           gs_order: int = 12, repair_tol: float = 1e-5, return_report: bool = False):
    """Potential measure from Gaver-Stehfest inversion of ``L_Pi(lam) / lam``."""
    n = n_steps_for(delta, horizon)
    d = S.d

    def lap(x):
        return potential_laplace(S, F, x)

    atom = _atom_at_zero(lap, 1e6 / horizon)
    off = atom - np.diag(np.diag(atom))
    if np.max(np.abs(off)) > ATOM_LEAK_TOL:
        raise ValueError("atom at zero is not diagonal; unsupported input")
    atom = np.diag(np.maximum(np.diag(atom), 0.0))
    atom[np.abs(atom) < 1e-9] = 0.0
    raw = np.empty((n + 1, d, d))
    raw[0] = atom
    for k in range(1, n + 1):
        raw[k] = gaver_stehfest(lambda x: lap(x) / x, k * delta, gs_order)
    repaired = np.maximum.accumulate(np.maximum(raw, atom), axis=0)
    repair = float(np.max(np.abs(repaired - raw)))
    scale = max(1.0, float(np.max(np.abs(raw))))
    if repair > repair_tol * scale:
        raise NumericalGuardError(
            f"Gaver-Stehfest output is not monotone (repair {repair:.3g}); unsupported input")
    pm = PotentialMeasure(delta, atom, np.diff(repaired, axis=0))
    if return_report:
        return pm, {"repair": repair}
    return pm


# --------------------------------------------------------------------------
# grid measure algebra and the resolvent equation between Pi and Pi_0


def _cell_products(x: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """``sum_{i + j = k} x_i @ y_j``."""
    return np.einsum("iab,ibc->ac", x[:k + 1], y[k::-1])


def measure_convolution(x_atom, x_cells, y_atom, y_cells):
    """Product of two grid measures (matrix order preserved)."""
    n = x_cells.shape[0]
    cells = np.einsum("ab,kbc->kac", x_atom, y_cells) + np.einsum("kab,bc->kac", x_cells, y_atom)
    prev = np.zeros_like(cells[0])
    for k in range(n):
        cur = _cell_products(x_cells, y_cells, k)
        cells[k] += 0.5 * (cur + prev)
        prev = cur
    return x_atom @ y_atom, cells


def potential_from_resolvent_eq(Pi0: PotentialMeasure, bPhi) -> PotentialMeasure:
    """Solve ``Pi_0 = Pi + Pi_0 * (b Pi)`` for ``Pi`` forward in time."""
    d = Pi0.d
    b = _as_square(bPhi, d, "bPhi")
    a0, p0 = Pi0.atom0, Pi0.cell_masses
    eye = np.eye(d)
    lhs_atom = eye + a0 @ b
    if np.linalg.cond(lhs_atom) > 1e12:
        raise NumericalGuardError("Id + atom0 b is singular")
    atom = np.linalg.solve(lhs_atom, a0)
    step = lhs_atom + 0.5 * p0[0] @ b if p0.shape[0] else lhs_atom
    if np.linalg.cond(step) > 1e12:
        raise NumericalGuardError("singular forward step in the resolvent equation")
    n = p0.shape[0]
    cells = np.zeros_like(p0)
    p0b = np.einsum("kab,bc->kac", p0, b)
    prev_full = np.zeros((d, d))
    for k in range(n):
        # sum_{i+j=k, j<k} P0_i b P_j  (j = k term is implicit)
        partial = np.einsum("iab,ibc->ac", p0b[1:k + 1], cells[k - 1::-1]) if k else np.zeros((d, d))
        rhs = p0[k] - p0b[k] @ atom - 0.5 * partial - 0.5 * prev_full
        cells[k] = np.linalg.solve(step, rhs)
        prev_full = partial + p0b[0] @ cells[k]
    return PotentialMeasure(Pi0.delta, atom, cells)


def resolvent_residual(Pi0: PotentialMeasure, Pi: PotentialMeasure, bPhi, ordering: str = "left") -> float:
    """Max residual of ``Pi_0 = Pi + Pi_0 * (b Pi)`` (left) or ``Pi_0 = Pi + Pi * (b Pi_0)`` (right)."""
    b = _as_square(bPhi, Pi0.d, "bPhi")
    if ordering == "left":
        xa, xc = Pi0.atom0, Pi0.cell_masses
        ya, yc = b @ Pi.atom0, np.einsum("ab,kbc->kac", b, Pi.cell_masses)
    elif ordering == "right":
        xa, xc = Pi.atom0, Pi.cell_masses
        ya, yc = b @ Pi0.atom0, np.einsum("ab,kbc->kac", b, Pi0.cell_masses)
    else:
        raise ValueError("ordering must be 'left' or 'right'")
    ca, cc = measure_convolution(xa, xc, ya, yc)
    res_atom = np.max(np.abs(Pi0.atom0 - Pi.atom0 - ca))
    res_cells = np.max(np.abs(Pi0.cell_masses - Pi.cell_masses - cc)) if cc.size else 0.0
    return float(max(res_atom, res_cells))


def pi0_block_condition(S: AdmissibleStructure, bPhi) -> float:
    """Size of ``(Q^T b Q)_IJ + U_IJ (Id - U_JJ)^{-1} (Q^T b Q)_JJ`` (must vanish for the Pi_0 form)."""
    if S.ell == S.d:
        return 0.0
    g = S.Q.T @ _as_square(bPhi, S.d, "bPhi") @ S.Q
    coupling = S.U_IJ @ np.linalg.inv(np.eye(S.d - S.ell) - S.U_JJ)
    return float(np.max(np.abs(g[:S.ell, S.ell:] + coupling @ g[S.ell:, S.ell:])))


# --------------------------------------------------------------------------
# criticality


@dataclass(frozen=True)
class CriticalityReport:
    label: str
    heuristic: bool
    detail: dict

    def __str__(self):
        return self.label + (" (heuristic)" if self.heuristic else "")


def classify_criticality(obj, lambda_pi: float | None = None, tol: float = 1e-12) -> CriticalityReport:
    """Sign of the drift for scalar inputs, growth trend of the cumulative measure otherwise."""
    if isinstance(obj, ExtendedBernsteinMatrix) and obj.d == 1:
        b = float(obj.b[0, 0])
        label = "subcritical" if b > tol else "supercritical" if b < -tol else "critical"
        return CriticalityReport(label, False, {"b": b})
    if isinstance(obj, ExtendedBernsteinMatrix):
        raise ValueError("multivariate criticality needs a potential measure")
    if not isinstance(obj, PotentialMeasure):
        raise TypeError("expected an ExtendedBernsteinMatrix or a PotentialMeasure")
    if lambda_pi is not None and lambda_pi > 0:
        return CriticalityReport("supercritical", True, {"lambda_pi": lambda_pi})
    cum = obj.cumulative().values
    size = np.array([np.abs(v).sum() for v in cum])
    n = size.size - 1
    q = [size[round(n * f)] for f in (0.5, 0.75, 1.0)]
    late, mid = q[2] - q[1], q[1] - q[0]
    ratio = late / mid if mid > 0 else 0.0
    if ratio > 1.05:
        label = "supercritical"
    elif ratio < 0.6:
        label = "subcritical"
    else:
        label = "critical"
    return CriticalityReport(label, True, {"increment_ratio": ratio, "final_size": float(size[-1])})


# --------------------------------------------------------------------------
# prelimit kernels


def scaled_entry(entry: KernelEntry, s: float) -> KernelEntry:
    if s == 0 or isinstance(entry, Zero):
        return Zero()
    if isinstance(entry, Exponential):
        return Exponential(entry.a * s, entry.b)
    if isinstance(entry, PowerLaw):
        return PowerLaw(entry.a * s, entry.kappa, entry.beta)
    if isinstance(entry, Boxes):
        return Boxes(entry.edges, tuple(np.asarray(entry.heights) * s))
    if isinstance(entry, Mixture):
        return Mixture(tuple(scaled_entry(p, s) for p in entry.parts))
    raise TypeError(f"cannot scale {type(entry).__name__}")


def _tail_mass(density: Callable, x: float) -> float:
    head = integrate.quad(density, x, max(1.0, x), epsrel=1e-12, limit=400)[0] if x < 1 else 0.0
    tail = integrate.quad(density, max(1.0, x), np.inf, epsrel=1e-12, limit=400)[0]
    return head + tail


def _prelimit_power_entry(drift, c, alpha, beta, n):
    """Infinite Levy measure with power density: exponential-free tail construction."""
    coef = c * alpha / special.gamma(1.0 - alpha)
    density = lambda t: coef * t ** (-1.0 - alpha) * np.exp(-beta * t)  # noqa: E731
    tail = _tail_mass(density, 1.0 / n)
    gamma = tail  # epsilon = 1 when there is no Brownian-type drift
    weight = coef * n ** alpha * np.exp(-beta / n) / (alpha * tail)
    g = PowerLaw(weight, alpha, beta / n)
    return scaled_entry(g, 1.0 - drift / gamma), gamma


def _prelimit_finite_entry(drift, sigma, nu: LevyMeasure, n):
    gamma = float(n)
    total = float(nu.total_mass()[0, 0])
    eps = total / n
    if eps > 1:
        raise ValueError(f"n={n} too small for Levy mass {total}")
    beta = 1.0 / sigma if sigma > 0 else float(n)
    parts = []
    if eps < 1:
        parts.append(Exponential((1.0 - eps) * beta, beta))
    if total > 0:
        boxes = []
        for t0, w in zip(nu.atom_times, nu.atom_weights[:, 0, 0]):
            if w > 0:
                lo = n * t0 * (1.0 - 1.0 / n)
                boxes.append(Boxes((lo, n * t0), (eps * w / total / (n * t0 - lo),)))
        live = nu.cell_masses[:, 0, 0] > 0
        if np.any(live):
            e = n * nu.cell_edges
            heights = eps * nu.cell_masses[:, 0, 0] / total / np.diff(e)
            boxes.append(Boxes(tuple(e), tuple(heights)))
        parts.extend(boxes)
    entry = parts[0] if len(parts) == 1 else Mixture(tuple(parts))
    if 1.0 - drift / gamma < 0:
        raise ValueError(f"n={n} too small for drift {drift}")
    return scaled_entry(entry, 1.0 - drift / gamma), gamma


def build_prelimit_kernels(f: ExtendedBernsteinMatrix, A, n: int):
    """Kernel ``phi_n`` and scheme with ``gamma_n (A - L_phi_n(lam / n)) -> f(lam)`` entrywise.

    Entries with a finite Levy measure get an exponential component plus the
    time-stretched Levy measure (atoms smoothed into boxes); power-family
    entries with an infinite Levy measure get a power-law tail density.
    Entries whose own scale falls short of the common ``gamma_n`` are padded
    with a fast exponential that carries the missing mass.
    """
    d = f.d
    a_mat = as_matrix(A, "A") if np.ndim(A) else np.full((d, d), float(A))
    if a_mat.shape != (d, d) or np.any(a_mat < 0):
        raise ValueError("A must be a nonnegative d x d matrix")
    if n < 1:
        raise ValueError("n must be positive")
    power = f.family == "power" and f.params["alpha"] < 1
    raw = [[None] * d for _ in range(d)]
    for i in range(d):
        for j in range(d):
            a_ij = a_mat[i, j]
            b, s = f.b[i, j], f.sigma[i, j]
            nu_ij = f.nu.entry(i, j)
            trivial = b == 0 and s == 0 and not np.any(nu_ij.total_mass())
            if a_ij == 0:
                if not trivial:
                    raise ValueError(f"A[{i},{j}] = 0 requires a vanishing entry f[{i},{j}]")
                continue
            if power and i == j:
                p = f.params
                raw[i][j] = _prelimit_power_entry(b / a_ij, p["c"][i] / a_ij, p["alpha"], p["beta"], n)
            elif power and not trivial:
                raise ValueError("off-diagonal power-family entries are not supported")
            else:
                raw[i][j] = _prelimit_finite_entry(b / a_ij, s / a_ij, nu_ij, n)
    gammas = [g for row in raw for item in row if item is not None for g in [item[1]]]
    if not gammas:
        gamma = float(n)
    else:
        gamma = max(gammas)
    entries = [[Zero() for _ in range(d)] for _ in range(d)]
    for i in range(d):
        for j in range(d):
            if raw[i][j] is None:
                continue
            entry, g = raw[i][j]
            ratio = g / gamma
            if ratio < 1 - 1e-15:
                fast = Exponential((1.0 - ratio) * n, float(n))
                entry = Mixture((fast, scaled_entry(entry, ratio)))
            entries[i][j] = scaled_entry(entry, a_mat[i, j])
    return Kernel(entries), ScalingScheme(int(n), gamma * gamma / n)
