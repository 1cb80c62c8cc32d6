"""Exciting kernels, their Laplace transforms and discretized resolvents.

Each kernel entry is a nonnegative integrable function on ``[0, inf)``.  The
resolvent ``R = phi + phi * R`` is computed on a uniform grid by explicit
Volterra stepping, and the rescaled resolvent of a kernel sequence either by
the same stepping on the original time scale or by Gaver-Stehfest inversion of
its Laplace transform.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .grid import GridFunction, gaver_stehfest, n_steps_for
from .matlin import NumericalGuardError, as_matrix, spectral_radius

_QUAD_REL = 1e-11
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def _gauss_cells(fn, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
    half = 0.5 * (t1 - t0)
    mid = 0.5 * (t1 + t0)
    pts = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    return half * (fn(pts) @ _GL_WEIGHTS)


def _quad_half_line(fn) -> float:
    # split at 1 so the integrator sees the near-origin shape separately
    head, _ = integrate.quad(fn, 0.0, 1.0, epsrel=_QUAD_REL, epsabs=0.0, limit=200)
    tail, _ = integrate.quad(fn, 1.0, np.inf, epsrel=_QUAD_REL, epsabs=0.0, limit=200)
    return head + tail


class KernelEntry:
    """Common interface of a scalar kernel entry."""

    family = "abstract"
    singular = False

    def value(self, t):
        raise NotImplementedError

    def l1(self) -> float:
        raise NotImplementedError

    def laplace(self, lam: float) -> float:
        raise NotImplementedError

    def cell_masses(self, edges: np.ndarray) -> np.ndarray:
        """Integrals of the entry over ``[edges[m], edges[m+1]]``."""
        edges = np.asarray(edges, dtype=float)
        return _gauss_cells(self.value, edges[:-1], edges[1:])

    def sup_after(self, u):
        """``sup_{s >= u} phi(s)`` (vectorized); used as the thinning bound."""
        raise NotImplementedError

    def cumulative(self, u):
        """``int_0^u phi`` (vectorized, zero for u <= 0)."""
        u = np.maximum(np.asarray(u, dtype=float), 0.0)
        out = np.array([self.cell_masses(np.array([0.0, x]))[0] if x > 0 else 0.0 for x in u.ravel()])
        return out.reshape(u.shape)

    def sample_delay(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draws from the normalized density ``phi / l1``."""
        raise NotImplementedError

    def to_spec(self) -> dict:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.to_spec()})"


@dataclass(frozen=True, repr=False)
class Zero(KernelEntry):
    family = "zero"

    def value(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def l1(self):
        return 0.0

    def laplace(self, lam):
        return 0.0 * np.asarray(lam, dtype=float)

    def cell_masses(self, edges):
        return np.zeros(len(edges) - 1)

    def sup_after(self, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def cumulative(self, u):
        return np.zeros_like(np.asarray(u, dtype=float))

    def sample_delay(self, rng, size):
        raise ValueError("zero kernel has no delay distribution")

    def to_spec(self):
        return {"family": "zero"}


@dataclass(frozen=True, repr=False)
class Exponential(KernelEntry):
    """``a * exp(-b t)``."""

    a: float
    b: float
    family = "exponential"

    def __post_init__(self):
        if self.a < 0 or self.b <= 0:
            raise ValueError("exponential kernel needs a >= 0 and b > 0")

    def value(self, t):
        return self.a * np.exp(-self.b * np.asarray(t, dtype=float))

    def l1(self):
        return self.a / self.b

    def laplace(self, lam):
        return self.a / (self.b + np.asarray(lam, dtype=float))

    def cell_masses(self, edges):
        edges = np.asarray(edges, dtype=float)
        return (self.a / self.b) * np.exp(-self.b * edges[:-1]) * -np.expm1(-self.b * np.diff(edges))

    def sup_after(self, u):
        return self.value(np.maximum(u, 0.0))

    def cumulative(self, u):
        u = np.maximum(np.asarray(u, dtype=float), 0.0)
        return (self.a / self.b) * -np.expm1(-self.b * u)

    def sample_delay(self, rng, size):
        return rng.exponential(1.0 / self.b, size)

    def to_spec(self):
        return {"family": "exponential", "a": self.a, "b": self.b}


@dataclass(frozen=True, repr=False)
class PowerLaw(KernelEntry):
    """``a * kappa * (1 + t)^(-kappa - 1) * exp(-beta t)``."""

    a: float
    kappa: float
    beta: float = 0.0
    family = "powerlaw"

    def __post_init__(self):
        if self.a < 0 or self.kappa <= 0 or self.beta < 0:
            raise ValueError("powerlaw kernel needs a >= 0, kappa > 0, beta >= 0")

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return self.a * self.kappa * (1.0 + t) ** (-self.kappa - 1.0) * np.exp(-self.beta * t)

    def l1(self):
        if self.beta == 0.0:
            return self.a
        return self.laplace(0.0)

    def laplace(self, lam):
        lam_arr = np.asarray(lam, dtype=float)
        if lam_arr.ndim:
            return np.array([self.laplace(x) for x in lam_arr.ravel()]).reshape(lam_arr.shape)
        if self.beta == 0.0 and lam_arr == 0.0:
            return self.a
        return _quad_half_line(lambda s: float(self.value(s)) * np.exp(-float(lam_arr) * s))

    def cell_masses(self, edges):
        edges = np.asarray(edges, dtype=float)
        if self.beta == 0.0:
            tail = (1.0 + edges) ** (-self.kappa)
            return self.a * (tail[:-1] - tail[1:])
        return _gauss_cells(self.value, edges[:-1], edges[1:])

    def sup_after(self, u):
        return self.value(np.maximum(u, 0.0))

    def cumulative(self, u):
        u = np.maximum(np.asarray(u, dtype=float), 0.0)
        if self.beta == 0.0:
            return self.a * -np.expm1(-self.kappa * np.log1p(u))
        vals = [integrate.quad(self.value, 0.0, x, epsrel=1e-10, limit=200)[0] for x in u.ravel()]
        return np.array(vals).reshape(u.shape)

    def sample_delay(self, rng, size):
        out = np.empty(size)
        filled = 0
        while filled < size:
            cand = rng.random(size - filled) ** (-1.0 / self.kappa) - 1.0
            if self.beta > 0:
                cand = cand[rng.random(cand.size) < np.exp(-self.beta * cand)]
            out[filled:filled + cand.size] = cand
            filled += cand.size
        return out

    def to_spec(self):
        return {"family": "powerlaw", "a": self.a, "kappa": self.kappa, "beta": self.beta}


@dataclass(frozen=True, repr=False)
class GammaDensity(KernelEntry):
    """``a * beta^alpha * t^(alpha - 1) * exp(-beta t) / Gamma(alpha)``."""

    a: float
    alpha: float
    beta: float
    family = "gammaish"

    def __post_init__(self):
        if self.a < 0 or self.alpha <= 0 or self.beta <= 0:
            raise ValueError("gammaish kernel needs a >= 0, alpha > 0, beta > 0")

    @property
    def singular(self):
        return self.alpha < 1.0

    def value(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return self.a * np.exp(
                self.alpha * np.log(self.beta) + (self.alpha - 1.0) * np.log(t)
                - self.beta * t - special.gammaln(self.alpha)
            )

    def l1(self):
        return self.a

    def laplace(self, lam):
        return self.a * (self.beta / (self.beta + np.asarray(lam, dtype=float))) ** self.alpha

    def cell_masses(self, edges):
        edges = np.asarray(edges, dtype=float)
        return self.a * np.diff(special.gammainc(self.alpha, self.beta * edges))

    def sup_after(self, u):
        mode = max((self.alpha - 1.0) / self.beta, 0.0)
        return self.value(np.maximum(u, mode))

    def cumulative(self, u):
        u = np.maximum(np.asarray(u, dtype=float), 0.0)
        return self.a * special.gammainc(self.alpha, self.beta * u)

    def sample_delay(self, rng, size):
        return rng.gamma(self.alpha, 1.0 / self.beta, size)

    def to_spec(self):
        return {"family": "gammaish", "a": self.a, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True, repr=False)
class Boxes(KernelEntry):
    """Piecewise-constant density: ``heights[m]`` on ``[edges[m], edges[m+1])``."""

    edges: tuple
    heights: tuple
    family = "boxes"

    def __post_init__(self):
        e, h = np.asarray(self.edges, float), np.asarray(self.heights, float)
        if e.ndim != 1 or h.shape != (e.size - 1,) or np.any(np.diff(e) <= 0) or e[0] < 0:
            raise ValueError("boxes need increasing edges starting at t >= 0, one height per box")
        if np.any(h < 0):
            raise ValueError("box heights must be nonnegative")
        object.__setattr__(self, "edges", tuple(e))
        object.__setattr__(self, "heights", tuple(h))

    def _arrays(self):
        return np.asarray(self.edges), np.asarray(self.heights)

    def value(self, t):
        e, h = self._arrays()
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(e, t, side="right") - 1
        inside = (idx >= 0) & (idx < h.size)
        return np.where(inside, h[np.clip(idx, 0, h.size - 1)], 0.0)

    def l1(self):
        e, h = self._arrays()
        return float(np.sum(h * np.diff(e)))

    def laplace(self, lam):
        e, h = self._arrays()
        lam = np.asarray(lam, dtype=float)
        lam_e = lam[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            per_box = np.exp(-lam_e * e[:-1]) * -np.expm1(-lam_e * np.diff(e)) / lam_e
        per_box = np.where(lam_e == 0, np.diff(e), per_box)
        return np.sum(h * per_box, axis=-1)

    def cell_masses(self, edges):
        e, h = self._arrays()
        edges = np.asarray(edges, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(h * np.diff(e))])

        def primitive(x):
            idx = np.clip(np.searchsorted(e, x, side="right") - 1, 0, h.size - 1)
            inside = np.clip(x, e[0], e[-1])
            return cum[idx] + h[idx] * (inside - e[idx])

        return np.diff(primitive(edges))

    def sup_after(self, u):
        e, h = self._arrays()
        suffix = np.append(np.maximum.accumulate(h[::-1])[::-1], 0.0)
        # first box whose right edge lies beyond u
        idx = np.searchsorted(e[1:], np.asarray(u, dtype=float), side="right")
        return suffix[idx]

    def cumulative(self, u):
        e, _ = self._arrays()
        u = np.asarray(u, dtype=float)
        flat = np.clip(u.ravel(), 0.0, None)
        return np.array([self.cell_masses(np.array([0.0, x]))[0] if x > 0 else 0.0
                         for x in flat]).reshape(u.shape)

    def sample_delay(self, rng, size):
        e, h = self._arrays()
        mass = h * np.diff(e)
        box = rng.choice(h.size, size=size, p=mass / mass.sum())
        return e[box] + rng.random(size) * (e[box + 1] - e[box])

    def to_spec(self):
        return {"family": "boxes", "edges": list(self.edges), "heights": list(self.heights)}


@dataclass(frozen=True, repr=False)
class Mixture(KernelEntry):
    """Sum of kernel entries."""

    parts: tuple
    family = "mixture"

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def singular(self):
        return any(p.singular for p in self.parts)

    def value(self, t):
        return sum(p.value(t) for p in self.parts)

    def l1(self):
        return float(sum(p.l1() for p in self.parts))

    def laplace(self, lam):
        return sum(p.laplace(lam) for p in self.parts)

    def cell_masses(self, edges):
        return sum(p.cell_masses(edges) for p in self.parts)

    def sup_after(self, u):
        return sum(p.sup_after(u) for p in self.parts)

    def cumulative(self, u):
        return sum(p.cumulative(u) for p in self.parts)

    def sample_delay(self, rng, size):
        mass = np.array([p.l1() for p in self.parts])
        pick = rng.choice(len(self.parts), size=size, p=mass / mass.sum())
        out = np.empty(size)
        for i, p in enumerate(self.parts):
            sel = pick == i
            if np.any(sel):
                out[sel] = p.sample_delay(rng, int(sel.sum()))
        return out

    def to_spec(self):
        return {"family": "mixture", "parts": [p.to_spec() for p in self.parts]}


_FAMILIES = {
    "zero": lambda s: Zero(),
    "exponential": lambda s: Exponential(float(s["a"]), float(s["b"])),
    "powerlaw": lambda s: PowerLaw(float(s["a"]), float(s["kappa"]), float(s.get("beta", 0.0))),
    "gammaish": lambda s: GammaDensity(float(s["a"]), float(s["alpha"]), float(s["beta"])),
    "boxes": lambda s: Boxes(tuple(s["edges"]), tuple(s["heights"])),
    "mixture": lambda s: Mixture(tuple(entry_from_spec(p) for p in s["parts"])),
}


def entry_from_spec(spec: dict) -> KernelEntry:
    fam = spec.get("family")
    if fam not in _FAMILIES:
        raise ValueError(f"unknown kernel family {fam!r}")
    try:
        return _FAMILIES[fam](spec)
    except KeyError as exc:
        raise ValueError(f"kernel family {fam!r} is missing parameter {exc.args[0]!r}") from None


class Kernel:
    """A d x d matrix of kernel entries; entry (i, j) is the effect of type-j events on type i."""

    def __init__(self, entries):
        if isinstance(entries, KernelEntry):
            entries = [[entries]]
        rows = [list(r) for r in entries]
        d = len(rows)
        if d == 0 or any(len(r) != d for r in rows):
            raise ValueError("kernel must be a non-empty square array of entries")
        for r in rows:
            for e in r:
                if not isinstance(e, KernelEntry):
                    raise TypeError(f"kernel entries must be KernelEntry, got {type(e).__name__}")
        self.entries = rows
        self.d = d

    @classmethod
    def from_spec(cls, spec) -> "Kernel":
        if isinstance(spec, dict):
            spec = [[spec]]
        return cls([[entry_from_spec(e) for e in row] for row in spec])

    def to_spec(self):
        return [[e.to_spec() for e in row] for row in self.entries]

    def _apply(self, fn, out_shape=()):
        out = np.empty((self.d, self.d) + out_shape)
        for i in range(self.d):
            for j in range(self.d):
                out[i, j] = fn(self.entries[i][j])
        return out

    @property
    def is_exponential(self) -> bool:
        return all(isinstance(e, (Exponential, Zero)) for r in self.entries for e in r)

    def values(self, t) -> np.ndarray:
        """Kernel matrices at times ``t``; shape ``t.shape + (d, d)``."""
        t = np.asarray(t, dtype=float)
        out = self._apply(lambda e: e.value(t), t.shape)
        return np.moveaxis(out, (0, 1), (-2, -1))

    def cell_masses(self, edges) -> np.ndarray:
        edges = np.asarray(edges, dtype=float)
        out = self._apply(lambda e: e.cell_masses(edges), (edges.size - 1,))
        return np.moveaxis(out, (0, 1), (-2, -1))

    def sup_after(self, u: float) -> np.ndarray:
        return self._apply(lambda e: e.sup_after(u))

    def cumulative(self, u) -> np.ndarray:
        """``int_0^u phi`` entrywise; shape ``u.shape + (d, d)``."""
        u = np.asarray(u, dtype=float)
        out = self._apply(lambda e: e.cumulative(u), u.shape)
        return np.moveaxis(out, (0, 1), (-2, -1))

    @property
    def singular(self) -> bool:
        return any(e.singular for r in self.entries for e in r)

    def __repr__(self):
        return f"Kernel({self.to_spec()})"


def l1_norm(phi: Kernel) -> np.ndarray:
    return phi._apply(lambda e: e.l1())


def laplace_kernel(phi: Kernel, lam) -> np.ndarray:
    lam = float(lam)
    if lam < 0:
        raise ValueError("Laplace argument must be nonnegative")
    if lam == 0.0:
        return l1_norm(phi)
    return phi._apply(lambda e: e.laplace(lam))


def kernel_samples(phi: Kernel, delta: float, n_steps: int, rule: str = "auto") -> np.ndarray:
    """Kernel samples used by the resolvent stepping, shape ``(n_steps + 1, d, d)``.

    ``rule="point"`` uses ``phi(t_k)``; ``"cell"`` uses the average of phi over
    ``(t_{k-1}, t_k]``; ``"auto"`` uses cell averages for singular entries only.
    Index 0 holds ``phi(0)`` (or the first cell average for singular entries).
    """
    if rule not in ("auto", "point", "cell"):
        raise ValueError(f"unknown sampling rule {rule!r}")
    times = delta * np.arange(n_steps + 1)
    out = np.empty((n_steps + 1, phi.d, phi.d))
    for i in range(phi.d):
        for j in range(phi.d):
            e = phi.entries[i][j]
            if rule == "cell" or (rule == "auto" and e.singular):
                avg = e.cell_masses(times) / delta
                out[1:, i, j] = avg
                out[0, i, j] = avg[0] if n_steps else 0.0
            else:
                out[:, i, j] = e.value(times)
    return out


def resolvent_from_samples(phi_k: np.ndarray, delta: float) -> np.ndarray:
    """``R_k = phi_k + delta * sum_{j=1}^{k-1} phi_{k-j} R_j``, ``R_0 = phi_0``.

    The lag-zero term is dropped, which makes ``R`` the exact resolvent of the
    discrete convolution ``(a * b)_k = delta * sum_{j=1}^{k-1} a_{k-j} b_j``.
    """
    r = np.empty_like(phi_k)
    r[0] = phi_k[0]
    for k in range(1, phi_k.shape[0]):
        if k > 1:
            r[k] = phi_k[k] + delta * np.einsum("jab,jbc->ac", phi_k[k - 1:0:-1], r[1:k])
        else:
            r[k] = phi_k[k]
    return r


def resolvent_grid(phi: Kernel, delta: float, horizon: float, rule: str = "auto") -> GridFunction:
    """Resolvent of ``phi`` on ``t_k = k delta`` by explicit Volterra stepping."""
    n = n_steps_for(delta, horizon)
    return GridFunction(delta, resolvent_from_samples(kernel_samples(phi, delta, n, rule), delta))


def discrete_residual(phi_k: np.ndarray, r: np.ndarray, delta: float) -> float:
    """Max residual of the discrete resolvent equation (zero up to rounding)."""
    worst = 0.0
    for k in range(1, r.shape[0]):
        conv = delta * np.einsum("jab,jbc->ac", phi_k[k - 1:0:-1], r[1:k]) if k > 1 else 0.0
        worst = max(worst, float(np.max(np.abs(r[k] - phi_k[k] - conv))))
    return worst


def laplace_identity_check(phi: Kernel, R: GridFunction, lam: float) -> float:
    """``|| L_R (Id - L_phi) - L_phi ||_inf`` with ``L_R`` by grid quadrature."""
    weights = np.exp(-lam * R.times[1:])
    lr = R.delta * np.einsum("k,kab->ab", weights, R.values[1:])
    lp = laplace_kernel(phi, lam)
    resid = lr @ (np.eye(phi.d) - lp) - lp
    return float(np.max(np.sum(np.abs(resid), axis=1)))


@dataclass(frozen=True)
class ScalingScheme:
    """Time is sped up by ``n`` and space scaled by ``theta_n``."""

    n: int
    theta_n: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if not self.theta_n > 0:
            raise ValueError("theta_n must be positive")

    @property
    def gamma(self) -> float:
        """``sqrt(n * theta_n)``."""
        return float(np.sqrt(self.n * self.theta_n))


def psi_n(phi_n: Kernel, scheme: ScalingScheme, lam: float) -> np.ndarray:
    return scheme.gamma * (np.eye(phi_n.d) - laplace_kernel(phi_n, lam / scheme.n))


def varphi_n_limit(phi_n_seq: Sequence[Kernel], K, scheme_seq: Sequence[ScalingScheme], lam: float):
    """``sqrt(n theta_n) (K - L_phi_n(lam / n))`` for each member of a kernel sequence."""
    k = as_matrix(K, "K")
    return [s.gamma * (k - laplace_kernel(p, lam / s.n)) for p, s in zip(phi_n_seq, scheme_seq)]


def is_m_matrix_regime(phi_n: Kernel, scheme: ScalingScheme, lam: float) -> bool:
    """True when ``rho(L_phi_n(lam / n)) < 1``, so Psi^(n)(lam) is an invertible M-matrix."""
    return spectral_radius(laplace_kernel(phi_n, lam / scheme.n)) < 1.0


def rescaled_resolvent_laplace(phi_n: Kernel, scheme: ScalingScheme, lam: float) -> np.ndarray:
    """Laplace transform of the rescaled resolvent, ``Psi^(n)(lam)^{-1} L_phi_n(lam / n)``."""
    lp = laplace_kernel(phi_n, lam / scheme.n)
    return np.linalg.solve(scheme.gamma * (np.eye(phi_n.d) - lp), lp)


def rescaled_resolvent(phi_n: Kernel, scheme: ScalingScheme, delta: float, horizon: float,
                       method: str = "grid", inner_delta: float | None = None,
                       max_points: int = 50_000, gs_order: int = 12) -> GridFunction:
    """``R^(n)(t) = sqrt(n / theta_n) R_n(n t)`` sampled on ``t_k = k delta``.

    ``method="grid"`` steps the resolvent of ``phi_n`` on the original time scale
    with step ``inner_delta`` (default ``delta``), which must divide ``n * delta``.
    ``method="laplace"`` inverts the Laplace transform of ``I_{R^(n)}`` at every
    grid point and returns cell averages, so that ``.integral()`` reproduces the
    inverted ``I_{R^(n)}`` exactly.
    """
    n_out = n_steps_for(delta, horizon)
    if method == "grid":
        inner = delta if inner_delta is None else inner_delta
        stride = scheme.n * delta / inner
        if abs(stride - round(stride)) > 1e-9 * stride:
            raise ValueError("inner_delta must divide n * delta")
        stride = int(round(stride))
        n_inner = stride * n_out
        if n_inner + 1 > max_points:
            raise NumericalGuardError(
                f"fine grid needs {n_inner + 1} points, above the cap {max_points}; "
                "use method='laplace'")
        # cell averages keep the kernel mass exact, which matters near criticality
        r_fine = resolvent_grid(phi_n, inner, n_inner * inner, rule="cell").values
        scale = np.sqrt(scheme.n / scheme.theta_n)
        return GridFunction(delta, scale * r_fine[::stride])
    if method == "laplace":
        times = delta * np.arange(1, n_out + 1)
        cum = np.zeros((n_out + 1, phi_n.d, phi_n.d))
        for k, t in enumerate(times, start=1):
            cum[k] = gaver_stehfest(
                lambda s: rescaled_resolvent_laplace(phi_n, scheme, s) / s, t, gs_order)
        cum = np.maximum.accumulate(np.maximum(cum, 0.0), axis=0)
        vals = np.empty_like(cum)
        vals[1:] = np.diff(cum, axis=0) / delta
        vals[0] = vals[1] if n_out else 0.0
        return GridFunction(delta, vals)
    raise ValueError(f"unknown method {method!r}")
