"""Simulation of multivariate Hawkes processes and Monte Carlo functionals.

Paths are sampled by thinning with a dominating rate built from
``sup_{s >= u} phi(s)``, which is exact for any kernel shape.  A cluster
(branching) sampler is provided as well; it handles kernels that are
unbounded at the origin and serves as an independent check of the thinning
sampler.  Every path draws from its own generator, seeded by
``SeedSequence(seed, spawn_key=(path_index,))``, so results do not depend on
how paths are distributed over workers.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import GridFunction, n_steps_for
from .kernels import Exponential, Kernel, ScalingScheme, Zero, resolvent_grid
from .matlin import NumericalGuardError
from .riccati import TestFunctions

EVENT_CAP = 1_000_000


def path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


# --------------------------------------------------------------------------
# exogenous input


class ExogenousInput:
    """Baseline intensity ``mu(t)`` (a d-vector).

    Use :meth:`constant`, :meth:`from_grid` or :meth:`impact` to build one.
    """

    def __init__(self, kind: str, d: int, data):
        self.kind, self.d, self.data = kind, d, data

    @classmethod
    def constant(cls, mu) -> "ExogenousInput":
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.ndim != 1 or np.any(mu < 0):
            raise ValueError("constant baseline must be a nonnegative vector")
        return cls("constant", mu.size, mu)

    @classmethod
    def from_grid(cls, grid: GridFunction) -> "ExogenousInput":
        vals = grid.values.reshape(grid.n_steps + 1, -1)
        if np.any(vals < 0):
            raise ValueError("baseline grid must be nonnegative")
        return cls("grid", vals.shape[1], GridFunction(grid.delta, vals))

    @classmethod
    def impact(cls, phi: Kernel, weights) -> "ExogenousInput":
        """``mu_i(t) = sum_j phi_ij(t) w_j``: the echo of ``w_j`` type-j events at time 0."""
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if w.shape != (phi.d,) or np.any(w < 0):
            raise ValueError("impact weights must be a nonnegative d-vector")
        return cls("impact", phi.d, (phi, w))

    def value(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.data, t.shape + (self.d,)).copy()
        if self.kind == "grid":
            g = self.data
            idx = np.clip(np.floor(t / g.delta).astype(int), 0, g.n_steps)
            return g.values[idx]
        phi, w = self.data
        return phi.values(t) @ w

    def sup_on(self, t0: float, t1: float) -> np.ndarray:
        if self.kind == "constant":
            return self.data.copy()
        if self.kind == "grid":
            g = self.data
            lo = int(np.clip(np.floor(t0 / g.delta), 0, g.n_steps))
            hi = int(np.clip(np.ceil(t1 / g.delta), 0, g.n_steps))
            return g.values[lo:hi + 1].max(axis=0)
        phi, w = self.data
        return phi.sup_after(t0) @ w

    def integral(self, t) -> np.ndarray:
        """``int_0^t mu``; shape ``t.shape + (d,)``."""
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return t[..., None] * self.data
        if self.kind == "grid":
            g = self.data
            cum = np.vstack([np.zeros(self.d), np.cumsum(g.values[:-1], axis=0) * g.delta])
            idx = np.clip(np.floor(t / g.delta).astype(int), 0, g.n_steps)
            return cum[idx] + (t - idx * g.delta)[..., None] * g.values[idx]
        phi, w = self.data
        return phi.cumulative(t) @ w

    def on_grid(self, delta: float, n_steps: int) -> np.ndarray:
        return self.value(delta * np.arange(n_steps + 1))


# --------------------------------------------------------------------------
# paths


@dataclass
class HawkesPath:
    horizon: float
    events: list
    phi: Kernel
    mu: ExogenousInput
    seed: tuple = ()
    intensity_grid: GridFunction | None = None

    def __post_init__(self):
        for ev in self.events:
            if ev.size and (np.any(np.diff(ev) <= 0) or ev[0] <= 0 or ev[-1] > self.horizon):
                raise ValueError("event times must be strictly increasing inside (0, T]")

    @property
    def d(self) -> int:
        return len(self.events)

    def counts(self, t=None) -> np.ndarray:
        t = self.horizon if t is None else t
        return np.array([np.searchsorted(ev, t, side="right") for ev in self.events])

    def compensator(self, t: float) -> np.ndarray:
        """``I_Lambda(t) = int_0^t Lambda``."""
        out = self.mu.integral(np.asarray(t)).astype(float)
        for j, ev in enumerate(self.events):
            past = ev[ev < t]
            if past.size:
                out = out + self.phi.cumulative(t - past)[:, :, j].sum(axis=0)
        return out

    def intensity(self, times) -> np.ndarray:
        return intensity_at(self.phi, self.mu, self.events, times)

    def sample_intensity(self, delta: float) -> GridFunction:
        n = n_steps_for(delta, self.horizon)
        self.intensity_grid = GridFunction(delta, self.intensity(delta * np.arange(n + 1)))
        return self.intensity_grid


def intensity_at(phi: Kernel, mu: ExogenousInput, events, t) -> np.ndarray:
    """``Lambda_i(t) = mu_i(t) + sum_j sum_{tau < t} phi_ij(t - tau)`` (vectorized in t)."""
    t = np.asarray(t, dtype=float)
    lam = mu.value(t).astype(float)
    for j, ev in enumerate(events):
        ev = np.asarray(ev, dtype=float)
        if not ev.size:
            continue
        lags = t[..., None] - ev
        for i in range(phi.d):
            entry = phi.entries[i][j]
            if isinstance(entry, Zero):
                continue
            vals = np.where(lags > 0, entry.value(np.where(lags > 0, lags, 1.0)), 0.0)
            lam[..., i] += vals.sum(axis=-1)
    return lam


def _thinning_exponential(phi, mu, horizon, rng, cap, refresh):
    d = phi.d
    amp = np.array([[e.a if isinstance(e, Exponential) else 0.0 for e in r] for r in phi.entries])
    rate = np.array([[e.b if isinstance(e, Exponential) else 1.0 for e in r] for r in phi.entries])
    excite = np.zeros((d, d))
    times, types = [], []
    s = 0.0
    while s < horizon:
        window = min(refresh, horizon - s)
        bound = float(mu.sup_on(s, s + window).sum() + excite.sum())
        if bound <= 0:
            s += window
            continue
        step = rng.exponential(1.0 / bound)
        if step > window:
            excite *= np.exp(-rate * window)
            s += window
            continue
        s += step
        excite *= np.exp(-rate * step)
        lam = mu.value(s) + excite.sum(axis=1)
        total = lam.sum()
        if rng.random() * bound <= total:
            j = int(np.searchsorted(np.cumsum(lam), rng.random() * total, side="right")) if d > 1 else 0
            j = min(j, d - 1)
            times.append(s)
            types.append(j)
            excite[:, j] += amp[:, j]
            if len(times) > cap:
                raise NumericalGuardError("event cap exceeded; the model is likely supercritical")
    return times, types


def _thinning_general(phi, mu, horizon, rng, cap, refresh):
    d = phi.d
    times, types = [], []
    ev_t = [np.zeros(0) for _ in range(d)]
    s = 0.0

    def bound_at(s0, w):
        tot = mu.sup_on(s0, s0 + w).sum()
        for j in range(d):
            if ev_t[j].size:
                lags = s0 - ev_t[j]
                for i in range(d):
                    tot += phi.entries[i][j].sup_after(lags).sum()
        return float(tot)

    while s < horizon:
        window = min(refresh, horizon - s)
        bound = bound_at(s, window)
        if not np.isfinite(bound):
            raise NumericalGuardError("unbounded thinning rate; use the cluster sampler")
        if bound <= 0:
            s += window
            continue
        step = rng.exponential(1.0 / bound)
        if step > window:
            s += window
            continue
        s += step
        lam = intensity_at(phi, mu, ev_t, s)
        total = lam.sum()
        if total > bound * (1 + 1e-9):
            raise NumericalGuardError("dominating rate violated")
        if rng.random() * bound <= total:
            j = min(int(np.searchsorted(np.cumsum(lam), rng.random() * total, side="right")), d - 1)
            times.append(s)
            types.append(j)
            ev_t[j] = np.append(ev_t[j], s)
            if len(times) > cap:
                raise NumericalGuardError("event cap exceeded; the model is likely supercritical")
    return times, types


def _cluster(phi, mu, horizon, rng, cap):
    d = phi.d
    norms = np.array([[e.l1() for e in r] for r in phi.entries])
    gen_t, gen_k = [], []
    if mu.kind == "impact":
        _, w = mu.data
        # virtual ancestors at time 0 carrying weight w_j
        for j in range(d):
            for i in range(d):
                m = rng.poisson(w[j] * norms[i, j])
                if m:
                    gen_t.append(phi.entries[i][j].sample_delay(rng, m))
                    gen_k.append(np.full(m, i))
    else:
        sup = mu.sup_on(0.0, horizon)
        for i in range(d):
            m = rng.poisson(sup[i] * horizon)
            cand = np.sort(rng.random(m) * horizon)
            if mu.kind != "constant" and m:
                keep = rng.random(m) * sup[i] <= mu.value(cand)[:, i]
                cand = cand[keep]
            gen_t.append(cand)
            gen_k.append(np.full(cand.size, i))
    cur_t = np.concatenate(gen_t) if gen_t else np.zeros(0)
    cur_k = np.concatenate(gen_k).astype(int) if gen_k else np.zeros(0, int)
    keep = cur_t <= horizon
    cur_t, cur_k = cur_t[keep], cur_k[keep]
    all_t, all_k = [cur_t], [cur_k]
    total = cur_t.size
    while cur_t.size:
        nxt_t, nxt_k = [], []
        for j in range(d):
            parents = cur_t[cur_k == j]
            if not parents.size:
                continue
            for i in range(d):
                if norms[i, j] == 0:
                    continue
                kids = rng.poisson(norms[i, j], parents.size)
                m = int(kids.sum())
                if not m:
                    continue
                born = np.repeat(parents, kids) + phi.entries[i][j].sample_delay(rng, m)
                born = born[born <= horizon]
                nxt_t.append(born)
                nxt_k.append(np.full(born.size, i))
        cur_t = np.concatenate(nxt_t) if nxt_t else np.zeros(0)
        cur_k = np.concatenate(nxt_k).astype(int) if nxt_k else np.zeros(0, int)
        all_t.append(cur_t)
        all_k.append(cur_k)
        total += cur_t.size
        if total > cap:
            raise NumericalGuardError("event cap exceeded; the model is likely supercritical")
    t = np.concatenate(all_t)
    k = np.concatenate(all_k)
    return t, k


def simulate(phi: Kernel, mu: ExogenousInput, T: float, rng_seed=0, path_index: int = 0,
             method: str = "auto", cap: int = EVENT_CAP, refresh: float = 0.1) -> HawkesPath:
    """One Hawkes path on ``(0, T]``.

    ``method`` is ``"thinning"``, ``"cluster"`` or ``"auto"`` (cluster for kernels
    unbounded at the origin, thinning otherwise).  ``rng_seed`` may also be a
    ``numpy.random.Generator``.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    if mu.d != phi.d:
        raise ValueError("baseline and kernel dimensions differ")
    if isinstance(rng_seed, np.random.Generator):
        rng, seed_rec = rng_seed, ()
    else:
        rng, seed_rec = path_rng(rng_seed, path_index), (int(rng_seed), int(path_index))
    if method == "auto":
        method = "cluster" if phi.singular else "thinning"
    d = phi.d
    if method == "cluster":
        t, k = _cluster(phi, mu, T, rng, cap)
        events = [np.sort(t[k == i]) for i in range(d)]
    elif method == "thinning":
        if phi.singular:
            raise ValueError("thinning needs kernels bounded at the origin; use method='cluster'")
        if mu.kind != "impact" and phi.is_exponential:
            times, types = _thinning_exponential(phi, mu, T, rng, cap, refresh)
        else:
            times, types = _thinning_general(phi, mu, T, rng, cap, refresh)
        times, types = np.asarray(times), np.asarray(types, dtype=int)
        events = [times[types == i] for i in range(d)]
    else:
        raise ValueError(f"unknown method {method!r}")
    return HawkesPath(T, events, phi, mu, seed_rec)


# --------------------------------------------------------------------------
# baseline and functionals


def baseline_H(phi: Kernel, mu: ExogenousInput, delta: float, horizon: float,
               R: GridFunction | None = None) -> GridFunction:
    """``H = mu + R * mu`` with ``(R * mu)(t_k) = delta sum_{j=1}^k R(t_j) mu(t_k - t_j)``."""
    n = n_steps_for(delta, horizon)
    R = resolvent_grid(phi, delta, horizon) if R is None else R
    if R.n_steps < n or abs(R.delta - delta) > 1e-15:
        raise ValueError("resolvent grid does not match")
    m = mu.on_grid(delta, n)
    h = m.astype(float).copy()
    r = R.values[1:n + 1]
    for k in range(1, n + 1):
        h[k] += delta * np.einsum("jab,jb->a", r[:k], m[k - 1::-1])
    return GridFunction(delta, h)


def rescaled_baseline(R_n: GridFunction, mu_n: float | np.ndarray, scheme: ScalingScheme) -> GridFunction:
    """``H^(n) = mu^(n) / sqrt(n theta_n) + R^(n) * mu^(n)`` for a constant prelimit baseline ``mu_n``.

    The rescaled baseline is ``mu^(n) = sqrt(n / theta_n) mu_n``; ``R^(n) * mu^(n)``
    uses the right-endpoint integral of ``R^(n)``.
    """
    mu_n = np.atleast_1d(np.asarray(mu_n, dtype=float))
    mu_resc = np.sqrt(scheme.n / scheme.theta_n) * mu_n
    cum = R_n.integral().values
    return GridFunction(R_n.delta, mu_resc / scheme.gamma + cum @ mu_resc)


class FunctionalEvaluator:
    """Evaluates ``f * Lambda(T) + h * dNtilde(T)`` on sampled paths.

    With ``g = f - h`` the functional equals
    ``sum_events h(T - tau) + int g(T - s) mu(s) ds + sum_events C(T - tau)``
    where ``C_j(u) = int_0^u g(u - r) phi_{.j}(r) dr`` is tabulated once on the grid
    (cell masses of phi against cell-averaged g).
    """

    def __init__(self, phi: Kernel, mu: ExogenousInput, tf: TestFunctions, T: float):
        self.T, self.tf = T, tf
        delta = tf.delta
        n = n_steps_for(delta, T)
        if tf.f.n_steps < n:
            raise ValueError("test functions do not cover [0, T]")
        self.delta, self.n = delta, n
        g = (tf.f.values - tf.h.values)[:n + 1]
        g_mid = 0.5 * (g[1:] + g[:-1])                        # g on cells, shape (n, d)
        masses = phi.cell_masses(delta * np.arange(n + 1))     # (n, d, d)
        table = np.zeros((n + 1, phi.d), dtype=complex)
        for k in range(1, n + 1):
            # C_j(t_k) = sum_m g(t_k - cell_m) . phi_{.j}(cell_m)
            table[k] = np.einsum("mi,mij->j", g_mid[k - 1::-1], masses[:k])
        self.table = table
        self.h_vals = tf.h.values[:n + 1]
        t = delta * np.arange(n + 1)
        mu_mid = mu.integral(t[1:]) - mu.integral(t[:-1])      # exact cell integrals of mu
        self.base = np.einsum("mi,mi->", g_mid[::-1], mu_mid)

    def _interp(self, arr, u):
        times = self.delta * np.arange(self.n + 1)
        return (np.interp(u, times, arr.real) + 1j * np.interp(u, times, arr.imag))

    def __call__(self, path: HawkesPath) -> complex:
        total = complex(self.base)
        for j, ev in enumerate(path.events):
            ev = ev[ev <= self.T]
            if not ev.size:
                continue
            lag = self.T - ev
            total += self._interp(self.h_vals[:, j], lag).sum()
            total += self._interp(self.table[:, j], lag).sum()
        return total


def functional_sample(path: HawkesPath, tf: TestFunctions, T: float) -> complex:
    return FunctionalEvaluator(path.phi, path.mu, tf, T)(path)


def _mc_chunk(args):
    phi, mu, tf, T, seed, indices, method = args
    ev = FunctionalEvaluator(phi, mu, tf, T)
    return [np.exp(ev(simulate(phi, mu, T, seed, i, method))) for i in indices]


def mc_fourier_laplace(phi: Kernel, mu: ExogenousInput, tf: TestFunctions, T: float, n_paths: int,
                       seed: int = 0, workers: int = 1, method: str = "auto"):
    """Monte Carlo mean and standard error of ``exp{f * Lambda(T) + h * dNtilde(T)}``."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if tf.is_zero:
        return 1.0 + 0.0j, 0.0
    chunks = np.array_split(np.arange(n_paths), max(1, workers) * 4)
    jobs = [(phi, mu, tf, T, seed, c, method) for c in chunks if c.size]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_mc_chunk, jobs))
    else:
        parts = [_mc_chunk(j) for j in jobs]
    vals = np.concatenate([np.asarray(p, dtype=complex) for p in parts])
    mean = vals.mean()
    se = float(np.sqrt(np.mean(np.abs(vals - mean) ** 2) / max(n_paths - 1, 1))) if n_paths > 1 else 0.0
    return complex(mean), se


# --------------------------------------------------------------------------
# rescaling


@dataclass
class RescaledPath:
    scheme: ScalingScheme
    base: HawkesPath

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t * self.scheme.n > self.base.horizon * (1 + 1e-12)) or np.any(t < 0):
            raise ValueError("requested time beyond T / n")
        return t

    def N(self, t) -> np.ndarray:
        t = self._check(t)
        return self.base.counts(self.scheme.n * t) / (self.scheme.n * self.scheme.theta_n)

    def I_Lambda(self, t) -> np.ndarray:
        t = self._check(t)
        return self.base.compensator(self.scheme.n * t) / (self.scheme.n * self.scheme.theta_n)

    def N_tilde(self, t) -> np.ndarray:
        t = self._check(t)
        s = self.scheme.n * t
        return (self.base.counts(s) - self.base.compensator(s)) / self.scheme.gamma


def rescale(path: HawkesPath, scheme: ScalingScheme) -> RescaledPath:
    return RescaledPath(scheme, path)


def simulate_many(phi, mu, T, n_paths, seed=0, method="auto", workers=1):
    """Paths ``0..n_paths-1`` with per-path seeds; worker count does not change the output."""
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_simulate_one, [(phi, mu, T, seed, i, method) for i in range(n_paths)],
                                 chunksize=max(1, n_paths // (8 * workers))))
    return [simulate(phi, mu, T, seed, i, method) for i in range(n_paths)]


def _simulate_one(args):
    phi, mu, T, seed, i, method = args
    return simulate(phi, mu, T, seed, i, method)


def export_events(paths, fh):
    """Write ``path_id,component,time`` rows."""
    fh.write("path_id,component,time\n")
    for pid, p in enumerate(paths):
        for comp, ev in enumerate(p.events):
            for t in ev:
                fh.write(f"{pid},{comp},{t:.17g}\n")


__all__ = [
    "ExogenousInput", "HawkesPath", "RescaledPath", "TestFunctions", "FunctionalEvaluator",
    "intensity_at", "simulate", "simulate_many", "baseline_H", "rescaled_baseline",
    "functional_sample", "mc_fourier_laplace", "rescale", "path_rng", "export_events",
]
