"""Uniform time grids and the discrete convolution conventions shared by all modules.

A grid function holds samples ``values[k]`` at ``t_k = k * delta``.  Unless a
module says otherwise, a grid density is integrated with the right-endpoint
rule, so the mass of cell ``(t_m, t_{m+1}]`` is ``delta * values[m + 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial, log

import numpy as np


@dataclass(frozen=True)
class GridFunction:
    """Samples of a (vector or matrix valued) function on ``t_k = k * delta``."""

    delta: float
    values: np.ndarray

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        vals = np.asarray(self.values)
        if vals.ndim == 0:
            raise ValueError("values must carry a time axis")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.delta

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        k = int(round(t / self.delta))
        if abs(k * self.delta - t) > 1e-9 * max(1.0, abs(t)) or k < 0 or k > self.n_steps:
            raise ValueError(f"t={t} is not a grid point of this grid")
        return k

    def integral(self) -> "GridFunction":
        """Cumulative integral with the right-endpoint rule, zero at t=0."""
        out = np.zeros_like(self.values)
        out[1:] = self.delta * np.cumsum(self.values[1:], axis=0)
        return GridFunction(self.delta, out)

    def cell_masses(self) -> np.ndarray:
        return self.delta * self.values[1:]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def __call__(self, t):
        """Piecewise-linear interpolation (used for plotting and diagnostics only)."""
        t = np.asarray(t, dtype=float)
        flat = self.values.reshape(self.values.shape[0], -1)
        cols = [np.interp(t, self.times, flat[:, c].real) for c in range(flat.shape[1])]
        if np.iscomplexobj(flat):
            cols = [c + 1j * np.interp(t, self.times, flat[:, i].imag)
                    for i, c in enumerate(cols)]
        return np.stack(cols, axis=-1).reshape(t.shape + self.shape)


def constant_grid(value, delta: float, horizon: float) -> GridFunction:
    n = int(round(horizon / delta))
    val = np.asarray(value)
    return GridFunction(delta, np.broadcast_to(val, (n + 1,) + val.shape).copy())


def n_steps_for(delta: float, horizon: float) -> int:
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if horizon < delta * (1 - 1e-12):
        raise ValueError("horizon must be at least one step")
    return int(round(horizon / delta))


def lagged_sum(w: np.ndarray, masses: np.ndarray, k: int) -> np.ndarray:
    """``sum_{m=0}^{k-1} w[k-1-m] @ masses[m]`` for row vectors ``w`` and matrix masses.

    This is the convolution ``(w * Pi)(t_k)`` with left-boundary lags: cell ``m`` of
    the measure meets ``w`` at lag ``t_k - t_{m+1}``.
    """
    if k == 0:
        return np.zeros(masses.shape[-1], dtype=np.result_type(w, masses))
    return np.einsum("mi,mij->j", w[k - 1::-1], masses[:k])


@lru_cache(maxsize=None)
def stehfest_weights(order: int) -> tuple:
    """Gaver-Stehfest weights, computed with exact rational arithmetic."""
    if order < 2 or order % 2:
        raise ValueError("Gaver-Stehfest order must be an even integer >= 2")
    half = order // 2
    weights = []
    for k in range(1, order + 1):
        acc = Fraction(0)
        for j in range((k + 1) // 2, min(k, half) + 1):
            acc += Fraction(
                j ** half * factorial(2 * j),
                factorial(half - j) * factorial(j) * factorial(j - 1)
                * factorial(k - j) * factorial(2 * j - k),
            )
        weights.append(float((-1) ** (k + half) * acc))
    return tuple(weights)


def gaver_stehfest(transform, t: float, order: int = 12):
    """Invert a Laplace transform at ``t > 0``.

    ``transform`` maps a positive real to a scalar or array; the result has the
    same shape.
    """
    if t <= 0:
        raise ValueError("Gaver-Stehfest needs t > 0")
    scale = log(2.0) / t
    acc = 0.0
    for k, wk in enumerate(stehfest_weights(order), start=1):
        acc = acc + wk * np.asarray(transform(k * scale))
    return scale * acc
