"""Small dense matrix tools for nonnegative matrices.

Spectral radius by power iteration, a real Schur form computed with our own
Hessenberg/Francis QR sweep (dimension <= 8), a two-by-two block inverse and
the orthogonal block structure ``K = Q U Q^T`` used to reduce an admissible
Bernstein matrix to its critical block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

DEFAULT_TOL = 1e-10
STRUCTURE_TOL = 1e-8
CLUSTER_TOL = 1e-6
COND_CAP = 1e12


class NumericalGuardError(RuntimeError):
    """A numerical routine hit a guard (non-convergence, singularity, explosion)."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def _square_nonnegative(a, name="A") -> np.ndarray:
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if np.any(m < 0):
        raise ValueError(f"{name} must have nonnegative entries")
    return m


def inf_norm(a) -> float:
    a = np.atleast_2d(a)
    return float(np.max(np.sum(np.abs(a), axis=1))) if a.size else 0.0


# --------------------------------------------------------------------------
# spectral radius


def _collatz_wielandt(b: np.ndarray, tol: float, max_iter: int):
    # B = A + I keeps iterates strictly positive and removes periodicity.
    x = np.ones(b.shape[0])
    for _ in range(max_iter):
        y = b @ x
        ratios = y / x
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol:
            return 0.5 * (lo + hi)
        x = y / np.linalg.norm(y)
        if x.min() < 1e-280:
            return None
    return None


def spectral_radius(a, tol: float = DEFAULT_TOL, max_iter: int = 20000) -> float:
    """Perron root of a nonnegative square matrix.

    Collatz-Wielandt bounds on the power iterates of ``A + I`` settle the
    irreducible case.  A reducible input is split into the strongly connected
    components of its support graph (each diagonal block is irreducible) and
    the largest block root wins; blocks that still defeat the bounds fall back
    to QR deflation.
    """
    m = _square_nonnegative(a)
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not np.any(m):
        return 0.0
    n_comp, labels = connected_components(m > 0, directed=True, connection="strong")
    best = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        block = m[np.ix_(idx, idx)]
        if idx.size == 1:
            best = max(best, float(block[0, 0]))
            continue
        est = _collatz_wielandt(block + np.eye(idx.size), tol, max_iter)
        if est is not None:
            best = max(best, float(est - 1.0))
        else:
            _, u = _schur_unordered(block, 200 * idx.size ** 2)
            best = max(best, float(np.max(np.abs(quasi_triangular_eigenvalues(u)))))
    return max(best, 0.0)


# --------------------------------------------------------------------------
# real Schur form


def _householder(x: np.ndarray):
    """Unit vector v with (I - 2vv^T)x parallel to e_1, or None if x already is."""
    tail = np.linalg.norm(x[1:])
    if tail == 0.0:
        return None
    alpha = -np.copysign(np.hypot(x[0], tail), x[0])
    v = x.astype(float).copy()
    v[0] -= alpha
    return v / np.linalg.norm(v)


def _reflect_rows(h, v, rows, cols):
    block = h[rows, cols]
    h[rows, cols] = block - 2.0 * np.outer(v, v @ block)


def _reflect_cols(h, v, rows, cols):
    block = h[rows, cols]
    h[rows, cols] = block - 2.0 * np.outer(block @ v, v)


def _hessenberg(a: np.ndarray):
    n = a.shape[0]
    h, q = a.copy(), np.eye(n)
    for k in range(n - 2):
        v = _householder(h[k + 1:, k])
        if v is None:
            continue
        _reflect_rows(h, v, slice(k + 1, n), slice(0, n))
        _reflect_cols(h, v, slice(0, n), slice(k + 1, n))
        _reflect_cols(q, v, slice(0, n), slice(k + 1, n))
        h[k + 2:, k] = 0.0
    return q, h


def _split_real_pair(h, q, p):
    """Triangularize the 2x2 diagonal block at p if its eigenvalues are real."""
    a, b, c, d = h[p, p], h[p, p + 1], h[p + 1, p], h[p + 1, p + 1]
    half_tr, det = 0.5 * (a + d), a * d - b * c
    disc = half_tr * half_tr - det
    if disc < 0:
        return
    lam = half_tr + np.sqrt(disc)  # larger eigenvalue first
    cands = [np.array([b, lam - a]), np.array([lam - d, c])]
    v = max(cands, key=np.linalg.norm)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return
    v = v / nv
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    g = np.array([[v[0], -v[1]], [v[1], v[0]]])
    h[p:p + 2, :] = g.T @ h[p:p + 2, :]
    h[:, p:p + 2] = h[:, p:p + 2] @ g
    q[:, p:p + 2] = q[:, p:p + 2] @ g
    h[p + 1, p] = 0.0


def _francis_step(h, q, lo, hi, exceptional):
    n = h.shape[0]
    if exceptional:
        w = abs(h[hi, hi - 1]) + abs(h[hi - 1, hi - 2])
        s = 2.0 * (0.75 * w + h[hi, hi])
        t = (0.75 * w + h[hi, hi]) ** 2 - 0.4375 * w * w
    else:
        s = h[hi - 1, hi - 1] + h[hi, hi]
        t = h[hi - 1, hi - 1] * h[hi, hi] - h[hi - 1, hi] * h[hi, hi - 1]
    x = h[lo, lo] ** 2 + h[lo, lo + 1] * h[lo + 1, lo] - s * h[lo, lo] + t
    y = h[lo + 1, lo] * (h[lo, lo] + h[lo + 1, lo + 1] - s)
    z = h[lo + 1, lo] * h[lo + 2, lo + 1]
    for k in range(lo, hi - 1):
        v = _householder(np.array([x, y, z]))
        if v is not None:
            r = max(lo, k - 1)
            _reflect_rows(h, v, slice(k, k + 3), slice(r, n))
            top = min(k + 4, hi + 1)
            _reflect_cols(h, v, slice(0, top), slice(k, k + 3))
            _reflect_cols(q, v, slice(0, n), slice(k, k + 3))
            if k > lo:
                h[k + 1:k + 3, k - 1] = 0.0
        x = h[k + 1, k]
        y = h[k + 2, k]
        if k < hi - 2:
            z = h[k + 3, k]
    v = _householder(np.array([x, y]))
    if v is not None:
        _reflect_rows(h, v, slice(hi - 1, hi + 1), slice(hi - 2, n))
        _reflect_cols(h, v, slice(0, hi + 1), slice(hi - 1, hi + 1))
        _reflect_cols(q, v, slice(0, n), slice(hi - 1, hi + 1))
        h[hi, hi - 2] = 0.0


def _schur_unordered(a: np.ndarray, max_iter: int):
    n = a.shape[0]
    q, h = _hessenberg(a)
    eps = np.finfo(float).eps
    hi, its, since_deflation = n - 1, 0, 0
    while hi >= 0:
        lo = hi
        while lo > 0:
            scale = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if scale == 0.0:
                scale = inf_norm(h)
            if abs(h[lo, lo - 1]) <= eps * scale:
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            hi -= 1
            since_deflation = 0
            continue
        if lo == hi - 1:
            _split_real_pair(h, q, hi - 1)
            hi -= 2
            since_deflation = 0
            continue
        its += 1
        since_deflation += 1
        if its > max_iter:
            raise NumericalGuardError("real Schur QR iteration did not converge")
        _francis_step(h, q, lo, hi, exceptional=since_deflation % 11 == 10)
    h[np.tril_indices(n, -2)] = 0.0
    return q, h


def quasi_triangular_eigenvalues(u: np.ndarray) -> np.ndarray:
    """Eigenvalues read off the 1x1 and 2x2 diagonal blocks of a quasi-triangular matrix."""
    n = u.shape[0]
    out, k = [], 0
    while k < n:
        if k + 1 < n and u[k + 1, k] != 0.0:
            a, b, c, d = u[k, k], u[k, k + 1], u[k + 1, k], u[k + 1, k + 1]
            half_tr = 0.5 * (a + d)
            disc = complex(half_tr * half_tr - (a * d - b * c))
            root = np.sqrt(disc)
            out.extend([half_tr + root, half_tr - root])
            k += 2
        else:
            out.append(complex(u[k, k]))
            k += 1
    return np.array(out)


def _orient(cols: np.ndarray) -> np.ndarray:
    for j in range(cols.shape[1]):
        i = int(np.argmax(np.abs(cols[:, j])))
        if cols[i, j] < 0:
            cols[:, j] = -cols[:, j]
    return cols


def _lead_with_root(a, q, u, r, kappa, max_iter):
    """Reorder so that the eigenvalue r (multiplicity kappa) fills the leading block."""
    d = a.shape[0]
    shifted = np.linalg.matrix_power(a - r * np.eye(d), kappa)
    _, _, vt = np.linalg.svd(shifted)
    q1 = _orient(vt[d - kappa:].T.copy())
    full, _ = np.linalg.qr(np.hstack([q1, np.eye(d)]))
    q2 = _orient(full[:, kappa:d].copy())
    basis = np.hstack([q1, q2])
    t = basis.T @ a @ basis
    t[kappa:, :kappa] = 0.0
    z1, _ = _schur_unordered(t[:kappa, :kappa], max_iter)
    z2, _ = _schur_unordered(t[kappa:, kappa:], max_iter) if kappa < d else (np.eye(0), None)
    z = np.zeros((d, d))
    z[:kappa, :kappa], z[kappa:, kappa:] = z1, z2
    qq = basis @ z
    uu = qq.T @ a @ qq
    uu[kappa:, :kappa] = 0.0
    uu[np.abs(uu) < 1e-15 * max(inf_norm(a), 1.0)] = 0.0
    return qq, uu


def real_schur(a, tol: float = DEFAULT_TOL):
    """Real Schur form ``A = Q U Q^T`` for ``d <= 8``.

    For nonnegative input with Perron root r of algebraic multiplicity kappa,
    the leading kappa x kappa block of U is upper triangular with diagonal r.
    """
    m = as_matrix(a, "A")
    d = m.shape[0]
    if m.shape[1] != d:
        raise ValueError("A must be square")
    if d > 8:
        raise ValueError("real_schur is meant for d <= 8")
    max_iter = 200 * d * d
    q, u = _schur_unordered(m, max_iter)
    if np.all(m >= 0) and np.any(m):
        eig = quasi_triangular_eigenvalues(u)
        r = float(np.max(np.abs(eig)))
        close = np.abs(eig - r) <= CLUSTER_TOL * max(1.0, r)
        kappa = int(np.sum(close))
        lead = np.diag(u)[:kappa]
        leading_ok = (
            np.all(np.abs(lead - r) <= CLUSTER_TOL * max(1.0, r))
            and (kappa == d or u[kappa, kappa - 1] == 0.0)
            and np.all(np.diag(u, -1)[:kappa - 1] == 0.0)
        )
        if not leading_ok:
            q, u = _lead_with_root(m, q, u, r, kappa, max_iter)
    scale = max(inf_norm(m), 1.0)
    if inf_norm(m - q @ u @ q.T) > tol * scale * 10 or inf_norm(q.T @ q - np.eye(d)) > tol * 10:
        raise NumericalGuardError("real Schur reconstruction failed its tolerance check")
    return q, u


# --------------------------------------------------------------------------
# block inverse


def block_inverse_2x2(a11, a12, a21, a22, cond_cap: float = COND_CAP) -> np.ndarray:
    """Inverse of ``[[A11, A12], [A21, A22]]`` through the Schur complement of A11."""
    a11, a12, a21, a22 = (as_matrix(x, n) for x, n in
                          ((a11, "A11"), (a12, "A12"), (a21, "A21"), (a22, "A22")))
    p, q = a11.shape[0], a22.shape[0]
    if a11.shape != (p, p) or a22.shape != (q, q) or a12.shape != (p, q) or a21.shape != (q, p):
        raise ValueError("inconsistent block shapes")
    if np.linalg.cond(a11) > cond_cap:
        raise NumericalGuardError("A11 is singular or ill-conditioned")
    a11_inv = np.linalg.inv(a11)
    schur = a22 - a21 @ a11_inv @ a12
    if np.linalg.cond(schur) > cond_cap:
        raise NumericalGuardError("Schur complement is singular or ill-conditioned")
    s_inv = np.linalg.inv(schur)
    top_right = -a11_inv @ a12 @ s_inv
    bottom_left = -s_inv @ a21 @ a11_inv
    top_left = a11_inv - top_right @ a21 @ a11_inv
    return np.block([[top_left, top_right], [bottom_left, s_inv]])


# --------------------------------------------------------------------------
# admissible structure


@dataclass(frozen=True)
class AdmissibleStructure:
    K: np.ndarray
    ell: int
    Q: np.ndarray
    U: np.ndarray
    lambda_plus: float = 0.0

    @property
    def d(self) -> int:
        return self.K.shape[0]

    @property
    def U_IJ(self) -> np.ndarray:
        return self.U[:self.ell, self.ell:]

    @property
    def U_JJ(self) -> np.ndarray:
        return self.U[self.ell:, self.ell:]


def _verify_structure(k, ell, q, u, lambda_plus, tol):
    d = k.shape[0]
    problems = []
    if q.shape != (d, d) or u.shape != (d, d):
        problems.append("Q and U must be d x d")
    elif not 1 <= ell <= d:
        problems.append(f"ell={ell} outside 1..{d}")
    else:
        if inf_norm(q.T @ q - np.eye(d)) > tol:
            problems.append("Q is not orthogonal")
        if inf_norm(k - q @ u @ q.T) > tol * max(1.0, inf_norm(k)):
            problems.append("K != Q U Q^T")
        if inf_norm(u[:ell, :ell] - np.eye(ell)) > tol:
            problems.append("U_II is not the identity")
        if ell < d:
            if np.max(np.abs(u[ell:, :ell])) > tol:
                problems.append("U_JI is not zero")
            rho_jj = np.max(np.abs(np.linalg.eigvals(u[ell:, ell:])))
            if rho_jj >= 1 - tol:
                problems.append(f"spectral radius of U_JJ is {rho_jj:.6g} >= 1")
    if lambda_plus < 0:
        problems.append("lambda_plus must be nonnegative")
    if problems:
        raise ValueError("admissible structure check failed: " + "; ".join(problems))


def build_admissible(K, tol: float = STRUCTURE_TOL, Q=None, U=None, ell=None,
                     lambda_plus: float = 0.0) -> AdmissibleStructure:
    """Compute (or verify user-supplied) factors ``K = Q U Q^T`` with ``U_II = Id``."""
    k = _square_nonnegative(K, "K")
    d = k.shape[0]
    rho = spectral_radius(k)
    if abs(rho - 1.0) > tol:
        raise ValueError(f"spectral radius of K is {rho:.12g}, expected 1")
    if Q is not None or U is not None:
        if Q is None or U is None:
            raise ValueError("supply both Q and U or neither")
        q, u = as_matrix(Q, "Q"), as_matrix(U, "U")
        if ell is None:
            ell = 1
            while ell < d and abs(u[ell, ell] - 1.0) <= tol and not np.any(np.abs(u[ell, :ell]) > tol):
                ell += 1
        _verify_structure(k, int(ell), q, u, lambda_plus, tol)
        return AdmissibleStructure(k, int(ell), q, u, float(lambda_plus))
    q, u = real_schur(k)
    eig = quasi_triangular_eigenvalues(u)
    n_one = int(np.sum(np.abs(eig - 1.0) <= CLUSTER_TOL))
    if inf_norm(u[:n_one, :n_one] - np.eye(n_one)) > 10 * CLUSTER_TOL:
        raise ValueError("eigenvalue 1 of K is defective; no block with U_II = Id exists")
    u = u.copy()
    u[:n_one, :n_one] = np.eye(n_one)
    u[n_one:, :n_one] = 0.0
    _verify_structure(k, n_one, q, u, lambda_plus, tol)
    return AdmissibleStructure(k, n_one, q, u, float(lambda_plus))
