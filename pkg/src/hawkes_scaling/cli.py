"""Config-driven experiment runner.

Each subcommand reads a JSON config, runs one experiment and writes CSV files
into ``--out``.  Exit codes: 0 success, 2 config error, 3 numerical guard.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from .bernstein import (ExtendedBernsteinMatrix, PotentialMeasure, build_prelimit_kernels,
                        classify_criticality, ebf_affine, ebf_power, is_admissible,
                        potential_from_resolvent_eq, potential_inversion_gs,
                        potential_measure_closed_form)
from .grid import GridFunction, n_steps_for
from .hawkes import ExogenousInput, baseline_H, mc_fourier_laplace
from .kernels import Kernel, kernel_samples, discrete_residual, l1_norm, laplace_identity_check, resolvent_grid
from .matlin import NumericalGuardError, build_admissible, spectral_radius
from .riccati import (TestFunctions, fourier_laplace_hawkes, riccati_convergence_report,
                      solve_prelimit)
from .sve import (LimitBaseline, baseline_from_gamma, mean_volterra, power_potential_cells,
                  simulate_atom_form, simulate_density_form, simulate_rough_cir)

NEAR_CRITICAL = 0.999


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


# --------------------------------------------------------------------------
# config helpers


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _get(cfg: dict, key: str, where: str, default=KeyError):
    if key in cfg:
        return cfg[key]
    if default is KeyError:
        raise ConfigError(f"missing field '{where}{key}'")
    return default


def _number(cfg, key, where, default=KeyError, positive=False, minimum=None):
    val = _get(cfg, key, where, default)
    try:
        val = float(val)
    except (TypeError, ValueError):
        raise ConfigError(f"field '{where}{key}' must be a number") from None
    if positive and not val > 0:
        raise ConfigError(f"field '{where}{key}' must be positive")
    if minimum is not None and val < minimum:
        raise ConfigError(f"field '{where}{key}' must be >= {minimum}")
    return val


def parse_grid(cfg: dict):
    g = _get(cfg, "grid", "")
    delta = _number(g, "delta", "grid.", positive=True)
    T = _number(g, "T", "grid.")
    if T < delta:
        raise ConfigError("field 'grid.T' must be >= grid.delta")
    return delta, T


def parse_paths(cfg: dict, default=1000) -> int:
    paths = int(_number(cfg, "paths", "", default))
    if paths < 1:
        raise ConfigError("field 'paths' must be >= 1")
    return paths


def parse_kernel(cfg: dict, key="kernel") -> Kernel:
    try:
        return Kernel.from_spec(_get(cfg, key, ""))
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"field '{key}': {exc}") from None


def parse_ebf(spec: dict, where="ebf.") -> ExtendedBernsteinMatrix:
    fam = _get(spec, "family", where)
    try:
        if fam == "affine":
            return ebf_affine(_get(spec, "b", where), _get(spec, "sigma", where))
        if fam == "power":
            return ebf_power(_get(spec, "c", where), _number(spec, "alpha", where),
                             _number(spec, "beta", where, 0.0), _get(spec, "b", where, 0.0))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"field '{where[:-1]}': {exc}") from None
    raise ConfigError(f"field '{where}family': unsupported family {fam!r}")


def _profile(spec, name: str):
    """Parametric test-function profile: a number, or {"form": ...}."""
    if isinstance(spec, (int, float)):
        return lambda t: np.full_like(t, float(spec))
    if not isinstance(spec, dict):
        raise ConfigError(f"field '{name}' must be a number or an object")
    form = _get(spec, "form", name + ".")
    if form == "constant":
        v = _number(spec, "value", name + ".")
        return lambda t: np.full_like(t, v)
    if form == "exponential-decay":
        v, k = _number(spec, "value", name + "."), _number(spec, "rate", name + ".", minimum=0.0)
        return lambda t: v * np.exp(-k * t)
    if form == "sinusoidal":
        v, w = _number(spec, "amplitude", name + "."), _number(spec, "frequency", name + ".")
        return lambda t: v * np.sin(w * t)
    raise ConfigError(f"field '{name}.form': unsupported form {form!r}")


def parse_test_functions(spec: dict, delta: float, horizon: float, d: int, where="test.") -> TestFunctions:
    """``f`` is real (``Re f <= 0``); ``h`` is given by its imaginary part."""
    f = _profile(_get(spec, "f", where, 0.0), where + "f")
    h = _profile(_get(spec, "h_imag", where, 0.0), where + "h_imag")
    try:
        return TestFunctions.from_callables(
            lambda t: np.repeat(f(t)[:, None], d, axis=1),
            lambda t: 1j * np.repeat(h(t)[:, None], d, axis=1), delta, horizon)
    except ValueError as exc:
        raise ConfigError(f"field '{where[:-1]}': {exc}") from None


def _seed(cfg: dict, override):
    seed = override if override is not None else _get(cfg, "seed", "", 0)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError("field 'seed' must be an integer") from None
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError("field 'seed' must be an unsigned 64-bit integer")
    return seed


# --------------------------------------------------------------------------
# output


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path: str, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _matrix_names(prefix, d):
    return [f"{prefix}_{i}{j}" for i in range(d) for j in range(d)]


# --------------------------------------------------------------------------
# commands


def cmd_resolvent(cfg: dict, out: str, seed=None, threads: int = 1):
    phi = parse_kernel(cfg)
    delta, T = parse_grid(cfg)
    lam = _number(cfg, "laplace_lambda", "", 1.0, positive=True)
    rule = _get(cfg, "rule", "", "auto")
    rho = spectral_radius(l1_norm(phi))
    if rho > NEAR_CRITICAL:
        warnings.warn(f"spectral radius of the kernel norm is {rho:.6f} > {NEAR_CRITICAL}; "
                      "the resolvent grows quickly", RuntimeWarning, stacklevel=2)
    R = resolvent_grid(phi, delta, T, rule)
    I_R = R.integral()
    d = phi.d
    rows = [[t, *r.ravel(), *i.ravel()] for t, r, i in zip(R.times, R.values, I_R.values)]
    write_csv(os.path.join(out, "resolvent.csv"),
              ["t", *_matrix_names("R", d), *_matrix_names("I_R", d)], rows)
    residual = laplace_identity_check(phi, R, lam)
    disc = discrete_residual(kernel_samples(phi, delta, R.n_steps, rule), R.values, delta)
    write_csv(os.path.join(out, "resolvent_summary.csv"),
              ["spectral_radius_l1", "laplace_lambda", "laplace_residual", "discrete_residual"],
              [[rho, lam, residual, disc]])
    return {"spectral_radius_l1": rho, "laplace_residual": residual}


def _fl_target(phi, mu, tf, T, delta):
    R = resolvent_grid(phi, delta, T)
    H = baseline_H(phi, mu, delta, T, R)
    return fourier_laplace_hawkes(solve_prelimit(R, tf, T), H, T)


def cmd_fl_verify(cfg: dict, out: str, seed=None, threads: int = 1):
    phi = parse_kernel(cfg)
    mu_raw = _get(cfg, "mu", "")
    try:
        mu = ExogenousInput.constant(mu_raw)
    except ValueError as exc:
        raise ConfigError(f"field 'mu': {exc}") from None
    if mu.d != phi.d:
        raise ConfigError("field 'mu' must have one entry per kernel row")
    delta = _number(cfg, "delta", "", 1e-2, positive=True)
    paths = parse_paths(cfg)
    s = _seed(cfg, seed)
    cases = _get(cfg, "cases", "")
    if not isinstance(cases, list) or not cases:
        raise ConfigError("field 'cases' must be a non-empty list")
    rows = []
    for idx, case in enumerate(cases):
        where = f"cases[{idx}]."
        T = _number(case, "T", where)
        if T < delta:
            raise ConfigError(f"field '{where}T' must be >= delta")
        tf = parse_test_functions(case, delta, T, phi.d, where)
        target = _fl_target(phi, mu, tf, T, delta)
        mean, se = mc_fourier_laplace(phi, mu, tf, T, paths, seed=s + idx, workers=threads)
        gap = abs(mean - target)
        z = gap / se if se > 0 else 0.0
        rows.append([idx, T, mean.real, mean.imag, se, target.real, target.imag, z])
    write_csv(os.path.join(out, "fl_verify.csv"),
              ["case", "T", "mc_mean_re", "mc_mean_im", "mc_se", "riccati_re", "riccati_im", "z_score"],
              rows)
    return rows


def _potential_for(F, delta, T, S):
    try:
        return potential_measure_closed_form(F, delta, T)
    except ValueError:
        return potential_inversion_gs(S, F, delta, T)


def cmd_scaling_study(cfg: dict, out: str, seed=None, threads: int = 1):
    F = parse_ebf(_get(cfg, "ebf", ""))
    delta, T = parse_grid(cfg)
    K = np.asarray(_get(cfg, "K", "", np.eye(F.d).tolist()), dtype=float)
    try:
        S = build_admissible(K)
    except ValueError as exc:
        raise ConfigError(f"field 'K': {exc}") from None
    ok, report = is_admissible(S, F)
    if not ok:
        raise ConfigError(f"target (K, ebf) is not admissible: sign changes at {report['sign_changes']}, "
                          f"near-singular at {report['near_singular']}")
    ns = _get(cfg, "n", "")
    if not isinstance(ns, list) or not ns or any(int(n) != n or n < 1 for n in ns):
        raise ConfigError("field 'n' must be a non-empty list of positive integers")
    a = np.broadcast_to(np.asarray(_get(cfg, "a", "", 1.0), dtype=float), (F.d,))
    tf = parse_test_functions(_get(cfg, "test", ""), delta, T, F.d)
    Pi = _potential_for(F, delta, T, S)
    # Upsilon = Pi * (a t): right-endpoint integral of the cumulative potential measure
    Ups = GridFunction(delta, np.einsum("kij,j->ki", Pi.cumulative().values, a)).integral()
    phis, schemes = [], []
    for n in ns:
        phi_n, scheme = build_prelimit_kernels(F, K, int(n))
        phis.append(phi_n)
        schemes.append(scheme)
    rows, decreasing = riccati_convergence_report(phis, schemes, Pi, Ups, tf, T, mu_n=a)
    write_csv(os.path.join(out, "scaling_study.csv"),
              ["n", "theta_n", "gap", "sup_gap_V", "rescaled_re", "rescaled_im", "limit_re", "limit_im"],
              [[r["n"], r["theta_n"], r["gap"], r["sup_gap_V"], r["rescaled_value"].real,
                r["rescaled_value"].imag, r["limit_value"].real, r["limit_value"].imag] for r in rows])
    return rows, decreasing


def _sve_upsilon(spec: dict, Pi: PotentialMeasure, delta: float, T: float) -> LimitBaseline:
    form = _get(spec, "form", "upsilon.")
    K = n_steps_for(delta, T)
    t = delta * np.arange(K + 1)
    if form == "linear":
        rate = np.atleast_1d(np.asarray(_get(spec, "rate", "upsilon."), dtype=float))
        return LimitBaseline(GridFunction(delta, np.outer(t, rate)))
    if form == "potential-drift":
        a = np.broadcast_to(np.asarray(_get(spec, "a", "upsilon."), dtype=float), (Pi.d,))
        return baseline_from_gamma(Pi, GridFunction(delta, np.outer(t, a)))
    raise ConfigError(f"field 'upsilon.form': unsupported form {form!r}")


def cmd_sve(cfg: dict, out: str, seed=None, threads: int = 1):
    delta, T = parse_grid(cfg)
    paths = parse_paths(cfg)
    s = _seed(cfg, seed)
    scheme = _get(cfg, "scheme", "")
    K = n_steps_for(delta, T)
    if scheme == "rough_cir":
        alpha = _number(cfg, "alpha", "")
        beta = _number(cfg, "beta", "", 0.0, minimum=0.0)
        a, b, c = (_get(cfg, k, "") for k in ("a", "b", "c"))
        try:
            ens = simulate_rough_cir(alpha, beta, a, b, c, T, delta, paths, s)
        except ValueError as exc:
            raise ConfigError(f"field 'alpha': {exc}") from None
        pi0 = power_potential_cells(c, alpha, beta, delta, K)
        d = pi0.d
        gamma = GridFunction(delta, np.outer(delta * np.arange(K + 1),
                                             np.broadcast_to(np.asarray(a, dtype=float), (d,))))
        ups = np.vstack([np.zeros(d), np.cumsum(mean_volterra(pi0, b, gamma, T), axis=0)])
    elif scheme in ("density", "atom"):
        pot = _get(cfg, "potential", "")
        if pot == "zero":
            d = len(np.atleast_1d(_get(_get(cfg, "upsilon", ""), "rate", "upsilon.", [0.0])))
            Pi = PotentialMeasure(delta, np.zeros((d, d)), np.zeros((K, d, d)))
        else:
            Pi = potential_measure_closed_form(parse_ebf(pot, "potential."), delta, T)
            atom = _number(cfg, "atom", "", 0.0, minimum=0.0)
            if atom:
                Pi = PotentialMeasure(delta, atom * np.eye(Pi.d), Pi.cell_masses)
        base = _sve_upsilon(_get(cfg, "upsilon", ""), Pi, delta, T)
        sim = simulate_density_form if scheme == "density" else simulate_atom_form
        ens = sim(Pi, base, T, delta, paths, s)
        ups = base.Upsilon.values[:K + 1]
        d = Pi.d
    else:
        raise ConfigError(f"field 'scheme': unsupported scheme {scheme!r}")

    n_traj = min(int(_number(cfg, "trajectories", "", 5, minimum=0)), paths)
    traj = [[p, t, *ens.Xi[p, k], *ens.M[p, k]]
            for p in range(n_traj) for k, t in enumerate(ens.times)]
    write_csv(os.path.join(out, "sve_trajectories.csv"),
              ["path", "t", *[f"Xi_{i}" for i in range(d)], *[f"M_{i}" for i in range(d)]], traj)
    rows = []
    for k, t in enumerate(ens.times):
        mx, se = ens.mean_Xi(k) if paths > 1 else (ens.Xi[0, k], np.zeros(d))
        vm, vse = ens.var_M(k) if paths > 1 else (np.zeros(d), np.zeros(d))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (mx - ups[k]) / se, 0.0)
        rows.append([t, *mx, *se, *ups[k], *z, *vm, *vse])
    write_csv(os.path.join(out, "sve_summary.csv"),
              ["t", *[f"mean_Xi_{i}" for i in range(d)], *[f"se_Xi_{i}" for i in range(d)],
               *[f"Upsilon_{i}" for i in range(d)], *[f"audit_z_{i}" for i in range(d)],
               *[f"var_M_{i}" for i in range(d)], *[f"se_var_M_{i}" for i in range(d)]], rows)
    write_csv(os.path.join(out, "sve_audit.csv"), ["scheme", "paths", "truncation_rate", "flagged"],
              [[ens.scheme, paths, ens.audit["truncation_rate"], ens.audit["flagged"]]])
    return ens


def cmd_potential(cfg: dict, out: str, seed=None, threads: int = 1):
    F = parse_ebf(_get(cfg, "ebf", ""))
    delta, T = parse_grid(cfg)
    methods = _get(cfg, "methods", "", ["closed", "gs", "resolvent"])
    K = np.asarray(_get(cfg, "K", "", np.eye(F.d).tolist()), dtype=float)
    try:
        S = build_admissible(K)
    except ValueError as exc:
        raise ConfigError(f"field 'K': {exc}") from None
    results = {}
    for m in methods:
        if m == "closed":
            try:
                results[m] = potential_measure_closed_form(F, delta, T)
            except ValueError:
                continue
        elif m == "gs":
            results[m] = potential_inversion_gs(S, F, delta, T,
                                                gs_order=int(_number(cfg, "gs_order", "", 12)))
        elif m == "resolvent":
            b = F.params["b"]
            drift_free = (ebf_affine(np.zeros_like(b), F.params["sigma"]) if F.family == "affine"
                          else ebf_power(F.params["c"], F.params["alpha"], F.params["beta"]))
            pi0 = potential_measure_closed_form(drift_free, delta, T)
            results[m] = potential_from_resolvent_eq(pi0, b)
        else:
            raise ConfigError(f"field 'methods': unsupported method {m!r}")
    if not results:
        raise ConfigError("field 'methods': no method applies to this ebf")
    d = F.d
    names = list(results)
    cums = {m: results[m].cumulative().values for m in names}
    times = delta * np.arange(n_steps_for(delta, T) + 1)
    rows = [[t, *[v for m in names for v in cums[m][k].ravel()]] for k, t in enumerate(times)]
    write_csv(os.path.join(out, "potential.csv"),
              ["t", *[c for m in names for c in _matrix_names(f"Pi_{m}", d)]], rows)
    gaps = []
    for i, m1 in enumerate(names):
        for m2 in names[i + 1:]:
            gaps.append([m1, m2, float(np.max(np.abs(cums[m1] - cums[m2])))])
    write_csv(os.path.join(out, "potential_gaps.csv"), ["method_a", "method_b", "sup_gap"], gaps)
    label = classify_criticality(F if F.d == 1 else results[names[0]])
    write_csv(os.path.join(out, "potential_criticality.csv"), ["label", "heuristic", "detail"],
              [[label.label, label.heuristic, label.detail]])
    return {"gaps": gaps, "label": label.label}


COMMANDS = {
    "resolvent": cmd_resolvent,
    "fl-verify": cmd_fl_verify,
    "scaling-study": cmd_scaling_study,
    "sve": cmd_sve,
    "potential": cmd_potential,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hawkes-scaling", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker processes for Monte Carlo")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            COMMANDS[args.command](cfg, args.out, args.seed, args.threads)
    except NumericalGuardError as exc:
        print(f"numerical guard: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
