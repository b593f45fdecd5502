"""Acceptance gate: the nine primary criteria at their stated tolerances.

Each test prints one ``ACCEPTANCE <k> PASS|FAIL`` line (collected into the
pytest terminal summary). Run standalone with ``python tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest
from scipy.special import jn_zeros

from elastcert.certificate import certify
from elastcert.domain import DomainSpec, build_grid, change_of_variables_field, dirichlet_lambda1
from elastcert.energy import ImagePenalty, eval_energy, phi_h_conjugate, phi_h_derivative, phi_h_value
from elastcert.equilibrium import (gallery_problem, second_variation_torsion, sine_basis,
                                   torsion_test_family)
from elastcert.relaxation import (build_dual_competitor, continuity_residual, dual_energy, lift,
                                  relaxed_energy, solve_relaxation, weak_duality_audit)

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # standalone run
    ACCEPTANCE_LINES = []

pytestmark = pytest.mark.slow


def report(k, ok, detail):
    line = f"ACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_affine(seed):
    rng = np.random.default_rng(seed)
    while True:
        A = np.eye(2) + 0.3 * rng.standard_normal((2, 2))
        if np.linalg.det(A) > 0.5:
            return A


AFFINE_SEEDS = (11, 12, 13)


# 1 ----------------------------------------------------------------------------------

def test_eigenvalue_oracles():
    cases = [("interval", DomainSpec.interval(), 256, math.pi ** 2, 0.005),
             ("square", DomainSpec.unit_square(), 128, 2 * math.pi ** 2, 0.005),
             ("cylinder", DomainSpec.cylinder(), 32, jn_zeros(0, 1)[0] ** 2 + math.pi ** 2, 0.03)]
    parts, ok = [], True
    for name, spec, n, exact, rel in cases:
        t = time.perf_counter()
        lam = dirichlet_lambda1(build_grid(spec, n)).lambda1
        dt = time.perf_counter() - t
        err = abs(lam - exact) / exact
        ok &= err <= rel and dt < 60
        parts.append(f"{name} {lam:.5f} (rel err {err:.2e} <= {rel}, {dt:.1f}s)")
    report(1, ok, "; ".join(parts))


# 2 ----------------------------------------------------------------------------------

def test_affine_certification():
    parts, ok = [], True
    for seed in AFFINE_SEEDS:
        A = random_affine(seed)
        t = time.perf_counter()
        spec, pair = gallery_problem("affine", {"A": A}, 32)
        rep = certify(pair, spec)
        dt = time.perf_counter() - t
        ok &= rep.el_residual <= 1e-10 and rep.verdict == "certified_unique" and dt < 10
        parts.append(f"det {np.linalg.det(A):.3f}: {rep.verdict}, res {rep.el_residual:.1e}, {dt:.1f}s")
    report(2, ok, "; ".join(parts))


# 3 ----------------------------------------------------------------------------------

def test_torsion_dichotomy():
    t = time.perf_counter()
    spec1, pair1 = gallery_problem("torsion", {"a": 1.0}, 24)
    eig = dirichlet_lambda1(spec1.grid_omega)
    r1 = certify(pair1, spec1, eigen=eig)
    spec4, pair4 = gallery_problem("torsion", {"a": 4.1}, 24)
    r4 = certify(pair4, spec4, eigen=eig)
    q = torsion_test_family(spec1.grid_omega, 1, eig.eigenfunction.values)[-1]
    sv = second_variation_torsion(8.0, q, spec1.grid_omega)
    dt = time.perf_counter() - t
    ok = (r1.verdict == "certified_unique" and r4.verdict == "inconclusive" and r4.margin < 0
          and sv < 0 and dt < 300)
    report(3, ok, f"a=1 {r1.verdict} (margin {r1.margin:.3f}); a=4.1 {r4.verdict} (margin {r4.margin:.3f}); "
                  f"a=8 second variation {sv:.3f}; {dt:.1f}s")


# 4 ----------------------------------------------------------------------------------

def test_weak_duality():
    t = time.perf_counter()
    spec, _ = gallery_problem("affine", {"A": [[1.0]]}, 15)
    assert spec.grid_omega.n_nodes == spec.grid_D.n_nodes == 16
    res = weak_duality_audit(spec, pairs=200, seed=0)
    dt = time.perf_counter() - t
    ok = res["violations"] == 0 and res["min_gap_plus_slack"] >= -1e-9 and dt < 120
    report(4, ok, f"{res['pairs']} pairs, violations {res['violations']}, min gap {res['min_gap']:.3e}, "
                  f"min gap+slack {res['min_gap_plus_slack']:.3e}, max slack {res['max_slack']:.1e}, {dt:.1f}s")


# 5 ----------------------------------------------------------------------------------

def _tightness(family, params, n, subsamples):
    spec, pair = gallery_problem(family, params, n)
    E = eval_energy(pair.u, spec, subsamples)
    dual = abs(dual_energy(build_dual_competitor(pair, spec), spec) - E) / E
    lifted = abs(relaxed_energy(lift(pair.u, spec, subsamples), spec) - E) / E
    return dual, lifted


def _halves(coarse, fine, floor=1e-12):
    return fine <= 0.5 * coarse or (coarse <= floor and fine <= floor)


def test_dual_competitor_tightness():
    t = time.perf_counter()
    A = [[1.2, 0.3], [0.1, 0.9]]
    rows = {"affine": [_tightness("affine", {"A": A}, n, 8) for n in (32, 64)],
            "torsion": [_tightness("torsion", {"a": 1.0}, n, 4) for n in (12, 24)]}
    ok, parts = True, []
    for name, ((d0, l0), (d1, l1)) in rows.items():
        ok &= d1 <= 0.02 and l1 <= 0.01 and _halves(d0, d1) and _halves(l0, l1)
        parts.append(f"{name} dual {d0:.2e}->{d1:.2e}, lift {l0:.2e}->{l1:.2e}")
    report(5, ok, "; ".join(parts) + f"; {time.perf_counter() - t:.1f}s")


# 6 ----------------------------------------------------------------------------------

def test_change_of_variables_field():
    t = time.perf_counter()
    ok, parts = True, []
    for name, spec, n in (("interval", DomainSpec.interval(), 256), ("square", DomainSpec.unit_square(), 128)):
        g = build_grid(spec, n)
        lam = -0.9 * dirichlet_lambda1(g, richardson=False).lambda1
        cov = change_of_variables_field(g, lam)
        w = cov.w.values
        q = (g.divergence(w) + np.sum(w * w, axis=1))[g.interior]
        ok &= bool(np.all(q < lam))
        parts.append(f"{name} max {q.max():.4f} < lambda {lam:.4f}")
    dt = time.perf_counter() - t
    ok &= dt < 30
    report(6, ok, "; ".join(parts) + f"; {dt:.1f}s")


# 7 ----------------------------------------------------------------------------------

def gradient_descent_oracle(n=31, iters=20000):
    """Direct minimization of the unrelaxed 1-D energy 0.5 int u'^2 with
    u(0) = 0, u(1) = 1 plus a quadratic density penalty, from a perturbed start."""
    x = np.linspace(0.0, 1.0, n + 1)
    h = x[1] - x[0]
    u = x + 0.2 * np.sin(np.pi * x) * np.cos(3 * x)
    step = 0.15 * h  # below 2 / (largest Hessian eigenvalue 12 / h)
    for _ in range(iters):
        du = np.diff(u) / h
        # d/du of sum h (0.5 du^2 + (du - 1)^2); density 1 / du deviates iff du != 1
        flux = du + 2 * (du - 1)
        grad = np.zeros_like(u)
        grad[1:-1] = -(flux[1:] - flux[:-1])
        u -= step * grad
    du = np.diff(u) / h
    return float(np.sum(h * 0.5 * du * du)), float(np.max(np.abs(du - 1)))


def test_relaxation_solver():
    oracle, dev = gradient_descent_oracle()
    assert abs(oracle - 0.5) <= 1e-8 and dev <= 1e-6
    t = time.perf_counter()
    spec, _ = gallery_problem("affine", {"A": [[1.0]]}, 31)
    assert spec.grid_omega.n_nodes * spec.grid_D.n_nodes == 32 * 32
    pf, trace = solve_relaxation(spec, tol=1e-6)
    dt = time.perf_counter() - t
    primal = relaxed_energy(pf, spec)
    cres = continuity_residual(pf, spec)
    ok = abs(primal - oracle) <= 1e-2 and cres <= 1e-4 and dt < 60
    report(7, ok, f"primal {primal:.8f} vs oracle {oracle:.8f}; continuity {cres:.1e}; marginal "
                  f"{pf.marginal_error():.1e}; {trace.iterations} it ({trace.meta.get('method')}), {dt:.1f}s")


# 8 ----------------------------------------------------------------------------------

def perturbation_check(spec, pair, rng, count=50, C=1.0, basis_size=3):
    """Energies of u + delta q for random zero-boundary q; delta is halved until
    v stays in the target closure and the penalty is finite (admissible)."""
    go = spec.grid_omega
    u = pair.u.values.reshape(go.n_nodes, -1)
    E = eval_energy(pair.u, spec)
    modes = [v for _, v, _ in sine_basis(go, basis_size)]
    bound = E - C * go.h
    worst, halvings = math.inf, 0
    for _ in range(count):
        coef = rng.standard_normal((len(modes), spec.k))
        q = sum(c[None, :] * m[:, None] for c, m in zip(coef, modes))
        q[go.boundary] = 0.0
        q /= np.max(np.abs(q))
        delta = 10.0 ** rng.uniform(-2.5, -1)
        for _ in range(30):
            v = u + delta * q
            if np.all(spec.grid_D.spec.contains(v, tol=1e-12)):
                Ev = eval_energy(v, spec)
                if math.isfinite(Ev):
                    break
            delta /= 2
            halvings += 1
        else:
            raise AssertionError("no admissible step found")
        worst = min(worst, Ev - E)
    return worst, bound - E, halvings


def test_energy_comparison():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    pairs = [("affine", {"A": random_affine(s)}, 32) for s in AFFINE_SEEDS]
    pairs += [("affine", {"A": [[1.2, 0.3], [0.1, 0.9]]}, 32), ("identity_potential", {}, 32),
              ("torsion", {"a": 1.0}, 24)]
    eig = dirichlet_lambda1(gallery_problem("torsion", {"a": 1.0}, 24)[0].grid_omega)
    ok, parts, violations = True, [], 0
    for family, params, n in pairs:
        spec, pair = gallery_problem(family, params, n)
        rep = certify(pair, spec, eigen=eig if family == "torsion" else None)
        if rep.verdict == "inconclusive":
            ok = False
            parts.append(f"{family} not certified")
            continue
        worst, allowed, halvings = perturbation_check(spec, pair, rng)
        bad = worst < allowed
        violations += int(bad)
        parts.append(f"{family} min dE {worst:+.2e} (>= {allowed:.3f})")
    ok &= violations == 0
    report(8, ok, f"{violations} violations; " + "; ".join(parts) + f"; {time.perf_counter() - t:.1f}s")


# 9 ----------------------------------------------------------------------------------

def test_conjugacy():
    rng = np.random.default_rng(9)
    parts, ok = [], True
    for name in ("quadratic", "log"):
        pen = ImagePenalty.integral(name)
        s = 10.0 ** rng.uniform(-3, 3, 1000)
        top = min(pen.slope_at_infinity, 50.0)
        r = np.where(rng.random(1000) < 0.5, rng.uniform(-20, top, 1000) * (1 - 1e-9),
                     phi_h_derivative(pen, 10.0 ** rng.uniform(-3, 3, 1000)))
        conj, unb = phi_h_conjugate(pen, r)
        fy = phi_h_value(pen, s) + conj - r * s
        ineq = float(np.min(fy / (1 + np.abs(r * s))))
        r_eq = phi_h_derivative(pen, s)
        eq = np.abs(phi_h_value(pen, s) + phi_h_conjugate(pen, r_eq)[0] - r_eq * s)
        ok &= (not unb.any()) and ineq >= -1e-12 and float(eq.max()) <= 1e-8
        parts.append(f"h={name}: min FY slack {ineq:.1e}, max equality gap {eq.max():.1e}")
    report(9, ok, "; ".join(parts))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
