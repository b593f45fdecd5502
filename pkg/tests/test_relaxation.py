import math

import numpy as np
import pytest

from elastcert.energy import ImagePenalty, StoredEnergySpec, eval_energy
from elastcert.equilibrium import gallery_problem
from elastcert.relaxation import (CellCapExceeded, DensePhi, DualTriple, PlanFlux, audit_rng,
                                  build_dual_competitor, continuity_operator, continuity_residual,
                                  dual_energy, dual_feasibility_margin, duality_gap, equality_diagnostics,
                                  lift, perspective_prox, random_dual, random_plan, relaxed_energy,
                                  solve_relaxation, transport_terms, weak_duality_audit)


@pytest.fixture(scope="module")
def identity2d():
    return gallery_problem("affine", {"A": np.eye(2)}, 16)


@pytest.fixture(scope="module")
def line():
    return gallery_problem("affine", {"A": [[1.0]]}, 7)


def test_lift_identity_diagonal(identity2d):
    spec, pair = identity2d
    pf = lift(pair.u, spec)
    # cloud-in-cell target weights: mass sits on the diagonal cells and their neighbours
    dist = np.abs(spec.grid_omega.points[pf.omega_ids] - spec.grid_D.points[pf.target_ids])
    assert np.max(dist) <= spec.grid_omega.h * (1 + 1e-12)
    on_diag = pf.pi[pf.omega_ids == pf.target_ids].sum()
    assert on_diag >= 0.5 * pf.pi.sum()
    assert np.allclose(pf.mu.density, 1.0, atol=1e-12)
    assert pf.marginal_error() <= 1e-12
    assert relaxed_energy(pf, spec) == pytest.approx(1.0, rel=0.01)


def test_lift_marginal_exact_for_any_map():
    spec, pair = gallery_problem("affine", {"A": [[1.2, 0.3], [0.1, 0.9]]}, 16)
    pf = lift(pair.u, spec)
    pf.validate()
    assert abs(relaxed_energy(pf, spec) - eval_energy(pair.u, spec)) <= 0.01 * eval_energy(pair.u, spec)


def test_continuity_residual_of_lifts(identity2d):
    spec, pair = identity2d
    assert continuity_residual(lift(pair.u, spec), spec) <= spec.grid_omega.h
    spec2, pair2 = gallery_problem("affine", {"A": [[1.2, 0.3], [0.1, 0.9]]}, 16)
    assert continuity_residual(lift(pair2.u, spec2), spec2) <= 10 * spec2.grid_omega.h


def test_continuity_violation_oracle(identity2d):
    spec, pair = identity2d
    pf = lift(pair.u, spec)
    bad = PlanFlux(pf.grid_omega, pf.grid_D, pf.omega_ids, pf.target_ids, pf.pi, np.zeros_like(pf.J))
    assert continuity_residual(bad, spec) > 0.1


def test_diagonal_plan_exactly_feasible(line):
    spec, pair = line
    K, b = continuity_operator(spec)
    go = spec.grid_omega
    pi = np.diag(go.volumes)
    J = pi[:, :, None, None] * np.eye(1)
    x = np.concatenate([pi.ravel(), J.reshape(pi.size, -1).T.ravel()])
    pf = PlanFlux.from_dense(go, spec.grid_D, pi, J)
    assert continuity_residual(pf, spec) <= 1e-13
    assert relaxed_energy(pf, spec) == pytest.approx(0.5, rel=1e-12)
    assert np.max(np.abs(K @ x - b)) <= 1e-13


def test_perspective_convention(line):
    spec, pair = line
    pf = lift(pair.u, spec)
    pi = pf.pi.copy()
    pi[0] = 0.0
    bad = PlanFlux(pf.grid_omega, pf.grid_D, pf.omega_ids, pf.target_ids, pi, pf.J)
    assert relaxed_energy(bad, spec) == math.inf
    t = transport_terms(pf, spec)
    scaled = PlanFlux(pf.grid_omega, pf.grid_D, pf.omega_ids, pf.target_ids, pf.pi, 1.7 * pf.J)
    assert np.sum(transport_terms(scaled, spec)) == pytest.approx(1.7 ** 2 * np.sum(t), rel=1e-12)
    assert np.all(t >= 0)
    zero = PlanFlux(pf.grid_omega, pf.grid_D, pf.omega_ids, pf.target_ids, pf.pi, 0 * pf.J)
    assert np.sum(transport_terms(zero, spec)) == 0.0


def test_planflux_validation(line):
    spec, _ = line
    go = spec.grid_omega
    with pytest.raises(ValueError):
        PlanFlux(go, go, [0], [0], [-1.0], np.zeros((1, 1, 1)))
    pf = PlanFlux(go, go, [0, 1], [0, 1], [go.volumes[0], 0.0], np.array([0.0, 1.0]).reshape(2, 1, 1))
    with pytest.raises(ValueError):
        pf.validate()


def _zero_triple(spec):
    go, gd = spec.grid_omega, spec.grid_D
    return DualTriple(DensePhi(np.zeros((go.n_nodes, gd.n_nodes, go.dim))), np.zeros(go.n_nodes),
                      np.zeros(gd.n_nodes))


def test_dual_zero_and_shift(line):
    spec, _ = line
    dt = _zero_triple(spec)
    assert dual_energy(dt, spec) == 0.0
    assert dual_feasibility_margin(dt, spec) == 0.0
    c = 0.37
    up = DualTriple(dt.phi, dt.psi + c, dt.omega)
    assert dual_energy(up, spec) == pytest.approx(-c * spec.grid_omega.volumes.sum(), abs=1e-14)
    assert dual_feasibility_margin(up, spec) == pytest.approx(c, abs=1e-14)


def test_dual_shift_random(line):
    spec, _ = line
    dt = random_dual(spec, audit_rng(4))
    c = -0.25
    up = DualTriple(dt.phi, dt.psi + c, dt.omega)
    assert dual_feasibility_margin(up, spec) - dual_feasibility_margin(dt, spec) == pytest.approx(c, abs=1e-12)
    assert dual_energy(up, spec) - dual_energy(dt, spec) == pytest.approx(-c * spec.grid_omega.volumes.sum())


def test_competitor_affine():
    A = np.array([[1.0, 0.5], [0.0, 1.0]])
    spec, pair = gallery_problem("affine", {"A": A}, 16)
    dt = build_dual_competitor(pair, spec)
    assert dt.meta["raw_margin"] >= -1e-10
    assert dual_energy(dt, spec) == pytest.approx(0.5 * np.sum(A * A), rel=0.01)
    rep = duality_gap(lift(pair.u, spec), dt, spec)
    assert abs(rep.gap) <= 0.02 * eval_energy(pair.u, spec)
    assert rep.dual_admissible


def test_competitor_general_path():
    A = np.array([[1.0, 0.5], [0.0, 1.0]])
    spec, pair = gallery_problem("affine", {"A": A}, 16)
    dt = build_dual_competitor(pair, spec, path="general")
    assert dual_energy(dt, spec) == pytest.approx(0.5 * np.sum(A * A), rel=0.01)
    assert dt.feasibility_margin >= -1e-8


def test_competitor_torsion_precondition():
    spec, pair = gallery_problem("torsion", {"a": 4.1}, 8)
    with pytest.raises(ValueError):
        build_dual_competitor(pair, spec)


def test_equality_diagnostics_shear():
    spec, pair = gallery_problem("affine", {"A": [[1.0, 0.5], [0.0, 1.0]]}, 16)
    diag = equality_diagnostics(lift(pair.u, spec), build_dual_competitor(pair, spec), spec)
    assert diag["support"] > 0
    assert diag["flux_alignment"] <= 1e-6
    assert diag["constraint_tightness"] <= 1e-6
    assert abs(diag["fenchel_young"]) <= 1e-6


def test_perspective_prox_against_scalar_minimization():
    from scipy.optimize import minimize
    rng = np.random.default_rng(0)
    a = rng.normal(size=20)
    b = rng.normal(size=(20, 2))
    tau = 0.3
    pi, J = perspective_prox(a, b, tau)
    for n in range(20):
        def obj(z):
            p, j = z[0], z[1:]
            if p < 0:
                return 1e9
            val = np.sum(j * j) / (2 * p) if p > 1e-12 else (0.0 if np.allclose(j, 0) else 1e6 * np.sum(j * j))
            return tau * val + 0.5 * ((p - a[n]) ** 2 + np.sum((j - b[n]) ** 2))
        def value(p, j):
            return obj(np.concatenate([[p], j]))
        mine = value(pi[n], J[n])
        best = minimize(obj, np.concatenate([[max(a[n], 0.1) + 0.5], b[n]]), method="Nelder-Mead",
                        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000}).fun
        assert mine <= best + 1e-7


def test_solver_cell_cap(line):
    spec, _ = line
    with pytest.raises(CellCapExceeded):
        solve_relaxation(spec, cell_cap=10)


def test_solver_rejects_integral_penalty():
    spec, _ = gallery_problem("affine", {"A": [[1.0]]}, 7, penalty=ImagePenalty.integral("quadratic"))
    with pytest.raises(ValueError):
        solve_relaxation(spec)
    spec, _ = gallery_problem("affine", {"A": [[1.0]]}, 7, W=StoredEnergySpec("p_power", p=3.0))
    with pytest.raises(ValueError):
        solve_relaxation(spec)


def test_solver_small_line(line, tmp_path):
    spec, pair = line
    pf, trace = solve_relaxation(spec, tol=1e-7)
    assert trace.converged
    assert relaxed_energy(pf, spec) == pytest.approx(0.5, abs=1e-2)
    assert continuity_residual(pf, spec) <= 1e-4
    assert pf.marginal_error() <= 1e-6
    primal = np.array([r["primal"] for r in trace.rows])
    # trace settles onto the final value
    tail = primal[len(primal) // 2:]
    assert np.max(np.abs(tail - primal[-1])) <= np.max(np.abs(primal[:5] - primal[-1])) + 1e-12
    trace.to_csv(tmp_path / "trace.csv")
    head = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert head == "iteration,primal,continuity_residual,marginal_error,gap"


def test_solver_and_identity_competitor(line):
    spec, pair = line
    pf, _ = solve_relaxation(spec, tol=1e-7)
    rep = duality_gap(pf, build_dual_competitor(pair, spec), spec)
    assert rep.gap >= -1e-9 - rep.slack
    assert abs(rep.gap) <= 1e-4
    diag = equality_diagnostics(pf, build_dual_competitor(pair, spec), spec, support_tol=1e-6)
    assert diag["flux_alignment"] <= 1e-2


def test_random_plan_admissible(line):
    spec, _ = line
    pf = random_plan(spec, audit_rng(1))
    pf.validate()
    assert continuity_residual(pf, spec) <= 1e-10


def test_weak_duality_small_audit(line):
    spec, _ = line
    out = weak_duality_audit(spec, pairs=20, seed=3)
    assert out["violations"] == 0
    assert out["min_gap_plus_slack"] >= -1e-9
    again = weak_duality_audit(spec, pairs=20, seed=3)
    assert again["min_gap"] == out["min_gap"]


def test_weak_duality_integral_penalty():
    spec, _ = gallery_problem("affine", {"A": [[1.0]]}, 7, penalty=ImagePenalty.integral("log"))
    out = weak_duality_audit(spec, pairs=20, seed=5, target_spread=0.3)
    assert out["violations"] == 0
