import math

import numpy as np
import pytest

from elastcert.domain import (DomainSpec, Field, VerificationError, boundary_flux, build_grid,
                              change_of_variables_field, differentiate, dirichlet_lambda1)


def test_interval_partition():
    g = build_grid(DomainSpec.interval(), 4)
    assert g.n_nodes == 5
    assert g.h == pytest.approx(0.25)
    assert g.boundary.sum() == 2


def test_square_volume():
    g = build_grid(DomainSpec.unit_square(), 32)
    assert abs(g.volumes.sum() - 1.0) <= 1e-6


def test_disk_volume():
    g = build_grid(DomainSpec.disk(), 64)
    assert abs(g.volumes.sum() - math.pi) <= 0.01 * math.pi


@pytest.mark.parametrize("spec", [DomainSpec.unit_square(), DomainSpec.disk(),
                                  DomainSpec.annulus(0.4, 1.0), DomainSpec.cylinder()])
def test_grid_invariants(spec):
    g = build_grid(spec, 16 if spec.dim == 3 else 32)
    n = g.normals[g.boundary]
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    inner = g.points[~g.boundary]
    assert np.all(spec.contains(inner))
    assert abs(g.volumes.sum() - spec.volume) <= 0.01 * spec.volume


def test_build_grid_rejects():
    with pytest.raises(ValueError):
        build_grid(DomainSpec.unit_square(), 1)
    with pytest.raises(ValueError):
        DomainSpec.box([0, 0], [1, 0])
    with pytest.raises(ValueError):
        DomainSpec.annulus(1.0, 0.5)


def test_grid_is_deterministic():
    a = build_grid(DomainSpec.disk(), 20)
    b = build_grid(DomainSpec.disk(), 20)
    assert np.array_equal(a.points, b.points)


def test_gradient_examples():
    g = build_grid(DomainSpec.interval(), 16)
    c = differentiate(Field(g, np.full(g.n_nodes, 3.0)), "gradient").values
    assert np.all(np.abs(c) <= 1e-12)
    x = differentiate(Field(g, g.points[:, 0]), "gradient").values
    assert np.allclose(x, 1.0, atol=1e-12)


def test_div_grad_quadratic():
    g = build_grid(DomainSpec.unit_square(), 64)
    f = np.sum(g.points ** 2, axis=1)
    grad = differentiate(Field(g, f), "gradient")
    lap = differentiate(grad, "divergence").values
    assert np.max(np.abs(lap - 4.0)) <= 1e-10


def test_differentiate_rank_mismatch():
    g = build_grid(DomainSpec.unit_square(), 8)
    with pytest.raises(ValueError):
        differentiate(Field(g, g.points[:, 0]), "divergence")
    with pytest.raises(ValueError):
        differentiate(Field(g, g.points), "curl")


def test_differentiate_linear():
    rng = np.random.default_rng(3)
    g = build_grid(DomainSpec.disk(), 24)
    f, h = rng.standard_normal((2, g.n_nodes))
    lhs = differentiate(Field(g, 2.5 * f - 0.7 * h), "gradient").values
    rhs = 2.5 * differentiate(Field(g, f), "gradient").values - 0.7 * differentiate(Field(g, h), "gradient").values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_boundary_flux_examples():
    g = build_grid(DomainSpec.unit_square(), 32)
    assert boundary_flux(Field(g, np.zeros((g.n_nodes, 2)))) == 0.0
    assert boundary_flux(Field(g, g.points)) == pytest.approx(2.0, rel=0.01)
    A, b = np.eye(2), np.zeros(2)
    v = (g.points @ A.T + b) @ A
    assert boundary_flux(Field(g, v)) == pytest.approx(2.0, rel=0.01)


def test_boundary_flux_missing_values():
    g = build_grid(DomainSpec.unit_square(), 8)
    v = g.points.copy()
    v[np.nonzero(g.boundary)[0][0]] = np.nan
    with pytest.raises(ValueError):
        boundary_flux(Field(g, v))
    with pytest.raises(ValueError):
        boundary_flux(g.points[:3], g)


@pytest.mark.parametrize("spec,n", [(DomainSpec.unit_square(), 32), (DomainSpec.disk(), 40),
                                    (DomainSpec.annulus(0.3, 1.0), 40)])
def test_discrete_divergence_theorem(spec, n):
    g = build_grid(spec, n)
    x, y = g.points.T
    v = np.stack([np.sin(x) + x * y, np.cos(2 * y) + x ** 2], axis=1)
    interior = g.volumes @ g.divergence(v)
    assert abs(interior - boundary_flux(Field(g, v))) <= 2.0 * g.h


def test_sbp_identity_on_box():
    g = build_grid(DomainSpec.unit_square(), 12)
    for a in range(2):
        D = g.sbp_derivative_matrix(a).toarray()
        HD = np.diag(g.volumes) @ D
        B = np.diag(g.area_vectors[:, a])
        assert np.max(np.abs(HD + HD.T - B)) <= 1e-12


def test_boundary_facets_sum_to_area_vectors():
    for spec in (DomainSpec.disk(), DomainSpec.cylinder()):
        g = build_grid(spec, 12)
        ids, pts, vec = g.boundary_facets
        total = np.zeros_like(g.area_vectors)
        np.add.at(total, ids, vec)
        assert np.allclose(total, g.area_vectors, atol=1e-12)
        assert np.all(np.abs(spec.depth(pts)) <= 1e-9)


def test_lambda1_interval():
    r = dirichlet_lambda1(build_grid(DomainSpec.interval(), 256))
    assert r.lambda1 == pytest.approx(math.pi ** 2, rel=1e-3)
    assert r.lambda1_safe <= r.lambda1
    f = r.eigenfunction.values
    assert np.max(f) == pytest.approx(1.0)
    assert np.min(f[~r.eigenfunction.grid.boundary]) > 0


def test_lambda1_square():
    r = dirichlet_lambda1(build_grid(DomainSpec.unit_square(), 128))
    assert r.lambda1 == pytest.approx(2 * math.pi ** 2, rel=5e-3)


def test_lambda1_scaling():
    tol = 1e-8
    one = dirichlet_lambda1(build_grid(DomainSpec.interval(), 64), tol=tol)
    two = dirichlet_lambda1(build_grid(DomainSpec.interval(0.0, 2.0), 64), tol=tol)
    assert two.lambda1 == pytest.approx(one.lambda1 / 4, rel=5e-3)
    assert abs(two.lambda1 * 4 - one.lambda1) <= 2 * tol * one.lambda1 + 1e-9


def test_change_of_variables_interval():
    g = build_grid(DomainSpec.interval(), 256)
    lam = -0.9 * math.pi ** 2
    cov = change_of_variables_field(g, lam)
    w = cov.w.values
    q = g.divergence(w) + np.sum(w * w, axis=1)
    assert np.max(q[~g.boundary]) < lam


def test_change_of_variables_positive_lambda():
    g = build_grid(DomainSpec.unit_square(), 8)
    cov = change_of_variables_field(g, 0.5)
    assert np.all(cov.w.values == 0.0)


def test_change_of_variables_zero_lambda():
    g = build_grid(DomainSpec.unit_square(), 16)
    cov = change_of_variables_field(g, 0.0)
    w = cov.w.values
    assert np.max((g.divergence(w) + np.sum(w * w, axis=1))[~g.boundary]) < 0.0


def test_change_of_variables_below_threshold():
    g = build_grid(DomainSpec.unit_square(), 16)
    with pytest.raises(ValueError, match="below threshold"):
        change_of_variables_field(g, -2 * math.pi ** 2 - 1.0)
    with pytest.raises(ValueError, match="below threshold"):
        change_of_variables_field(g, -25.0)


def test_change_of_variables_square_minus_15():
    # -15 lies above -2 pi^2, so the precondition holds and a field exists
    g = build_grid(DomainSpec.unit_square(), 32)
    cov = change_of_variables_field(g, -15.0)
    w = cov.w.values
    assert np.max((g.divergence(w) + np.sum(w * w, axis=1))[~g.boundary]) < -15.0


def test_verification_error_is_runtime_error():
    assert issubclass(VerificationError, RuntimeError)
