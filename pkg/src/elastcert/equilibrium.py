"""Analytic equilibrium gallery and the basis-restricted weak Euler-Lagrange residual.

A pair (u, omega) is an equilibrium when, for every test field v vanishing
on the boundary of the reference domain,

    int grad v : DW(grad u) + v . (D_y F(x, u) + grad omega(u)) dx = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import DomainSpec, Field, Grid, build_grid
from .energy import (ImagePenalty, PotentialSpec, ProblemSpec, ScalarPotential,
                     StoredEnergySpec, phi_h_derivative)

FAMILIES = ("affine", "torsion", "identity_potential", "external")


@dataclass
class EquilibriumPair:
    u: Field
    omega: Field
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not np.all(np.isfinite(self.omega.values)):
            raise ValueError("omega must be finite")

    def check_boundary(self, spec: ProblemSpec) -> float:
        """Max deviation of u from the boundary map; raises beyond h."""
        g = spec.grid_omega
        vals = self.u.values.reshape(g.n_nodes, -1)
        err = float(np.max(np.abs(vals[g.boundary] - spec.boundary_map), initial=0.0))
        if err > g.h * (1 + 1e-9):
            raise ValueError(f"u misses the boundary map by {err:.3g} > h")
        return err


def rotation(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def torsion_map(points: np.ndarray, a: float) -> np.ndarray:
    """u_a(x_h, z) = (R_{a z} x_h, z)."""
    p = np.atleast_2d(points)
    R = rotation(a * p[:, 2])
    return np.concatenate([np.einsum("nij,nj->ni", R, p[:, :2]), p[:, 2:3]], axis=1)


def torsion_pressure(points: np.ndarray, a: float) -> np.ndarray:
    p = np.atleast_2d(points)
    return -0.5 * a * a * np.sum(p[:, :2] ** 2, axis=1)


def _affine_pressure(A: np.ndarray, penalty: ImagePenalty) -> float:
    """Constant pressure in the subdifferential of the penalty at density 1/det A."""
    if penalty.variant == "incompressible":
        return 0.0
    return float(phi_h_derivative(penalty, 1.0 / np.linalg.det(A)))


def gallery_map(family: str, params: dict, spec: ProblemSpec) -> EquilibriumPair:
    """Closed-form equilibrium of the named family on the grids of ``spec``."""
    go, gd = spec.grid_omega, spec.grid_D
    params = dict(params or {})
    if family == "affine":
        A = np.atleast_2d(np.asarray(params.get("A", np.eye(spec.k)), float))
        b = np.asarray(params.get("b", np.zeros(spec.k)), float)
        if A.shape != (spec.k, spec.d):
            raise ValueError(f"A must be {spec.k}x{spec.d}")
        if spec.k != spec.d or not np.linalg.det(A) > 0:
            raise ValueError("affine family needs a square A with positive determinant")
        u = go.points @ A.T + b
        w0 = _affine_pressure(A, spec.penalty)
        omega = np.full(gd.n_nodes, w0)
        params.update(A=A.tolist(), b=b.tolist(), pressure=w0)
    elif family == "torsion":
        if go.spec.shape != "cylinder" or gd.spec.shape != "cylinder":
            raise ValueError("torsion requires cylinder reference and target domains (d = k = 3)")
        a = float(params.get("a", 1.0))
        u = torsion_map(go.points, a)
        omega = torsion_pressure(gd.points, a)
        params.update(a=a)
    elif family == "identity_potential":
        if spec.d != spec.k:
            raise ValueError("identity_potential needs d = k")
        psi = params.get("psi")
        if psi is None:
            psi = spec.F.psi if spec.F.form == "potential_pullback" else ScalarPotential.half_square(spec.k)
        if spec.F.form != "potential_pullback":
            raise ValueError("identity_potential is an equilibrium only with F = -grad psi(x) . y")
        u = go.points.copy()
        omega = psi.value(gd.points)
        params.update(psi=psi.to_dict())
    elif family == "external":
        u = np.asarray(params["u"], float)
        omega = np.asarray(params["omega"], float)
        params = {k: v for k, v in params.items() if k not in ("u", "omega")}
    else:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return EquilibriumPair(Field(go, u), Field(gd, omega), family, params)


# gallery problems --------------------------------------------------------------

def gallery_problem(family: str, params: dict | None = None, n: int = 32,
                    penalty: ImagePenalty | None = None, W: StoredEnergySpec | None = None
                    ) -> tuple[ProblemSpec, EquilibriumPair]:
    """Build domains, boundary map and problem data for a gallery family.

    affine: unit square (or cube, from the size of A) onto its image
    parallelepiped; the penalty defaults to incompressible when det A = 1 and
    to the integral penalty with h(t) = (t - 1)^2 otherwise.
    torsion: unit cylinder onto itself, incompressible. identity_potential:
    unit square onto itself with F = -grad psi(x) . y, incompressible.
    """
    params = dict(params or {})
    W = W or StoredEnergySpec()
    F = PotentialSpec()
    if family == "affine":
        A = np.atleast_2d(np.asarray(params.get("A", np.eye(2)), float))
        b = np.asarray(params.get("b", np.zeros(A.shape[0])), float)
        d = A.shape[0]
        omega_spec = DomainSpec.box((0.0,) * d, (1.0,) * d) if d > 1 else DomainSpec.interval()
        go = build_grid(omega_spec, n)
        if np.allclose(A, np.diag(np.diag(A))) and np.all(np.diag(A) > 0):
            D = DomainSpec.box(b, b + np.diag(A)) if d > 1 else DomainSpec.interval(b[0], b[0] + A[0, 0])
        else:
            D = DomainSpec.parallelepiped(A, b, omega_spec)
        ext = np.subtract(D.upper, D.lower)
        gd = build_grid(D, tuple(max(2, int(np.ceil(n * e - 1e-9))) for e in ext))
        if penalty is None:
            det = np.linalg.det(A)
            penalty = ImagePenalty.incompressible() if abs(det - 1) < 1e-12 else ImagePenalty.integral("quadratic")
        g = go.points[go.boundary] @ A.T + b
        trace = go.boundary_facets[1] @ A.T + b
    elif family == "torsion":
        go = build_grid(DomainSpec.cylinder(), n)
        gd = go
        a = float(params.get("a", 1.0))
        g = torsion_map(go.points[go.boundary], a)
        trace = torsion_map(go.boundary_facets[1], a)
        penalty = penalty or ImagePenalty.incompressible()
    elif family == "identity_potential":
        go = build_grid(DomainSpec.unit_square(), n)
        gd = go
        psi = params.get("psi") or ScalarPotential.half_square(2)
        params["psi"] = psi
        F = PotentialSpec("potential_pullback", psi=psi)
        g = go.points[go.boundary]
        trace = None
        penalty = penalty or ImagePenalty.incompressible()
    else:
        raise ValueError(f"no built-in problem for family {family!r}")
    spec = ProblemSpec(go, gd, g, W=W, F=F, penalty=penalty, name=family, boundary_trace=trace)
    return spec, gallery_map(family, params, spec)


# weak residual -------------------------------------------------------------------

def boundary_factor(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Smooth factor vanishing on the non-box part of the boundary, and its gradient."""
    spec, x = grid.spec, grid.points
    n = grid.n_nodes
    if spec.shape in ("interval", "box"):
        return np.ones(n), np.zeros((n, grid.dim))
    if spec.shape == "parallelepiped":
        N, c = spec.halfspaces()
        lin = c[None] - x @ N.T
        val = np.prod(lin, axis=1)
        grad = np.zeros((n, grid.dim))
        for i in range(N.shape[0]):
            grad -= np.prod(np.delete(lin, i, axis=1), axis=1)[:, None] * N[i]
        return val, grad
    q = spec._radial(x)
    rr = np.sum(q * q, axis=1)
    val = spec.radius ** 2 - rr
    grad = np.zeros((n, grid.dim))
    grad[:, :2] = -2 * q
    if spec.shape == "annulus":
        other = rr - spec.inner_radius ** 2
        grad[:, :2] = grad[:, :2] * other[:, None] + val[:, None] * 2 * q
        val = val * other
    return val, grad


def sine_basis(grid: Grid, basis_size: int):
    """Yield (modes, v, grad v) for scalar test functions b(x) prod_a sin(m_a pi t_a)."""
    lo, hi = np.asarray(grid.spec.lower), np.asarray(grid.spec.upper)
    L = hi - lo
    t = (grid.points - lo) / L
    bval, bgrad = boundary_factor(grid)
    d = grid.dim
    for modes in np.ndindex(*(basis_size,) * d):
        m = np.asarray(modes) + 1
        arg = np.pi * m * t
        s, c = np.sin(arg), np.cos(arg)
        S = np.prod(s, axis=1)
        gS = np.empty_like(s)
        for a in range(d):
            gS[:, a] = np.prod(np.delete(s, a, axis=1), axis=1) * c[:, a] * np.pi * m[a] / L[a]
        yield tuple(int(v) for v in m), bval * S, bgrad * S[:, None] + bval[:, None] * gS


def _wp_norm(grid: Grid, v: np.ndarray, gv: np.ndarray, p: float) -> float:
    return float(grid.integrate(np.abs(v) ** p + np.sum(gv * gv, axis=-1) ** (p / 2))) ** (1 / p)


def el_residuals(pair: EquilibriumPair, spec: ProblemSpec, basis_size: int = 3) -> np.ndarray:
    """Normalized weak residuals, shape (k, basis_size**d), per component and mode."""
    if basis_size < 1:
        raise ValueError("basis_size must be >= 1")
    go, gd = spec.grid_omega, spec.grid_D
    u = pair.u.values.reshape(go.n_nodes, -1)
    depth = gd.spec.depth(u)
    if np.min(depth) < -gd.h * (1 + 1e-9):
        raise ValueError(f"u leaves the target domain by {-np.min(depth):.3g} > h")
    stress = spec.W.gradient(go.gradient(u))                       # (N, k, d)
    grad_omega = gd.gradient(pair.omega.values)                     # (M, k)
    body = spec.F.gradient(go.points, u) + gd.interpolate(grad_omega, u)   # (N, k)
    modes = list(sine_basis(go, basis_size))
    out = np.empty((spec.k, len(modes)))
    for j, (_, v, gv) in enumerate(modes):
        norm = _wp_norm(go, v, gv, spec.W.p)
        # component c: test field v e_c
        integrand = np.einsum("nkd,nd->nk", stress, gv) + body * v[:, None]
        out[:, j] = go.integrate(integrand) / norm
    return out


def el_residual(pair: EquilibriumPair, spec: ProblemSpec, basis_size: int = 3) -> float:
    """Max over the (basis-restricted) test family of the normalized weak residual."""
    return float(np.max(np.abs(el_residuals(pair, spec, basis_size))))


# torsion second variation ---------------------------------------------------------

def second_variation_torsion(a: float, q: Field | np.ndarray, grid: Grid) -> float:
    """int 0.5 |grad q|^2 - (a^2 / 2) |q_h|^2, the eps^2 coefficient about u_a."""
    vals = q.values if isinstance(q, Field) else np.asarray(q, float)
    if grid.spec.shape != "cylinder":
        raise ValueError("second variation of torsion needs a cylinder grid")
    if vals.shape != (grid.n_nodes, 3):
        raise ValueError("q must be a 3-vector field on the grid")
    if np.max(np.abs(vals[grid.boundary]), initial=0.0) > 0:
        raise ValueError("q must vanish at boundary nodes")
    gq = grid.gradient(vals)
    dens = 0.5 * np.sum(gq * gq, axis=(1, 2)) - 0.5 * a * a * np.sum(vals[:, :2] ** 2, axis=1)
    return float(grid.integrate(dens))


def torsion_test_family(grid: Grid, basis_size: int = 2, eigenfunction: np.ndarray | None = None):
    """Zero-boundary perturbations: sine modes times the boundary factor, each
    along e_x and e_y, plus the Dirichlet eigenfunction along e_x if given."""
    fam = []
    for _, v, _ in sine_basis(grid, basis_size):
        for c in (0, 1):
            q = np.zeros((grid.n_nodes, 3))
            q[:, c] = v
            q[grid.boundary] = 0.0
            fam.append(q)
    if eigenfunction is not None:
        q = np.zeros((grid.n_nodes, 3))
        q[:, 0] = eigenfunction
        q[grid.boundary] = 0.0
        fam.append(q)
    return fam
