"""Convex relaxation over plans and fluxes, its dual, and a first-order solver.

A plan/flux triple (pi, J, mu) lives on the product of the reference and the
target grid; it satisfies the generalized continuity equation

    sum pi div_x phi + sum J : grad_y phi = sum_{boundary} phi(x, g(x)) . n dsigma

for test fields phi. The discrete equation uses summation-by-parts
derivatives, so that lifts of smooth maps satisfy it up to O(h) and the
solver can satisfy it exactly. The dual side is a triple (phi, psi, omega)
subject to

    psi(x) + omega(y) + F(x, y) >= div_x phi(x, y) + W*(grad_y phi(x, y)).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .certificate import lambda_convexity_modulus
from .domain import EigenResult, Grid, change_of_variables_field, dirichlet_lambda1
from .energy import MeasureOnD, ProblemSpec, eval_phi, phi_star
from .equilibrium import EquilibriumPair
from .linalg import power_norm

DEFAULT_CELL_CAP = 1_000_000


# plans -----------------------------------------------------------------------------

@dataclass
class PlanFlux:
    """Sparse plan/flux on pairs (omega node, target node).

    ``pi`` (P,), ``J`` (P, k, d); ``mu`` is the target marginal of ``pi``.
    """

    grid_omega: Grid
    grid_D: Grid
    omega_ids: np.ndarray
    target_ids: np.ndarray
    pi: np.ndarray
    J: np.ndarray
    mu: MeasureOnD | None = None

    def __post_init__(self):
        self.omega_ids = np.asarray(self.omega_ids, np.int64)
        self.target_ids = np.asarray(self.target_ids, np.int64)
        self.pi = np.asarray(self.pi, float)
        k, d = self.grid_D.dim, self.grid_omega.dim
        self.J = np.asarray(self.J, float).reshape(self.pi.size, k, d)
        if np.any(self.pi < 0):
            raise ValueError("pi must be nonnegative")
        if not (np.all(np.isfinite(self.pi)) and np.all(np.isfinite(self.J))):
            raise ValueError("pi and J must be finite")
        self.mu = MeasureOnD(self.grid_D, np.bincount(self.target_ids, self.pi,
                                                      minlength=self.grid_D.n_nodes))

    @classmethod
    def from_dense(cls, grid_omega: Grid, grid_D: Grid, pi: np.ndarray, J: np.ndarray) -> "PlanFlux":
        No, Nd = grid_omega.n_nodes, grid_D.n_nodes
        i, j = np.divmod(np.arange(No * Nd), Nd)
        return cls(grid_omega, grid_D, i, j, np.asarray(pi).ravel(),
                   np.asarray(J).reshape(No * Nd, grid_D.dim, grid_omega.dim))

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        No, Nd = self.grid_omega.n_nodes, self.grid_D.n_nodes
        pi = np.zeros((No, Nd))
        J = np.zeros((No, Nd) + self.J.shape[1:])
        np.add.at(pi, (self.omega_ids, self.target_ids), self.pi)
        np.add.at(J, (self.omega_ids, self.target_ids), self.J)
        return pi, J

    def omega_marginal(self) -> np.ndarray:
        return np.bincount(self.omega_ids, self.pi, minlength=self.grid_omega.n_nodes)

    def marginal_error(self) -> float:
        vol = self.grid_omega.volumes
        return float(np.max(np.abs(self.omega_marginal() - vol)) / np.max(vol))

    def validate(self, rtol: float = 1e-9) -> None:
        if self.marginal_error() > rtol:
            raise ValueError(f"reference marginal off by {self.marginal_error():.3e} (relative)")
        if np.any(np.abs(self.J[self.pi == 0]) > 0):
            raise ValueError("J must vanish where pi = 0")


def lift(u, spec: ProblemSpec, subsamples: int = 4) -> PlanFlux:
    """Plan pi = (id, u)# Leb and flux J = grad u pi of a deformation.

    Subcell samples are binned to the nearest reference node, their images
    (first-order expansion) spread over target nodes by cloud-in-cell, and
    the flux carries the gradient of the expansion. Rows are rescaled so the
    reference marginal equals the node volumes.
    """
    go, gd = spec.grid_omega, spec.grid_D
    vals = u.values if hasattr(u, "values") else np.asarray(u, float)
    vals = vals.reshape(go.n_nodes, -1)
    if vals.shape[1] != gd.dim:
        raise ValueError("u has the wrong number of components")
    pts, m = go.subcell_samples(subsamples, refine_boundary=True)
    t = np.clip(np.rint((pts - go.origin) / go.spacing).astype(np.int64), 0, np.asarray(go.counts) - 1)
    bins = go.redirect[tuple(t.T)]
    lonely = np.setdiff1d(np.nonzero(go.volumes > 0)[0], bins)
    if lonely.size:
        pts = np.concatenate([pts, go.points[lonely]])
        m = np.concatenate([m, go.volumes[lonely]])
        bins = np.concatenate([bins, lonely])
    near = go.nearest_complete(pts)
    grad = go.gradient(vals)
    images = vals[near] + np.einsum("mkd,md->mk", grad[near], pts - go.points[near])
    depth = gd.spec.depth(images)
    if np.min(depth) < -gd.h * (1 + 1e-9):
        raise ValueError(f"image point {-np.min(depth):.3g} outside the target domain (more than h)")
    tid, tw = gd.cic_weights(images)
    raw = np.bincount(bins, m, minlength=go.n_nodes)
    m = m * np.where(raw[bins] > 0, go.volumes[bins] / np.where(raw[bins] > 0, raw[bins], 1.0), 0.0)
    keys = (bins[:, None] * gd.n_nodes + tid).ravel()
    wts = (m[:, None] * tw).ravel()
    uniq, inv = np.unique(keys, return_inverse=True)
    pi = np.bincount(inv, wts, minlength=uniq.size)
    k, d = gd.dim, go.dim
    G = np.repeat(grad[near], tw.shape[1], axis=0).reshape(-1, k * d)
    J = np.stack([np.bincount(inv, wts * G[:, c], minlength=uniq.size) for c in range(k * d)], axis=1)
    keep = pi > 0
    oi, tj = np.divmod(uniq[keep], gd.n_nodes)
    return PlanFlux(go, gd, oi, tj, pi[keep], J[keep].reshape(-1, k, d))


# continuity equation --------------------------------------------------------------

def _mode_tables(grid: Grid, B: int, kind: str) -> tuple[np.ndarray, list[np.ndarray]]:
    """Nodal tensor modes (N, B**dim) and their SBP derivatives along each axis.

    ``poly``: monomials t^m of box coordinates; ``cos``: cos(n pi t).
    """
    lo = np.asarray(grid.spec.lower)
    L = np.subtract(grid.spec.upper, grid.spec.lower)
    t = (grid.points - lo) / L
    m = np.arange(B)
    T = t[..., None] ** m if kind == "poly" else np.cos(np.pi * m * t[..., None])
    out = np.ones((grid.n_nodes, 1))
    for a in range(grid.dim):
        out = (out[:, :, None] * T[:, a][:, None, :]).reshape(grid.n_nodes, -1)
    return out, [grid.sbp_derivative_matrix(a) @ out for a in range(grid.dim)]


def _mode_norms(go: Grid, gd: Grid, B: int) -> np.ndarray:
    Lx = np.subtract(go.spec.upper, go.spec.lower)
    Ly = np.subtract(gd.spec.upper, gd.spec.lower)
    m = np.arange(B)
    gx = np.sqrt(sum(np.meshgrid(*[(m / Lx[a]) ** 2 for a in range(go.dim)], indexing="ij"))).ravel()
    gy = np.sqrt(sum(np.meshgrid(*[(np.pi * m / Ly[l]) ** 2 for l in range(gd.dim)], indexing="ij"))).ravel()
    return 1.0 + np.sqrt(gx[:, None] ** 2 + gy[None, :] ** 2)


def continuity_residuals(pf: PlanFlux, spec: ProblemSpec, basis_size: int = 3) -> np.ndarray:
    """Normalized residuals of the continuity equation for the test family

        phi = P_m(x) C_n(y) e_a,   P_m monomials in box coordinates,
        C_n cosine modes in box coordinates, m, n < basis_size per axis,

    scaled by a C^1 bound of each mode. Derivatives are the summation-by-parts
    differences of the nodal modes and boundary values use cloud-in-cell
    sampling of g, so this equals phi^T (K x - b) for the nodal operator of
    ``continuity_operator``. Returns shape (d, basis_size**d, basis_size**k).
    """
    go, gd = spec.grid_omega, spec.grid_D
    B = int(basis_size)
    d, k = go.dim, gd.dim
    P, dP = _mode_tables(go, B, "poly")
    C, dC = _mode_tables(gd, B, "cos")
    i, j = pf.omega_ids, pf.target_ids
    Pi, Cj = P[i], C[j]
    fid, gtr, area = spec.facet_trace()
    tid, tw = gd.cic_weights(gtr)
    Cb = np.einsum("bc,bcn->bn", tw, C[tid])
    out = np.empty((d, B ** d, B ** k))
    for a in range(d):
        r = (dP[a][i] * pf.pi[:, None]).T @ Cj
        for l in range(k):
            r += (Pi * pf.J[:, l, a][:, None]).T @ dC[l][j]
        r -= (P[fid] * area[:, a][:, None]).T @ Cb
        out[a] = r
    return out / _mode_norms(go, gd, B)[None]


def continuity_residual(pf: PlanFlux, spec: ProblemSpec, basis_size: int = 3) -> float:
    return float(np.max(np.abs(continuity_residuals(pf, spec, basis_size))))


# discrete operators on the product grid --------------------------------------------

def continuity_operator(spec: ProblemSpec) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse (K, b) with K [pi; J] = b the nodal continuity equation.

    Unknown ordering: pi (No*Nd), then J[:, :, l, a] blocks in (l, a) order.
    Rows are (a, i, j). The boundary term spreads phi(x_i, g_i) over target
    nodes with cloud-in-cell weights.
    """
    go, gd = spec.grid_omega, spec.grid_D
    No, Nd, d, k = go.n_nodes, gd.n_nodes, go.dim, gd.dim
    Io, Id = sp.identity(No, format="csr"), sp.identity(Nd, format="csr")
    blocks = []
    for a in range(d):
        row = [sp.kron(go.sbp_derivative_matrix(a).T, Id)]
        for l in range(k):
            for aa in range(d):
                row.append(sp.kron(Io, gd.sbp_derivative_matrix(l).T) if aa == a
                           else sp.csr_matrix((No * Nd, No * Nd)))
        blocks.append(row)
    K = sp.bmat(blocks, format="csr")
    fid, gtr, area = spec.facet_trace()
    tid, tw = gd.cic_weights(gtr)
    b = np.zeros((d, No, Nd))
    for a in range(d):
        np.add.at(b[a], (np.repeat(fid, tw.shape[1]), tid.ravel()),
                  (area[:, a][:, None] * tw).ravel())
    return K, b.ravel()


# dual side ------------------------------------------------------------------------------

@dataclass
class PolyPhi:
    """phi_a(x_i, y) = alpha[i, a] + beta[i, a, :] . y + gamma[i, a] |y|^2.

    ``divergence`` optionally holds precomputed x-divergences of the three
    coefficient arrays, shapes (No,), (No, k), (No,); otherwise they come
    from summation-by-parts differences.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    divergence: tuple | None = None

    def div_coefficients(self, grid: Grid):
        if self.divergence is not None:
            return self.divergence
        da = sum(grid.sbp_derivative_matrix(a) @ self.alpha[:, a] for a in range(grid.dim))
        db = sum(grid.sbp_derivative_matrix(a) @ self.beta[:, a, :] for a in range(grid.dim))
        dg = sum(grid.sbp_derivative_matrix(a) @ self.gamma[:, a] for a in range(grid.dim))
        return da, db, dg

    def values(self, i: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (self.alpha[i] + np.einsum("nal,nl->na", self.beta[i], y)
                + self.gamma[i] * np.sum(y * y, axis=1)[:, None])

    def grad_y(self, i: np.ndarray, y: np.ndarray) -> np.ndarray:
        """[n, l, a] = d phi_a / d y_l."""
        return np.transpose(self.beta[i], (0, 2, 1)) + 2 * y[:, :, None] * self.gamma[i][:, None, :]


@dataclass
class DensePhi:
    """Nodal phi of shape (No, Nd, d); y-derivatives by SBP differences on the target grid."""

    values_: np.ndarray


@dataclass
class DualTriple:
    phi: PolyPhi | DensePhi
    psi: np.ndarray
    omega: np.ndarray
    feasibility_margin: float | None = None
    meta: dict = field(default_factory=dict)


class _PhiOps:
    """Evaluate div_x phi, grad_y phi and W*(grad_y phi) on the product grid."""

    def __init__(self, phi, spec: ProblemSpec):
        self.phi, self.spec = phi, spec
        go, gd = spec.grid_omega, spec.grid_D
        self.Y = gd.points
        if isinstance(phi, PolyPhi):
            self.da, self.db, self.dg = phi.div_coefficients(go)
        else:
            V = np.asarray(phi.values_, float)
            if V.shape != (go.n_nodes, gd.n_nodes, go.dim):
                raise ValueError("dense phi must have shape (No, Nd, d)")
            self.div = sum(go.sbp_derivative_matrix(a) @ V[:, :, a] for a in range(go.dim))
            # grad[i, j, l, a]
            self.grad = np.stack([np.stack([(gd.sbp_derivative_matrix(l) @ V[:, :, a].T).T
                                            for a in range(go.dim)], axis=-1)
                                  for l in range(gd.dim)], axis=2)

    def rows(self, i: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """div and W*(grad) for reference nodes ``i`` against all target nodes."""
        W = self.spec.W
        if isinstance(self.phi, DensePhi):
            return self.div[i], W.conjugate(self.grad[i])
        Y = self.Y
        yy = np.sum(Y * Y, axis=1)
        div = self.da[i][:, None] + self.db[i] @ Y.T + self.dg[i][:, None] * yy[None]
        if W.form == "quadratic":
            b, g = self.phi.beta[i], self.phi.gamma[i]
            wstar = 0.5 * (np.sum(b * b, axis=(1, 2))[:, None]
                           + 4 * np.einsum("na,nal,ml->nm", g, b, Y)
                           + 4 * np.sum(g * g, axis=1)[:, None] * yy[None])
        else:
            ii = np.repeat(i, Y.shape[0])
            G = self.phi.grad_y(ii, np.tile(Y, (len(i), 1)))
            wstar = W.conjugate(G).reshape(len(i), -1)
        return div, wstar

    def pairs(self, i: np.ndarray, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """div (P,) and grad (P, k, d) at listed pairs."""
        if isinstance(self.phi, DensePhi):
            return self.div[i, j], self.grad[i, j]
        y = self.Y[j]
        div = self.da[i] + np.sum(self.db[i] * y, axis=1) + self.dg[i] * np.sum(y * y, axis=1)
        return div, self.phi.grad_y(i, y)

    def boundary_flux(self) -> float:
        """Facet quadrature of phi(x, g(x)) . n over the reference boundary."""
        fid, gtr, area = self.spec.facet_trace()
        if isinstance(self.phi, PolyPhi):
            vals = self.phi.values(fid, gtr)
        else:
            tid, tw = self.spec.grid_D.cic_weights(gtr)
            V = np.asarray(self.phi.values_, float)
            vals = np.einsum("bc,bca->ba", tw, V[fid[:, None], tid])
        return float(np.sum(vals * area))


def _chunks(n: int, width: int, budget: int = 4_000_000):
    step = max(1, budget // max(width, 1))
    for s in range(0, n, step):
        yield np.arange(s, min(n, s + step))


def slack_rows_min(dt: DualTriple, spec: ProblemSpec, ops: _PhiOps | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per reference node, the minimum constraint slack over target nodes and its argmin."""
    ops = ops or _PhiOps(dt.phi, spec)
    go, gd = spec.grid_omega, spec.grid_D
    mins = np.empty(go.n_nodes)
    arg = np.empty(go.n_nodes, np.int64)
    omega = np.asarray(dt.omega, float)
    psi = np.asarray(dt.psi, float)
    for i in _chunks(go.n_nodes, gd.n_nodes * 4):
        div, wstar = ops.rows(i)
        slack = psi[i][:, None] + omega[None] + spec.F.pairwise(go.points[i], gd.points) - div - wstar
        arg[i] = np.argmin(slack, axis=1)
        mins[i] = slack[np.arange(len(i)), arg[i]]
    return mins, arg


def dual_feasibility_margin(dt: DualTriple, spec: ProblemSpec) -> float:
    """Minimum over all product nodes of psi + omega + F - div_x phi - W*(grad_y phi)."""
    return float(np.min(slack_rows_min(dt, spec)[0]))


def dual_energy(dt: DualTriple, spec: ProblemSpec) -> float:
    """Boundary flux of phi(x, g(x)) minus the integral of psi minus Phi*(omega)."""
    go = spec.grid_omega
    if not (np.all(np.isfinite(dt.psi)) and np.all(np.isfinite(dt.omega))):
        raise ValueError("dual fields must be finite")
    ops = _PhiOps(dt.phi, spec)
    flux = ops.boundary_flux()
    conj = phi_star(np.asarray(dt.omega, float), spec.penalty, spec.grid_D)
    if math.isinf(conj):
        return -math.inf
    return flux - float(go.volumes @ np.asarray(dt.psi, float)) - conj


def project_dual(dt: DualTriple, spec: ProblemSpec) -> DualTriple:
    """Raise psi node-wise by the constraint violation, making the triple feasible."""
    mins, _ = slack_rows_min(dt, spec)
    shift = np.maximum(-mins, 0.0)
    psi = np.asarray(dt.psi, float) + shift
    meta = dict(dt.meta, raw_margin=float(np.min(mins)),
                projection=float(spec.grid_omega.volumes @ shift))
    out = DualTriple(dt.phi, psi, np.asarray(dt.omega, float), meta=meta)
    out.feasibility_margin = float(np.min(mins + shift))
    return out


def build_dual_competitor(pair: EquilibriumPair, spec: ProblemSpec, epsilon: float | None = None,
                          eigen: EigenResult | None = None, lambda_hat: float | None = None,
                          project: bool = True, path: str | None = None) -> DualTriple:
    """Dual triple built from an equilibrium pair.

    ``quadratic`` path: phi = y^T grad u + |u - y|^2 w^T / 2 with w a
    change-of-variables field (w = 0 when lambda_hat + lambda_F >= 0).
    ``general`` path (convex omega): phi = y^T DW(grad u).
    With ``project`` (default), psi is raised where the discrete constraint
    is violated; the raw margin and the energy cost are kept in ``meta``.
    """
    go, gd = spec.grid_omega, spec.grid_D
    u = pair.u.values.reshape(go.n_nodes, -1)
    omega = np.asarray(pair.omega.values, float)
    lam_hat = lambda_convexity_modulus(pair.omega) if lambda_hat is None else float(lambda_hat)
    lam_F = float(spec.F.lambda_F)
    path = path or ("quadratic" if spec.W.form == "quadratic" else "general")
    grad = go.gradient(u)                                   # (N, k, d)
    d, k = go.dim, gd.dim
    meta = {"path": path, "lambda_hat": lam_hat}
    if path == "quadratic":
        if spec.W.form != "quadratic":
            raise ValueError("quadratic path needs the quadratic stored energy")
        if eigen is None:
            eigen = dirichlet_lambda1(go)
        lam1 = eigen.lambda1_safe
        margin = lam_hat + lam1 + lam_F
        if margin <= 0:
            raise ValueError(f"precondition violated: lambda_hat + lambda1 + lambda_F = {margin:.4g} <= 0")
        eps = margin / 2 if epsilon is None else float(epsilon)
        if not 0 < eps < margin:
            raise ValueError(f"epsilon must lie in (0, {margin:.4g})")
        cov = None
        if lam_hat + lam_F >= 0:
            w = np.zeros((go.n_nodes, d))
        else:
            cov = change_of_variables_field(go, -lam1 + eps)
            w = cov.w.values
            meta.update(enlargement=cov.enlargement, check_max=cov.check_max)
        meta.update(epsilon=eps, lambda1=lam1, w_target=-lam1 + eps)
        beta = np.transpose(grad, (0, 2, 1)) - w[:, :, None] * u[:, None, :]
        alpha = 0.5 * np.sum(u * u, axis=1)[:, None] * w
        gamma = 0.5 * w
        # product rule, with div w from the enlarged lattice when available
        divw = cov.divergence if cov is not None and cov.divergence is not None else go.divergence(w)
        lap = go.divergence(grad)                           # (N, k)
        wu = np.einsum("nkd,nd->nk", grad, w)               # (w . grad) u
        divergence = (0.5 * np.sum(u * u, axis=1) * divw + np.sum(u * wu, axis=1),
                      lap - u * divw[:, None] - wu, 0.5 * divw)
        energy_density = 0.5 * np.sum(grad * grad, axis=(1, 2))
    elif path == "general":
        if lam_hat < -1e-10:
            raise ValueError(f"precondition violated: general path needs convex omega (lambda_hat = {lam_hat:.4g})")
        S = spec.W.gradient(grad)
        beta = np.transpose(S, (0, 2, 1))
        alpha = np.zeros((go.n_nodes, d))
        gamma = np.zeros((go.n_nodes, d))
        w = np.zeros((go.n_nodes, d))
        energy_density = np.sum(S * grad, axis=(1, 2)) - spec.W.value(grad)
        divergence = (np.zeros(go.n_nodes), go.divergence(S), np.zeros(go.n_nodes))
    else:
        raise ValueError(f"unknown competitor path {path!r}")
    om_u = gd.interpolate(omega, u)
    gom_u = gd.interpolate(gd.gradient(omega), u)
    psi = (-om_u - spec.F.value(go.points, u) + np.sum(gom_u * u, axis=1)
           + np.sum(spec.F.gradient(go.points, u) * u, axis=1) + energy_density)
    dt = DualTriple(PolyPhi(alpha, beta, gamma, divergence), psi, omega.copy(), meta=meta)
    if project:
        return project_dual(dt, spec)
    dt.feasibility_margin = dual_feasibility_margin(dt, spec)
    dt.meta["raw_margin"] = dt.feasibility_margin
    return dt


# primal energy and gap ---------------------------------------------------------------------

def transport_terms(pf: PlanFlux, spec: ProblemSpec) -> np.ndarray:
    """Perspective W(J / pi) pi per pair; +inf where pi = 0 and J != 0."""
    W = spec.W
    out = np.zeros(pf.pi.size)
    pos = pf.pi > 0
    nj = np.sqrt(np.sum(pf.J * pf.J, axis=(1, 2)))
    out[~pos & (nj > 0)] = math.inf
    out[pos] = nj[pos] ** W.p / (W.p * pf.pi[pos] ** (W.p - 1))
    return out


def relaxed_energy(pf: PlanFlux, spec: ProblemSpec) -> float:
    t = transport_terms(pf, spec)
    if np.any(np.isinf(t)):
        return math.inf
    go, gd = spec.grid_omega, spec.grid_D
    Fv = spec.F.value(go.points[pf.omega_ids], gd.points[pf.target_ids])
    return float(np.sum(t) + pf.pi @ Fv + eval_phi(pf.mu, spec.penalty))


@dataclass
class GapReport:
    gap: float
    relaxed: float
    dual: float
    transport_slack: float
    constraint_slack: float
    penalty_slack: float
    continuity_defect: float
    marginal_defect: float
    slack: float
    primal_admissible: bool
    dual_admissible: bool
    continuity_residual: float
    feasibility_margin: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def duality_gap(pf: PlanFlux, dt: DualTriple, spec: ProblemSpec, feas_tol: float | None = None,
                continuity_tol: float | None = None, basis_size: int = 3) -> GapReport:
    """Relaxed minus dual energy with an exact decomposition

        gap = transport + constraint + penalty slacks + continuity defect - marginal defect.

    The first two terms are nonnegative for admissible inputs; the penalty
    slack is nonnegative for the integral penalty (Fenchel-Young) and may be
    negative under the toleranced incompressible penalty. ``slack`` bounds
    how negative the gap can be: |continuity| + |marginal| + negative parts.
    """
    go, gd = spec.grid_omega, spec.grid_D
    h = max(go.h, gd.h)
    feas_tol = 1e-8 + 10 * h * h if feas_tol is None else feas_tol
    continuity_tol = 10 * h if continuity_tol is None else continuity_tol
    ops = _PhiOps(dt.phi, spec)
    psi, omega = np.asarray(dt.psi, float), np.asarray(dt.omega, float)
    i, j = pf.omega_ids, pf.target_ids
    div, G = ops.pairs(i, j)
    wstar = spec.W.conjugate(G)
    trans = transport_terms(pf, spec)
    t1 = float(np.sum(trans - np.sum(G * pf.J, axis=(1, 2)) + wstar * pf.pi))
    Fv = spec.F.value(go.points[i], gd.points[j])
    t2 = float(pf.pi @ (psi[i] + omega[j] + Fv - div - wstar))
    pen = eval_phi(pf.mu, spec.penalty)
    conj = phi_star(omega, spec.penalty, gd)
    t3 = pen + conj - float(omega @ pf.mu.masses)
    flux = ops.boundary_flux()
    r1 = float(pf.pi @ div + np.sum(G * pf.J)) - flux
    r2 = float(pf.omega_marginal() @ psi - go.volumes @ psi)
    relaxed = relaxed_energy(pf, spec)
    dual = flux - float(go.volumes @ psi) - conj
    margin = dt.feasibility_margin if dt.feasibility_margin is not None else dual_feasibility_margin(dt, spec)
    cres = continuity_residual(pf, spec, basis_size)
    slack = abs(r1) + abs(r2) + max(0.0, -t3) + max(0.0, -t2)
    return GapReport(gap=relaxed - dual, relaxed=relaxed, dual=dual, transport_slack=t1,
                     constraint_slack=t2, penalty_slack=t3, continuity_defect=r1, marginal_defect=r2,
                     slack=slack, primal_admissible=bool(cres <= continuity_tol and pf.marginal_error() <= 1e-9),
                     dual_admissible=bool(margin >= -feas_tol), continuity_residual=cres,
                     feasibility_margin=float(margin))


def equality_diagnostics(pf: PlanFlux, dt: DualTriple, spec: ProblemSpec, support_tol: float = 1e-12) -> dict:
    """The three weak-duality equality conditions on the support of pi:

    flux alignment  max |grad_y phi - DW(J / pi)|,
    tight constraint  max |psi + omega + F - div_x phi - W*(grad_y phi)|,
    Fenchel-Young slack of the penalty  Phi(mu) + Phi*(omega) - <omega, mu>.
    """
    go, gd = spec.grid_omega, spec.grid_D
    ops = _PhiOps(dt.phi, spec)
    sel = pf.pi > support_tol * np.max(pf.pi)
    i, j, pi, J = pf.omega_ids[sel], pf.target_ids[sel], pf.pi[sel], pf.J[sel]
    div, G = ops.pairs(i, j)
    align = G - spec.W.gradient(J / pi[:, None, None])
    slack = (np.asarray(dt.psi)[i] + np.asarray(dt.omega)[j] + spec.F.value(go.points[i], gd.points[j])
             - div - spec.W.conjugate(G))
    omega = np.asarray(dt.omega, float)
    fy = eval_phi(pf.mu, spec.penalty) + phi_star(omega, spec.penalty, gd) - float(omega @ pf.mu.masses)
    return {"support": int(sel.sum()), "flux_alignment": float(np.max(np.abs(align), initial=0.0)),
            "constraint_tightness": float(np.max(np.abs(slack), initial=0.0)), "fenchel_young": float(fy)}


# solver ---------------------------------------------------------------------------------

class CellCapExceeded(ValueError):
    """Product grid larger than the configured cell cap."""


def perspective_prox(a: np.ndarray, b: np.ndarray, tau: np.ndarray | float, iters: int = 60):
    """Prox of tau |J|^2 / (2 pi) (with pi >= 0) at (a, b); b has shape (n, m).

    Zero when a + |b|^2 / (2 tau) <= 0; otherwise pi solves
    (pi - a)(pi + tau)^2 = tau |b|^2 / 2, found by Newton from the upper
    bound a + |b|^2 / (2 tau) (the cubic is convex and increasing there),
    and J = b pi / (pi + tau).
    """
    a = np.asarray(a, float)
    tau = np.broadcast_to(np.asarray(tau, float), a.shape)
    bb = np.sum(b * b, axis=1)
    pos = a + bb / (2 * tau) > 0
    pi = np.zeros_like(a)
    ap, tp, bp = a[pos], tau[pos], bb[pos]
    x = ap + bp / (2 * tp)
    for _ in range(iters):
        g = (x - ap) * (x + tp) ** 2 - tp * bp / 2
        dg = (x + tp) ** 2 + 2 * (x - ap) * (x + tp)
        step = g / dg
        x = x - step
        if np.all(np.abs(step) <= 1e-15 * (1 + np.abs(x))):
            break
    pi[pos] = np.maximum(x, 0.0)
    J = b * (pi / (pi + tau))[:, None]
    return pi, J


@dataclass
class SolveTrace:
    rows: list
    converged: bool
    iterations: int
    elapsed: float
    meta: dict = field(default_factory=dict)

    COLUMNS = ("iteration", "primal", "continuity_residual", "marginal_error", "gap")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for r in self.rows:
                wr.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c]
                             for c in self.COLUMNS])


def _marginal_operators(No: int, Nd: int):
    MO = sp.kron(sp.identity(No), np.ones((1, Nd)), format="csr")
    MD = sp.kron(np.ones((1, No)), sp.identity(Nd), format="csr")
    return MO, MD


DENSE_PROJECTOR_LIMIT = 6000


def solve_relaxation(spec: ProblemSpec, max_iter: int = 50_000, tol: float = 1e-6,
                     cell_cap: int = DEFAULT_CELL_CAP, trace_every: int = 10, basis_size: int = 3,
                     dual: DualTriple | None = None, time_limit: float | None = None,
                     method: str = "auto", step: float | None = None):
    """Minimize the relaxed energy over plan/flux pairs on the dense product grid.

    Problem: min sum |J|^2 / (2 pi) + F pi  subject to  K (pi, J) = b, pi >= 0,
    with K stacking the nodal continuity equation and both marginal
    constraints (the incompressible penalty fixes the target marginal).

    ``douglas-rachford`` alternates the per-cell perspective prox with the
    exact projection onto {K x = b} (dense pseudo-inverse, small grids only);
    ``chambolle-pock`` is the diagonally preconditioned primal-dual iteration
    and needs only products with K. ``auto`` picks the first when K has at
    most DENSE_PROJECTOR_LIMIT columns. The returned iterate is the prox
    output (pi >= 0, J = 0 where pi = 0). Stops when the test-family
    continuity residual and both relative marginal errors are at most
    ``tol``; ``converged = False`` in the trace flags non-convergence.
    """
    if spec.W.form != "quadratic":
        raise ValueError("the solver needs the quadratic stored energy")
    if spec.penalty.variant != "incompressible":
        raise ValueError("the solver supports the incompressible penalty only")
    go, gd = spec.grid_omega, spec.grid_D
    No, Nd, d, k = go.n_nodes, gd.n_nodes, go.dim, gd.dim
    cells = No * Nd
    if cells > cell_cap:
        raise CellCapExceeded(f"product grid has {cells} cells > cap {cell_cap}")
    t0 = time.perf_counter()
    Kc, bc = continuity_operator(spec)
    MO, MD = _marginal_operators(No, Nd)
    m = k * d
    zero = sp.csr_matrix((No, cells * m)), sp.csr_matrix((Nd, cells * m))
    K = sp.vstack([Kc, sp.hstack([MO, zero[0]]), sp.hstack([MD, zero[1]])], format="csr")
    vol_o, vol_d = go.volumes, gd.volumes
    b = np.concatenate([bc, vol_o, vol_d])
    if method == "auto":
        method = "douglas-rachford" if K.shape[1] <= DENSE_PROJECTOR_LIMIT else "chambolle-pock"
    if method not in ("douglas-rachford", "chambolle-pock"):
        raise ValueError(f"unknown method {method!r}")
    Fv = spec.F.pairwise(go.points, gd.points).ravel()
    oi, tj = np.divmod(np.arange(cells), Nd)
    rows = []
    dual_value = dual_energy(dual, spec) if dual is not None else None

    def split(xx):
        return xx[:cells], xx[cells:].reshape(m, cells).T

    def record(it, pi, J):
        persp = np.where(pi > 0, np.sum(J * J, axis=1) / (2 * np.where(pi > 0, pi, 1.0)), 0.0)
        primal = float(np.sum(persp) + Fv @ pi)
        pf = PlanFlux(go, gd, oi, tj, pi, J.reshape(cells, k, d))
        cres = continuity_residual(pf, spec, basis_size)
        merr = max(float(np.max(np.abs(MO @ pi - vol_o)) / np.max(vol_o)),
                   float(np.max(np.abs(MD @ pi - vol_d)) / np.max(vol_d)))
        rows.append({"iteration": it, "primal": primal, "continuity_residual": cres,
                     "marginal_error": merr, "gap": None if dual_value is None else primal - dual_value})
        return cres <= tol and merr <= tol

    x = np.concatenate([np.outer(vol_o, vol_d / vol_d.sum()).ravel(), np.zeros(cells * m)])
    pi, J = split(x)
    converged, it = False, 0
    if method == "douglas-rachford":
        Kd = K.toarray()
        Kp = np.linalg.pinv(Kd, rcond=1e-12)
        gamma = 10 * float(vol_o.sum() * vol_d.sum()) / cells if step is None else float(step)
        z = x
        for it in range(1, max_iter + 1):
            zp, zJ = split(z)
            pi, J = perspective_prox(zp - gamma * Fv, zJ, gamma)
            xn = np.concatenate([pi, J.T.ravel()])
            v = 2 * xn - z
            z = z + (v - Kp @ (Kd @ v - b)) - xn
            if it % trace_every == 0 or it == max_iter:
                if record(it, pi, J):
                    converged = True
                    break
                if time_limit is not None and time.perf_counter() - t0 > time_limit:
                    break
        meta = {"step": gamma}
    else:
        absK = abs(K)
        sigma = 1.0 / np.maximum(np.asarray(absK.sum(axis=1)).ravel(), 1e-300)
        col = 1.0 / np.maximum(np.asarray(absK.sum(axis=0)).ravel(), 1e-300)
        # one step per cell keeps the perspective prox closed-form
        tau = np.minimum(col[:cells], col[cells:].reshape(m, cells).min(axis=0))
        tau_full = np.concatenate([tau, np.tile(tau, m)])
        KT = K.T.tocsr()
        xbar = x.copy()
        y = np.zeros(K.shape[0])
        for it in range(1, max_iter + 1):
            y += sigma * (K @ xbar - b)
            vp, vJ = split(x - tau_full * (KT @ y))
            pi, J = perspective_prox(vp - tau * Fv, vJ, tau)
            xn = np.concatenate([pi, J.T.ravel()])
            xbar = 2 * xn - x
            x = xn
            if it % trace_every == 0 or it == max_iter:
                if record(it, pi, J):
                    converged = True
                    break
                if time_limit is not None and time.perf_counter() - t0 > time_limit:
                    break
        meta = {}
    meta.update(cells=cells, tol=tol, basis_size=basis_size, method=method)
    trace = SolveTrace(rows, converged, it, time.perf_counter() - t0, meta=meta)
    return PlanFlux(go, gd, oi, tj, pi, J.reshape(cells, k, d)), trace


# randomized weak-duality audit ---------------------------------------------------------

def audit_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used by randomized audits."""
    return np.random.Generator(np.random.Philox(int(seed)))


def random_plan(spec: ProblemSpec, rng: np.random.Generator, target: np.ndarray | None = None,
                sinkhorn_iters: int = 2000) -> PlanFlux:
    """Random admissible plan/flux on the dense product grid.

    pi: random positive kernel balanced by Sinkhorn scaling to the node
    volumes of the reference grid and to ``target`` (default: target node
    volumes), finishing on the reference side so that marginal is exact.
    J: minimum-norm solution of the nodal continuity equation for that pi
    plus a random null-space component.
    """
    go, gd = spec.grid_omega, spec.grid_D
    No, Nd, d, k = go.n_nodes, gd.n_nodes, go.dim, gd.dim
    vol_o = go.volumes
    target = gd.volumes * (vol_o.sum() / gd.volumes.sum()) if target is None else np.asarray(target, float)
    pi = np.exp(rng.normal(size=(No, Nd)))
    for _ in range(sinkhorn_iters):
        pi *= (target / pi.sum(axis=0))[None]
        pi *= (vol_o / pi.sum(axis=1))[:, None]
        if np.max(np.abs(pi.sum(axis=0) - target)) <= 1e-14 * target.max():
            break
    Kc, b = continuity_operator(spec)
    cells = No * Nd
    r = (b - Kc[:, :cells] @ pi.ravel()).reshape(d, No, Nd)
    Gy = np.hstack([gd.sbp_derivative_matrix(l).T.toarray() for l in range(k)])   # (Nd, k Nd)
    Gp = np.linalg.pinv(Gy, rcond=1e-12)
    J = np.empty((No, Nd, k, d))
    for a in range(d):
        xi = rng.normal(size=(k * Nd, No)) * 0.1
        sol = Gp @ r[a].T + xi - Gp @ (Gy @ xi)                                     # (k Nd, No)
        J[:, :, :, a] = sol.T.reshape(No, k, Nd).transpose(0, 2, 1)
    return PlanFlux.from_dense(go, gd, pi, J)


def random_dual(spec: ProblemSpec, rng: np.random.Generator, scale: float = 1.0) -> DualTriple:
    """Random dense phi and omega; psi is raised to exact feasibility."""
    go, gd = spec.grid_omega, spec.grid_D
    phi = DensePhi(scale * rng.normal(size=(go.n_nodes, gd.n_nodes, go.dim)))
    omega = scale * rng.normal(size=gd.n_nodes)
    return project_dual(DualTriple(phi, np.zeros(go.n_nodes), omega), spec)


def weak_duality_audit(spec: ProblemSpec, pairs: int = 200, seed: int = 0,
                       target_spread: float = 0.0) -> dict:
    """Gap statistics over random admissible (plan/flux, dual) pairs.

    ``target_spread`` > 0 perturbs the target marginal (log-normal factor),
    which is only admissible with the integral penalty. A pair violates weak
    duality when gap < -1e-9 - slack.
    """
    rng = audit_rng(seed)
    gaps, slacks, worst = [], [], None
    for _ in range(pairs):
        tgt = None
        if target_spread > 0:
            f = np.exp(target_spread * rng.normal(size=spec.grid_D.n_nodes))
            tgt = spec.grid_D.volumes * f
            tgt *= spec.grid_omega.volumes.sum() / tgt.sum()
        pf = random_plan(spec, rng, tgt)
        # log-uniform dual scale so that some pairs come close to tight
        dt = random_dual(spec, rng, scale=10.0 ** rng.uniform(-3, 0))
        rep = duality_gap(pf, dt, spec)
        gaps.append(rep.gap)
        slacks.append(rep.slack)
        if worst is None or rep.gap + rep.slack < worst.gap + worst.slack:
            worst = rep
    gaps, slacks = np.array(gaps), np.array(slacks)
    return {"pairs": pairs, "seed": seed, "min_gap": float(gaps.min()),
            "min_gap_plus_slack": float(np.min(gaps + slacks)), "max_slack": float(slacks.max()),
            "violations": int(np.sum(gaps < -1e-9 - slacks)), "worst": worst.to_dict()}
