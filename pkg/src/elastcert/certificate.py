"""Global-optimality certificates from the convexity modulus of the pressure.

Two sufficient conditions are checked for an equilibrium pair (u, omega):

* convex pressure: omega convex (modulus >= 0) makes u a global minimizer,
  unique when omega, F or W is strictly convex;
* eigenvalue margin: lambda_hat + lambda_W * lambda_1(Omega) + lambda_F > 0
  (p >= 2) makes u the unique global minimizer.

All estimates are grid-relative; reports carry the resolution and caveats.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import jv

from .domain import EigenResult, Field, Grid, dirichlet_lambda1
from .energy import ProblemSpec, phi_h_derivative, pushforward
from .equilibrium import EquilibriumPair, el_residual

VERDICTS = ("certified_unique", "certified_minimizer", "inconclusive")
CAVEATS = (
    "modulus estimated on the closure of D only",
    "residual is basis-restricted",
    "density tolerance is grid-relative",
)


@dataclass
class CertificateReport:
    lambda_hat: float
    lambda1: float
    lambda1_safety: float
    lambda_W: float
    lambda_F: float
    margin: float
    el_residual: float
    verdict: str
    residual_tol: float = 0.0
    lambda1_raw: float = 0.0
    path: str = "none"
    reasons: list = field(default_factory=list)
    penalty_check: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    caveats: list = field(default_factory=lambda: list(CAVEATS))

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _grid_meta(g: Grid) -> dict:
    return {"shape": g.spec.shape, "resolution": list(g.resolution), "h": g.h, "nodes": g.n_nodes}


def hessian_min_eigenvalues(omega: Field) -> tuple[np.ndarray, np.ndarray]:
    """Smallest eigenvalue of the second-difference Hessian at nodes with a
    full stencil; returns (node ids, eigenvalues)."""
    g = omega.grid
    if any(c < 3 for c in g.counts):
        raise ValueError("grid too coarse: need at least 3 nodes per axis")
    w = np.asarray(omega.values, float)
    if w.ndim != 1:
        raise ValueError("omega must be scalar")
    k = g.dim
    ok = np.ones(g.n_nodes, bool)
    nb = {}
    for a in range(k):
        for s in (-1, 1):
            nb[a, s] = g.neighbor(a, s)
            ok &= nb[a, s] >= 0
    diag = {}
    for a in range(k):
        for b in range(a + 1, k):
            for sa in (-1, 1):
                for sb in (-1, 1):
                    first = nb[a, sa]
                    L = g.lattice[np.maximum(first, 0)].copy()
                    L[:, b] += sb
                    inside = (first >= 0) & (L[:, b] >= 0) & (L[:, b] < g.counts[b])
                    idx = np.full(g.n_nodes, -1, dtype=np.int64)
                    idx[inside] = g.index[tuple(L[inside].T)]
                    diag[a, b, sa, sb] = idx
                    ok &= idx >= 0
    ids = np.nonzero(ok)[0]
    if ids.size == 0:
        raise ValueError("grid too coarse: no node with a full second-difference stencil")
    H = np.empty((ids.size, k, k))
    hs = g.spacing
    for a in range(k):
        H[:, a, a] = (w[nb[a, 1][ids]] - 2 * w[ids] + w[nb[a, -1][ids]]) / hs[a] ** 2
        for b in range(a + 1, k):
            cross = (w[diag[a, b, 1, 1][ids]] - w[diag[a, b, 1, -1][ids]]
                     - w[diag[a, b, -1, 1][ids]] + w[diag[a, b, -1, -1][ids]]) / (4 * hs[a] * hs[b])
            H[:, a, b] = H[:, b, a] = cross
    return ids, np.linalg.eigvalsh(H)[:, 0]


def lambda_convexity_modulus(omega: Field) -> float:
    """Largest lambda with omega - lambda |y|^2 / 2 convex, estimated by second differences."""
    return float(np.min(hessian_min_eigenvalues(omega)[1]))


def penalty_membership(pair: EquilibriumPair, spec: ProblemSpec, subsamples: int = 4,
                       subdiff_tol: float | None = None) -> dict:
    """Check that omega is a subgradient of the penalty at the image measure.

    Incompressible: only the density is checked (every continuous omega is a
    subgradient). Integral penalty: sup |omega - phi_h'(density)| must not
    exceed ``subdiff_tol``, by default the spread of phi_h' over the density
    tolerance band around the measured density.
    """
    mu = pushforward(pair.u, spec.grid_D, subsamples)
    rho = mu.density
    pen = spec.penalty
    tol = pen.tolerance(spec.grid_D)
    if pen.variant == "incompressible":
        err = float(np.max(np.abs(rho - 1.0)))
        return {"variant": pen.variant, "density_error": err, "density_tol": tol, "ok": err <= tol}
    if np.min(rho) <= 0:
        return {"variant": pen.variant, "ok": False, "reason": "vanishing density"}
    target = phi_h_derivative(pen, rho)
    err = float(np.max(np.abs(pair.omega.values - target)))
    if subdiff_tol is None:
        band = np.abs(phi_h_derivative(pen, rho * (1 + tol)) - phi_h_derivative(pen, rho * (1 - tol)))
        subdiff_tol = float(np.max(band)) / 2
    return {"variant": pen.variant, "subdiff_error": err, "subdiff_tol": subdiff_tol,
            "density_tol": tol, "ok": err <= subdiff_tol}


def certify(pair: EquilibriumPair, spec: ProblemSpec, residual_tol: float | None = None,
            basis_size: int = 3, subsamples: int = 4, eigen: EigenResult | None = None,
            eigen_tol: float = 1e-8, subdiff_tol: float | None = None) -> CertificateReport:
    go = spec.grid_omega
    if residual_tol is None:
        if pair.family == "external":
            raise ValueError("external pairs need an explicit residual_tol")
        residual_tol = 10 * go.h ** 2
    res = el_residual(pair, spec, basis_size)
    lam_hat = lambda_convexity_modulus(pair.omega)
    if eigen is None:
        eigen = dirichlet_lambda1(go, tol=eigen_tol)
    lam_W, lam_F = float(spec.W.lambda_W), float(spec.F.lambda_F)
    margin = lam_hat + lam_W * eigen.lambda1_safe + lam_F
    check = penalty_membership(pair, spec, subsamples, subdiff_tol)
    reasons = []
    if res > residual_tol:
        reasons.append(f"el_residual {res:.3e} above residual_tol {residual_tol:.3e}")
    if not check["ok"]:
        reasons.append("omega not verified in the penalty subdifferential"
                       + (f" ({check['reason']})" if "reason" in check else ""))
    verdict, path = "inconclusive", "none"
    if not reasons:
        eps = 1e-10 * max(1.0, float(np.max(np.abs(pair.omega.values))))
        convex = lam_hat >= -eps
        paths = (["eigenvalue_margin"] if spec.W.p >= 2 else []) + (["convex_pressure"] if convex else [])
        if not paths:
            reasons.append("eigenvalue margin needs p >= 2 and the pressure is not convex")
        elif margin > eps:
            verdict = "certified_unique"
        elif margin >= -eps:
            verdict = "certified_minimizer"
        else:
            reasons.append(f"margin {margin:.4g} < 0 and pressure not convex")
        if verdict != "inconclusive":
            path = "+".join(paths)
    return CertificateReport(
        lambda_hat=lam_hat, lambda1=eigen.lambda1_safe, lambda1_safety=eigen.safety,
        lambda_W=lam_W, lambda_F=lam_F, margin=margin, el_residual=res, verdict=verdict,
        residual_tol=residual_tol, lambda1_raw=eigen.lambda1, path=path, reasons=reasons,
        penalty_check={k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in check.items()},
        grid={"omega": _grid_meta(go), "D": _grid_meta(spec.grid_D), "basis_size": basis_size,
              "subsamples": subsamples, "family": pair.family})


def bessel_zero(nu: float) -> float:
    """First positive zero of J_nu (nu > -1)."""
    if nu == -0.5:
        return math.pi / 2
    x, step = 1e-3, 0.05
    f0 = jv(nu, x)
    while True:
        x1 = x + step
        f1 = jv(nu, x1)
        if np.sign(f1) != np.sign(f0):
            return float(brentq(lambda t: jv(nu, t), x, x1, xtol=1e-15))
        x, f0 = x1, f1


def ball_lambda1(d: int, diameter: float) -> float:
    """lambda_1 of a ball of the given diameter in R^d."""
    return 4 * bessel_zero(d / 2 - 1) ** 2 / diameter ** 2


def local_radius(omega: Field, spec: ProblemSpec, lambda_hat: float | None = None) -> float:
    """Largest diameter r such that subdomains of diameter r keep a positive margin."""
    lam_W = float(spec.W.lambda_W)
    if lam_W <= 0:
        raise ValueError("local radius needs lambda_W > 0")
    lam = lambda_convexity_modulus(omega) if lambda_hat is None else float(lambda_hat)
    if not math.isfinite(lam):
        raise ValueError("lambda_hat must be finite")
    deficit = -(lam + float(spec.F.lambda_F))
    if deficit <= 0:
        return math.inf
    return 2 * bessel_zero(spec.d / 2 - 1) * math.sqrt(lam_W / deficit)
