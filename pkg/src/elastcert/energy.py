"""Problem data and evaluation of the penalized elastic energy.

The energy of a deformation ``u`` is the quadrature of ``W(grad u) + F(x, u)``
over the reference grid plus a convex penalty of the image measure
``u # Leb``. Energies may be ``+inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import Field, Grid

Array = np.ndarray


# stored energy -----------------------------------------------------------------

@dataclass(frozen=True)
class StoredEnergySpec:
    """``quadratic``: W(C) = |C|^2 / 2.  ``p_power``: W(C) = |C|^p / p."""

    form: str = "quadratic"
    p: float = 2.0
    lambda_W: float | None = None

    def __post_init__(self):
        if self.form not in ("quadratic", "p_power"):
            raise ValueError(f"unknown stored energy form {self.form!r}")
        if self.form == "quadratic":
            object.__setattr__(self, "p", 2.0)
        if not self.p > 1:
            raise ValueError("exponent p must exceed 1")
        natural = 1.0 if self.p == 2.0 else 0.0
        if self.lambda_W is None:
            object.__setattr__(self, "lambda_W", natural)
        elif not 0.0 <= self.lambda_W <= natural:
            raise ValueError(f"lambda_W={self.lambda_W} is not a convexity modulus of {self.form} "
                             f"(p={self.p}); at most {natural}")

    @property
    def strictly_convex(self) -> bool:
        return True

    def value(self, C: Array) -> Array:
        n = np.sqrt(np.sum(C * C, axis=(-2, -1)))
        return n ** self.p / self.p

    def gradient(self, C: Array) -> Array:
        if self.p == 2.0:
            return np.array(C, float)
        n = np.sqrt(np.sum(C * C, axis=(-2, -1)))
        scale = np.where(n > 0, n ** (self.p - 2) if self.p >= 2 else np.where(n > 0, n, 1.0) ** (self.p - 2), 0.0)
        return C * scale[..., None, None]

    def conjugate(self, M: Array) -> Array:
        q = self.p / (self.p - 1)
        n = np.sqrt(np.sum(M * M, axis=(-2, -1)))
        return n ** q / q

    def to_dict(self) -> dict:
        return {"form": self.form, "p": self.p, "lambda_W": self.lambda_W}


# potential ---------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarPotential:
    """Smooth potential psi(y) = 0.5 * y^T Q y + a.y with named presets."""

    Q: tuple
    a: tuple
    name: str = "quadratic_form"

    @classmethod
    def half_square(cls, k: int, scale: float = 1.0, center=None) -> "ScalarPotential":
        c = np.zeros(k) if center is None else np.asarray(center, float)
        Q = scale * np.eye(k)
        # 0.5 s |y - c|^2 = 0.5 s |y|^2 - s c.y + const; the constant is kept in value()
        return cls(tuple(map(tuple, Q)), tuple(-scale * c), name="half_square")

    def _Q(self) -> Array:
        return np.asarray(self.Q, float)

    def value(self, y: Array) -> Array:
        Q, a = self._Q(), np.asarray(self.a, float)
        val = 0.5 * np.einsum("ni,ij,nj->n", y, Q, y) + y @ a
        if self.name == "half_square":
            # restore the dropped constant so psi(center) = 0
            s = Q[0, 0]
            c = -a / s if s else np.zeros_like(a)
            val = val + 0.5 * s * c @ c
        return val

    def gradient(self, y: Array) -> Array:
        return y @ self._Q().T + np.asarray(self.a, float)

    def hessian(self) -> Array:
        return self._Q()

    def to_dict(self) -> dict:
        return {"name": self.name, "Q": [list(r) for r in self.Q], "a": list(self.a)}


@dataclass(frozen=True)
class PotentialSpec:
    """Catalog of potentials F(x, y) carrying their convexity modulus in y.

    ``zero``; ``linear``: -f.y; ``potential_pullback``: -grad psi(x).y;
    ``quadratic``: c/2 |y - y0|^2.
    """

    form: str = "zero"
    force: tuple | None = None
    psi: ScalarPotential | None = None
    c: float = 0.0
    y0: tuple | None = None
    lambda_F: float | None = None

    def __post_init__(self):
        natural = {"zero": 0.0, "linear": 0.0, "potential_pullback": 0.0}.get(self.form)
        if self.form == "quadratic":
            if self.c < 0:
                raise ValueError("quadratic potential needs c >= 0")
            natural = self.c
        if natural is None:
            raise ValueError(f"unknown potential form {self.form!r}")
        if self.form == "linear" and self.force is None:
            raise ValueError("linear potential needs a force vector")
        if self.form == "potential_pullback" and self.psi is None:
            raise ValueError("potential_pullback needs psi")
        if self.lambda_F is None:
            object.__setattr__(self, "lambda_F", natural)
        elif self.lambda_F > natural + 1e-15:
            raise ValueError(f"lambda_F={self.lambda_F} exceeds the modulus {natural} of {self.form}")

    @property
    def strictly_convex(self) -> bool:
        return self.form == "quadratic" and self.c > 0

    def value(self, x: Array, y: Array) -> Array:
        y = np.atleast_2d(y)
        if self.form == "zero":
            return np.zeros(y.shape[0])
        if self.form == "linear":
            return -(y @ np.asarray(self.force, float))
        if self.form == "potential_pullback":
            return -np.sum(self.psi.gradient(x) * y, axis=1)
        d = y - (np.zeros(y.shape[1]) if self.y0 is None else np.asarray(self.y0, float))
        return 0.5 * self.c * np.sum(d * d, axis=1)

    def pairwise(self, x: Array, y: Array) -> Array:
        """F(x_i, y_j) for all pairs, shape (len(x), len(y))."""
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        if self.form == "zero":
            return np.zeros((x.shape[0], y.shape[0]))
        if self.form == "linear":
            return np.broadcast_to(-(y @ np.asarray(self.force, float)), (x.shape[0], y.shape[0])).copy()
        if self.form == "potential_pullback":
            return -self.psi.gradient(x) @ y.T
        d = y - (np.zeros(y.shape[1]) if self.y0 is None else np.asarray(self.y0, float))
        return np.broadcast_to(0.5 * self.c * np.sum(d * d, axis=1), (x.shape[0], y.shape[0])).copy()

    def gradient(self, x: Array, y: Array) -> Array:
        """D_y F(x, y), shape (N, k)."""
        y = np.atleast_2d(y)
        if self.form == "zero":
            return np.zeros_like(y, dtype=float)
        if self.form == "linear":
            return -np.broadcast_to(np.asarray(self.force, float), y.shape).copy()
        if self.form == "potential_pullback":
            return -self.psi.gradient(x)
        return self.c * (y - (np.zeros(y.shape[1]) if self.y0 is None else np.asarray(self.y0, float)))

    def to_dict(self) -> dict:
        d = {"form": self.form, "lambda_F": self.lambda_F}
        if self.force is not None:
            d["force"] = list(self.force)
        if self.psi is not None:
            d["psi"] = self.psi.to_dict()
        if self.form == "quadratic":
            d.update(c=self.c, y0=None if self.y0 is None else list(self.y0))
        return d


# image penalty -----------------------------------------------------------------

def _h_quadratic(t):
    return (t - 1.0) ** 2


def _hp_quadratic(t):
    return 2.0 * (t - 1.0)


def _h_log(t):
    return -np.log(t) + t - 1.0


def _hp_log(t):
    return -1.0 / t + 1.0


# name -> (h, h', phi_h(0), slope of phi_h at infinity = h(0+))
H_CATALOG: dict[str, tuple[Callable, Callable, float, float]] = {
    "quadratic": (_h_quadratic, _hp_quadratic, math.inf, 1.0),
    "log": (_h_log, _hp_log, 1.0, math.inf),
}


@dataclass(frozen=True)
class ImagePenalty:
    """``incompressible`` (toleranced density == 1) or ``integral_h``
    (integral of phi_h(density) with phi_h(s) = s h(1/s))."""

    variant: str = "incompressible"
    density_tol: float | None = None
    h: Callable | None = None
    h_prime: Callable | None = None
    name: str | None = None
    phi_zero: float | None = None
    slope_at_infinity: float | None = None

    def __post_init__(self):
        if self.variant == "incompressible":
            if self.density_tol is not None and self.density_tol <= 0:
                raise ValueError("density_tol must be positive")
            return
        if self.variant != "integral_h":
            raise ValueError(f"unknown penalty variant {self.variant!r}")
        if self.h is None:
            if self.name not in H_CATALOG:
                raise ValueError(f"integral_h needs h or a catalog name in {sorted(H_CATALOG)}")
            h, hp, z, s = H_CATALOG[self.name]
            object.__setattr__(self, "h", h)
            object.__setattr__(self, "h_prime", hp)
            object.__setattr__(self, "phi_zero", z)
            object.__setattr__(self, "slope_at_infinity", s)
        if self.phi_zero is None:
            t = 1e12
            val = float(self.h(t) / t)
            object.__setattr__(self, "phi_zero", math.inf if val > 1e6 else val)
        if self.slope_at_infinity is None:
            val = float(self.h(1e-14))
            object.__setattr__(self, "slope_at_infinity", math.inf if val > 1e6 else val)
        s = np.logspace(-3, 3, 601)
        f = phi_h_value(self, s)
        interp = (f[:-2] * (s[2:] - s[1:-1]) + f[2:] * (s[1:-1] - s[:-2])) / (s[2:] - s[:-2])
        if np.any(f[1:-1] - interp > 1e-10 * (1.0 + np.abs(f[1:-1]))):
            raise ValueError("phi_h(s) = s h(1/s) is not convex on [1e-3, 1e3]")

    @classmethod
    def incompressible(cls, density_tol: float | None = None) -> "ImagePenalty":
        return cls("incompressible", density_tol=density_tol)

    @classmethod
    def integral(cls, name: str) -> "ImagePenalty":
        return cls("integral_h", name=name)

    def tolerance(self, grid: Grid) -> float:
        """Density tolerance; defaults to 0.05 at h = 1/32, proportional to h."""
        return self.density_tol if self.density_tol is not None else 1.6 * grid.h

    def to_dict(self) -> dict:
        if self.variant == "incompressible":
            return {"variant": self.variant, "density_tol": self.density_tol}
        return {"variant": self.variant, "name": self.name}


def phi_h_value(penalty: ImagePenalty, s) -> Array | float:
    """phi_h(s) = h(1/s) s for s > 0."""
    s_arr = np.asarray(s, float)
    if np.any(s_arr <= 0):
        raise ValueError("phi_h is evaluated at s > 0 only")
    out = penalty.h(1.0 / s_arr) * s_arr
    return float(out) if np.ndim(out) == 0 else out


def phi_h_derivative(penalty: ImagePenalty, s) -> Array:
    s = np.asarray(s, float)
    if penalty.h_prime is not None:
        t = 1.0 / s
        return penalty.h(t) - penalty.h_prime(t) * t
    step = 1e-6 * s
    return (phi_h_value(penalty, s + step) - phi_h_value(penalty, s - step)) / (2 * step)


def phi_h_conjugate(penalty: ImagePenalty, r) -> tuple[Array, Array]:
    """Pointwise sup_{s >= 0} (r s - phi_h(s)); returns (values, unbounded mask).

    Solves phi_h'(s) = r by bisection in log s (phi_h' is nondecreasing).
    """
    r = np.atleast_1d(np.asarray(r, float))
    unbounded = r >= penalty.slope_at_infinity
    out = np.full(r.shape, np.inf)
    todo = ~unbounded
    rr = r[todo]
    lo = np.full(rr.shape, -30.0)
    hi = np.full(rr.shape, 30.0)
    at_zero = phi_h_derivative(penalty, 10.0 ** lo) >= rr
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        up = phi_h_derivative(penalty, 10.0 ** mid) < rr
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    s = 10.0 ** (0.5 * (lo + hi))
    val = rr * s - phi_h_value(penalty, s)
    if np.any(at_zero):
        val = np.where(at_zero, np.maximum(val, -penalty.phi_zero), val)
    out[todo] = val
    return out, unbounded


# measures ----------------------------------------------------------------------

@dataclass
class MeasureOnD:
    grid: Grid
    masses: Array

    def __post_init__(self):
        self.masses = np.asarray(self.masses, float)
        if self.masses.shape != (self.grid.n_nodes,):
            raise ValueError("one mass per target node required")
        if np.any(self.masses < -1e-15):
            raise ValueError("masses must be nonnegative")

    @property
    def total(self) -> float:
        return float(np.sum(self.masses))

    @property
    def density(self) -> Array:
        return self.masses / self.grid.volumes

    @classmethod
    def lebesgue(cls, grid: Grid) -> "MeasureOnD":
        return cls(grid, grid.volumes.copy())


@dataclass
class Deposit:
    """Subcell samples of the reference domain with their images.

    ``omega_ids/omega_w`` spread each sample over reference nodes and
    ``target_ids/target_w`` over target nodes (cloud-in-cell). The
    reference weights are rescaled so that their marginal equals the node
    volumes; the target marginal of ``mass * omega_w`` is the image measure.
    """

    mass: Array
    omega_ids: Array
    omega_w: Array
    target_ids: Array
    target_w: Array
    images: Array


def deposit(u: Array, grid_omega: Grid, grid_D: Grid, subsamples: int = 4) -> Deposit:
    u = np.asarray(u, float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape != (grid_omega.n_nodes, grid_D.dim):
        raise ValueError(f"u must have shape ({grid_omega.n_nodes}, {grid_D.dim})")
    if not np.all(np.isfinite(u)):
        raise ValueError("u contains non-finite values")
    pts, m = grid_omega.subcell_samples(subsamples, refine_boundary=True)
    oid, ow = grid_omega.cic_weights(pts)
    # images by first-order expansion about the nearest reference node
    near = grid_omega.nearest_complete(pts)
    grad = grid_omega.gradient(u)
    images = u[near] + np.einsum("mkd,md->mk", grad[near], pts - grid_omega.points[near])
    depth = grid_D.spec.depth(images)
    if np.min(depth) < -grid_D.h * (1 + 1e-9):
        raise ValueError(f"image point {-np.min(depth):.3g} outside the target domain (more than h)")
    tid, tw = grid_D.cic_weights(images)
    raw = np.bincount(oid.ravel(), (m[:, None] * ow).ravel(), minlength=grid_omega.n_nodes)
    scale = np.where(raw > 0, grid_omega.volumes / np.where(raw > 0, raw, 1.0), 0.0)
    return Deposit(mass=m, omega_ids=oid, omega_w=ow * scale[oid], target_ids=tid, target_w=tw,
                   images=images)


def pushforward(u: Field | Array, grid_D: Grid, subsamples: int = 4,
                grid_omega: Grid | None = None) -> MeasureOnD:
    """Image measure of the reference volume under ``u`` by subcell quadrature."""
    if isinstance(u, Field):
        grid_omega, vals = u.grid, u.values
    else:
        vals = u
        if grid_omega is None:
            raise ValueError("grid_omega required for raw arrays")
    dep = deposit(vals, grid_omega, grid_D, subsamples)
    per_sample = dep.mass * dep.omega_w.sum(axis=1)
    masses = np.bincount(dep.target_ids.ravel(), (per_sample[:, None] * dep.target_w).ravel(),
                         minlength=grid_D.n_nodes)
    return MeasureOnD(grid_D, masses)


def eval_phi(mu: MeasureOnD, penalty: ImagePenalty) -> float:
    rho = mu.density
    if penalty.variant == "incompressible":
        tol = penalty.tolerance(mu.grid)
        return 0.0 if np.max(np.abs(rho - 1.0)) <= tol else math.inf
    pos = rho > 0
    vals = np.empty_like(rho)
    vals[pos] = phi_h_value(penalty, rho[pos])
    vals[~pos] = penalty.phi_zero
    if np.any(np.isinf(vals[mu.grid.volumes > 0])):
        return math.inf
    return float(np.sum(vals * mu.grid.volumes))


def phi_star(omega: Field | Array, penalty: ImagePenalty, grid_D: Grid | None = None) -> float:
    """Legendre transform of the penalty at a pressure field on the target grid."""
    if isinstance(omega, Field):
        grid_D, vals = omega.grid, omega.values
    else:
        vals = np.asarray(omega, float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("omega must be finite")
    if penalty.variant == "incompressible":
        return float(np.sum(grid_D.volumes * vals))
    conj, unbounded = phi_h_conjugate(penalty, vals)
    if np.any(unbounded & (grid_D.volumes > 0)):
        return math.inf
    return float(np.sum(grid_D.volumes * conj))


class PressureUndetermined(ValueError):
    """The penalty does not single out a pressure (incompressible case)."""


def subdifferential_pressure(mu: MeasureOnD, penalty: ImagePenalty, delta: float = 1e-12) -> Field:
    if penalty.variant == "incompressible":
        raise PressureUndetermined("pressure undetermined: every continuous omega is in the "
                                   "subdifferential of the incompressible penalty")
    rho = mu.density
    if np.min(rho) < delta:
        raise ValueError("vanishing density: subdifferential is not a single pressure")
    return Field(mu.grid, phi_h_derivative(penalty, rho))


# problem -------------------------------------------------------------------------

@dataclass
class ProblemSpec:
    """Full data of the penalized problem.

    ``boundary_map`` holds g at the boundary nodes of ``grid_omega`` (node order).
    ``boundary_trace`` optionally holds g at the facet points of
    ``grid_omega.boundary_facets``; boundary flux terms use it when given.
    """

    grid_omega: Grid
    grid_D: Grid
    boundary_map: Array
    W: StoredEnergySpec = field(default_factory=StoredEnergySpec)
    F: PotentialSpec = field(default_factory=PotentialSpec)
    penalty: ImagePenalty = field(default_factory=ImagePenalty)
    name: str = "custom"
    boundary_trace: Array | None = None

    def __post_init__(self):
        g = np.asarray(self.boundary_map, float)
        if g.ndim == 1:
            g = g[:, None]
        nb = int(self.grid_omega.boundary.sum())
        if g.shape != (nb, self.grid_D.dim):
            raise ValueError(f"boundary map must have shape ({nb}, {self.grid_D.dim}), got {g.shape}")
        dist = np.abs(self.grid_D.spec.depth(g))
        if np.max(dist) > self.grid_D.h * (1 + 1e-9):
            raise ValueError(f"boundary map leaves the target boundary by {np.max(dist):.3g} > h")
        self.boundary_map = g
        if self.boundary_trace is not None:
            t = np.asarray(self.boundary_trace, float).reshape(-1, self.grid_D.dim)
            nf = self.grid_omega.boundary_facets[0].size
            if t.shape[0] != nf:
                raise ValueError(f"boundary trace must have {nf} rows, got {t.shape[0]}")
            if np.max(np.abs(self.grid_D.spec.depth(t)), initial=0.0) > self.grid_D.h * (1 + 1e-9):
                raise ValueError("boundary trace leaves the target boundary by more than h")
            self.boundary_trace = t

    def facet_trace(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(node ids, g at facets, facet area vectors) for boundary flux terms."""
        ids, _, vec = self.grid_omega.boundary_facets
        if self.boundary_trace is not None:
            return ids, self.boundary_trace, vec
        pos = np.cumsum(self.grid_omega.boundary) - 1
        return ids, self.boundary_map[pos[ids]], vec

    @property
    def d(self) -> int:
        return self.grid_omega.dim

    @property
    def k(self) -> int:
        return self.grid_D.dim


def energy_terms(u: Field | Array, spec: ProblemSpec, subsamples: int = 4) -> dict:
    vals = u.values if isinstance(u, Field) else np.asarray(u, float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite deformation")
    g = spec.grid_omega
    mismatch = np.max(np.abs(vals[g.boundary] - spec.boundary_map)) if g.boundary.any() else 0.0
    if mismatch > g.h * (1 + 1e-9):
        raise ValueError(f"deformation misses the boundary map by {mismatch:.3g} > h")
    grad = g.gradient(vals)
    stored = float(g.integrate(spec.W.value(grad)))
    potential = float(g.integrate(spec.F.value(g.points, vals)))
    mu = pushforward(vals, spec.grid_D, subsamples, grid_omega=g)
    pen = eval_phi(mu, spec.penalty)
    return {"stored": stored, "potential": potential, "penalty": pen,
            "total": stored + potential + pen, "max_density_error": float(np.max(np.abs(mu.density - 1.0)))}


def eval_energy(u: Field | Array, spec: ProblemSpec, subsamples: int = 4) -> float:
    """E(u): stored + potential energy quadrature plus the image-measure penalty."""
    return energy_terms(u, spec, subsamples)["total"]
