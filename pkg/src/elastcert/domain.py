"""Discretized domains, finite-difference calculus and Dirichlet eigenpairs.

Every domain is a Cartesian lattice over its bounding box. Boxes use the
full lattice; curved shapes (disk, annulus, cylinder) keep the lattice nodes
lying in the closed domain. Nodes are stored in row-major lattice order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .linalg import ConvergenceError, conjugate_gradient

SHAPES = ("interval", "box", "disk", "annulus", "cylinder", "parallelepiped")
# subcells per non-aligned axis in cells cut by the boundary, by dimension
_SUBCELL_SAMPLES = {1: 64, 2: 32, 3: 8}


@dataclass(frozen=True)
class DomainSpec:
    """Shape catalog entry: ``lower``/``upper`` is the bounding box.

    Disks, annuli and cylinders are centred in their bounding box in the
    horizontal plane; the cylinder axis is the last coordinate. A
    parallelepiped is the image ``A x + b`` of a base box; ``frame`` holds
    ``(A rows, b, base lower, base upper)``.
    """

    shape: str
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    inner_radius: float = 0.0
    frame: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower/upper must have the same positive length")
        ext = np.subtract(self.upper, self.lower)
        if not np.all(ext > 0) or not np.all(np.isfinite(ext)):
            raise ValueError("all extents must be strictly positive and finite")
        want = {"interval": 1, "disk": 2, "annulus": 2, "cylinder": 3}.get(self.shape)
        if want is not None and self.dim != want:
            raise ValueError(f"{self.shape} requires dimension {want}, got {self.dim}")
        if self.shape in ("disk", "annulus", "cylinder") and not math.isclose(ext[0], ext[1], rel_tol=1e-12):
            raise ValueError("horizontal bounding box of a round shape must be square")
        if self.shape == "annulus" and not 0.0 < self.inner_radius < self.radius:
            raise ValueError("annulus needs 0 < inner radius < outer radius")
        if (self.shape == "parallelepiped") != (self.frame is not None):
            raise ValueError("a frame is required exactly for parallelepipeds")
        if self.frame is not None:
            A = np.asarray(self.frame[0], float)
            if A.shape != (self.dim, self.dim) or not np.linalg.det(A) > 0:
                raise ValueError("parallelepiped needs a square matrix with positive determinant")

    # constructors -----------------------------------------------------------
    @classmethod
    def interval(cls, a: float = 0.0, b: float = 1.0) -> "DomainSpec":
        return cls("interval", (a,), (b,))

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "DomainSpec":
        return cls("box", tuple(lower), tuple(upper))

    @classmethod
    def unit_square(cls) -> "DomainSpec":
        return cls.box((0.0, 0.0), (1.0, 1.0))

    @classmethod
    def disk(cls, radius: float = 1.0, center: Sequence[float] = (0.0, 0.0)) -> "DomainSpec":
        c = np.asarray(center, float)
        return cls("disk", tuple(c - radius), tuple(c + radius))

    @classmethod
    def annulus(cls, inner: float, outer: float, center: Sequence[float] = (0.0, 0.0)) -> "DomainSpec":
        c = np.asarray(center, float)
        return cls("annulus", tuple(c - outer), tuple(c + outer), inner_radius=inner)

    @classmethod
    def cylinder(cls, radius: float = 1.0, height: float = 1.0, z0: float = 0.0) -> "DomainSpec":
        return cls("cylinder", (-radius, -radius, z0), (radius, radius, z0 + height))

    @classmethod
    def parallelepiped(cls, A, b=None, base: "DomainSpec | None" = None) -> "DomainSpec":
        """Image of the box ``base`` (default unit cube) under ``x -> A x + b``."""
        A = np.atleast_2d(np.asarray(A, float))
        d = A.shape[0]
        base = base or cls.box((0.0,) * d, (1.0,) * d)
        if base.shape not in ("box", "interval"):
            raise ValueError("parallelepiped base must be a box")
        b = np.zeros(d) if b is None else np.asarray(b, float)
        lo, hi = np.asarray(base.lower), np.asarray(base.upper)
        corners = np.array([[hi[a] if (c >> a) & 1 else lo[a] for a in range(d)] for c in range(2 ** d)])
        img = corners @ A.T + b
        frame = (tuple(map(tuple, A)), tuple(b), base.lower, base.upper)
        return cls("parallelepiped", tuple(img.min(0)), tuple(img.max(0)), frame=frame)

    # geometry ---------------------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def round(self) -> bool:
        return self.shape in ("disk", "annulus", "cylinder")

    @property
    def masked(self) -> bool:
        """True if the domain does not fill its bounding box."""
        return self.shape not in ("interval", "box")

    def halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit normals ``n`` and offsets ``c`` with the domain ``{n . y <= c}`` (parallelepipeds)."""
        A, b, lo, hi = (np.asarray(v, float) for v in self.frame)
        R = np.linalg.inv(A)
        scale = np.linalg.norm(R, axis=1)
        n = np.concatenate([R, -R]) / np.concatenate([scale, scale])[:, None]
        c = np.concatenate([hi + R @ b, -lo - R @ b]) / np.concatenate([scale, scale])
        return n, c

    def face_areas(self) -> np.ndarray:
        """Measure of each face, in the order of ``halfspaces``."""
        A, _, lo, hi = (np.asarray(v, float) for v in self.frame)
        ext = hi - lo
        R = np.linalg.inv(A)
        base = np.array([np.prod(np.delete(ext, a)) for a in range(self.dim)])
        area = abs(np.linalg.det(A)) * base * np.linalg.norm(R, axis=1)
        return np.concatenate([area, area])

    @property
    def radius(self) -> float:
        return 0.5 * (self.upper[0] - self.lower[0])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    @property
    def volume(self) -> float:
        ext = np.subtract(self.upper, self.lower)
        if self.shape in ("interval", "box"):
            return float(np.prod(ext))
        if self.shape == "parallelepiped":
            A, _, lo, hi = (np.asarray(v, float) for v in self.frame)
            return float(np.linalg.det(A) * np.prod(hi - lo))
        area = math.pi * (self.radius ** 2 - self.inner_radius ** 2)
        return area * ext[2] if self.shape == "cylinder" else area

    def _radial(self, p: np.ndarray) -> np.ndarray:
        return p[:, :2] - self.center[:2]

    def depth(self, points: np.ndarray) -> np.ndarray:
        """Distance to the boundary, positive inside (exact for these shapes)."""
        p = np.atleast_2d(points)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if self.shape == "parallelepiped":
            n, c = self.halfspaces()
            return np.min(c[None] - p @ n.T, axis=1)
        if not self.round:
            return np.min(np.minimum(p - lo, hi - p), axis=1)
        r = np.linalg.norm(self._radial(p), axis=1)
        d = self.radius - r
        if self.shape == "annulus":
            d = np.minimum(d, r - self.inner_radius)
        if self.shape == "cylinder":
            d = np.minimum(d, np.minimum(p[:, 2] - lo[2], hi[2] - p[:, 2]))
        return d

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.depth(points) >= -tol

    def ray_exit(self, points: np.ndarray, axis: int, sign: int) -> np.ndarray:
        """Distance from interior points to the boundary along ``sign * e_axis``."""
        p = np.atleast_2d(points)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if self.shape == "parallelepiped":
            n, c = self.halfspaces()
            speed = sign * n[:, axis]
            t = (c[None] - p @ n.T) / np.where(speed > 0, speed, 1.0)[None]
            return np.min(np.where(speed[None] > 0, t, np.inf), axis=1)
        flat = hi[axis] - p[:, axis] if sign > 0 else p[:, axis] - lo[axis]
        if not self.round or axis == 2:
            return flat
        q = self._radial(p)
        b = sign * q[:, axis]
        qq = np.sum(q * q, axis=1)
        t = -b + np.sqrt(np.maximum(b * b - (qq - self.radius ** 2), 0.0))
        if self.shape == "annulus":
            disc = b * b - (qq - self.inner_radius ** 2)
            hit = disc >= 0
            t1 = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
            t = np.where((t1 > 0) & (t1 < t), t1, t)
        return t

    def scaled(self, r: float) -> "DomainSpec":
        if self.frame is not None:
            A, b, lo, hi = self.frame
            return DomainSpec.parallelepiped(r * np.asarray(A), r * np.asarray(b), DomainSpec.box(lo, hi))
        return DomainSpec(self.shape, tuple(r * v for v in self.lower),
                          tuple(r * v for v in self.upper), self.inner_radius * r)

    def enlarged(self, delta: Sequence[float]) -> "DomainSpec":
        """Outward offset by ``delta`` (per axis; round shapes use ``delta[0]`` radially)."""
        dl = np.broadcast_to(np.asarray(delta, float), (self.dim,))
        if self.frame is not None:
            # each face moves out by delta[0]
            A, b, lo, hi = (np.asarray(v, float) for v in self.frame)
            step = dl[0] / np.linalg.norm(np.linalg.inv(A), axis=1)
            return DomainSpec.parallelepiped(A, b, DomainSpec.box(lo - step, hi + step))
        lo = np.asarray(self.lower) - dl
        hi = np.asarray(self.upper) + dl
        if self.shape == "annulus":
            inner = self.inner_radius - dl[0]
            if inner <= 0:
                return DomainSpec("disk", tuple(lo), tuple(hi))
            return DomainSpec("annulus", tuple(lo), tuple(hi), inner)
        return DomainSpec(self.shape, tuple(lo), tuple(hi), self.inner_radius)

    def to_dict(self) -> dict:
        d = {"shape": self.shape, "lower": list(self.lower), "upper": list(self.upper),
             "inner_radius": self.inner_radius}
        if self.frame is not None:
            A, b, lo, hi = self.frame
            d["frame"] = {"A": [list(r) for r in A], "b": list(b), "base_lower": list(lo), "base_upper": list(hi)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        shape = d["shape"]
        if shape == "parallelepiped":
            fr = d["frame"] if "frame" in d else d
            base = DomainSpec.box(fr.get("base_lower", [0.0] * len(fr["A"])), fr.get("base_upper", [1.0] * len(fr["A"])))
            return cls.parallelepiped(fr["A"], fr.get("b"), base)
        if "lower" in d:
            return cls(shape, tuple(d["lower"]), tuple(d["upper"]), float(d.get("inner_radius", 0.0)))
        if shape == "interval":
            return cls.interval(*d.get("bounds", (0.0, 1.0)))
        if shape == "disk":
            return cls.disk(d.get("radius", 1.0), d.get("center", (0.0, 0.0)))
        if shape == "annulus":
            return cls.annulus(d["inner_radius"], d.get("radius", 1.0), d.get("center", (0.0, 0.0)))
        if shape == "cylinder":
            return cls.cylinder(d.get("radius", 1.0), d.get("height", 1.0), d.get("z0", 0.0))
        raise ValueError(f"cannot build {shape!r} without lower/upper")


class Grid:
    """Masked Cartesian lattice with quadrature weights and boundary area vectors.

    Attributes
    ----------
    points : (N, d) node coordinates
    lattice : (N, d) integer lattice indices
    boundary, interior : (N,) node flags
    volumes : (N,) cell volume per node (sums to the domain volume)
    area_vectors : (N, d) outward ``n dσ`` carried by each boundary node
    """

    def __init__(self, spec: DomainSpec, counts: Sequence[int], lower: Sequence[float],
                 spacing: Sequence[float], resolution: tuple[int, ...] | None = None):
        self.spec = spec
        self.counts = tuple(int(c) for c in counts)
        self.origin = np.asarray(lower, float)
        self.spacing = np.asarray(spacing, float)
        self.resolution = resolution if resolution is not None else tuple(c - 1 for c in self.counts)
        self.axes = [self.origin[a] + self.spacing[a] * np.arange(self.counts[a]) for a in range(self.dim)]
        tol = 1e-9 * self.h

        grids = np.meshgrid(*self.axes, indexing="ij")
        lattice_points = np.stack([g.ravel() for g in grids], axis=1)
        self.depth_lattice = spec.depth(lattice_points).reshape(self.counts)
        self.mask = self.depth_lattice >= -tol
        self.index = np.full(self.counts, -1, dtype=np.int64)
        nz = np.nonzero(self.mask)
        self.index[nz] = np.arange(nz[0].size)
        self.lattice = np.stack(nz, axis=1)
        self.points = lattice_points[np.ravel_multi_index(nz, self.counts)]
        self.depths = self.depth_lattice[nz]

        missing = np.zeros(self.n_nodes, bool)
        for a in range(self.dim):
            for s in (-1, 1):
                missing |= self.neighbor(a, s) < 0
        self.boundary = missing | (self.depths <= tol)
        self.interior = ~self.boundary
        self.volumes, self.area_vectors = self._quadrature()

    # basic properties -------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def n_nodes(self) -> int:
        return self.lattice.shape[0]

    @property
    def h(self) -> float:
        return float(np.max(self.spacing))

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        return np.linalg.norm(self.area_vectors, axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        w = self.boundary_weights
        n = np.zeros_like(self.area_vectors)
        nzw = w > 0
        n[nzw] = self.area_vectors[nzw] / w[nzw, None]
        return n

    @cached_property
    def boundary_facets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boundary quadrature as (node ids, points on the boundary, area vectors).

        Facet vectors sum per node to ``area_vectors``. A facet point is the
        projection of its node onto the boundary part it represents, so
        boundary data can be sampled on the true boundary rather than at
        nodes lying up to a cell inside it.
        """
        av = self.area_vectors
        bid = np.nonzero(np.any(av != 0, axis=1))[0]
        pts = self.points[bid].copy()
        spec = self.spec
        if not spec.masked:
            return bid, pts, av[bid]
        if spec.shape == "parallelepiped":
            n, c = spec.halfspaces()
            nrm = av[bid] / np.linalg.norm(av[bid], axis=1)[:, None]
            face = np.argmax(nrm @ n.T, axis=1)
            gap = c[face] - np.sum(pts * n[face], axis=1)
            return bid, pts + gap[:, None] * n[face], av[bid]
        q = spec._radial(pts)
        r = np.maximum(np.linalg.norm(q, axis=1), 1e-300)
        R = np.full(bid.size, spec.radius)
        if spec.shape == "annulus":
            inner = np.sum(av[bid] * q, axis=1) < 0
            R[inner] = spec.inner_radius
        proj = pts.copy()
        proj[:, :2] = spec.center[:2] + q * (R / r)[:, None]
        if spec.shape != "cylinder":
            return bid, proj, av[bid]
        lat = np.zeros_like(av[bid])
        lat[:, :2] = av[bid, :2]
        cap = np.zeros_like(av[bid])
        cap[:, 2] = av[bid, 2]
        has_l, has_c = np.any(lat != 0, axis=1), cap[:, 2] != 0
        ids = np.concatenate([bid[has_l], bid[has_c]])
        points = np.concatenate([proj[has_l], pts[has_c]])
        vecs = np.concatenate([lat[has_l], cap[has_c]])
        order = np.argsort(ids, kind="stable")
        return ids[order], points[order], vecs[order]

    def neighbor(self, axis: int, step: int) -> np.ndarray:
        """Node id of the lattice neighbour ``step`` cells along ``axis`` (-1 if absent)."""
        L = self.lattice.copy()
        L[:, axis] += step
        ok = (L[:, axis] >= 0) & (L[:, axis] < self.counts[axis])
        out = np.full(self.n_nodes, -1, dtype=np.int64)
        out[ok] = self.index[tuple(L[ok].T)]
        return out

    def to_lattice(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        values = np.asarray(values)
        out = np.full(self.counts + values.shape[1:], fill, dtype=float)
        out[tuple(self.lattice.T)] = values
        return out

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature ``sum_i vol_i f_i`` over the leading node axis."""
        values = np.asarray(values, float)
        return np.tensordot(self.volumes, values, axes=(0, 0))

    def enlarged(self, steps: int) -> "Grid":
        """Grid of the domain offset by ``steps`` lattice cells, on the same lattice."""
        m = int(steps)
        spec = self.spec.enlarged(m * self.spacing)
        return Grid(spec, [c + 2 * m for c in self.counts], self.origin - m * self.spacing,
                    self.spacing, resolution=self.resolution)

    def __repr__(self) -> str:
        return f"Grid({self.spec.shape}, resolution={self.resolution}, nodes={self.n_nodes})"

    # quadrature -------------------------------------------------------------
    def _trapezoid(self, axis: int) -> np.ndarray:
        w = np.full(self.counts[axis], self.spacing[axis])
        w[0] = w[-1] = 0.5 * self.spacing[axis]
        return w

    def _quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.dim
        if not self.spec.masked:
            trap = [self._trapezoid(a) for a in range(d)]
            vol = np.ones(self.n_nodes)
            for a in range(d):
                vol *= trap[a][self.lattice[:, a]]
            av = np.zeros((self.n_nodes, d))
            for a in range(d):
                other = np.ones(self.n_nodes)
                for b in range(d):
                    if b != a:
                        other *= trap[b][self.lattice[:, b]]
                av[self.lattice[:, a] == 0, a] -= other[self.lattice[:, a] == 0]
                top = self.lattice[:, a] == self.counts[a] - 1
                av[top, a] += other[top]
            return vol, av
        if self.spec.shape == "cylinder":
            planar = Grid(DomainSpec("disk", self.spec.lower[:2], self.spec.upper[:2]),
                          self.counts[:2], self.origin[:2], self.spacing[:2])
            i, j, k = self.lattice.T
            pid = planar.index[i, j]
            wz = self._trapezoid(2)
            av = np.zeros((self.n_nodes, 3))
            av[:, :2] = planar.area_vectors[pid] * wz[k, None]
            av[k == 0, 2] -= planar.volumes[pid][k == 0]
            top = k == self.counts[2] - 1
            av[top, 2] += planar.volumes[pid][top]
            return self._tent_volumes(), av
        if self.spec.shape == "parallelepiped":
            return self._tent_volumes(), self._face_area_vectors()
        return self._tent_volumes(), self._circle_area_vectors()

    def _tent_volumes(self) -> np.ndarray:
        """Integral of each node's multilinear hat function over the domain.

        Hats of lattice nodes outside the domain are credited to their
        redirect node, matching the cloud-in-cell rule of ``cic_weights``.
        """
        pts, m = self.subcell_samples(1)
        ids, w = self.cic_weights(pts)
        return np.bincount(ids.ravel(), (m[:, None] * w).ravel(), minlength=self.n_nodes)

    def _full_cells(self, cells: np.ndarray) -> np.ndarray:
        """Lattice cells lying entirely in the closed domain."""
        d = self.dim
        full = np.ones(cells.shape[0], bool)
        if not self.spec.masked:
            return full
        for c in range(2 ** d):
            k = cells + np.array([(c >> a) & 1 for a in range(d)])
            full &= self.mask[tuple(k.T)]
        if self.spec.shape == "annulus":
            # the only non-convex shape: the cell must also clear the hole
            lo = self.origin + cells * self.spacing
            q = np.clip(self.spec.center, lo, lo + self.spacing) - self.spec.center
            full &= np.linalg.norm(q, axis=1) >= self.spec.inner_radius
        return full

    def _refinement(self, subsamples: int, refine: int | None) -> tuple[int, ...]:
        r = max(int(subsamples), int(refine or _SUBCELL_SAMPLES[min(self.dim, 3)]))
        if self.spec.shape == "cylinder":
            # the lateral surface is the only non-aligned part
            return (r, r, int(subsamples))
        return (r,) * self.dim

    @cached_property
    def curved_boundary(self) -> np.ndarray:
        """Boundary nodes near a part of the boundary not aligned with the lattice."""
        if not self.spec.masked:
            return np.zeros(self.n_nodes, bool)
        if self.spec.shape == "cylinder":
            r = np.linalg.norm(self.spec._radial(self.points), axis=1)
            return self.boundary & (self.spec.radius - r <= np.sqrt(2) * self.h)
        return self.boundary.copy()

    def subcell_samples(self, subsamples: int, refine: int | None = None,
                        refine_boundary: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Centres and volumes of the ``subsamples**d`` equal subcells of every
        lattice cell, keeping those inside the domain.

        Cells cut by the boundary (and, with ``refine_boundary``, cells with a
        corner on a curved part of the boundary) are refined to ``refine``
        subcells per non-aligned axis.
        """
        if subsamples < 1:
            raise ValueError("subsamples must be >= 1")
        d = self.dim
        cells = np.stack(np.meshgrid(*[np.arange(c - 1) for c in self.counts], indexing="ij"),
                         axis=-1).reshape(-1, d)
        full = self._full_cells(cells)
        if refine_boundary and self.spec.masked:
            flag = np.concatenate([self.curved_boundary, [True]])
            for c in range(2 ** d):
                k = cells + np.array([(c >> a) & 1 for a in range(d)])
                full &= ~flag[self.index[tuple(k.T)]]
        pts, mass = [], []
        for sel, s in ((full, (int(subsamples),) * d), (~full, self._refinement(subsamples, refine))):
            if not sel.any():
                continue
            o = np.stack(np.meshgrid(*[(np.arange(k) + 0.5) / k for k in s], indexing="ij"),
                         axis=-1).reshape(-1, d)
            q = (self.origin + (cells[sel][:, None, :] + o[None]) * self.spacing).reshape(-1, d)
            q = q[self.spec.contains(q)]
            pts.append(q)
            mass.append(np.full(q.shape[0], float(np.prod(self.spacing)) / np.prod(s)))
        return np.concatenate(pts), np.concatenate(mass)

    @cached_property
    def complete_stencil(self) -> np.ndarray:
        """Nodes with at least one lattice neighbour along every axis."""
        ok = np.ones(self.n_nodes, bool)
        for a in range(self.dim):
            ok &= (self.neighbor(a, -1) >= 0) | (self.neighbor(a, 1) >= 0)
        return ok

    def nearest_complete(self, points: np.ndarray) -> np.ndarray:
        """Nearest node with a complete derivative stencil (for Taylor expansion)."""
        p = np.atleast_2d(np.asarray(points, float))
        t = np.rint((p - self.origin) / self.spacing).astype(np.int64)
        t = np.clip(t, 0, np.asarray(self.counts) - 1)
        near = self.redirect[tuple(t.T)]
        bad = ~self.complete_stencil[near]
        if bad.any():
            good = np.nonzero(self.complete_stencil)[0]
            _, j = cKDTree(self.points[good]).query(p[bad])
            near[bad] = good[j]
        return near

    def _circle_area_vectors(self) -> np.ndarray:
        av = np.zeros((self.n_nodes, 2))
        spec = self.spec
        q = self.points - spec.center[:2]
        r = np.linalg.norm(q, axis=1)
        bid = np.nonzero(self.boundary)[0]
        circles = [(spec.radius, 1.0)]
        owner = np.zeros(bid.size, int)
        if spec.shape == "annulus":
            circles.append((spec.inner_radius, -1.0))
            owner = np.where(np.abs(r[bid] - spec.radius) <= np.abs(r[bid] - spec.inner_radius), 0, 1)
        for ci, (R, orient) in enumerate(circles):
            sel = bid[owner == ci]
            if sel.size == 0:
                continue
            theta = np.arctan2(q[sel, 1], q[sel, 0])
            order = np.lexsort((r[sel], theta))
            sel, theta = sel[order], theta[order]
            gaps = np.diff(np.concatenate([theta, [theta[0] + 2 * np.pi]]))
            weight = 0.5 * R * (gaps + np.roll(gaps, 1))
            av[sel] += weight[:, None] * orient * q[sel] / np.maximum(r[sel], 1e-300)[:, None]
        return av

    def _face_area_vectors(self) -> np.ndarray:
        """Each boundary node takes an equal share of its nearest face."""
        n, c = self.spec.halfspaces()
        areas = self.spec.face_areas()
        bid = np.nonzero(self.boundary)[0]
        face = np.argmin(c[None] - self.points[bid] @ n.T, axis=1)
        count = np.bincount(face, minlength=n.shape[0])
        av = np.zeros((self.n_nodes, self.dim))
        av[bid] = (areas[face] / np.maximum(count[face], 1))[:, None] * n[face]
        return av

    @cached_property
    def redirect(self) -> np.ndarray:
        """Lattice-shaped node ids: nodes map to themselves, exterior lattice
        points to the nearest boundary node."""
        red = self.index.copy()
        out = red < 0
        if out.any():
            bid = np.nonzero(self.boundary)[0]
            ext = np.stack(np.nonzero(out), axis=1)
            ext_pts = self.origin + ext * self.spacing
            _, near = cKDTree(self.points[bid]).query(ext_pts)
            red[out] = bid[near]
        return red

    def cic_weights(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Multilinear (cloud-in-cell) weights of ``points`` on the lattice.

        Returns node ids and weights of shape (M, 2**d); corners outside the
        domain are replaced by their redirect node. Points outside the
        lattice are clamped to it.
        """
        p = np.atleast_2d(np.asarray(points, float))
        t = (p - self.origin) / self.spacing
        hi = np.asarray(self.counts) - 2
        i0 = np.clip(np.floor(t).astype(np.int64), 0, hi)
        f = np.clip(t - i0, 0.0, 1.0)
        d = self.dim
        strides = np.cumprod((self.counts[1:] + (1,))[::-1])[::-1]
        base = i0 @ strides
        red = self.redirect.ravel()
        ids = np.empty((p.shape[0], 2 ** d), dtype=np.int64)
        w = np.empty((p.shape[0], 2 ** d))
        for c in range(2 ** d):
            off = 0
            wc = np.ones(p.shape[0])
            for a in range(d):
                if (c >> a) & 1:
                    off += strides[a]
                    wc *= f[:, a]
                else:
                    wc *= 1.0 - f[:, a]
            ids[:, c] = red[base + off]
            w[:, c] = wc
        return ids, w

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of nodal ``values`` at ``points``."""
        values = np.asarray(values, float)
        ids, w = self.cic_weights(points)
        return np.einsum("mc,mc...->m...", w, values[ids])

    # calculus ---------------------------------------------------------------
    @cached_property
    def _derivative_matrices(self) -> list[sp.csr_matrix]:
        mats = []
        for a in range(self.dim):
            h = self.spacing[a]
            m1, p1 = self.neighbor(a, -1), self.neighbor(a, 1)
            m2, p2 = self.neighbor(a, -2), self.neighbor(a, 2)
            ids = np.arange(self.n_nodes)
            rows, cols, vals = [], [], []

            def add(sel, cols_list, coefs):
                for c, v in zip(cols_list, coefs):
                    rows.append(ids[sel])
                    cols.append(c[sel])
                    vals.append(np.full(sel.sum(), v / h))

            central = (m1 >= 0) & (p1 >= 0)
            add(central, [p1, m1], [0.5, -0.5])
            fwd = ~central & (p1 >= 0)
            fwd2 = fwd & (p2 >= 0)
            add(fwd2, [ids, p1, p2], [-1.5, 2.0, -0.5])
            add(fwd & ~fwd2, [ids, p1], [-1.0, 1.0])
            bwd = ~central & (m1 >= 0)
            bwd2 = bwd & (m2 >= 0)
            add(bwd2, [ids, m1, m2], [1.5, -2.0, 0.5])
            add(bwd & ~bwd2, [ids, m1], [1.0, -1.0])
            A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.n_nodes, self.n_nodes))
            mats.append(A)
        return mats

    def derivative_matrix(self, axis: int) -> sp.csr_matrix:
        return self._derivative_matrices[axis]

    @cached_property
    def _sbp_matrices(self) -> list[sp.csr_matrix]:
        mats = []
        for a in range(self.dim):
            h = self.spacing[a]
            m1, p1 = self.neighbor(a, -1), self.neighbor(a, 1)
            ids = np.arange(self.n_nodes)
            central = (m1 >= 0) & (p1 >= 0)
            fwd = ~central & (p1 >= 0)
            bwd = ~central & (m1 >= 0)
            rows = np.concatenate([ids[central]] * 2 + [ids[fwd]] * 2 + [ids[bwd]] * 2)
            cols = np.concatenate([p1[central], m1[central], p1[fwd], ids[fwd], ids[bwd], m1[bwd]])
            vals = np.concatenate([np.full(central.sum(), 0.5), np.full(central.sum(), -0.5),
                                   np.ones(fwd.sum()), -np.ones(fwd.sum()),
                                   np.ones(bwd.sum()), -np.ones(bwd.sum())]) / h
            mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, self.n_nodes)))
        return mats

    def sbp_derivative_matrix(self, axis: int) -> sp.csr_matrix:
        """Central differences with first-order one-sided closure.

        With trapezoid volumes H on a box this satisfies summation by parts,
        H D + (H D)^T = boundary area weights, so the discrete divergence
        theorem holds exactly.
        """
        return self._sbp_matrices[axis]

    def sbp_gradient(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, float)
        return np.stack([self._apply(self._sbp_matrices[a], values) for a in range(self.dim)], axis=-1)

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """(N,) -> (N, d); (N, k) -> (N, k, d) with entry [j, i] = d f_j / d x_i."""
        values = np.asarray(values, float)
        parts = [self._apply(self._derivative_matrices[a], values) for a in range(self.dim)]
        return np.stack(parts, axis=-1)

    def divergence(self, values: np.ndarray) -> np.ndarray:
        """(N, d) -> (N,); (N, k, d) -> (N, k) (row-wise divergence)."""
        values = np.asarray(values, float)
        if values.shape[-1] != self.dim:
            raise ValueError(f"divergence needs trailing dimension {self.dim}, got {values.shape}")
        out = 0.0
        for a in range(self.dim):
            out = out + self._apply(self._derivative_matrices[a], values[..., a])
        return out

    @staticmethod
    def _apply(A: sp.csr_matrix, values: np.ndarray) -> np.ndarray:
        if values.ndim == 1:
            return A @ values
        flat = values.reshape(values.shape[0], -1)
        return (A @ flat).reshape(values.shape)


def build_grid(spec: DomainSpec, resolution: int | Sequence[int]) -> Grid:
    """Lattice with ``resolution`` cells per axis over the bounding box of ``spec``."""
    res = (resolution,) * spec.dim if np.isscalar(resolution) else tuple(resolution)
    if len(res) != spec.dim:
        raise ValueError("resolution length must equal the dimension")
    if any(int(r) != r or r < 2 for r in res):
        raise ValueError(f"resolution must be integers >= 2, got {res}")
    res = tuple(int(r) for r in res)
    lo, hi = np.asarray(spec.lower), np.asarray(spec.upper)
    spacing = (hi - lo) / np.asarray(res)
    return Grid(spec, [r + 1 for r in res], lo, spacing, resolution=res)


@dataclass(frozen=True)
class Field:
    """Nodal values on a grid: scalar (N,), vector (N, k) or matrix (N, k, d)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        object.__setattr__(self, "values", v)
        if v.ndim == 0 or v.shape[0] != self.grid.n_nodes:
            raise ValueError(f"field has {v.shape[:1]} rows, grid has {self.grid.n_nodes} nodes")
        if v.ndim > 3:
            raise ValueError("field rank must be scalar, vector or matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite entries")

    @property
    def rank(self) -> str:
        return ("scalar", "vector", "matrix")[self.values.ndim - 1]

    @property
    def components(self) -> int:
        return int(np.prod(self.values.shape[1:]))


def differentiate(f: Field, mode: str) -> Field:
    """Gradient or divergence with central differences inside and
    second-order one-sided differences at boundary nodes."""
    if mode == "gradient":
        if f.rank == "matrix":
            raise ValueError("gradient accepts scalar or vector fields")
        return Field(f.grid, f.grid.gradient(f.values))
    if mode == "divergence":
        if f.rank == "scalar" or f.values.shape[-1] != f.grid.dim:
            raise ValueError(f"divergence needs trailing dimension {f.grid.dim}")
        return Field(f.grid, f.grid.divergence(f.values))
    raise ValueError(f"unknown mode {mode!r}")


def boundary_flux(v: Field | np.ndarray, grid: Grid | None = None) -> float:
    """Surface quadrature of ``v . n`` over the boundary nodes.

    ``v`` is either a vector field on the whole grid (only boundary rows are
    read) or an array with one row per boundary node in node order.
    """
    if isinstance(v, Field):
        grid = v.grid if grid is None else grid
        vals = v.values
    else:
        if grid is None:
            raise ValueError("grid required for raw arrays")
        vals = np.asarray(v, float)
    nb = int(grid.boundary.sum())
    if vals.shape[0] == grid.n_nodes:
        vb = vals[grid.boundary]
    elif vals.shape[0] == nb:
        vb = vals
    else:
        raise ValueError(f"need values at all {nb} boundary nodes, got {vals.shape[0]} rows")
    if vb.ndim != 2 or vb.shape[1] != grid.dim:
        raise ValueError("boundary values must be vectors of the grid dimension")
    if not np.all(np.isfinite(vb)):
        raise ValueError("missing (non-finite) boundary values")
    return float(np.sum(vb * grid.area_vectors[grid.boundary]))


# Dirichlet eigenproblem ------------------------------------------------------

@dataclass
class EigenResult:
    lambda1: float
    eigenfunction: Field
    lambda1_safe: float
    safety: float
    safety_constant: float
    iterations: int
    residual: float
    lambda1_coarse: float | None = None
    meta: dict = field(default_factory=dict)


def dirichlet_operator(grid: Grid) -> tuple[sp.csr_matrix, np.ndarray]:
    """Symmetric cut-cell Laplacian on nodes strictly inside the domain.

    A neighbour closer than one cell to the analytic boundary along an axis
    is replaced by the boundary itself (value 0) at the true distance.
    Returns the matrix and the node ids of the unknowns.
    """
    tol = 1e-9 * grid.h
    unknown = grid.depths > tol
    ids = np.nonzero(unknown)[0]
    pos = np.full(grid.n_nodes, -1)
    pos[ids] = np.arange(ids.size)
    pts = grid.points[ids]
    diag = np.zeros(ids.size)
    rows, cols, vals = [], [], []
    for a in range(grid.dim):
        h = grid.spacing[a]
        for s in (-1, 1):
            nb = grid.neighbor(a, s)[ids]
            t = grid.spec.ray_exit(pts, a, s)
            regular = (nb >= 0) & (t >= h * (1 - 1e-9))
            regular[regular] &= pos[nb[regular]] >= 0
            dist = np.where(regular, h, np.clip(t, tol, h))
            diag += 1.0 / (h * dist)
            r = np.nonzero(regular)[0]
            rows.append(r)
            cols.append(pos[nb[r]])
            vals.append(np.full(r.size, -1.0 / h ** 2))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ids.size, ids.size)) + sp.diags(diag)
    return A.tocsr(), ids


_EIGEN_CACHE: dict = {}


def _inverse_iteration(A: sp.csr_matrix, tol: float, maxiter: int) -> tuple[float, np.ndarray, int, float]:
    n = A.shape[0]
    x = np.ones(n) / np.sqrt(n)
    lam = float(x @ (A @ x))
    res = np.inf
    for it in range(1, maxiter + 1):
        y, _ = conjugate_gradient(lambda v: A @ v, x, x0=x / lam, rtol=tol / 10)
        x = y / np.linalg.norm(y)
        Ax = A @ x
        lam = float(x @ Ax)
        res = float(np.linalg.norm(Ax - lam * x) / abs(lam))
        if res <= tol:
            return lam, x, it, res
    raise ConvergenceError(f"inverse iteration stalled at residual {res:.3e} after {maxiter} iterations")


def _solve_lambda1(grid: Grid, tol: float, maxiter: int):
    key = (grid.spec, grid.counts, tuple(np.round(grid.origin, 14)), tuple(grid.spacing), tol)
    if key not in _EIGEN_CACHE:
        A, ids = dirichlet_operator(grid)
        if ids.size == 0:
            raise ValueError("grid has no interior nodes")
        lam, x, it, res = _inverse_iteration(A, tol, maxiter)
        f = np.zeros(grid.n_nodes)
        f[ids] = x * np.sign(x.sum())
        f /= f.max()
        _EIGEN_CACHE[key] = (lam, f, it, res)
    lam, f, it, res = _EIGEN_CACHE[key]
    return lam, f.copy(), it, res


def dirichlet_lambda1(grid: Grid, tol: float = 1e-8, richardson: bool = True,
                      maxiter: int = 10_000) -> EigenResult:
    """First Dirichlet eigenvalue of ``-Laplacian`` by inverse power iteration.

    ``lambda1_safe`` subtracts ``c h^2`` where ``c`` is the larger of
    ``lambda1 * pi^2 / 4`` and the two-resolution Richardson estimate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    lam, f, it, res = _solve_lambda1(grid, tol, maxiter)
    c = lam * math.pi ** 2 / 4
    lam_coarse = None
    if richardson and min(grid.resolution) >= 4 and grid.counts == tuple(r + 1 for r in grid.resolution):
        coarse = build_grid(grid.spec, tuple(r // 2 for r in grid.resolution))
        lam_coarse, *_ = _solve_lambda1(coarse, tol, maxiter)
        dh = coarse.h ** 2 - grid.h ** 2
        if dh > 0:
            c = max(c, abs(lam - lam_coarse) / dh)
    safety = c * grid.h ** 2
    return EigenResult(lambda1=lam, eigenfunction=Field(grid, f), lambda1_safe=lam - safety,
                       safety=safety, safety_constant=c, iterations=it, residual=res,
                       lambda1_coarse=lam_coarse,
                       meta={"shape": grid.spec.shape, "h": grid.h,
                             "note": "shape catalog only; Lipschitz corners not analysed"})


# Change of variables field ---------------------------------------------------

@dataclass
class ChangeOfVariables:
    w: Field
    target: float
    check_max: float
    enlargement: float
    lambda_enlarged: float | None
    attempts: int
    divergence: np.ndarray | None = None


class VerificationError(RuntimeError):
    """A constructed object failed its own pointwise verification."""


def _enlarged_divergence(grid: Grid, big: Grid, f: np.ndarray, L: np.ndarray,
                         fallback: np.ndarray) -> np.ndarray:
    """Divergence of w = grad log f as the compact second difference of log f
    on the enlarged lattice, so boundary nodes of ``grid`` avoid one-sided
    differences. Nodes whose stencil leaves the support of f keep ``fallback``."""
    div = np.zeros(grid.n_nodes)
    ok = np.ones(grid.n_nodes, bool)
    for a in range(grid.dim):
        vals = []
        for s in (1, 0, -1):
            M = L.copy()
            M[:, a] += s
            inside = np.all((M >= 0) & (M < np.asarray(big.counts)), axis=1)
            idx = np.full(grid.n_nodes, -1, np.int64)
            idx[inside] = big.index[tuple(M[inside].T)]
            fv = np.where(idx >= 0, f[np.maximum(idx, 0)], 0.0)
            ok &= fv > 0
            vals.append(np.log(np.where(fv > 0, fv, 1.0)))
        div += (vals[0] - 2 * vals[1] + vals[2]) / grid.spacing[a] ** 2
    return np.where(ok, div, fallback)


def change_of_variables_field(grid: Grid, lam: float, enlargement: float | None = None,
                              tol: float = 1e-9, max_doublings: int = 6) -> ChangeOfVariables:
    """Vector field ``w = grad(log f)`` with ``div w + |w|^2 < lam`` at interior nodes.

    ``f`` is the principal Dirichlet eigenfunction of the domain enlarged by
    a whole number of lattice cells. Starting from ``enlargement`` (default
    five cells), the offset doubles after a failed check, or halves when the
    enlarged eigenvalue itself no longer exceeds ``-lam``.
    """
    lam1 = dirichlet_lambda1(grid, tol=tol, richardson=False).lambda1
    if lam <= -lam1:
        raise ValueError(f"lambda below threshold: {lam} <= -lambda1 = {-lam1}")
    if lam > 0:
        w = np.zeros((grid.n_nodes, grid.dim))
        return ChangeOfVariables(Field(grid, w), lam, 0.0, 0.0, None, 0)
    h = grid.h
    steps = max(2, int(round((5 * h if enlargement is None else enlargement) / h)))
    tried: set[int] = set()
    last = None
    for attempt in range(1, max_doublings + 2):
        tried.add(steps)
        big = grid.enlarged(steps)
        lam_big, f, *_ = _solve_lambda1(big, tol, 10_000)
        L = grid.lattice + steps
        w = np.zeros((grid.n_nodes, grid.dim))
        for a in range(grid.dim):
            Lp, Lm = L.copy(), L.copy()
            Lp[:, a] += 1
            Lm[:, a] -= 1
            fp, fm = f[big.index[tuple(Lp.T)]], f[big.index[tuple(Lm.T)]]
            w[:, a] = (np.log(fp) - np.log(fm)) / (2 * grid.spacing[a])
        check = grid.divergence(w) + np.sum(w * w, axis=1)
        cmax = float(np.max(check[grid.interior]))
        last = (steps, lam_big, cmax)
        if cmax < lam:
            div = _enlarged_divergence(grid, big, f, L, grid.divergence(w))
            return ChangeOfVariables(Field(grid, w), lam, cmax, steps * h, lam_big, attempt, div)
        nxt = steps // 2 if lam_big <= -lam else steps * 2
        if nxt < 2 or nxt in tried:
            break
        steps = nxt
    raise VerificationError(f"no enlargement satisfied div w + |w|^2 < {lam}: last attempt "
                            f"steps={last[0]}, lambda_enlarged={last[1]:.6g}, max={last[2]:.6g}")
