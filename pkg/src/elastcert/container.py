"""Flat binary container with a JSON header, CSV exports and config loading.

Container layout: the magic line ``ELASTCERT1\\n``, an 8-byte little-endian
header length, the UTF-8 JSON header, then the arrays back to back in
little-endian C order. The header lists ``kind``, free metadata and, per
array, its name, dtype, shape and byte offset from the end of the header.
Nodes are in row-major lattice order (the order of ``Grid.points``).
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .domain import DomainSpec, Field, Grid, build_grid
from .energy import ImagePenalty, MeasureOnD, PotentialSpec, ProblemSpec, ScalarPotential, StoredEnergySpec

MAGIC = b"ELASTCERT1\n"


class ConfigError(ValueError):
    """Malformed configuration or container."""


def write_container(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple[str, dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ConfigError(f"{path}: not an elastcert container")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + n])
    base = pos + n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, dt, count, start).reshape(e["shape"]).copy()
    return header["kind"], header["meta"], arrays


# grids and fields -------------------------------------------------------------------

def grid_meta(g: Grid) -> dict:
    return {"domain": g.spec.to_dict(), "counts": list(g.counts), "origin": g.origin.tolist(),
            "spacing": g.spacing.tolist(), "resolution": list(g.resolution), "nodes": g.n_nodes,
            "order": "row-major lattice"}


def grid_from_meta(m: dict) -> Grid:
    g = Grid(DomainSpec.from_dict(m["domain"]), m["counts"], m["origin"], m["spacing"],
             resolution=tuple(m["resolution"]))
    if g.n_nodes != m["nodes"]:
        raise ConfigError("grid metadata does not reproduce the stored node count")
    return g


def save_grid(path, g: Grid) -> None:
    write_container(path, "grid", {"points": g.points}, {"grid": grid_meta(g)})


def load_grid(path) -> Grid:
    kind, meta, _ = read_container(path)
    if kind != "grid":
        raise ConfigError(f"expected a grid container, found {kind!r}")
    return grid_from_meta(meta["grid"])


def save_field(path, f: Field, name: str = "field") -> None:
    write_container(path, "field", {"values": f.values},
                    {"grid": grid_meta(f.grid), "name": name, "rank": f.rank, "components": f.components})


def load_field(path, grid: Grid | None = None) -> Field:
    kind, meta, arrays = read_container(path)
    if kind != "field":
        raise ConfigError(f"expected a field container, found {kind!r}")
    return Field(grid if grid is not None else grid_from_meta(meta["grid"]), arrays["values"])


def field_to_csv(path, f: Field) -> None:
    g = f.grid
    vals = f.values.reshape(g.n_nodes, -1)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{a}" for a in range(g.dim)] + [f"v{c}" for c in range(vals.shape[1])])
        for p, v in zip(g.points, vals):
            wr.writerow([repr(float(t)) for t in p] + [repr(float(t)) for t in v])


def measure_to_csv(path, mu: MeasureOnD) -> None:
    g = mu.grid
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"y{a}" for a in range(g.dim)] + ["density"])
        for p, r in zip(g.points, mu.density):
            wr.writerow([repr(float(t)) for t in p] + [repr(float(r))])


# plans and dual triples ------------------------------------------------------------

def save_planflux(path, pf) -> None:
    order = np.lexsort((pf.target_ids, pf.omega_ids))
    write_container(path, "planflux",
                    {"omega_ids": pf.omega_ids[order], "target_ids": pf.target_ids[order],
                     "pi": pf.pi[order], "J": pf.J[order]},
                    {"grid_omega": grid_meta(pf.grid_omega), "grid_D": grid_meta(pf.grid_D),
                     "cell_order": "sorted by (omega node, target node)"})


def load_planflux(path, grid_omega: Grid | None = None, grid_D: Grid | None = None):
    from .relaxation import PlanFlux
    kind, meta, a = read_container(path)
    if kind != "planflux":
        raise ConfigError(f"expected a planflux container, found {kind!r}")
    go = grid_omega or grid_from_meta(meta["grid_omega"])
    gd = grid_D or grid_from_meta(meta["grid_D"])
    return PlanFlux(go, gd, a["omega_ids"], a["target_ids"], a["pi"], a["J"])


def save_dual(path, dt, spec: ProblemSpec) -> None:
    from .relaxation import PolyPhi
    arrays = {"psi": np.asarray(dt.psi, float), "omega": np.asarray(dt.omega, float)}
    if isinstance(dt.phi, PolyPhi):
        arrays.update(alpha=dt.phi.alpha, beta=dt.phi.beta, gamma=dt.phi.gamma)
        if dt.phi.divergence is not None:
            arrays.update(div_alpha=dt.phi.divergence[0], div_beta=dt.phi.divergence[1],
                          div_gamma=dt.phi.divergence[2])
        phi_kind = "poly"
    else:
        arrays["phi"] = np.asarray(dt.phi.values_, float)
        phi_kind = "dense"
    meta = {"grid_omega": grid_meta(spec.grid_omega), "grid_D": grid_meta(spec.grid_D), "phi": phi_kind,
            "feasibility_margin": dt.feasibility_margin,
            "cell_order": "phi[omega node, target node, component]" if phi_kind == "dense"
            else "coefficients per omega node"}
    write_container(path, "dualtriple", arrays, meta)


def load_dual(path):
    from .relaxation import DensePhi, DualTriple, PolyPhi
    kind, meta, a = read_container(path)
    if kind != "dualtriple":
        raise ConfigError(f"expected a dualtriple container, found {kind!r}")
    if meta["phi"] == "poly":
        div = (a["div_alpha"], a["div_beta"], a["div_gamma"]) if "div_alpha" in a else None
        phi = PolyPhi(a["alpha"], a["beta"], a["gamma"], div)
    else:
        phi = DensePhi(a["phi"])
    return DualTriple(phi, a["psi"], a["omega"], meta.get("feasibility_margin"))


# problem configs ---------------------------------------------------------------------

def _penalty(block: dict | None) -> ImagePenalty | None:
    if block is None:
        return None
    variant = block.get("variant", "incompressible")
    if variant == "incompressible":
        return ImagePenalty.incompressible(block.get("density_tol"))
    if variant == "integral_h":
        return ImagePenalty.integral(block.get("h", block.get("name", "quadratic")))
    raise ConfigError(f"unknown penalty variant {variant!r}")


def _stored(block: dict | None) -> StoredEnergySpec:
    block = block or {}
    return StoredEnergySpec(block.get("form", "quadratic"), float(block.get("p", 2.0)), block.get("lambda_W"))


def _potential(block: dict | None) -> PotentialSpec:
    block = dict(block or {})
    form = block.get("form", "zero")
    psi = block.get("psi")
    if isinstance(psi, dict):
        psi = ScalarPotential(tuple(map(tuple, psi["Q"])), tuple(psi["a"]), psi.get("name", "quadratic_form"))
    return PotentialSpec(form, None if block.get("force") is None else tuple(block["force"]), psi,
                         float(block.get("c", 0.0)), None if block.get("y0") is None else tuple(block["y0"]),
                         block.get("lambda_F"))


def _resolve_path(p, base: Path | None) -> Path:
    q = Path(p)
    if not q.is_absolute() and base is not None:
        q = base / q
    if not q.exists():
        raise ConfigError(f"referenced file {p} does not exist")
    return q


def load_node_values(path, n_rows: int) -> np.ndarray:
    """Node values from .npy, CSV (one node per row, optional header) or a field container."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    elif path.suffix == ".csv":
        with open(path) as fh:
            first = fh.readline()
        skip = 1 if any(c.isalpha() for c in first.replace("e", "").replace("E", "")) else 0
        arr = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    else:
        arr = read_container(path)[2]["values"]
    arr = np.asarray(arr, float)
    if arr.shape[0] != n_rows:
        raise ConfigError(f"{path}: expected {n_rows} rows, found {arr.shape[0]}")
    return arr


def _affine_boundary(p, A, b=None):
    A = np.atleast_2d(np.asarray(A, float))
    return p @ A.T + (0.0 if b is None else np.asarray(b, float))


def _torsion_boundary(p, a=1.0):
    from .equilibrium import torsion_map
    return torsion_map(p, float(a))


BOUNDARY_MAPS = {"identity": lambda p: np.array(p, float), "affine": _affine_boundary,
                 "torsion": _torsion_boundary}


def problem_from_config(block: dict, base: Path | None = None):
    """ProblemSpec (and EquilibriumPair when available) from a problem block.

    Gallery form: {"gallery": name, "params": {...}, "n": int, "penalty": {...}, "W": {...}}.
    Custom form: {"domain": DomainSpec dict, "target": DomainSpec dict (default: domain),
    "n": int, "W": {...}, "F": {...}, "penalty": {...},
    "boundary_map": {"name": one of BOUNDARY_MAPS, "params": {...}} or {"file": path},
    optional "u"/"omega": {"file": path}}.
    """
    from .equilibrium import EquilibriumPair, gallery_problem
    if not isinstance(block, dict):
        raise ConfigError("problem must be an object")
    n = block.get("n", 32)
    if not isinstance(n, int) or isinstance(n, bool) or n < 2:
        raise ConfigError(f"resolution n must be an integer >= 2, got {n!r}")
    if "gallery" in block:
        params = dict(block.get("params") or {})
        try:
            return gallery_problem(block["gallery"], params, n, _penalty(block.get("penalty")),
                                   _stored(block.get("W")))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
    if "domain" not in block:
        raise ConfigError("problem needs either 'gallery' or 'domain'")
    try:
        go = build_grid(DomainSpec.from_dict(block["domain"]), n)
        gd = build_grid(DomainSpec.from_dict(block["target"]), n) if "target" in block else go
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad domain block: {exc}") from exc
    bm = block.get("boundary_map")
    if not isinstance(bm, dict):
        raise ConfigError("custom problems need a boundary_map block")
    nb = int(go.boundary.sum())
    W, F = _stored(block.get("W")), _potential(block.get("F"))
    penalty = _penalty(block.get("penalty")) or ImagePenalty.incompressible()
    pair = None
    try:
        if "file" in bm:
            g = load_node_values(_resolve_path(bm["file"], base), nb)
            trace = None
        else:
            name = bm.get("name")
            if name not in BOUNDARY_MAPS:
                raise ConfigError(f"unknown boundary map {name!r}; expected one of {sorted(BOUNDARY_MAPS)}")
            fn = BOUNDARY_MAPS[name]
            prm = bm.get("params") or {}
            g = fn(go.points[go.boundary], **prm)
            trace = fn(go.boundary_facets[1], **prm)
        spec = ProblemSpec(go, gd, g, W=W, F=F, penalty=penalty, name="custom", boundary_trace=trace)
        if "u" in block and "omega" in block:
            u = load_node_values(_resolve_path(block["u"]["file"], base), go.n_nodes)
            om = load_node_values(_resolve_path(block["omega"]["file"], base), gd.n_nodes).ravel()
            pair = EquilibriumPair(Field(go, u), Field(gd, om), "external", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec, pair
