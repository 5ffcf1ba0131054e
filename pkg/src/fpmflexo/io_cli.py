"""Problem configuration files, result writers and the ``fpmflexo`` command.

A configuration is one YAML document with a ``schema_version`` field.
Prescribed functions are constants or polynomial coefficient tables
``c[k][i][j]`` multiplying ``x**i y**j`` in component ``k``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .assembly_mixed import (
    MixedOps, build_mixed_discretization, mixed_fluxes, postprocess_kappa, solve_mixed,
)
from .assembly_primal import (
    DATA_DIM, FAMILIES, BoundaryConditionSet, PenaltyParams, SegmentBC, SideOps, assemble_system,
    build_discretization, fluxes,
)
from .dq import RBFParams
from .errors import (
    AssemblyError, ConfigError, CrackError, FPMError, GeometryError, MaterialError, NumericalError,
    SupportError,
)
from .fields import PolyField
from .fracture import (
    CrackCriterion, FractureAborted, FractureProblem, LoadSchedule, cells_within, compute_ber,
    hoop_traction, quasi_static_run,
)
from .geometry import Mesh, Partition, build_voronoi, grid_points, import_partition, jittered_grid, lloyd_relax
from .material import MaterialModel, isotropic_builder
from .solver import SolutionState, SolveOptions, newton_raphson, solve_linear

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
CSV_HEADER = ("step", "load", "segment_id", "traction", "ber", "j")

# ---------------------------------------------------------------------------
# schema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_VEC2 = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}


def _matrix(rows, cols):
    row = {"type": "array", "items": _NUM, "minItems": cols, "maxItems": cols}
    return {"type": "array", "items": row, "minItems": rows, "maxItems": rows}


_FUNCTION = {
    "oneOf": [
        _NUM,
        {"type": "array", "items": _NUM, "minItems": 1},
        {"type": "object", "required": ["coefficients"], "additionalProperties": False,
         "properties": {"coefficients": {"type": "array", "minItems": 1}}},
    ]
}
_BOX = {"type": "object", "additionalProperties": False,
        "properties": {k: _NUM for k in ("x_min", "x_max", "y_min", "y_max")}}
_DATA_KEYS = ("u", "Q", "d", "R", "phi", "omega", "P", "Z", "Ps", "Ws")

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "geometry", "material", "boundary"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "title": {"type": "string"},
        "geometry": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "domain": {"type": "array", "items": _VEC2, "minItems": 3},
                "points": {
                    "type": "object", "additionalProperties": False,
                    "minProperties": 1, "maxProperties": 2,
                    "properties": {
                        "grid": {"type": "object", "required": ["nx", "ny"], "additionalProperties": False,
                                 "properties": {"nx": _INT1, "ny": _INT1}},
                        "jittered": {"type": "object", "required": ["nx", "ny"], "additionalProperties": False,
                                     "properties": {"nx": _INT1, "ny": _INT1,
                                                    "amplitude": {"type": "number", "minimum": 0, "maximum": 0.5},
                                                    "seed": {"type": "integer"}}},
                        "coordinates": {"type": "array", "items": _VEC2, "minItems": 1},
                        "file": {"type": "string"},
                        "lloyd": {"type": "integer", "minimum": 0},
                    },
                },
                "mesh": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "file": {"type": "string"},
                        "vertices": {"type": "array", "items": _VEC2, "minItems": 3},
                        "elements": {"type": "array", "minItems": 1,
                                     "items": {"type": "array", "minItems": 3,
                                               "items": {"type": "integer", "minimum": 0}}},
                    },
                },
            },
        },
        "material": {
            "type": "object", "required": ["young", "poisson"], "additionalProperties": False,
            "properties": {
                "young": _POS,
                "poisson": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 0.5},
                "length_scale": {"type": "number", "minimum": 0},
                "plane": {"enum": ["strain", "stress"]},
                "permittivity": {"oneOf": [_POS, _matrix(2, 2)]},
                "electric_length_scale": {"type": "number", "minimum": 0},
                "flexo": _matrix(6, 2),
                "piezo": _matrix(3, 2),
                "converse": _matrix(3, 4),
            },
        },
        "analysis": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "formulation": {"enum": ["primal", "mixed"]},
                "theory": {"enum": ["reduced", "full"]},
                "order": {"enum": ["quadratic", "cubic"]},
                "quadrature": {"enum": [1, 2]},
                "rbf": {"type": "object", "additionalProperties": False,
                        "properties": {"kind": {"type": "string"}, "c0": _POS,
                                       "degree": {"enum": [1, 2, 3]}}},
            },
        },
        "penalties": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "boundary": _POS, "internal": _POS,
                "eta1": {"type": "array", "items": _POS, "minItems": 4, "maxItems": 4},
                "eta2": {"type": "array", "items": _POS, "minItems": 4, "maxItems": 4},
            },
        },
        "loads": {
            "type": "object", "additionalProperties": False,
            "properties": {"body_force": _FUNCTION, "charge": _FUNCTION},
        },
        "boundary": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "where": _BOX,
                    "u": {"enum": list(FAMILIES["u"])},
                    "d": {"enum": list(FAMILIES["d"])},
                    "phi": {"enum": list(FAMILIES["phi"])},
                    "P": {"enum": list(FAMILIES["P"])},
                    "data": {"type": "object", "additionalProperties": False,
                             "properties": {k: _FUNCTION for k in _DATA_KEYS}},
                },
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "method": {"enum": ["direct", "iterative"]},
                "rel_tol": _POS, "abs_tol": {"type": "number", "minimum": 0},
                "max_newton": _INT1, "newton_rel_tol": _POS,
            },
        },
        "fracture": {
            "type": "object", "required": ["criterion", "schedule"], "additionalProperties": False,
            "properties": {
                "face_kind": {"enum": ["impermeable", "permeable"]},
                "criterion": {
                    "type": "object", "required": ["threshold"], "additionalProperties": False,
                    "properties": {"kind": {"enum": ["max_hoop_stress", "ber"]}, "threshold": _POS,
                                   "policy": {"enum": ["single-max", "all-exceeding"]}},
                },
                "schedule": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"multipliers": {"type": "array", "items": _NUM, "minItems": 1},
                                   "stop": _NUM, "steps": _INT1},
                },
                "direction": _VEC2,
                "precracks": {
                    "type": "array",
                    "items": {"type": "object", "required": ["from", "to"], "additionalProperties": False,
                              "properties": {"from": _VEC2, "to": _VEC2}},
                },
                "contours": {
                    "type": "array",
                    "items": {"type": "object", "required": ["center", "radius"], "additionalProperties": False,
                              "properties": {"center": _VEC2, "radius": _POS}},
                },
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"vtk": {"type": "string"}, "csv": {"type": "string"},
                           "digits": {"type": "integer", "minimum": 3, "maximum": 17}},
        },
    },
}

DEFAULTS = {
    "analysis": {"formulation": "primal", "theory": "reduced", "order": "cubic", "quadrature": 1},
    "material": {"length_scale": 0.0, "plane": "strain", "electric_length_scale": 0.0},
    "penalties": {"boundary": 100.0, "internal": 10.0},
    "loads": {},
    "solver": {"method": "direct", "rel_tol": 1e-10, "abs_tol": 0.0, "max_newton": 25,
               "newton_rel_tol": 1e-8},
    "output": {"vtk": "solution.vtk", "csv": "history.csv", "digits": 12},
}
FRACTURE_DEFAULTS = {"face_kind": "impermeable", "direction": [1.0, 0.0], "precracks": [], "contours": []}


# ---------------------------------------------------------------------------
# loading


def _line_map(node, path=(), out=None) -> dict:
    """Source line (1-based) of every mapping key and sequence item."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (k.value,)] = k.start_mark.line + 1
            _line_map(v, path + (k.value,), out)
            out[path + (k.value,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


@dataclass
class ProblemConfig:
    """A validated configuration with defaults filled in.

    Equality compares the configuration content only, not where it was read from.
    """

    data: dict
    source: Path | None = field(default=None, compare=False)
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def section(self, name: str) -> dict:
        return self.data.get(name) or {}

    @property
    def has_fracture(self) -> bool:
        return "fracture" in self.data

    def where(self, *path) -> str:
        """``file:line: a.b.c`` prefix for messages about a config entry."""
        line = None
        for k in range(len(path), -1, -1):
            line = self.lines.get(tuple(path[:k]))
            if line is not None:
                break
        name = str(self.source) if self.source is not None else "<config>"
        dotted = ".".join(str(p) for p in path) or "<root>"
        return f"{name}:{line}: {dotted}" if line is not None else f"{name}: {dotted}"


def _fill_defaults(data: dict) -> dict:
    out = copy.deepcopy(data)
    for name, defaults in DEFAULTS.items():
        out[name] = {**defaults, **(out.get(name) or {})}
    if "fracture" in out:
        fr = {**FRACTURE_DEFAULTS, **out["fracture"]}
        fr["criterion"] = {"kind": "max_hoop_stress", "policy": "single-max", **fr["criterion"]}
        out["fracture"] = fr
    for block in out["boundary"]:
        block.setdefault("where", {})
        block.setdefault("data", {})
    return out


def parse_config(text: str, source: Path | None = None) -> ProblemConfig:
    """Validate a configuration document given as text."""
    name = str(source) if source is not None else "<config>"
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{name}:{mark.line + 1}" if mark is not None else name
        raise ConfigError(f"{where}: not a valid YAML document ({getattr(exc, 'problem', exc)})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: the document must be a mapping")
    cfg = ProblemConfig(data, source, _line_map(node))
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        if err.validator == "oneOf" and err.context:
            err = min(err.context, key=lambda e: len(e.absolute_path))
        path = list(err.absolute_path)
        if err.validator == "additionalProperties" and isinstance(err.instance, dict):
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})), key=str)
            if extra:
                path.append(extra[0])
        raise ConfigError(f"{cfg.where(*path)}: {err.message}")
    cfg.data = _fill_defaults(data)
    _check_semantics(cfg)
    return cfg


def load_config(path) -> ProblemConfig:
    """Read, validate and normalise a configuration file.

    Point and mesh files are resolved relative to the configuration and
    stored as absolute paths.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    cfg = parse_config(text, path)
    geo = cfg.data["geometry"]
    for key in ("points", "mesh"):
        if key in geo and "file" in geo[key]:
            f = Path(geo[key]["file"])
            if not f.is_absolute():
                f = (path.parent / f).resolve()
            if not f.is_file():
                raise ConfigError(f"{cfg.where('geometry', key, 'file')}: file {f} not found")
            geo[key]["file"] = str(f)
    return cfg


def dump_config(cfg: ProblemConfig, path=None) -> str:
    """YAML text of the normalised configuration; written to ``path`` if given."""
    text = yaml.safe_dump(cfg.data, sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def _check_semantics(cfg: ProblemConfig) -> None:
    d = cfg.data
    geo = d["geometry"]
    has_pts, has_mesh = "points" in geo, "mesh" in geo
    if has_pts == has_mesh:
        raise ConfigError(f"{cfg.where('geometry')}: give exactly one of 'points' or 'mesh'")
    if has_pts:
        if "domain" not in geo:
            raise ConfigError(f"{cfg.where('geometry')}: 'points' needs a 'domain' polygon")
        kinds = [k for k in ("grid", "jittered", "coordinates", "file") if k in geo["points"]]
        if len(kinds) != 1:
            raise ConfigError(f"{cfg.where('geometry', 'points')}: give exactly one of "
                              "'grid', 'jittered', 'coordinates' or 'file'")
    else:
        m = geo["mesh"]
        if ("file" in m) == ("vertices" in m or "elements" in m):
            raise ConfigError(f"{cfg.where('geometry', 'mesh')}: give either 'file' or "
                              "'vertices' with 'elements'")
        if "file" not in m and not ("vertices" in m and "elements" in m):
            raise ConfigError(f"{cfg.where('geometry', 'mesh')}: inline meshes need both "
                              "'vertices' and 'elements'")
    pen = d["penalties"]
    if ("eta1" in pen) != ("eta2" in pen):
        raise ConfigError(f"{cfg.where('penalties')}: give both 'eta1' and 'eta2' or neither")
    for path, value, dim in _functions(d):
        try:
            to_field(value, dim)
        except ValueError as exc:
            raise ConfigError(f"{cfg.where(*path)}: {exc}") from exc
    for k, block in enumerate(d["boundary"]):
        try:
            _segment_bc(block)
        except AssemblyError as exc:
            raise ConfigError(f"{cfg.where('boundary', k)}: {exc}") from exc
        box = block["where"]
        for lo, hi in (("x_min", "x_max"), ("y_min", "y_max")):
            if lo in box and hi in box and box[lo] > box[hi]:
                raise ConfigError(f"{cfg.where('boundary', k, 'where')}: {lo} exceeds {hi}")
    if "fracture" in d:
        fr = d["fracture"]
        if d["analysis"]["formulation"] != "primal":
            raise ConfigError(f"{cfg.where('fracture')}: crack analysis needs the primal formulation")
        sched = fr["schedule"]
        if ("multipliers" in sched) == ("stop" in sched or "steps" in sched):
            raise ConfigError(f"{cfg.where('fracture', 'schedule')}: give 'multipliers' or "
                              "'stop' with 'steps'")
        if "multipliers" not in sched and not ("stop" in sched and "steps" in sched):
            raise ConfigError(f"{cfg.where('fracture', 'schedule')}: 'stop' and 'steps' go together")
        if np.hypot(*fr["direction"]) == 0:
            raise ConfigError(f"{cfg.where('fracture', 'direction')}: direction must be nonzero")


def _functions(d: dict):
    for key, dim in (("body_force", 2), ("charge", 1)):
        if key in d["loads"]:
            yield ("loads", key), d["loads"][key], dim
    for k, block in enumerate(d["boundary"]):
        for key, value in block["data"].items():
            yield ("boundary", k, "data", key), value, DATA_DIM[key]


# ---------------------------------------------------------------------------
# building the problem


def to_field(value, dim: int | None = None) -> PolyField:
    """Constant or coefficient table -> ``PolyField``.

    ``dim`` checks the component count; a single number fills every component.
    """
    if isinstance(value, dict):
        c = np.asarray(value["coefficients"], dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3:
            raise ValueError("coefficient table must be nested [component][x power][y power]")
        f = PolyField(c)
    elif np.ndim(value) == 0 and dim is not None:
        f = PolyField.constant([float(value)] * dim)
    else:
        f = PolyField.constant(value)
    if dim is not None and f.dim != dim:
        raise ValueError(f"expected {dim} components, got {f.dim}")
    return f


def _segment_bc(block: dict) -> SegmentBC:
    data = {}
    for key, value in block["data"].items():
        try:
            data[key] = to_field(value, DATA_DIM[key])
        except ValueError as exc:
            raise AssemblyError(f"data {key!r}: {exc}") from exc
    return SegmentBC(**{fam: block.get(fam, tags[1]) for fam, tags in FAMILIES.items()}, data=data)


def build_partition(cfg: ProblemConfig) -> Partition:
    geo = cfg.data["geometry"]
    if "mesh" in geo:
        m = geo["mesh"]
        if "file" in m:
            with open(m["file"]) as fh:
                raw = yaml.safe_load(fh)
            if not isinstance(raw, dict) or "vertices" not in raw or "elements" not in raw:
                raise ConfigError(f"{m['file']}: mesh files need 'vertices' and 'elements'")
            m = raw
        return import_partition(Mesh(np.asarray(m["vertices"], dtype=float), [list(e) for e in m["elements"]]))
    dom = np.asarray(geo["domain"], dtype=float)
    p = geo["points"]
    x0, y0 = dom.min(axis=0)
    x1, y1 = dom.max(axis=0)
    if "grid" in p:
        pts = grid_points(p["grid"]["nx"], p["grid"]["ny"], (x0, x1, y0, y1))
    elif "jittered" in p:
        j = p["jittered"]
        pts = jittered_grid(j["nx"], j["ny"], j.get("amplitude", 0.25), seed=j.get("seed", 0),
                            bounds=(x0, x1, y0, y1))
    elif "coordinates" in p:
        pts = np.asarray(p["coordinates"], dtype=float)
    else:
        pts = np.atleast_2d(np.loadtxt(p["file"], delimiter=",", ndmin=2))
        if pts.shape[1] != 2:
            raise ConfigError(f"{p['file']}: expected two comma-separated columns x,y")
    if p.get("lloyd"):
        pts = lloyd_relax(pts, dom, p["lloyd"])
    return build_voronoi(pts, dom)


def build_material(cfg: ProblemConfig) -> MaterialModel:
    m = cfg.data["material"]
    full = cfg.data["analysis"]["theory"] == "full"
    arr = lambda k: None if k not in m else np.asarray(m[k], dtype=float)  # noqa: E731
    return isotropic_builder(
        m["young"], m["poisson"], m["length_scale"], flexo=arr("flexo"), piezo=arr("piezo"),
        converse=arr("converse") if full else None,
        permittivity=m.get("permittivity"),
        ell_phi=m["electric_length_scale"] if full else 0.0, plane=m["plane"],
    )


def build_penalties(cfg: ProblemConfig, mat: MaterialModel) -> PenaltyParams:
    p = cfg.data["penalties"]
    if "eta1" in p:
        return PenaltyParams(tuple(p["eta1"]), tuple(p["eta2"]))
    return PenaltyParams.default(mat, p["boundary"], p["internal"])


def _in_box(pt, box, tol) -> bool:
    return (pt[0] >= box.get("x_min", -np.inf) - tol and pt[0] <= box.get("x_max", np.inf) + tol
            and pt[1] >= box.get("y_min", -np.inf) - tol and pt[1] <= box.get("y_max", np.inf) + tol)


def _ranges(ids) -> str:
    ids = sorted(ids)
    shown = ", ".join(map(str, ids[:20]))
    return shown + (f", ... ({len(ids)} in total)" if len(ids) > 20 else "")


def build_bcs(cfg: ProblemConfig, part: Partition) -> BoundaryConditionSet:
    """Assign boundary blocks to external segments and check the coverage.

    A block applies to a segment when the segment midpoint lies in the
    block's box (bounds inclusive, with a small tolerance).  Every segment needs at least one block and each family may be set
    by at most one block per segment; families a block leaves out are natural
    with zero data.
    """
    blocks = cfg.data["boundary"]
    tol = 1e-9 * float(np.linalg.norm(part.points.max(0) - part.points.min(0)) or 1.0)
    owners = {sid: [] for sid in part.external_ids}
    for sid in part.external_ids:
        seg = part.segments[sid]
        for k, block in enumerate(blocks):
            if _in_box(seg.midpoint, block["where"], tol):
                owners[sid].append(k)
    uncovered = [sid for sid, ks in owners.items() if not ks]
    if uncovered:
        raise ConfigError(f"{cfg.where('boundary')}: no boundary block covers external segments "
                          f"{_ranges(uncovered)}")
    conflicts = {}
    segments = {}
    for sid, ks in owners.items():
        if len(ks) == 1:
            segments[sid] = _segment_bc(blocks[ks[0]])
            continue
        merged = {"data": {}}
        for fam in FAMILIES:
            setters = [k for k in ks if fam in blocks[k]]
            if len(setters) > 1:
                tags = sorted({blocks[k][fam] for k in setters})
                what = (f"the {' and '.join(tags)} parts of the {fam} family overlap" if len(tags) > 1
                        else f"family {fam} is set by blocks {setters}")
                conflicts.setdefault(what, []).append(sid)
            merged[fam] = blocks[setters[0]][fam] if setters else FAMILIES[fam][1]
        for k in ks:
            for key, value in blocks[k]["data"].items():
                if key in (merged["u"], merged["d"], merged["phi"], merged["P"], "Ps", "Ws"):
                    merged["data"].setdefault(key, value)
        segments[sid] = _segment_bc(merged)
    if conflicts:
        what, ids = sorted(conflicts.items())[0]
        raise ConfigError(f"{cfg.where('boundary')}: {what} on segments {_ranges(ids)}")
    loads = cfg.data["loads"]
    body = to_field(loads["body_force"], 2) if "body_force" in loads else None
    charge = to_field(loads["charge"], 1) if "charge" in loads else None
    return BoundaryConditionSet(segments, body, charge)


def solve_options(cfg: ProblemConfig) -> SolveOptions:
    return SolveOptions(**cfg.data["solver"])


def precrack_segments(cfg: ProblemConfig, part: Partition) -> list:
    """Internal segments lying on the configured precrack lines."""
    out = set()
    diam = float(np.linalg.norm(part.points.max(0) - part.points.min(0)))
    tol = 1e-9 * diam
    for k, line in enumerate(cfg.data["fracture"]["precracks"]):
        a, b = np.asarray(line["from"], dtype=float), np.asarray(line["to"], dtype=float)
        ab = b - a
        L2 = float(ab @ ab)
        if L2 == 0:
            raise ConfigError(f"{cfg.where('fracture', 'precracks', k)}: precrack has zero length")
        found = 0
        for sid in part.internal_ids:
            seg = part.segments[sid]
            ok = True
            for p in (seg.a, seg.b):
                t = float((p - a) @ ab) / L2
                r = p - a
                dist = abs(float(ab[0] * r[1] - ab[1] * r[0])) / np.sqrt(L2)
                ok &= dist <= tol and -tol <= t * np.sqrt(L2) <= np.sqrt(L2) + tol
            if ok:
                out.add(sid)
                found += 1
        if not found:
            raise ConfigError(f"{cfg.where('fracture', 'precracks', k)}: no internal segment lies "
                              "on this line")
    return sorted(out)


# ---------------------------------------------------------------------------
# analysis


@dataclass
class ResultBundle:
    """Nodal unknowns, per-subdomain fields at the hosts and the load history.

    ``vertex_u`` and ``vertex_phi`` hold each subdomain's trial functions at its
    own polygon vertices, in polygon order.
    """

    partition: Partition
    u: np.ndarray
    phi: np.ndarray
    cell_fields: dict
    vertex_u: list
    vertex_phi: list
    rows: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def __post_init__(self):
        n = self.partition.n
        if self.u.shape != (n, 2) or self.phi.shape != (n,):
            raise ValueError("nodal arrays do not match the partition")
        for name, arr in self.cell_fields.items():
            if len(arr) != n:
                raise ValueError(f"cell field {name} does not match the partition")


def _primal_fields(disc, x, theory) -> tuple:
    part = disc.partition
    mat = disc.active_material
    names = ("epsilon", "kappa", "sigma", "mu", "E", "V", "D", "Q")
    out = {k: [] for k in names}
    vu, vp = [], []
    for i in range(part.n):
        xi = x[disc.dofs(i)]
        ops = SideOps(disc, i, part.points[i][None])
        fl = fluxes(ops, mat)
        for k, op in (("epsilon", ops.eps), ("kappa", ops.kappa), ("E", ops.E), ("V", ops.V),
                      ("sigma", fl.sigma), ("mu", fl.mu), ("D", fl.D), ("Q", fl.Q)):
            out[k].append((op @ xi)[0])
        poly = part.cells[i].polygon
        vops = SideOps(disc, i, poly)
        vu.append(vops.u @ xi)
        vp.append((vops.phi @ xi)[:, 0])
    return {k: np.array(v) for k, v in out.items()}, vu, vp


def _mixed_fields(disc, sol) -> tuple:
    part = disc.partition
    mat = disc.active_material
    coef = disc.coefficients()
    z = sol.saddle
    out = {k: [] for k in ("epsilon", "kappa", "sigma", "mu", "E", "V", "D", "Q")}
    vu, vp = [], []
    for i in range(part.n):
        ops = MixedOps(disc, i, part.points[i][None])
        zi = z[ops.dofs]
        fl = mixed_fluxes(ops, mat, coef)
        for k, op in (("epsilon", ops.eps), ("E", ops.E), ("sigma", fl.sigma), ("D", fl.D),
                      ("V", fl.V), ("mu", ops.mu), ("Q", ops.Q)):
            out[k].append((op @ zi)[0])
        vops = MixedOps(disc, i, part.cells[i].polygon)
        vu.append(vops.u @ zi)
        vp.append((vops.phi @ zi)[:, 0])
    fields = {k: np.array(v) for k, v in out.items() if v}
    if disc.degenerate_mu:
        fields["kappa"] = postprocess_kappa(disc, sol.blocks, sol.state.x)
    else:
        # invert mu = Cmk kappa - a E
        fields["kappa"] = np.linalg.solve(mat.Cmk, (fields["mu"] + fields["E"] @ mat.a.T).T).T
    return fields, vu, vp


def essential_report(part: Partition, bcs: BoundaryConditionSet) -> dict:
    """Whether displacement and potential are prescribed somewhere."""
    tags = [bcs.for_segment(s) for s in part.external_ids]
    return {"displacement": any(t.u == "u" for t in tags),
            "potential": any(t.phi == "phi" for t in tags)}


def _require_constraints(report: dict) -> None:
    missing = [k for k, v in report.items() if not v]
    if missing:
        modes = {"displacement": "rigid-body motions", "potential": "a constant potential"}
        raise NumericalError("the system is singular: its nullspace contains "
                             + " and ".join(modes[k] for k in missing)
                             + "; prescribe " + " and ".join(missing) + " on part of the boundary")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def run_analysis(cfg: ProblemConfig, *, threads: int = 1, quadrature: int | None = None) -> ResultBundle:
    """Build and solve the configured problem."""
    an = cfg.data["analysis"]
    quad = quadrature or an["quadrature"]
    part = build_partition(cfg)
    mat = build_material(cfg)
    bcs = build_bcs(cfg, part)
    pen = build_penalties(cfg, mat)
    opts = solve_options(cfg)
    full = an["theory"] == "full"
    rbf = RBFParams(**an["rbf"]) if "rbf" in an else None

    if an["formulation"] == "mixed":
        disc = build_mixed_discretization(
            part, mat, an["theory"], degenerate_mu=not mat.has_gradient_elasticity,
            degenerate_Q=full and not mat.has_field_gradient)
        _require_constraints(essential_report(part, bcs))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sol = solve_mixed(disc, bcs, pen, opts)
        x = sol.state.x
        fields, vu, vp = _mixed_fields(disc, sol)
        rows = [("1", "1.0", "", "", "", "")]
        return ResultBundle(disc.partition, x[:2 * part.n].reshape(-1, 2), x[2 * part.n:],
                            fields, vu, vp, rows)

    if cfg.has_fracture:
        return _run_fracture(cfg, part, mat, bcs, pen, opts, quad, threads)

    disc = build_discretization(part, mat, an["order"], an["theory"], quadrature=quad, rbf=rbf)
    _require_constraints(essential_report(part, bcs))

    def assemble(state):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            s = assemble_system(disc, bcs, pen, state if full else None)
        return s.K, s.f

    if full:
        st = newton_raphson(assemble, np.zeros(disc.n_dof), opts)
    else:
        K, f = assemble(None)
        st = SolutionState(solve_linear(K, f, opts))
    x = st.x
    state = x if full else None
    live = list(part.internal_ids)
    trac = max((hoop_traction(disc, s, x, state) for s in live), default=None)
    ber = max((compute_ber(disc, s, x, pen, None, state) for s in live), default=None)
    fields, vu, vp = _primal_fields(disc, x, an["theory"])
    rows = [("1", "1.0", "", _fmt(trac), _fmt(ber), "")]
    return ResultBundle(part, x[:2 * part.n].reshape(-1, 2), x[2 * part.n:], fields, vu, vp, rows)


def _run_fracture(cfg, part, mat, bcs, pen, opts, quad, threads) -> ResultBundle:
    an, fr = cfg.data["analysis"], cfg.data["fracture"]
    contours = tuple(cells_within(part, c["center"], c["radius"]) for c in fr["contours"])
    for k, cells in enumerate(contours):
        if not cells:
            raise ConfigError(f"{cfg.where('fracture', 'contours', k)}: no subdomain host inside")
    _require_constraints(essential_report(part, bcs))
    prob = FractureProblem(part, mat, bcs, an["order"], an["theory"], pen, quad, fr["face_kind"],
                           tuple(fr["direction"]), contours, tuple(precrack_segments(cfg, part)), opts)
    sched = fr["schedule"]
    schedule = (LoadSchedule(tuple(sched["multipliers"])) if "multipliers" in sched
                else LoadSchedule.linear(sched["stop"], sched["steps"]))
    c = fr["criterion"]
    criterion = CrackCriterion(c["kind"], c["threshold"], c["policy"])
    history = quasi_static_run(prob, schedule, criterion, workers=threads)
    last = history[-1]
    kind = fr["face_kind"]
    disc = build_discretization(part, mat, an["order"], an["theory"], quadrature=quad,
                                cracked=last.cracked,
                                impermeable=last.cracked if kind == "impermeable" else ())
    fields, vu, vp = _primal_fields(disc, last.x, an["theory"])
    return ResultBundle(part, last.x[:2 * part.n].reshape(-1, 2), last.x[2 * part.n:], fields,
                        vu, vp, history_rows(history), history)


def history_rows(history) -> list:
    """CSV rows: one per new crack, or one per step without cracks."""
    rows = []
    for rec in history:
        j = ";".join(_fmt(v) for v in rec.j)
        if rec.new_cracks:
            for sid in rec.new_cracks:
                t, b = rec.crack_values[sid]
                rows.append((str(rec.step), _fmt(rec.load), str(sid), _fmt(t), _fmt(b), j))
        else:
            rows.append((str(rec.step), _fmt(rec.load), "", _fmt(rec.max_traction),
                         _fmt(rec.max_ber), j))
    return rows


# ---------------------------------------------------------------------------
# writers


def write_history_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)


def _num(v: float, digits: int) -> str:
    s = f"{v:.{digits}g}"
    return "0" if s in ("-0", "0") else s


def _write_cells(fh, part: Partition, n_lead: int, offsets) -> None:
    n = part.n
    size = sum(len(c.polygon) + 1 for c in part.cells)
    fh.write(f"CELLS {n} {size}\n")
    for c, off in zip(part.cells, offsets):
        k = len(c.polygon)
        fh.write(f"{k} " + " ".join(str(n_lead + off + j) for j in range(k)) + "\n")
    fh.write(f"CELL_TYPES {n}\n")
    fh.write("7\n" * n)


def _tensor_rows(arr: np.ndarray, kind: str) -> np.ndarray:
    """3x3 tensors from Voigt stress (engineering shear for strain)."""
    s11, s22, s12 = arr[:, 0], arr[:, 1], arr[:, 2] * (0.5 if kind == "strain" else 1.0)
    z = np.zeros_like(s11)
    return np.stack([s11, s12, z, s12, s22, z, z, z, z], axis=1)


def write_vtk(partition: Partition, results: ResultBundle | None, path, digits: int = 12) -> None:
    """Legacy ASCII VTK 3.0 unstructured grid of the subdomain polygons.

    Points are the hosts followed by each polygon's own vertices, so that the
    discontinuous trial functions can be shown cell by cell; the host values
    are the nodal unknowns.  Without results only geometry and cell areas are
    written.
    """
    part = partition
    n = part.n
    offsets = np.concatenate([[0], np.cumsum([len(c.polygon) for c in part.cells])[:-1]])
    n_vert = sum(len(c.polygon) for c in part.cells)
    fmt = lambda v: _num(float(v), digits)  # noqa: E731
    with open(path, "w", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("fpmflexo subdomains\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n + n_vert} double\n")
        for p in part.points:
            fh.write(f"{fmt(p[0])} {fmt(p[1])} 0\n")
        for c in part.cells:
            for p in c.polygon:
                fh.write(f"{fmt(p[0])} {fmt(p[1])} 0\n")
        _write_cells(fh, part, n, offsets)

        def block(lines):
            for row in lines:
                fh.write(" ".join(fmt(v) for v in row) + "\n")

        if results is not None:
            fh.write(f"POINT_DATA {n + n_vert}\n")
            fh.write("VECTORS u double\n")
            u = np.vstack([results.u] + list(results.vertex_u))
            block(np.column_stack([u, np.zeros(len(u))]))
            fh.write("SCALARS phi double 1\nLOOKUP_TABLE default\n")
            phi = np.concatenate([results.phi] + list(results.vertex_phi))
            block(phi[:, None])
        fh.write(f"CELL_DATA {n}\n")
        fh.write("SCALARS area double 1\nLOOKUP_TABLE default\n")
        block(np.array([[c.area] for c in part.cells]))
        if results is not None:
            f = results.cell_fields
            fh.write("TENSORS sigma double\n")
            block(_tensor_rows(f["sigma"], "stress"))
            fh.write("TENSORS epsilon double\n")
            block(_tensor_rows(f["epsilon"], "strain"))
            fh.write("VECTORS D double\n")
            block(np.column_stack([f["D"], np.zeros(n)]))
            fh.write("VECTORS E double\n")
            block(np.column_stack([f["E"], np.zeros(n)]))


# ---------------------------------------------------------------------------
# command line


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fpmflexo", description="Meshless flexoelectric analysis of 2D solids.")
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads for the crack criterion (default 1, serial)")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("--quadrature", type=int, choices=(1, 2),
                        help="override the configured quadrature level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("solve", parents=[common], help="run the analysis and write VTK and CSV")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True, help="output directory")
    c = sub.add_parser("check", parents=[common], help="validate a configuration")
    c.add_argument("config")
    g = sub.add_parser("partition", parents=[common], help="write the partition as VTK")
    g.add_argument("config")
    g.add_argument("-o", "--output", required=True, help="output directory")
    return p


def _check(cfg: ProblemConfig) -> Partition:
    part = build_partition(cfg)
    build_material(cfg)
    build_bcs(cfg, part)
    if cfg.has_fracture:
        precrack_segments(cfg, part)
    return part


def cli_main(argv=None) -> int:
    """Run the command line; returns the exit code."""
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.threads < 1:
        print("fpmflexo: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.command == "check":
            part = _check(cfg)
            print(f"{args.config}: valid ({part.n} subdomains, {len(part.external_ids)} boundary segments)")
            return EXIT_OK
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        digits = cfg.data["output"]["digits"]
        if args.command == "partition":
            part = _check(cfg)
            write_vtk(part, None, out / "partition.vtk", digits)
            return EXIT_OK
        res = run_analysis(cfg, threads=args.threads, quadrature=args.quadrature)
        write_vtk(res.partition, res, out / cfg.data["output"]["vtk"], digits)
        write_history_csv(res.rows, out / cfg.data["output"]["csv"])
        return EXIT_OK
    except FractureAborted as exc:
        print(f"fpmflexo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as exc:
        print(f"fpmflexo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, GeometryError, MaterialError, AssemblyError, CrackError, SupportError,
            ValueError) as exc:
        print(f"fpmflexo: invalid problem: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FPMError as exc:
        print(f"fpmflexo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"fpmflexo: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
