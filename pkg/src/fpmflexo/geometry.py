"""Point sets, polygonal partitions, supports and boundary frames.

A partition assigns one convex-ish polygonal subdomain to every point.  Shared
cell edges become internal segments; cell edges on the domain boundary become
external segments.  Segments carry an orthonormal frame ``(normal, tangent)``
where the normal points out of the first cell ``e1`` and the tangent is the
normal rotated by +90 degrees.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import GeometryError, SupportError

INTERNAL = "internal"
EXTERNAL = "external"

# minimum number of neighbours (m, owner excluded) per approximation order
# smallest m for which the DQ collocation with linear, quadratic or cubic
# polynomial augmentation is solvable (m + 1 >= number of monomials)
MIN_SUPPORT = {"linear": 2, "quadratic": 5, "cubic": 9}


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray test; points on the boundary are not reliably classified."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x1, y1 = poly[:, 0][None, :], poly[:, 1][None, :]
    x2, y2 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    straddle = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return (straddle & (x < xc)).sum(axis=1) % 2 == 1


def distance_to_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from point ``p`` to each segment ``a[k]-b[k]``."""
    ab = b - a
    t = np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(p - proj, axis=1)


def _ccw(poly: np.ndarray) -> np.ndarray:
    poly = np.asarray(poly, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise GeometryError("polygon must be a (k, 2) array with k >= 3")
    if np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    a = polygon_area(poly)
    if abs(a) == 0.0:
        raise GeometryError("degenerate polygon with zero area")
    return poly if a > 0 else poly[::-1].copy()


@dataclass(frozen=True)
class Subdomain:
    host: int
    polygon: np.ndarray
    area: float
    centroid: np.ndarray


@dataclass(frozen=True)
class Segment:
    """Straight boundary piece of one (external) or two (internal) cells.

    ``a -> b`` runs along ``tangent``.  ``edge`` is the index of the domain
    polygon edge an external segment lies on (-1 when unknown).
    """

    id: int
    kind: str
    e1: int
    e2: int
    a: np.ndarray
    b: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    length: float
    h: float
    edge: int = -1

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.a + self.b)

    @property
    def internal(self) -> bool:
        return self.kind == INTERNAL


@dataclass(frozen=True)
class Corner:
    """A vertex of the external boundary and the two segments meeting there.

    Walking the boundary counter-clockwise, ``incoming`` ends at the vertex and
    ``outgoing`` starts at it.
    """

    vertex: np.ndarray
    incoming: int
    outgoing: int


@dataclass(frozen=True)
class Support:
    owner: int
    members: tuple
    ring_sizes: tuple = ()

    @property
    def m(self) -> int:
        return len(self.members) - 1

    @property
    def ring1(self) -> tuple:
        n1 = self.ring_sizes[0] if self.ring_sizes else self.m
        return self.members[1:1 + n1]


@dataclass(frozen=True)
class SupportPolicy:
    interior_rings: int = 2
    boundary_rings: int = 3
    min_m: int = MIN_SUPPORT["cubic"]

    @classmethod
    def for_order(cls, order: str, **kw) -> "SupportPolicy":
        return cls(min_m=MIN_SUPPORT[order], **kw)


@dataclass
class Partition:
    points: np.ndarray
    cells: list
    segments: list
    domain: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = np.array([c.area for c in self.cells])
        return self._cache["areas"]

    @property
    def centroids(self) -> np.ndarray:
        return np.array([c.centroid for c in self.cells])

    @property
    def diameter(self) -> float:
        if "diam" not in self._cache:
            v = np.vstack([c.polygon for c in self.cells])
            self._cache["diam"] = float(np.linalg.norm(v.max(0) - v.min(0)))
        return self._cache["diam"]

    @property
    def internal_ids(self) -> list:
        return [s.id for s in self.segments if s.kind == INTERNAL]

    @property
    def external_ids(self) -> list:
        return [s.id for s in self.segments if s.kind == EXTERNAL]

    def cell_segments(self, i: int) -> list:
        if "cellseg" not in self._cache:
            table = [[] for _ in range(self.n)]
            for s in self.segments:
                table[s.e1].append(s.id)
                if s.e2 >= 0:
                    table[s.e2].append(s.id)
            self._cache["cellseg"] = table
        return self._cache["cellseg"][i]

    def adjacency(self, skip: Iterable[int] = ()) -> list:
        """Ring-1 neighbour sets, ignoring the internal segments in ``skip``."""
        skip = set(skip)
        adj = [set() for _ in range(self.n)]
        for s in self.segments:
            if s.kind == INTERNAL and s.id not in skip:
                adj[s.e1].add(s.e2)
                adj[s.e2].add(s.e1)
        return adj

    def boundary_cells(self) -> set:
        return {s.e1 for s in self.segments if s.kind == EXTERNAL}

    def total_area(self) -> float:
        return float(self.areas.sum())

    def with_hosts_at_centroids(self) -> "Partition":
        cells = [replace(c, centroid=c.centroid.copy()) for c in self.cells]
        pts = np.array([c.centroid for c in cells])
        return boundary_frames(Partition(pts, cells, list(self.segments), self.domain))


def _frame(seg_id, kind, e1, e2, a, b, points, cells, edge, floor):
    # a -> b must run counter-clockwise around cell e1
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = b - a
    length = float(np.hypot(*t))
    if not length > floor:
        raise GeometryError(f"segment {seg_id} has zero length")
    t = t / length
    n = np.array([t[1], -t[0]])
    s = np.array([-n[1], n[0]])
    if kind == INTERNAL:
        h = float(np.linalg.norm(points[e1] - points[e2]))
    else:
        h = float(distance_to_segments(cells[e1].centroid, a[None], b[None])[0])
    return Segment(seg_id, kind, int(e1), int(e2), a, b, n, s, length, max(h, floor), edge)


def boundary_frames(partition: Partition) -> Partition:
    """Recompute normals, tangents, lengths and ``h`` of every segment."""
    floor = 1e-14 * partition.diameter
    segs = [
        _frame(s.id, s.kind, s.e1, s.e2, s.a, s.b, partition.points, partition.cells, s.edge, floor)
        for s in partition.segments
    ]
    return Partition(partition.points, partition.cells, segs, partition.domain)


def _clip(verts, labels, normal, offset, label, tol):
    """Clip a labelled polygon to ``normal . x <= offset``.

    ``labels[k]`` tags the edge from vertex k to k+1; the new edge running along
    the clipping line receives ``label``.
    """
    d = verts @ normal - offset
    inside = d <= tol
    if inside.all():
        return verts, labels
    out_v, out_l = [], []
    n = len(verts)
    for k in range(n):
        kn = (k + 1) % n
        p, q = verts[k], verts[kn]
        if inside[k]:
            out_v.append(p)
            out_l.append(labels[k])
            if not inside[kn]:
                t = d[k] / (d[k] - d[kn])
                out_v.append(p + t * (q - p))
                out_l.append(label)
        elif inside[kn]:
            t = d[k] / (d[k] - d[kn])
            out_v.append(p + t * (q - p))
            out_l.append(labels[k])
    if not out_v:
        return np.empty((0, 2)), []
    return np.array(out_v), out_l


def _cleanup(verts, labels, tol):
    changed = True
    while changed and len(verts) >= 3:
        changed = False
        n = len(verts)
        for k in range(n):
            kn = (k + 1) % n
            if np.hypot(*(verts[kn] - verts[k])) <= tol:
                verts = np.delete(verts, k, axis=0)
                labels = labels[:k] + labels[k + 1:]
                changed = True
                break
            kp = (k - 1) % n
            if labels[kp] == labels[k]:
                e1, e2 = verts[k] - verts[kp], verts[kn] - verts[k]
                if abs(e1[0] * e2[1] - e1[1] * e2[0]) <= tol * (np.hypot(*e1) + np.hypot(*e2)):
                    verts = np.delete(verts, k, axis=0)
                    labels = labels[:k] + labels[k + 1:]
                    changed = True
                    break
    return verts, labels


def _candidate_neighbours(pts: np.ndarray) -> list:
    n = len(pts)
    if n <= 64:
        return [[j for j in range(n) if j != i] for i in range(n)]
    try:
        tri = Delaunay(pts)
    except QhullError:
        return [[j for j in range(n) if j != i] for i in range(n)]
    indptr, indices = tri.vertex_neighbor_vertices
    return [sorted(indices[indptr[i]:indptr[i + 1]].tolist()) for i in range(n)]


def _check_points(pts: np.ndarray, dom: np.ndarray, diam: float) -> None:
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite point coordinates")
    pairs = cKDTree(pts).query_pairs(1e-12 * diam)
    if pairs:
        bad = sorted(pairs)[:10]
        raise GeometryError(f"duplicate points: {bad}")
    inside = points_in_polygon(pts, dom)
    a, b = dom, np.roll(dom, -1, axis=0)
    for i, p in enumerate(pts):
        if not inside[i] or distance_to_segments(p, a, b).min() <= 1e-12 * diam:
            raise GeometryError(f"point {i} at {tuple(p)} is not strictly inside the domain")


def build_voronoi(points: Sequence, domain: Sequence) -> Partition:
    """Voronoi partition of ``domain`` generated by ``points``.

    Each cell is the domain polygon clipped by the perpendicular bisectors with
    the candidate neighbours of its point.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    dom = _ccw(domain)
    diam = float(np.linalg.norm(dom.max(0) - dom.min(0)))
    tol = 1e-12 * diam
    _check_points(pts, dom, diam)
    cand = _candidate_neighbours(pts)

    polys, labs = [], []
    for i, p in enumerate(pts):
        verts = dom.copy()
        labels = [-1 - k for k in range(len(dom))]
        for j in cand[i]:
            q = pts[j]
            nrm = q - p
            verts, labels = _clip(verts, labels, nrm, float(nrm @ (0.5 * (p + q))), j, tol)
            if len(verts) == 0:
                break
        verts, labels = _cleanup(verts, labels, tol)
        if len(verts) < 3 or polygon_area(verts) <= 0.0:
            raise GeometryError(f"empty Voronoi cell for point {i}")
        polys.append(verts)
        labs.append(labels)

    cells = [Subdomain(i, v, polygon_area(v), polygon_centroid(v)) for i, v in enumerate(polys)]
    dom_area = polygon_area(dom)
    if abs(sum(c.area for c in cells) - dom_area) > 1e-10 * dom_area:
        raise GeometryError("Voronoi cells do not tile the domain")

    internal = {}
    external = []
    for i, (verts, labels) in enumerate(zip(polys, labs)):
        k = len(verts)
        for e in range(k):
            a, b, lab = verts[e], verts[(e + 1) % k], labels[e]
            if lab >= 0:
                key = (min(i, lab), max(i, lab))
                if i == key[0]:
                    internal[key] = (a, b)
                elif key not in internal:
                    internal[key] = (b, a)
            else:
                external.append((i, -1 - lab, a, b))

    raw = [(INTERNAL, e1, e2, a, b, -1) for (e1, e2), (a, b) in sorted(internal.items())]
    external.sort(key=lambda r: (r[0], r[1], r[2][0], r[2][1]))
    raw += [(EXTERNAL, i, -1, a, b, edge) for i, edge, a, b in external]
    return _finish(pts, cells, raw, dom)


def _finish(pts, cells, raw, dom) -> Partition:
    part = Partition(pts, cells, [], dom)
    floor = 1e-14 * part.diameter
    part.segments = [
        _frame(k, kind, e1, e2, a, b, pts, cells, edge, floor)
        for k, (kind, e1, e2, a, b, edge) in enumerate(raw)
    ]
    return part


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    elements: list


def import_partition(mesh: Mesh) -> Partition:
    """Turn a conforming polygonal mesh into a partition with centroid hosts."""
    verts = np.asarray(mesh.vertices, dtype=float)
    elems = []
    for k, el in enumerate(mesh.elements):
        el = list(el)
        if len(el) < 3:
            raise GeometryError(f"element {k} has fewer than 3 vertices")
        if polygon_area(verts[el]) < 0:
            el = el[::-1]
        elems.append(el)

    cells = []
    for k, el in enumerate(elems):
        poly = verts[el]
        area = polygon_area(poly)
        if area <= 0:
            raise GeometryError(f"element {k} has zero area")
        cells.append(Subdomain(k, poly.copy(), area, polygon_centroid(poly)))
    pts = np.array([c.centroid for c in cells])

    edges: dict = {}
    for k, el in enumerate(elems):
        for e in range(len(el)):
            i, j = el[e], el[(e + 1) % len(el)]
            edges.setdefault((min(i, j), max(i, j)), []).append((k, i, j))

    diam = float(np.linalg.norm(verts.max(0) - verts.min(0)))
    used = sorted({v for el in elems for v in el})
    vused = verts[used]
    raw_int, raw_ext = [], []
    for key, owners in sorted(edges.items()):
        if len(owners) > 2:
            raise GeometryError(f"edge {key} shared by more than two elements")
        if len(owners) == 2:
            (k1, i1, j1), (k2, _, _) = sorted(owners)
            raw_int.append((INTERNAL, k1, k2, verts[i1], verts[j1], -1))
        else:
            k1, i1, j1 = owners[0]
            a, b = verts[i1], verts[j1]
            ab = b - a
            t = (vused - a) @ ab / (ab @ ab)
            dist = np.abs((vused - a) @ np.array([ab[1], -ab[0]])) / np.hypot(*ab)
            tol = 1e-10 * diam
            hanging = (dist < tol) & (t > 1e-10) & (t < 1 - 1e-10)
            if hanging.any():
                v = used[int(np.flatnonzero(hanging)[0])]
                raise GeometryError(f"non-conforming mesh: hanging node {v} on edge {key}")
            raw_ext.append((EXTERNAL, k1, -1, a, b, -1))
    raw_ext.sort(key=lambda r: (r[1], r[3][0], r[3][1]))
    return _finish(pts, cells, raw_int + raw_ext, None)


def structured_quad_mesh(nx: int, ny: int, bounds=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    x0, x1, y0, y1 = bounds
    xs, ys = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)
    verts = np.array([[x, y] for y in ys for x in xs])
    elems = []
    for j in range(ny):
        for i in range(nx):
            v = j * (nx + 1) + i
            elems.append([v, v + 1, v + nx + 2, v + nx + 1])
    return Mesh(verts, elems)


def grid_points(nx: int, ny: int, bounds=(0.0, 1.0, 0.0, 1.0)) -> np.ndarray:
    """Cell-centred ``nx`` by ``ny`` lattice inside a rectangle."""
    x0, x1, y0, y1 = bounds
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    return np.array([[x, y] for y in ys for x in xs])


def jittered_grid(nx: int, ny: int, amplitude: float = 0.25, seed: int = 0,
                  bounds=(0.0, 1.0, 0.0, 1.0)) -> np.ndarray:
    """Lattice points moved randomly by up to ``amplitude`` of the spacing."""
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = bounds
    pts = grid_points(nx, ny, bounds)
    step = np.array([(x1 - x0) / nx, (y1 - y0) / ny])
    return pts + rng.uniform(-amplitude, amplitude, pts.shape) * step


def lloyd_relax(points: np.ndarray, domain: Sequence, iterations: int = 10) -> np.ndarray:
    """Move points to their cell centroids ``iterations`` times."""
    pts = np.asarray(points, dtype=float)
    for _ in range(iterations):
        pts = build_voronoi(pts, domain).centroids
    return pts


def compute_supports(partition: Partition, policy: SupportPolicy = SupportPolicy(),
                     adjacency: list | None = None,
                     boundary_cells: set | None = None) -> list:
    """Ring-based neighbour sets, owner first then ring by ring in index order."""
    adj = partition.adjacency() if adjacency is None else adjacency
    bcells = partition.boundary_cells() if boundary_cells is None else boundary_cells
    n = partition.n
    out = []
    for i in range(n):
        near_boundary = i in bcells or any(j in bcells for j in adj[i])
        depth = policy.boundary_rings if near_boundary else policy.interior_rings
        seen = {i}
        members = [i]
        sizes = []
        frontier = [i]
        for _ in range(depth):
            ring = sorted({j for k in frontier for j in adj[k]} - seen)
            if not ring:
                break
            seen.update(ring)
            members.extend(ring)
            sizes.append(len(ring))
            frontier = ring
        if len(members) - 1 < policy.min_m:
            raise SupportError(
                f"point {i} has {len(members) - 1} neighbours in its support; needs m >= {policy.min_m}"
            )
        out.append(Support(i, tuple(members), tuple(sizes)))
    return out


def generalized_supports(supports: Sequence) -> list:
    """Union of the supports of every member of each support."""
    members = [set(s.members) for s in supports]
    return [set().union(*(members[k] for k in m)) for m in members]


def bfs_rings(adj: list, start: int, depth: int) -> list:
    """Rings of a breadth-first search, used as an independent check."""
    dist = {start: 0}
    q = deque([start])
    while q:
        k = q.popleft()
        if dist[k] == depth:
            continue
        for j in adj[k]:
            if j not in dist:
                dist[j] = dist[k] + 1
                q.append(j)
    return [sorted(k for k, d in dist.items() if d == r) for r in range(1, depth + 1)]


def corner_set(partition: Partition, segment_ids: Iterable[int] | None = None) -> list:
    """Vertices of the external boundary with their incoming/outgoing segments."""
    ids = partition.external_ids if segment_ids is None else list(segment_ids)
    if not ids:
        return []
    segs = [partition.segments[k] for k in ids]
    starts = np.array([s.a for s in segs])
    tree = cKDTree(starts)
    tol = 1e-9 * partition.diameter
    corners = []
    for s in segs:
        hits = tree.query_ball_point(s.b, tol)
        if len(hits) != 1:
            raise GeometryError(f"external boundary is not a closed loop at {tuple(s.b)}")
        corners.append(Corner(s.b.copy(), s.id, segs[hits[0]].id))
    corners.sort(key=lambda c: c.outgoing)
    return corners
