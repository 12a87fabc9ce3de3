"""Random convex domains and quasi-uniform unstructured triangulations.

Domains are strictly convex polygons sampled on a randomly scaled and
rotated ellipse.  Interiors are meshed by Poisson-disk sampling (Bridson's
algorithm) seeded with equispaced boundary points, followed by Delaunay
triangulation and a few rounds of Laplacian smoothing of the interior
nodes.  A deterministic structured-lattice mode produces hand-checkable
meshes of rectangles.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay


class MeshFailure(RuntimeError):
    """Raised when a usable triangulation cannot be produced."""


@dataclass
class Polygon:
    """Strictly convex polygon with counterclockwise vertices (k, 2)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 two-dimensional vertices")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross <= 0):
            raise ValueError("vertices are not in strictly convex CCW position")
        self.vertices = v

    @property
    def area(self) -> float:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        return 0.5 * float(np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))

    @property
    def perimeter(self) -> float:
        e = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.sum(np.hypot(e[:, 0], e[:, 1])))

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points strictly inside (by ``margin``)."""
        pts = np.atleast_2d(pts)
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        elen = np.hypot(e[:, 0], e[:, 1])
        inside = np.ones(pts.shape[0], dtype=bool)
        for k in range(v.shape[0]):
            d = pts - v[k]
            cross = e[k, 0] * d[:, 1] - e[k, 1] * d[:, 0]
            inside &= cross > margin * elen[k]
        return inside


@dataclass
class TriMesh:
    """Planar triangulation.

    ``coords`` is (n, 2), ``triangles`` is (m, 3) with positive signed area,
    ``boundary_nodes`` is the sorted array of nodes incident to an edge that
    belongs to exactly one triangle.
    """

    coords: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.boundary_nodes is None:
            self.boundary_nodes = boundary_nodes_of(self.triangles)
        else:
            self.boundary_nodes = np.asarray(self.boundary_nodes, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.nonzero(mask)[0]


def edges_of(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges (sorted pairs) of a triangle list."""
    t = np.asarray(triangles)
    e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def boundary_nodes_of(triangles: np.ndarray) -> np.ndarray:
    """Nodes on edges shared by exactly one triangle."""
    t = np.asarray(triangles)
    e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def triangle_areas(mesh: TriMesh) -> np.ndarray:
    p = mesh.coords[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def min_angle_deg(mesh: TriMesh) -> float:
    """Smallest interior angle over all triangles, in degrees."""
    p = mesh.coords[mesh.triangles]
    angles = []
    for i in range(3):
        a = p[:, (i + 1) % 3] - p[:, i]
        b = p[:, (i + 2) % 3] - p[:, i]
        na = np.hypot(a[:, 0], a[:, 1])
        nb = np.hypot(b[:, 0], b[:, 1])
        cosv = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(cosv)))
    return float(np.min(np.stack(angles)))


def mesh_is_connected(mesh: TriMesh) -> bool:
    e = edges_of(mesh.triangles)
    n = mesh.n_nodes
    adj = sp.coo_matrix(
        (np.ones(e.shape[0]), (e[:, 0], e[:, 1])), shape=(n, n)
    )
    ncomp, _ = connected_components(adj + adj.T, directed=False)
    return ncomp == 1


def validate_mesh(mesh: TriMesh, min_angle: float = 0.0) -> None:
    """Raise MeshFailure if any triangulation invariant is violated."""
    if np.any(triangle_areas(mesh) <= 0):
        raise MeshFailure("triangle with non-positive signed area")
    if not mesh_is_connected(mesh):
        raise MeshFailure("triangle edge graph is disconnected")
    detected = boundary_nodes_of(mesh.triangles)
    if not np.array_equal(np.sort(mesh.boundary_nodes), detected):
        raise MeshFailure("boundary_nodes inconsistent with single-triangle edges")
    if min_angle > 0 and min_angle_deg(mesh) < min_angle:
        raise MeshFailure(f"minimum angle below {min_angle} degrees")


def random_convex_polygon(n_vertices: int, seed: int) -> Polygon:
    """Random strictly convex polygon with exactly ``n_vertices`` corners.

    Vertices sit on a randomly scaled, rotated ellipse at jittered angular
    positions, which keeps every sampled point in strictly convex position.
    Deterministic for a fixed seed.
    """
    if n_vertices < 3:
        raise ValueError("a polygon needs at least 3 vertices")
    rng = np.random.default_rng(seed)
    base = 2.0 * np.pi * np.arange(n_vertices) / n_vertices
    jitter = rng.uniform(-0.45, 0.45, size=n_vertices) * (2.0 * np.pi / n_vertices)
    theta = base + jitter
    radius = rng.uniform(0.6, 1.4)
    aspect = rng.uniform(0.55, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    pts = radius * np.column_stack([np.cos(theta), aspect * np.sin(theta)])
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    return Polygon(pts @ rot.T)


def _boundary_points(poly: Polygon, h: float) -> np.ndarray:
    pts = []
    v = poly.vertices
    for k in range(v.shape[0]):
        a, b = v[k], v[(k + 1) % v.shape[0]]
        seg = int(np.ceil(np.hypot(*(b - a)) / h))
        for t in range(seg):
            pts.append(a + (b - a) * (t / seg))
    return np.array(pts)


def _poisson_disk(poly: Polygon, seeds: np.ndarray, r: float, rng) -> np.ndarray:
    """Bridson sampling inside ``poly`` honoring pre-placed ``seeds``."""
    cell = r / math.sqrt(2.0)
    lo = poly.vertices.min(axis=0)
    lox, loy = float(lo[0]), float(lo[1])
    r2 = r * r
    grid: dict[tuple[int, int], list[tuple[float, float]]] = {}
    points: list[tuple[float, float]] = []

    # Half-plane tests as plain floats: inside iff ex*(y-vy) - ey*(x-vx) > 0.
    v = poly.vertices
    e = np.roll(v, -1, axis=0) - v
    halfplanes = [
        (float(v[k, 0]), float(v[k, 1]), float(e[k, 0]), float(e[k, 1]))
        for k in range(v.shape[0])
    ]

    def inside(x, y):
        for vx, vy, ex, ey in halfplanes:
            if ex * (y - vy) - ey * (x - vx) <= 0.0:
                return False
        return True

    def register(x, y):
        points.append((x, y))
        k = (int((x - lox) / cell), int((y - loy) / cell))
        grid.setdefault(k, []).append((x, y))

    def clear(x, y):
        kx = int((x - lox) / cell)
        ky = int((y - loy) / cell)
        for ix in range(kx - 2, kx + 3):
            for iy in range(ky - 2, ky + 3):
                for px, py in grid.get((ix, iy), ()):
                    dx = px - x
                    dy = py - y
                    if dx * dx + dy * dy < r2:
                        return False
        return True

    for s in seeds:
        register(float(s[0]), float(s[1]))
    n_seeds = seeds.shape[0]

    # Initial interior sample by rejection; tiny domains may hold none.
    hi = poly.vertices.max(axis=0)
    hix, hiy = float(hi[0]), float(hi[1])
    active: list[tuple[float, float]] = []
    for _ in range(2000):
        x = lox + (hix - lox) * rng.uniform()
        y = loy + (hiy - loy) * rng.uniform()
        if inside(x, y) and clear(x, y):
            register(x, y)
            active.append((x, y))
            break
    while active:
        bx, by = active[-1]  # depth-first keeps the active list short
        placed = False
        for _ in range(30):
            rad = r * (1.0 + rng.uniform())
            ang = 2.0 * math.pi * rng.uniform()
            x = bx + rad * math.cos(ang)
            y = by + rad * math.sin(ang)
            if inside(x, y) and clear(x, y):
                register(x, y)
                active.append((x, y))
                placed = True
                break
        if not placed:
            active.pop()
    if len(points) == n_seeds:
        return np.zeros((0, 2))
    return np.array(points[n_seeds:])


def _smooth_interior(points: np.ndarray, n_fixed: int, rounds: int) -> np.ndarray:
    """Laplacian smoothing of points[n_fixed:], re-triangulating each round."""
    pts = points.copy()
    n = pts.shape[0]
    for _ in range(rounds):
        tri = Delaunay(pts)
        e = edges_of(tri.simplices)
        sums = np.zeros((n, 2))
        deg = np.zeros(n)
        np.add.at(sums, e[:, 0], pts[e[:, 1]])
        np.add.at(sums, e[:, 1], pts[e[:, 0]])
        np.add.at(deg, e[:, 0], 1.0)
        np.add.at(deg, e[:, 1], 1.0)
        movable = deg[n_fixed:] > 0
        pts[n_fixed:][movable] = (sums[n_fixed:] / deg[n_fixed:, None])[movable]
    return pts


def _orient_ccw(coords: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = coords[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    out = tris.copy()
    flip = area2 < 0
    out[flip] = out[flip][:, [0, 2, 1]]
    return out


def _delaunay_triangles(pts: np.ndarray, h: float) -> np.ndarray:
    """Delaunay simplices with flat fans over collinear boundary runs removed.

    Collinear subdivision points on a straight hull edge make qhull emit
    zero-area triangles; each pairs with a proper interior triangle across
    the sub-segment, so dropping them leaves a conforming triangulation.
    """
    tris = Delaunay(pts).simplices
    p = pts[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    tris = tris[np.abs(area2) > 1e-10 * h * h]
    if np.unique(tris).shape[0] != pts.shape[0]:
        raise MeshFailure("node left uncovered after removing flat triangles")
    return _orient_ccw(pts, tris)


def _structured_rectangle(poly: Polygon, target_nodes: int) -> TriMesh:
    v = poly.vertices
    if v.shape[0] != 4:
        raise MeshFailure("structured mode requires a 4-vertex rectangle")
    xs, ys = np.unique(v[:, 0]), np.unique(v[:, 1])
    if xs.shape[0] != 2 or ys.shape[0] != 2:
        raise MeshFailure("structured mode requires an axis-aligned rectangle")
    k = max(2, int(round(np.sqrt(target_nodes))))
    gx = np.linspace(xs[0], xs[1], k)
    gy = np.linspace(ys[0], ys[1], k)
    coords = np.column_stack([np.tile(gx, k), np.repeat(gy, k)])
    tris = []
    for j in range(k - 1):
        for i in range(k - 1):
            a = j * k + i
            b = a + 1
            c = a + k + 1
            d = a + k
            tris.append([a, b, c])  # diagonal a-c
            tris.append([a, c, d])
    return TriMesh(coords, np.array(tris, dtype=np.int64))


def triangulate(
    poly: Polygon,
    target_nodes: int,
    seed: int,
    structured: bool = False,
    min_angle: float = 20.0,
    smoothing_rounds: int = 4,
) -> TriMesh:
    """Triangulate the polygon interior with roughly ``target_nodes`` nodes.

    The node count lands within [0.7, 1.3] times the target.  Raises
    :class:`MeshFailure` for degenerate polygons or if no attempt reaches
    the configured minimum-angle floor.
    """
    if target_nodes < 4:
        raise ValueError("target_nodes must be at least 4")
    if structured:
        return _structured_rectangle(poly, target_nodes)
    area = poly.area
    if area < 1e-12:
        raise MeshFailure("polygon area below tolerance")

    for attempt in range(5):
        rng = np.random.default_rng((seed, attempt))
        # ~0.7/h^2 interior points per unit area plus perimeter/h on the edge
        h = np.sqrt(0.7 * area / max(target_nodes, 4))
        mesh = None
        for _ in range(4):
            bpts = _boundary_points(poly, h)
            ipts = _poisson_disk(poly, bpts, h, rng)
            count = bpts.shape[0] + ipts.shape[0]
            if count < 0.75 * target_nodes or count > 1.25 * target_nodes:
                h *= np.sqrt(count / target_nodes)
                continue
            pts = np.vstack([bpts, ipts])
            pts = _smooth_interior(pts, bpts.shape[0], smoothing_rounds)
            mesh = TriMesh(pts, _delaunay_triangles(pts, h))
            break
        if mesh is None:
            continue
        if not (0.7 * target_nodes <= mesh.n_nodes <= 1.3 * target_nodes):
            continue
        if min_angle_deg(mesh) >= min_angle:
            validate_mesh(mesh)
            return mesh
    raise MeshFailure(
        f"no mesh with min angle {min_angle} deg after 5 attempts (seed {seed})"
    )


def write_mesh(path, mesh: TriMesh) -> None:
    """Plain-text mesh format; floats use shortest round-trip repr."""
    lines = [f"nodes {mesh.n_nodes}"]
    for x, y in mesh.coords:
        lines.append(f"{float(x)!r} {float(y)!r}")
    lines.append(f"triangles {mesh.n_triangles}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    b = np.sort(mesh.boundary_nodes)
    lines.append(f"boundary {b.shape[0]}")
    if b.shape[0]:
        lines.append(" ".join(str(i) for i in b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    with open(path) as fh:
        tokens = fh.read().split("\n")
    pos = 0

    def expect(word):
        nonlocal pos
        tag, count = tokens[pos].split(" ")
        if tag != word:
            raise ValueError(f"expected '{word}' section, got '{tag}'")
        pos += 1
        return int(count)

    n = expect("nodes")
    coords = np.array(
        [[float(t) for t in tokens[pos + i].split(" ")] for i in range(n)]
    )
    pos += n
    m = expect("triangles")
    tris = np.array(
        [[int(t) for t in tokens[pos + i].split(" ")] for i in range(m)],
        dtype=np.int64,
    ).reshape(m, 3)
    pos += m
    b = expect("boundary")
    if b:
        boundary = np.array([int(t) for t in tokens[pos].split(" ")], dtype=np.int64)
    else:
        boundary = np.zeros(0, dtype=np.int64)
    return TriMesh(coords, tris, boundary)
