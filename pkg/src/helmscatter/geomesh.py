"""Scatterer geometry and triangulation of the annular computational domain.

The computational domain is the disk B_R = {|x| < R} containing the polygon
D; the artificial boundary Gamma_R is the circle |x| = R, chosen as
R = R_D + 2h with R_D the polygon circumradius about its centroid.  The
mesh is a conforming triangulation whose edges carry tags:

    inner    shared by two elements of the same region,
    gamma    on a polygon side (obstacle boundary),
    gamma_R  on the circle; stored and integrated as a true arc, never as
             its chord.

Sound-soft scatterers leave D unmeshed; penetrable scatterers triangulate D
too, with elements tagged interior_of_D so the wavenumber is constant per
element.

Generation is deterministic and seed-free: points are polygon vertices,
polygon-side subdivisions at spacing <= h, circle nodes at spacing <= h,
and a hexagonal interior lattice, Delaunay-triangulated with Qhull; polygon
sides and circle chords are then enforced as mesh edges by removing any
lattice point that invades a required segment's diametral disk and
re-triangulating.  Element rotation is an exact coordinate transform of the
stored mesh (no re-mesh).
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import Delaunay

from .errors import GeometryError, MeshFormatError

logger = logging.getLogger(__name__)

# Edge tags.
EDGE_INNER, EDGE_GAMMA, EDGE_GAMMA_R = 0, 1, 2
REGION_EXTERIOR, REGION_INTERIOR = 0, 1

_TAG_NAMES = {EDGE_INNER: "inner", EDGE_GAMMA: "gamma", EDGE_GAMMA_R: "gamma_R"}
_TAG_CODES = {v: k for k, v in _TAG_NAMES.items()}
_REGION_NAMES = {REGION_EXTERIOR: "exterior", REGION_INTERIOR: "interior_of_D"}
_REGION_CODES = {v: k for k, v in _REGION_NAMES.items()}

# Interior lattice pitch and boundary clearance, in units of h. The
# clearance keeps lattice points out of the diametral disks of required
# boundary segments, so those segments survive as Delaunay edges; the pitch
# is shrunk slightly so the gap left by the clearance stays under the
# 1.5 h straight-edge bound.
LATTICE_PITCH = 0.88
BOUNDARY_CLEARANCE = 0.54


# --- scatterers ------------------------------------------------------------


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p, q, a, b) -> bool:
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


@dataclass
class PolygonScatterer:
    """Simple polygon obstacle, sound-soft or penetrable.

    Vertices are normalized to counterclockwise order at construction.
    n_interior is the refractive index of the interior relative to the
    exterior medium (interior wavenumber = kappa * sqrt(n_interior)); it
    must be present exactly for penetrable scatterers and have positive
    real part.
    """

    vertices: np.ndarray
    kind: str
    n_interior: complex | None = None
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("polygon needs at least 3 two-dimensional vertices")
        if _signed_area(v) < 0.0:
            v = v[::-1].copy()
        if abs(_signed_area(v)) < 1e-14:
            raise GeometryError("polygon is degenerate (zero area)")
        n = len(v)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or (i + 1) % n == j:
                    continue  # adjacent sides share an endpoint
                if _segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                    raise GeometryError(
                        f"polygon self-intersects (sides {i} and {j})"
                    )
        self.vertices = v
        if self.kind not in ("sound_soft", "penetrable"):
            raise GeometryError(f"unknown scatterer kind {self.kind!r}")
        if self.kind == "penetrable":
            if self.n_interior is None:
                raise GeometryError("penetrable scatterer requires n_interior")
            if complex(self.n_interior).real <= 0.0:
                raise GeometryError("n_interior must have positive real part")
        elif self.n_interior is not None:
            raise GeometryError("sound_soft scatterer must not carry n_interior")

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1]
        a = 0.5 * np.sum(w)
        cx = np.sum((v[:, 0] + np.roll(v[:, 0], -1)) * w) / (6.0 * a)
        cy = np.sum((v[:, 1] + np.roll(v[:, 1], -1)) * w) / (6.0 * a)
        return np.array([cx, cy])

    @property
    def circumradius(self) -> float:
        return float(np.max(np.linalg.norm(self.vertices - self.centroid, axis=1)))

    def centered(self) -> "PolygonScatterer":
        return replace(self, vertices=self.vertices - self.centroid)

    def translated(self, shift) -> "PolygonScatterer":
        return replace(self, vertices=self.vertices + np.asarray(shift, float))

    def rotated(self, alpha: float) -> "PolygonScatterer":
        c, s = np.cos(alpha), np.sin(alpha)
        rot = np.array([[c, -s], [s, c]])
        ctr = self.centroid
        return replace(self, vertices=(self.vertices - ctr) @ rot.T + ctr)


def artificial_radius(scatterer, h: float) -> float:
    """Radius of the artificial boundary circle, R_D + 2h."""
    if h <= 0.0:
        raise ValueError(f"mesh width must be positive, got {h}")
    return scatterer.circumradius + 2.0 * h


def winding_inside(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Boolean mask of points strictly inside the polygon (crossing test)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    v = polygon
    n = len(v)
    for i in range(n):
        x0, y0 = v[i]
        x1, y1 = v[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    return inside


# --- mesh ------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeGeometry:
    """Geometry of a single mesh edge for quadrature purposes."""

    kind: str  # "straight" or "arc"
    endpoints: np.ndarray  # (2, 2)
    center: np.ndarray | None = None
    radius: float | None = None
    theta0: float | None = None  # arc runs counterclockwise theta0 -> theta1
    theta1: float | None = None

    @property
    def span(self) -> float:
        return self.theta1 - self.theta0


@dataclass
class Mesh:
    """Conforming triangulation of the disk domain around one scatterer.

    Attributes
    ----------
    nodes : (n, 2) float array
    elements : (m, 3) int array, counterclockwise vertex triples
    element_region : (m,) int array, 0 = exterior, 1 = interior_of_D
    edges : (E, 2) int array of sorted node pairs, lexicographic order
    edge_tags : (E,) int array, 0 = inner, 1 = gamma, 2 = gamma_R
    R : artificial boundary radius (gamma_R arcs lie on |x| = R)
    h : target mesh width (straight edges bounded by 1.5 h)
    """

    nodes: np.ndarray
    elements: np.ndarray
    element_region: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    R: float
    h: float
    edge_elements: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=int)
        self.element_region = np.asarray(self.element_region, dtype=int)
        self.edges = np.asarray(self.edges, dtype=int)
        self.edge_tags = np.asarray(self.edge_tags, dtype=int)
        # Adjacency is derived, deterministically, so imported meshes match
        # generated ones field by field.
        index = {tuple(e): i for i, e in enumerate(self.edges)}
        adj = -np.ones((len(self.edges), 2), dtype=int)
        for k, tri in enumerate(self.elements):
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                i = index.get(key)
                if i is None:
                    continue
                adj[i, 0 if adj[i, 0] < 0 else 1] = k
        self.edge_elements = adj
        # Meshes are shared between solver handles; freeze the arrays.
        for arr in (self.nodes, self.elements, self.element_region,
                    self.edges, self.edge_tags, self.edge_elements):
            arr.setflags(write=False)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def element_centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def straight_element_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_geometry(self, i: int) -> EdgeGeometry:
        a, b = self.edges[i]
        pts = self.nodes[[a, b]]
        if self.edge_tags[i] != EDGE_GAMMA_R:
            return EdgeGeometry("straight", pts)
        ta = float(np.arctan2(pts[0, 1], pts[0, 0]))
        tb = float(np.arctan2(pts[1, 1], pts[1, 0]))
        dt = (tb - ta) % (2.0 * np.pi)
        if dt > np.pi:  # choose the short way round: counterclockwise a<-b
            ta, dt = tb, 2.0 * np.pi - dt
        return EdgeGeometry(
            "arc", pts, center=np.zeros(2), radius=self.R, theta0=ta, theta1=ta + dt
        )

    def rotated(self, alpha: float) -> "Mesh":
        c, s = np.cos(alpha), np.sin(alpha)
        rot = np.array([[c, -s], [s, c]])
        return Mesh(
            self.nodes @ rot.T,
            self.elements.copy(),
            self.element_region.copy(),
            self.edges.copy(),
            self.edge_tags.copy(),
            self.R,
            self.h,
        )


# --- generation -------------------------------------------------------------


def _boundary_chains(scatterer: PolygonScatterer, h: float):
    """Nodes on the polygon boundary: vertices plus side subdivisions."""
    verts = scatterer.vertices
    nodes, chains = [], []
    n = len(verts)
    first_of_side = []
    for i in range(n):
        first_of_side.append(len(nodes))
        a, b = verts[i], verts[(i + 1) % n]
        nseg = max(1, int(np.ceil(np.linalg.norm(b - a) / h - 1e-12)))
        for k in range(nseg):
            nodes.append(a + (b - a) * (k / nseg))
    nodes = np.array(nodes)
    for i in range(n):
        start = first_of_side[i]
        stop = first_of_side[i + 1] if i + 1 < n else len(nodes)
        chain = list(range(start, stop)) + [first_of_side[(i + 1) % n]]
        chains.append(chain)
    return nodes, chains


def _hex_lattice(R: float, h: float) -> np.ndarray:
    q = LATTICE_PITCH * h
    dy = q * np.sqrt(3.0) / 2.0
    rows = int(np.floor(R / dy))
    cols = int(np.floor(R / q)) + 1
    pts = []
    for k in range(-rows, rows + 1):
        off = 0.5 * q if (k % 2) else 0.0
        xs = np.arange(-cols, cols + 1) * q + off
        ys = np.full_like(xs, k * dy)
        pts.append(np.stack([xs, ys], axis=1))
    return np.concatenate(pts)


def quarter_turn(points: np.ndarray) -> np.ndarray:
    """Rotate points by +90 degrees about the origin, (x, y) -> (-y, x).

    Exact in floating point (negation and swap only), which is what makes
    quarter-turn-symmetric meshes give bit-level equivariant solves.
    """
    pts = np.asarray(points, dtype=float)
    return np.stack([-pts[..., 1], pts[..., 0]], axis=-1)


def has_quarter_turn_symmetry(vertices, tol: float = 1e-9) -> bool:
    """Whether a 90-degree rotation about the origin permutes the vertices."""
    verts = np.asarray(vertices, dtype=float)
    if len(verts) % 4 != 0:
        return False
    scale = float(np.max(np.abs(verts)))
    rot = quarter_turn(verts)
    dist = np.linalg.norm(rot[:, None, :] - verts[None, :, :], axis=2)
    return bool(np.all(dist.min(axis=1) <= tol * max(scale, 1.0)))


def _symmetric_hex_lattice(R: float, h: float) -> np.ndarray:
    """Hex lattice restricted to one quadrant and orbited by quarter turns.

    The seam margin keeps orbit copies from landing closer than about half
    a pitch to each other across the +x / +y axes; the resulting gap along
    the axes is bridged by the triangulation.
    """
    q = LATTICE_PITCH * h
    base = _hex_lattice(R, h)
    margin = 0.3 * q
    base = base[(base[:, 0] >= margin) & (base[:, 1] >= margin)]
    return np.concatenate([
        base, quarter_turn(base),
        quarter_turn(quarter_turn(base)),
        quarter_turn(quarter_turn(quarter_turn(base))),
    ])


def _dist_to_sides(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest polygon side."""
    best = np.full(len(points), np.inf)
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        ab = b - a
        t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(points - proj, axis=1))
    return best


def _edge_set(simplices: np.ndarray) -> set:
    e = set()
    for tri in simplices:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e.add((min(tri[a], tri[b]), max(tri[a], tri[b])))
    return e


def _triangulate_with_recovery(poly_nodes, circ_nodes, lattice, required):
    """Delaunay triangulation that keeps every required segment.

    Lattice points falling in the diametral disk of a missing required
    segment are removed and the triangulation is repeated; the boundary
    nodes themselves are never removed.
    """
    for attempt in range(4):
        points = np.concatenate([poly_nodes, circ_nodes, lattice])
        tri = Delaunay(points)
        present = _edge_set(tri.simplices)
        missing = [e for e in required if e not in present]
        if not missing:
            return points, tri
        drop = np.zeros(len(lattice), dtype=bool)
        for a, b in missing:
            mid = 0.5 * (points[a] + points[b])
            rad = 0.5 * np.linalg.norm(points[a] - points[b])
            drop |= np.linalg.norm(lattice - mid, axis=1) < rad * (1.0 + 1e-9)
        if not np.any(drop):
            raise RuntimeError(
                f"edge recovery failed: segments {missing[:3]} blocked by "
                "non-removable boundary nodes"
            )
        logger.debug("edge recovery pass %d: dropping %d lattice points",
                     attempt + 1, int(np.sum(drop)))
        lattice = lattice[~drop]
    raise RuntimeError("edge recovery did not converge")


def build_mesh(scatterer: PolygonScatterer, R: float, h: float) -> Mesh:
    """Triangulate the disk of radius R around the scatterer.

    See the module docstring for the point layout and the constrained-edge
    recovery strategy. Raises GeometryError for invalid inputs and
    RuntimeError if edge recovery fails (should not happen for the polygon
    families this package targets).
    """
    verts = scatterer.vertices
    if h <= 0.0 or R <= 0.0:
        raise GeometryError("R and h must be positive")
    if h > R / 2.0:
        raise GeometryError(f"mesh width h={h} too coarse for radius R={R}")
    if np.max(np.linalg.norm(verts, axis=1)) >= R - 1e-12:
        raise GeometryError("polygon is not strictly inside the disk of radius R")

    poly_nodes, chains = _boundary_chains(scatterer, h)

    # A scatterer invariant under 90-degree rotation gets a mesh with the
    # same exact invariance (quarter turns are exact float operations), so
    # the discrete problem commutes with quarter-turn rotations.
    symmetric = has_quarter_turn_symmetry(verts)
    n_circ = max(12, int(np.ceil(2.0 * np.pi * R / h)))
    if symmetric:
        n_quarter = int(np.ceil(n_circ / 4.0))
        th = 2.0 * np.pi * np.arange(n_quarter) / (4 * n_quarter)
        quarter = R * np.stack([np.cos(th), np.sin(th)], axis=1)
        circ_nodes = np.concatenate([
            quarter, quarter_turn(quarter),
            quarter_turn(quarter_turn(quarter)),
            quarter_turn(quarter_turn(quarter_turn(quarter))),
        ])
        lattice = _symmetric_hex_lattice(R, h)
    else:
        th = 2.0 * np.pi * np.arange(n_circ) / n_circ
        circ_nodes = R * np.stack([np.cos(th), np.sin(th)], axis=1)
        lattice = _hex_lattice(R, h)
    clear = BOUNDARY_CLEARANCE * h
    keep = np.linalg.norm(lattice, axis=1) <= R - clear
    keep &= _dist_to_sides(lattice, verts) >= clear
    if scatterer.kind == "sound_soft":
        keep &= ~winding_inside(lattice, verts)
    lattice = lattice[keep]

    n_poly, n_c = len(poly_nodes), len(circ_nodes)
    required = [
        (min(c[k], c[k + 1]), max(c[k], c[k + 1]))
        for c in chains
        for k in range(len(c) - 1)
    ]
    required += [
        (min(n_poly + k, n_poly + (k + 1) % n_c), max(n_poly + k, n_poly + (k + 1) % n_c))
        for k in range(n_c)
    ]

    # Outer loop refines the free point set whenever the triangulation leaves
    # a straight edge longer than validate_mesh permits (this happens in the
    # gaps next to acute polygon corners); inserting the midpoints of the
    # offending edges and retriangulating shrinks them geometrically.
    req_set = set(required)
    for refine in range(8):
        points, tri = _triangulate_with_recovery(
            poly_nodes, circ_nodes, lattice, required)
        long_mids = []
        for a, b in _edge_set(tri.simplices):
            if (a, b) in req_set:
                continue
            if np.linalg.norm(points[a] - points[b]) > 1.5 * h:
                long_mids.append(0.5 * (points[a] + points[b]))
        if long_mids and scatterer.kind == "sound_soft":
            # Edges spanning the (unmeshed) polygon interior belong only to
            # elements that are dropped below, so they need no splitting.
            long_mids = list(
                np.asarray(long_mids)[~winding_inside(np.asarray(long_mids), verts)])
        if not long_mids:
            break
        logger.debug("refinement pass %d: splitting %d long edges",
                     refine + 1, len(long_mids))
        lattice = np.concatenate([lattice, np.asarray(long_mids)])
    else:
        raise RuntimeError("mesh refinement did not converge")

    simplices = tri.simplices.copy()
    # Normalize orientation to counterclockwise.
    p = points[simplices]
    areas = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                   - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = areas < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]

    centroids = points[simplices].mean(axis=1)
    inside = winding_inside(centroids, verts)
    if scatterer.kind == "sound_soft":
        simplices = simplices[~inside]
        region = np.zeros(len(simplices), dtype=int)
    else:
        region = np.where(inside, REGION_INTERIOR, REGION_EXTERIOR)

    # Stable element order: smallest vertex first (orientation preserved),
    # then lexicographic.
    rolled = np.empty_like(simplices)
    arg = np.argmin(simplices, axis=1)
    for r in range(3):
        sel = arg == r
        rolled[sel] = np.roll(simplices[sel], -r, axis=1)
    order = np.lexsort((rolled[:, 2], rolled[:, 1], rolled[:, 0]))
    simplices, region = rolled[order], region[order]

    edges, tags = _tag_edges(simplices, required, n_poly, n_c)
    mesh = Mesh(points, simplices, region, edges, tags, float(R), float(h))
    report = validate_mesh(mesh, scatterer)
    if report:
        raise RuntimeError("generated mesh failed validation: " + "; ".join(report))
    return mesh


def _tag_edges(simplices, required, n_poly, n_c):
    counts: dict = {}
    for trio in simplices:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (min(trio[a], trio[b]), max(trio[a], trio[b]))
            counts[key] = counts.get(key, 0) + 1
    required_poly = set(e for e in required if e[0] < n_poly)
    edges = sorted(counts)
    tags = []
    for e in edges:
        if e in required_poly:
            tags.append(EDGE_GAMMA)
        elif n_poly <= e[0] < n_poly + n_c and n_poly <= e[1] < n_poly + n_c \
                and counts[e] == 1:
            tags.append(EDGE_GAMMA_R)
        else:
            tags.append(EDGE_INNER)
    return np.array(edges, dtype=int), np.array(tags, dtype=int)


# --- validation --------------------------------------------------------------


def validate_mesh(mesh: Mesh, scatterer: PolygonScatterer | None = None) -> list:
    """Check every mesh invariant; returns a list of violation messages.

    Polygon-dependent checks (gamma edges on sides, region tags) run only
    when the scatterer is supplied.
    """
    report = []
    counts: dict = {}
    for k, tri in enumerate(mesh.elements):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            counts[key] = counts.get(key, 0) + 1

    tag_of = {tuple(e): t for e, t in zip(mesh.edges, mesh.edge_tags)}
    for key, cnt in counts.items():
        if key not in tag_of:
            report.append(f"element edge {key} missing from edge list")
    has_interior = bool(np.any(mesh.element_region == REGION_INTERIOR))
    for i, (e, t) in enumerate(zip(mesh.edges, mesh.edge_tags)):
        cnt = counts.get(tuple(e), 0)
        if cnt == 0:
            report.append(f"edge {i} {tuple(e)} dangling (no element)")
        elif t == EDGE_INNER and cnt != 2:
            report.append(f"inner edge {i} {tuple(e)} shared by {cnt} elements")
        elif t == EDGE_GAMMA_R and cnt != 1:
            report.append(f"gamma_R edge {i} shared by {cnt} elements")
        elif t == EDGE_GAMMA and cnt != (2 if has_interior else 1):
            report.append(f"gamma edge {i} shared by {cnt} elements")

    for i in np.flatnonzero(mesh.edge_tags == EDGE_GAMMA_R):
        for nidx in mesh.edges[i]:
            dev = abs(np.linalg.norm(mesh.nodes[nidx]) - mesh.R)
            if dev > 1e-12:
                report.append(
                    f"gamma_R edge {i} endpoint {nidx} off circle by {dev:.2e}"
                )
        geom = mesh.edge_geometry(i)
        if not 0.0 < geom.span < np.pi:
            report.append(f"gamma_R edge {i} arc span {geom.span:.3f} out of range")

    areas = mesh.straight_element_areas()
    for k in np.flatnonzero(areas <= 0):
        report.append(f"element {k} is degenerate or misoriented (area {areas[k]:.2e})")

    # Straight-edge length bound (arcs excluded).
    straight = mesh.edge_tags != EDGE_GAMMA_R
    lengths = np.linalg.norm(
        mesh.nodes[mesh.edges[straight, 0]] - mesh.nodes[mesh.edges[straight, 1]],
        axis=1,
    )
    if lengths.size and np.max(lengths) > 1.5 * mesh.h:
        report.append(
            f"straight edge length {np.max(lengths):.4f} exceeds 1.5h = {1.5 * mesh.h:.4f}"
        )

    # Coverage: element areas plus circular segments equal the meshed region.
    seg = 0.0
    for i in np.flatnonzero(mesh.edge_tags == EDGE_GAMMA_R):
        geom = mesh.edge_geometry(i)
        seg += 0.5 * mesh.R**2 * (geom.span - np.sin(geom.span))
    covered = float(np.sum(areas)) + seg
    target = np.pi * mesh.R**2
    if not has_interior:
        # Shoelace over the gamma edges, oriented by their exterior
        # element's counterclockwise traversal, gives minus the hole area.
        total = 0.0
        for i in np.flatnonzero(mesh.edge_tags == EDGE_GAMMA):
            a, b = mesh.edges[i]
            k = mesh.edge_elements[i, 0]
            tri = list(mesh.elements[k])
            # Follow the element's counterclockwise order.
            for u, v in ((0, 1), (1, 2), (2, 0)):
                if {tri[u], tri[v]} == {a, b}:
                    pa, pb = mesh.nodes[tri[u]], mesh.nodes[tri[v]]
                    total += 0.5 * (pa[0] * pb[1] - pb[0] * pa[1])
                    break
        # Element-CCW traversal runs clockwise around the hole, so `total`
        # is minus the hole area.
        target += total
    if abs(covered - target) > 1e-10 * np.pi * mesh.R**2:
        report.append(
            f"area coverage {covered:.12f} differs from target {target:.12f}"
        )

    if scatterer is not None:
        verts = scatterer.vertices
        for i in np.flatnonzero(mesh.edge_tags == EDGE_GAMMA):
            for nidx in mesh.edges[i]:
                d = _dist_to_sides(mesh.nodes[nidx][None, :], verts)[0]
                if d > 1e-12:
                    report.append(f"gamma edge {i} endpoint off polygon by {d:.2e}")
        centroids = mesh.element_centroids()
        inside = winding_inside(centroids, verts)
        mismatch = np.flatnonzero(inside != (mesh.element_region == REGION_INTERIOR))
        for k in mismatch:
            report.append(f"element {k} region tag disagrees with geometry")
        # Polygon vertices must all be mesh nodes.
        for v in verts:
            if np.min(np.linalg.norm(mesh.nodes - v, axis=1)) > 1e-12:
                report.append(f"polygon vertex {v} is not a mesh node")
    return report


# --- persistence -------------------------------------------------------------

_HEADER = "helmscatter-mesh v1"


def export_mesh(mesh: Mesh) -> str:
    """Serialize a mesh to the plain-text exchange format.

    Coordinates are written with repr so that a round trip through
    import_mesh reproduces the arrays bit for bit.
    """
    out = [_HEADER]
    out.append(f"R {float(mesh.R)!r}")
    out.append(f"h {float(mesh.h)!r}")
    out.append(f"NODES {len(mesh.nodes)}")
    for i, (x, y) in enumerate(mesh.nodes):
        out.append(f"{i} {float(x)!r} {float(y)!r}")
    out.append(f"ELEMENTS {len(mesh.elements)}")
    for i, (tri, reg) in enumerate(zip(mesh.elements, mesh.element_region)):
        out.append(f"{i} {tri[0]} {tri[1]} {tri[2]} {_REGION_NAMES[int(reg)]}")
    out.append(f"EDGES {len(mesh.edges)}")
    for i, (e, t) in enumerate(zip(mesh.edges, mesh.edge_tags)):
        line = f"{i} {e[0]} {e[1]} {_TAG_NAMES[int(t)]}"
        if t == EDGE_GAMMA_R:
            line += f" arc {float(mesh.R)!r}"
        out.append(line)
    return "\n".join(out) + "\n"


def import_mesh(text: str) -> Mesh:
    """Parse the mesh text format; raises MeshFormatError with line numbers."""
    lines = text.splitlines()
    pos = 0

    def next_tokens():
        nonlocal pos
        while pos < len(lines):
            raw = lines[pos].split("#", 1)[0].strip()
            pos += 1
            if raw:
                return pos, raw.split()
        return pos, None

    lineno, tok = next_tokens()
    if tok is None or " ".join(tok) != _HEADER:
        raise MeshFormatError(f"line {lineno}: missing header {_HEADER!r}")

    R = h = None
    nodes = elements = regions = edges = tags = None
    while True:
        lineno, tok = next_tokens()
        if tok is None:
            break
        key = tok[0]
        try:
            if key == "R":
                R = float(tok[1])
            elif key == "h":
                h = float(tok[1])
            elif key == "NODES":
                n = int(tok[1])
                nodes = np.empty((n, 2))
                for i in range(n):
                    lineno, t = next_tokens()
                    nodes[int(t[0])] = (float(t[1]), float(t[2]))
            elif key == "ELEMENTS":
                m = int(tok[1])
                elements = np.empty((m, 3), dtype=int)
                regions = np.empty(m, dtype=int)
                for i in range(m):
                    lineno, t = next_tokens()
                    elements[int(t[0])] = (int(t[1]), int(t[2]), int(t[3]))
                    if t[4] not in _REGION_CODES:
                        raise MeshFormatError(
                            f"line {lineno}: unknown region tag {t[4]!r}"
                        )
                    regions[int(t[0])] = _REGION_CODES[t[4]]
            elif key == "EDGES":
                ne = int(tok[1])
                edges = np.empty((ne, 2), dtype=int)
                tags = np.empty(ne, dtype=int)
                for i in range(ne):
                    lineno, t = next_tokens()
                    if t[3] not in _TAG_CODES:
                        raise MeshFormatError(
                            f"line {lineno}: unknown edge tag {t[3]!r}"
                        )
                    edges[int(t[0])] = (int(t[1]), int(t[2]))
                    tags[int(t[0])] = _TAG_CODES[t[3]]
            else:
                raise MeshFormatError(f"line {lineno}: unexpected token {key!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(f"line {lineno}: {exc}") from exc

    missing = [k for k, v in (("R", R), ("h", h), ("NODES", nodes),
                              ("ELEMENTS", elements), ("EDGES", edges)) if v is None]
    if missing:
        raise MeshFormatError(f"document incomplete, missing {', '.join(missing)}")
    return Mesh(nodes, elements, regions, edges, tags, R, h)
