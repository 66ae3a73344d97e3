"""2D polytopal meshes with first-class faces.

Elements are simple polygons, star-shaped with respect to their barycenter
(validated at construction).  Faces are straight segments that partition the
mesh skeleton; on nonmatching interfaces a coarse element edge is split at
hanging vertices, so the coarse element simply lists several faces on one
geometric edge while each fine neighbour sees a single matching face.

The ASCII mesh format (see `load_mesh`/`save_mesh`)::

    polymesh2d 1
    vertices N
    <x> <y>                 # N lines
    cells M
    <n> <v1> ... <vn>       # M lines, 0-based CCW vertex ids
    boundary_tags K         # optional section
    <tag> <v1> <v2>         # K lines, one boundary face each
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MeshError(Exception):
    """Base class for mesh construction problems."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""


class MeshGeometryError(MeshError):
    """Invalid geometry: degenerate cells, bad orientation, broken topology."""


@dataclass
class Face:
    """Straight mesh face (segment) with canonical endpoint order.

    Endpoints are stored lexicographically by coordinate so that both adjacent
    elements agree on the face's parametrization.  `elements` holds one id for
    boundary faces and two for interfaces.
    """

    id: int
    vertices: tuple[int, int]
    endpoints: np.ndarray           # (2, 2) coordinates, canonical order
    length: float
    midpoint: np.ndarray
    kind: str                       # "interface" | "boundary"
    elements: tuple[int, ...]
    tag: str | None = None

    @property
    def tangent(self) -> np.ndarray:
        return (self.endpoints[1] - self.endpoints[0]) / self.length


@dataclass
class Element:
    """Simple polygon element with ordered faces and outward normals."""

    id: int
    vertices: tuple[int, ...]       # CCW
    polygon: np.ndarray             # (m, 2) vertex coordinates, CCW
    barycenter: np.ndarray
    area: float
    diameter: float
    faces: tuple[int, ...]          # face ids, ordered along the CCW boundary
    normals: np.ndarray             # (len(faces), 2) outward unit normals

    @property
    def sub_triangles(self) -> np.ndarray:
        """Fan triangulation used for quadrature: the element itself when it is
        a triangle, otherwise the fan from the barycenter."""
        p = self.polygon
        if len(p) == 3:
            return p[None, :, :]
        nxt = np.roll(np.arange(len(p)), -1)
        tris = np.empty((len(p), 3, 2))
        tris[:, 0] = self.barycenter
        tris[:, 1] = p
        tris[:, 2] = p[nxt]
        return tris


@dataclass
class RegularityReport:
    min_inradius_ratio: float
    max_faces_per_element: int
    max_face_scale: float           # max over (T, F) of |F| * h_F / |T|


@dataclass
class Mesh:
    """Immutable polytopal mesh: share freely across workers after construction."""

    vertices: np.ndarray            # (V, 2)
    elements: list[Element]
    faces: list[Face]
    h: float = field(init=False)
    domain_area: float = field(init=False)

    def __post_init__(self):
        self.h = max(e.diameter for e in self.elements)
        self.domain_area = sum(e.area for e in self.elements)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def element_faces(self) -> dict[int, list[tuple[int, np.ndarray]]]:
        """Map element id -> ordered [(face id, outward unit normal), ...]."""
        return {
            e.id: [(f, e.normals[i]) for i, f in enumerate(e.faces)]
            for e in self.elements
        }

    @property
    def interior_face_ids(self) -> list[int]:
        return [f.id for f in self.faces if f.kind == "interface"]

    @property
    def boundary_face_ids(self) -> list[int]:
        return [f.id for f in self.faces if f.kind == "boundary"]

    def faces_with_tag(self, tag: str) -> list[int]:
        return [f.id for f in self.faces if f.tag == tag]

    @property
    def boundary_tags(self) -> set[str]:
        return {f.tag for f in self.faces if f.kind == "boundary" and f.tag is not None}


def _polygon_area_and_centroid(p: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    if abs(area) < 1e-300:
        raise MeshGeometryError("degenerate (zero-area) cell")
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    return area, np.array([cx, cy])


def _validate_cell(p: np.ndarray, cell_index: int) -> tuple[float, np.ndarray, float]:
    """Return (area, barycenter, diameter); raise on bad geometry."""
    m = len(p)
    if m < 3:
        raise MeshGeometryError(f"cell {cell_index} has fewer than 3 vertices")
    area, bc = _polygon_area_and_centroid(p)
    if area < 0:
        raise MeshGeometryError(f"cell {cell_index} is clockwise (inconsistent orientation)")
    # star-shapedness wrt the barycenter: all fan triangles positively oriented
    nxt = np.roll(np.arange(m), -1)
    v1 = p - bc
    v2 = p[nxt] - bc
    fan = 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])
    if np.any(fan <= 0):
        raise MeshGeometryError(f"cell {cell_index} is not star-shaped w.r.t. its barycenter")
    if m >= 5:  # exact simplicity check for genuine polygons
        for i in range(m):
            a, b = p[i], p[nxt[i]]
            for j in range(i + 1, m):
                if j == i or nxt[j] == i or nxt[i] == j:
                    continue
                c, d = p[j], p[nxt[j]]
                if _segments_cross(a, b, c, d):
                    raise MeshGeometryError(f"cell {cell_index} is not a simple polygon")
    diff = p[:, None, :] - p[None, :, :]
    diameter = float(np.sqrt(np.max(np.sum(diff**2, axis=-1))))
    return area, bc, diameter


def _segments_cross(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def _merge_duplicate_vertices(vertices: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Merge vertices closer than `tol`; return (unique vertices, old->new map)."""
    if len(vertices) == 0:
        raise MeshFormatError("mesh has no vertices")
    tree = cKDTree(vertices)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    remap = np.arange(len(vertices))
    for i, j in pairs:
        a, b = sorted((int(remap[i]), int(remap[j])))
        remap[remap == b] = a
    keep = np.unique(remap)
    new_index = np.full(len(vertices), -1, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    return vertices[keep], new_index[remap]


def build_mesh(
    vertices: np.ndarray,
    cells: list[list[int]],
    boundary_tags: dict[tuple[int, int], str] | None = None,
) -> Mesh:
    """Assemble a `Mesh` from raw vertices and CCW cell vertex lists.

    Detects hanging vertices on otherwise unmatched edges and splits the coarse
    side into sub-faces, so nonmatching interfaces come out with the face
    partition property (each interface has exactly two adjacent elements).
    """
    vertices = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshFormatError("vertices must be an (N, 2) array")
    bbox = vertices.max(axis=0) - vertices.min(axis=0)
    domain_diam = float(np.hypot(*bbox))
    if domain_diam == 0.0:
        raise MeshGeometryError("all vertices coincide")
    merge_tol = 1e-12 * domain_diam

    vertices, remap = _merge_duplicate_vertices(vertices, merge_tol)
    cells = [[int(remap[v]) for v in cell] for cell in cells]
    for idx, cell in enumerate(cells):
        if len(set(cell)) != len(cell):
            raise MeshGeometryError(f"cell {idx} repeats a vertex after merging duplicates")
        if max(cell) >= len(vertices) or min(cell) < 0:
            raise MeshFormatError(f"cell {idx} references a vertex that does not exist")

    geom = [_validate_cell(vertices[cell], i) for i, cell in enumerate(cells)]

    # --- edge census ------------------------------------------------------
    edge_key: dict[tuple[int, int], list[int]] = {}
    for e, cell in enumerate(cells):
        m = len(cell)
        for i in range(m):
            a, b = cell[i], cell[(i + 1) % m]
            edge_key.setdefault((min(a, b), max(a, b)), []).append(e)

    # edges seen once are either boundary faces or coarse sides hiding hanging
    # vertices; split the latter at vertices lying strictly inside them
    once = [k for k, owners in edge_key.items() if len(owners) == 1]
    split_points: dict[tuple[int, int], list[int]] = {}
    if once:
        cand_ids = np.unique(np.array(once, dtype=np.int64).ravel())
        tree = cKDTree(vertices[cand_ids])
        for a, b in once:
            pa, pb = vertices[a], vertices[b]
            mid, half = 0.5 * (pa + pb), 0.5 * np.hypot(*(pb - pa))
            hits = tree.query_ball_point(mid, half + merge_tol)
            interior = []
            for h in hits:
                v = int(cand_ids[h])
                if v in (a, b):
                    continue
                d = pb - pa
                s = vertices[v] - pa
                if abs(d[0] * s[1] - d[1] * s[0]) > merge_tol * np.hypot(*d):
                    continue
                t = float(np.dot(s, d) / np.dot(d, d))
                if merge_tol < t < 1.0 - merge_tol:
                    interior.append((t, v))
            if interior:
                interior.sort()
                split_points[(a, b)] = [v for _, v in interior]

    # --- face table -------------------------------------------------------
    def sub_edges(a: int, b: int) -> list[tuple[int, int]]:
        key = (min(a, b), max(a, b))
        mids = split_points.get(key)
        if not mids:
            return [(a, b)]
        chain = [a] + (mids if a == key[0] else mids[::-1]) + [b]
        return list(zip(chain[:-1], chain[1:]))

    face_index: dict[tuple[int, int], int] = {}
    face_owner: dict[int, list[int]] = {}
    elem_faces: list[list[int]] = []
    elem_dirs: list[list[np.ndarray]] = []
    for e, cell in enumerate(cells):
        m = len(cell)
        fids, dirs = [], []
        for i in range(m):
            a, b = cell[i], cell[(i + 1) % m]
            for (u, v) in sub_edges(a, b):
                key = (min(u, v), max(u, v))
                fid = face_index.setdefault(key, len(face_index))
                face_owner.setdefault(fid, []).append(e)
                fids.append(fid)
                dirs.append(vertices[v] - vertices[u])
        elem_faces.append(fids)
        elem_dirs.append(dirs)

    faces: list[Face] = [None] * len(face_index)  # type: ignore[list-item]
    boundary_tags = boundary_tags or {}
    for (u, v), fid in face_index.items():
        owners = tuple(sorted(face_owner[fid]))
        if len(owners) > 2:
            raise MeshGeometryError(f"face {(u, v)} belongs to {len(owners)} elements")
        pu, pv = vertices[u], vertices[v]
        # canonical endpoint order: lexicographic by coordinates
        if (pu[0], pu[1]) > (pv[0], pv[1]):
            u, v, pu, pv = v, u, pv, pu
        length = float(np.hypot(*(pv - pu)))
        if length <= merge_tol:
            raise MeshGeometryError(f"face {(u, v)} has nonpositive length")
        kind = "interface" if len(owners) == 2 else "boundary"
        tag = boundary_tags.get((min(u, v), max(u, v))) if kind == "boundary" else None
        faces[fid] = Face(
            id=fid,
            vertices=(u, v),
            endpoints=np.array([pu, pv]),
            length=length,
            midpoint=0.5 * (pu + pv),
            kind=kind,
            elements=owners,
            tag=tag,
        )

    elements: list[Element] = []
    for e, cell in enumerate(cells):
        area, bc, diam = geom[e]
        dirs = np.array(elem_dirs[e])
        lens = np.hypot(dirs[:, 0], dirs[:, 1])
        normals = np.column_stack([dirs[:, 1], -dirs[:, 0]]) / lens[:, None]
        elements.append(
            Element(
                id=e,
                vertices=tuple(cell),
                polygon=vertices[cell],
                barycenter=bc,
                area=area,
                diameter=diam,
                faces=tuple(elem_faces[e]),
                normals=normals,
            )
        )

    mesh = Mesh(vertices=vertices, elements=elements, faces=faces)
    _check_skeleton(mesh)
    return mesh


def _check_skeleton(mesh: Mesh) -> None:
    counts = np.zeros(mesh.n_faces, dtype=np.int64)
    for e in mesh.elements:
        for f in e.faces:
            counts[f] += 1
    for f in mesh.faces:
        expected = 2 if f.kind == "interface" else 1
        if counts[f.id] != expected:
            raise MeshGeometryError(
                f"face {f.id} ({f.kind}) referenced by {counts[f.id]} elements, expected {expected}"
            )


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------

def generate_mesh(kind: str, resolution: int) -> Mesh:
    """Structured meshes of the unit square.

    kind:
      * ``triangular``           -- each grid square split along its diagonal
      * ``cartesian``            -- square cells
      * ``nonmatching_refined``  -- square cells, lower-left quadrant refined
        once, producing hanging nodes on the quadrant interface
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if kind == "triangular":
        mesh = _triangular_mesh(resolution)
    elif kind == "cartesian":
        mesh = _cartesian_mesh(resolution)
    elif kind == "nonmatching_refined":
        mesh = _nonmatching_mesh(resolution)
    else:
        raise ValueError(f"unsupported mesh kind {kind!r}")
    tag_unit_square_boundary(mesh)
    return mesh


def _grid_vertices(n: int) -> np.ndarray:
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def _triangular_mesh(n: int) -> Mesh:
    verts = _grid_vertices(n)
    vid = lambda i, j: i * (n + 1) + j
    cells = []
    for i in range(n):
        for j in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            cells.append([v00, v10, v11])
            cells.append([v00, v11, v01])
    return build_mesh(verts, cells)


def _cartesian_mesh(n: int) -> Mesh:
    verts = _grid_vertices(n)
    vid = lambda i, j: i * (n + 1) + j
    cells = [
        [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
        for i in range(n)
        for j in range(n)
    ]
    return build_mesh(verts, cells)


def _nonmatching_mesh(n: int) -> Mesh:
    if n < 2 or n % 2 != 0:
        raise ValueError("nonmatching_refined needs an even resolution >= 2")
    # coordinates kept on the fine grid (units of 1/(2n)) so that coarse and
    # fine cells share vertices exactly
    index: dict[tuple[int, int], int] = {}
    coords: list[tuple[int, int]] = []

    def vid(ix: int, iy: int) -> int:
        key = (ix, iy)
        if key not in index:
            index[key] = len(coords)
            coords.append(key)
        return index[key]

    def square(ix: int, iy: int, s: int) -> list[int]:
        return [vid(ix, iy), vid(ix + s, iy), vid(ix + s, iy + s), vid(ix, iy + s)]

    cells = []
    for i in range(n):
        for j in range(n):
            ix, iy = 2 * i, 2 * j
            if i < n // 2 and j < n // 2:
                cells.append(square(ix, iy, 1))
                cells.append(square(ix + 1, iy, 1))
                cells.append(square(ix + 1, iy + 1, 1))
                cells.append(square(ix, iy + 1, 1))
            else:
                cells.append(square(ix, iy, 2))
    verts = np.array(coords, dtype=np.float64) / (2 * n)
    return build_mesh(verts, cells)


def tag_unit_square_boundary(mesh: Mesh, tol: float = 1e-12) -> None:
    """Assign bottom/top/left/right tags to boundary faces of the unit square."""
    for f in mesh.faces:
        if f.kind != "boundary":
            continue
        x, y = f.midpoint
        if abs(y) <= tol:
            f.tag = "bottom"
        elif abs(y - 1.0) <= tol:
            f.tag = "top"
        elif abs(x) <= tol:
            f.tag = "left"
        elif abs(x - 1.0) <= tol:
            f.tag = "right"


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------

def load_mesh(path) -> Mesh:
    """Read a mesh in the `polymesh2d 1` ASCII format."""
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    pos = 0

    def take(n: int) -> list[str]:
        nonlocal pos
        if pos + n > len(tokens):
            raise MeshFormatError(f"{path}: unexpected end of file")
        out = tokens[pos : pos + n]
        pos += n
        return out

    magic = take(2)
    if magic[0] != "polymesh2d" or magic[1] != "1":
        raise MeshFormatError(f"{path}: expected header 'polymesh2d 1', got {' '.join(magic)!r}")
    kw, nv = take(2)
    if kw != "vertices":
        raise MeshFormatError(f"{path}: expected 'vertices N'")
    try:
        nv = int(nv)
        verts = np.array([float(t) for t in take(2 * nv)]).reshape(nv, 2)
    except ValueError as exc:
        raise MeshFormatError(f"{path}: bad vertex data ({exc})") from exc
    kw, nc = take(2)
    if kw != "cells":
        raise MeshFormatError(f"{path}: expected 'cells M'")
    nc = int(nc)
    cells = []
    for _ in range(nc):
        m = int(take(1)[0])
        if m < 3:
            raise MeshFormatError(f"{path}: cell with fewer than 3 vertices")
        cells.append([int(t) for t in take(m)])
    tags: dict[tuple[int, int], str] = {}
    if pos < len(tokens):
        kw, nt = take(2)
        if kw != "boundary_tags":
            raise MeshFormatError(f"{path}: expected optional 'boundary_tags K', got {kw!r}")
        for _ in range(int(nt)):
            tag, a, b = take(3)
            a, b = int(a), int(b)
            tags[(min(a, b), max(a, b))] = tag
    if pos != len(tokens):
        raise MeshFormatError(f"{path}: trailing data")
    return build_mesh(verts, cells, boundary_tags=tags)


def save_mesh(mesh: Mesh, path) -> None:
    """Write the `polymesh2d 1` format; round-trips exactly through `load_mesh`."""
    lines = ["polymesh2d 1", f"vertices {len(mesh.vertices)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(f"cells {mesh.n_elements}")
    lines += [f"{len(e.vertices)} " + " ".join(map(str, e.vertices)) for e in mesh.elements]
    tagged = [f for f in mesh.faces if f.kind == "boundary" and f.tag is not None]
    if tagged:
        lines.append(f"boundary_tags {len(tagged)}")
        lines += [f"{f.tag} {f.vertices[0]} {f.vertices[1]}" for f in tagged]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def regularity_report(mesh: Mesh) -> RegularityReport:
    """Shape diagnostics over the fan sub-triangulation."""
    min_ratio = np.inf
    max_scale = 0.0
    for e in mesh.elements:
        for tri in e.sub_triangles:
            a = np.hypot(*(tri[1] - tri[0]))
            b = np.hypot(*(tri[2] - tri[1]))
            c = np.hypot(*(tri[0] - tri[2]))
            area = 0.5 * abs(
                (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
                - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0])
            )
            inradius = 2.0 * area / (a + b + c)
            min_ratio = min(min_ratio, inradius / max(a, b, c))
        for fid in e.faces:
            f = mesh.faces[fid]
            max_scale = max(max_scale, f.length**2 / e.area)
    return RegularityReport(
        min_inradius_ratio=float(min_ratio),
        max_faces_per_element=max(len(e.faces) for e in mesh.elements),
        max_face_scale=float(max_scale),
    )
