"""Triangle meshes, icosphere prototypes and point-cloud geometry.

Pure numpy throughout: the differentiable mirrors of the smoothing terms
live in :mod:`protoshape.objective`; the functions here are the plain
geometric reference used for construction, export and cross-checking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DataError,
    DegenerateFaceError,
    DimensionError,
    EmptyInputError,
    ParameterError,
    TopologyError,
)

MAX_SUBDIV_LEVEL = 7  # level 8 would need ~2.6M vertices


@dataclass
class PointCloud:
    """N x 3 coordinates in meters, with optional per-point uint8 colors."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise DimensionError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if self.colors.shape[0] != self.points.shape[0]:
                raise DimensionError(
                    f"colors rows ({self.colors.shape[0]}) != points rows ({self.points.shape[0]})"
                )

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class TriangleMesh:
    """Vertices (V x 3, meters) and counter-clockwise faces (F x 3 indices)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32).reshape(-1, 3)
        v = self.vertices.shape[0]
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= v:
                raise TopologyError(f"face index out of range for {v} vertices")
            a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
            if ((a == b) | (b == c) | (a == c)).any():
                raise TopologyError("degenerate face with repeated vertex indices")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (lo, hi) pairs, lexicographic order."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def edge_face_counts(self) -> np.ndarray:
        """Number of faces incident to each unique edge (order of .edges())."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed_manifold(self) -> bool:
        counts = self.edge_face_counts()
        return bool(counts.size) and bool((counts == 2).all())


@dataclass
class Prototype:
    """Subdivided icosphere whose vertices may serve as trainable parameters."""

    base: TriangleMesh
    level: int
    radius: float
    trainable: bool = True

    def __post_init__(self):
        v_expect = 10 * 4 ** self.level + 2
        f_expect = 20 * 4 ** self.level
        if self.base.n_vertices != v_expect or self.base.n_faces != f_expect:
            raise TopologyError(
                f"prototype at level {self.level} must have {v_expect} vertices / "
                f"{f_expect} faces, got {self.base.n_vertices} / {self.base.n_faces}"
            )
        radii = np.linalg.norm(self.base.vertices.astype(np.float64), axis=1)
        if np.abs(radii - self.radius).max() > 1e-6:
            raise TopologyError("prototype vertices deviate from the requested radius")

    @property
    def n_vertices(self) -> int:
        return self.base.n_vertices


# ---------------------------------------------------------------------------
# icosphere construction
# ---------------------------------------------------------------------------

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
], dtype=np.float64)

_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int32)


def _project_to_sphere(vertices: np.ndarray, radius: float) -> np.ndarray:
    v = vertices.astype(np.float64)
    return (v * (radius / np.linalg.norm(v, axis=1))[:, None]).astype(np.float32)


def subdivide(mesh: TriangleMesh) -> TriangleMesh:
    """Split every face in four via deduplicated edge midpoints.

    Output vertex order is original vertices first, then midpoints in
    sorted-edge order, so repeated subdivision is fully deterministic.
    """
    counts = mesh.edge_face_counts()
    if counts.size and counts.max() > 2:
        raise TopologyError("non-manifold edge shared by more than two faces")
    edges = mesh.edges()  # sorted pairs, lexicographic
    v0 = mesh.n_vertices
    edge_to_mid = {(int(a), int(b)): v0 + k for k, (a, b) in enumerate(edges)}
    mids = mesh.vertices[edges[:, 0]].astype(np.float64)
    mids = 0.5 * (mids + mesh.vertices[edges[:, 1]].astype(np.float64))
    vertices = np.concatenate([mesh.vertices, mids.astype(np.float32)])

    faces = np.empty((4 * mesh.n_faces, 3), dtype=np.int32)
    for i, (a, b, c) in enumerate(mesh.faces):
        mab = edge_to_mid[(min(a, b), max(a, b))]
        mbc = edge_to_mid[(min(b, c), max(b, c))]
        mca = edge_to_mid[(min(c, a), max(c, a))]
        faces[4 * i + 0] = (a, mab, mca)
        faces[4 * i + 1] = (mab, b, mbc)
        faces[4 * i + 2] = (mca, mbc, c)
        faces[4 * i + 3] = (mab, mbc, mca)
    return TriangleMesh(vertices, faces)


def icosphere(level: int, radius: float, trainable: bool = True) -> Prototype:
    """Regular icosahedron subdivided `level` times, vertices at `radius`."""
    if radius <= 0:
        raise ParameterError(f"icosphere radius must be positive, got {radius}")
    if not 0 <= level <= MAX_SUBDIV_LEVEL:
        raise ParameterError(f"icosphere level must be in [0, {MAX_SUBDIV_LEVEL}], got {level}")
    mesh = TriangleMesh(_project_to_sphere(_ICO_VERTS, radius), _ICO_FACES)
    for _ in range(level):
        mesh = subdivide(mesh)
        mesh = TriangleMesh(_project_to_sphere(mesh.vertices, radius), mesh.faces)
    return Prototype(mesh, level, radius, trainable)


# ---------------------------------------------------------------------------
# differential-geometry references
# ---------------------------------------------------------------------------

def face_normals(mesh: TriangleMesh, eps: float = 1e-12) -> np.ndarray:
    """Unit outward normals from counter-clockwise winding (F x 3, float64)."""
    v = mesh.vertices.astype(np.float64)
    e1 = v[mesh.faces[:, 1]] - v[mesh.faces[:, 0]]
    e2 = v[mesh.faces[:, 2]] - v[mesh.faces[:, 0]]
    n = np.cross(e1, e2)
    norms = np.linalg.norm(n, axis=1)
    bad = np.nonzero(norms < eps)[0]
    if bad.size:
        raise DegenerateFaceError(f"zero-area face at index {int(bad[0])}")
    return n / norms[:, None]


def vertex_adjacency(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """One-ring neighbors from face connectivity as CSR (indptr, indices).

    Raises TopologyError if any vertex is isolated (not part of a face).
    """
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]],
                               f[:, [1, 0]], f[:, [2, 1]], f[:, [0, 2]]])
    directed = np.unique(directed, axis=0)
    src, dst = directed[:, 0], directed[:, 1]
    degrees = np.bincount(src, minlength=mesh.n_vertices)
    if (degrees == 0).any():
        raise TopologyError(
            f"isolated vertex at index {int(np.nonzero(degrees == 0)[0][0])}"
        )
    indptr = np.concatenate([[0], np.cumsum(degrees)]).astype(np.int64)
    return indptr, dst.astype(np.int64)


def laplacian_from_adjacency(vertices: np.ndarray, indptr: np.ndarray,
                             indices: np.ndarray) -> np.ndarray:
    """Per-vertex offset from the mean of its neighbors (V x 3, float64)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    degrees = np.diff(indptr)
    sums = np.add.reduceat(v[indices], indptr[:-1], axis=0)
    # reduceat misbehaves on empty segments, but adjacency guarantees degree >= 1
    return v - sums / degrees[:, None]


def uniform_laplacian(mesh: TriangleMesh) -> np.ndarray:
    """L[i] = p_i - mean of one-ring neighbors, from face adjacency."""
    indptr, indices = vertex_adjacency(mesh)
    return laplacian_from_adjacency(mesh.vertices, indptr, indices)


def adjacent_face_pairs(faces: np.ndarray) -> np.ndarray:
    """Unordered pairs of faces sharing an edge, one row per pair (P x 2).

    Edges incident to more than two faces raise TopologyError; boundary
    edges (one face) contribute no pair.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    fid = np.tile(np.arange(faces.shape[0]), 3)
    order = np.lexsort((fid, e[:, 1], e[:, 0]))
    e, fid = e[order], fid[order]
    same = (e[1:] == e[:-1]).all(axis=1)
    if same.size >= 2 and (same[1:] & same[:-1]).any():
        raise TopologyError("non-manifold edge shared by more than two faces")
    k = np.nonzero(same)[0]
    return np.stack([fid[k], fid[k + 1]], axis=1)


class MeshTopology:
    """Fixed face connectivity with cached adjacency for repeated loss evaluation."""

    def __init__(self, faces: np.ndarray, n_vertices: int):
        self.faces = np.ascontiguousarray(faces, dtype=np.int32).reshape(-1, 3)
        self.n_vertices = int(n_vertices)
        self._face_pairs = None
        self._vertex_csr = None

    @property
    def face_pairs(self) -> np.ndarray:
        if self._face_pairs is None:
            self._face_pairs = adjacent_face_pairs(self.faces)
        return self._face_pairs

    @property
    def vertex_csr(self) -> tuple[np.ndarray, np.ndarray]:
        if self._vertex_csr is None:
            mesh = TriangleMesh(np.zeros((self.n_vertices, 3), dtype=np.float32), self.faces)
            self._vertex_csr = vertex_adjacency(mesh)
        return self._vertex_csr


# ---------------------------------------------------------------------------
# nearest-neighbor index
# ---------------------------------------------------------------------------

class SpatialIndex:
    """Immutable exact nearest-neighbor index over a point set.

    Wraps a k-d tree; distances are recomputed in float64 so results are
    reproducible and identical to a brute-force scan, with ties broken
    toward the lowest point index.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise EmptyInputError("cannot index an empty point cloud")
        self._points = pts
        self._tree = cKDTree(pts)

    @property
    def n_points(self) -> int:
        return self._points.shape[0]

    def nearest(self, query) -> tuple[int, float]:
        """Exact nearest neighbor of one 3-vector: (index, distance)."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        d0, i0 = self._tree.query(q)
        # Re-resolve within an inflated ball so exact ties take the lowest index.
        r = d0 + max(d0 * 1e-9, 1e-12)
        candidates = self._tree.query_ball_point(q, r)
        cand = np.asarray(sorted(candidates), dtype=np.int64)
        d2 = ((self._points[cand] - q) ** 2).sum(axis=1)
        best = d2.min()
        idx = int(cand[np.nonzero(d2 == best)[0][0]])
        return idx, float(np.sqrt(best))

    def nearest_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest neighbors: (indices, float64 distances).

        Tied distances may resolve to any tied index; the distances are
        exact either way.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, idx = self._tree.query(q)
        idx = np.asarray(idx, dtype=np.int64)
        d = np.linalg.norm(self._points[idx] - q, axis=1)
        return idx, d


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def parent_map(coarse: Prototype, fine: Prototype) -> np.ndarray:
    """Index of the nearest coarse base vertex for every fine base vertex."""
    if fine.level <= coarse.level:
        raise ParameterError(
            f"fine level ({fine.level}) must exceed coarse level ({coarse.level})"
        )
    if coarse.radius != fine.radius:
        raise ParameterError("parent_map requires prototypes of equal radius")
    index = SpatialIndex(coarse.base.vertices)
    idx, dist = index.nearest_many(fine.base.vertices)
    # Exact-tie queries re-resolve with the lowest-index rule.
    d2, _ = index._tree.query(fine.base.vertices.astype(np.float64), k=2)
    near_tie = (d2[:, 1] - d2[:, 0]) <= 1e-12 + 1e-9 * d2[:, 0]
    for j in np.nonzero(near_tie)[0]:
        idx[j], _ = index.nearest(fine.base.vertices[j])
    return idx


# ---------------------------------------------------------------------------
# PLY serialization
# ---------------------------------------------------------------------------

def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None,
              faces: np.ndarray | None = None, binary: bool = True) -> None:
    """Write a point cloud or mesh as PLY (binary little-endian or ASCII)."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {pts.shape[0]}")
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if colors.shape[0] != pts.shape[0]:
            raise DimensionError("colors rows must match vertex rows")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if faces is not None:
        faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
        header.append(f"element face {faces.shape[0]}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if colors is None:
                f.write(pts.tobytes())
            else:
                rec = np.empty(pts.shape[0],
                               dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
                rec["xyz"], rec["rgb"] = pts, colors
                f.write(rec.tobytes())
            if faces is not None:
                rec = np.empty(faces.shape[0], dtype=[("n", "u1"), ("idx", "<i4", 3)])
                rec["n"], rec["idx"] = 3, faces
                f.write(rec.tobytes())
        else:
            for i in range(pts.shape[0]):
                line = "%.9g %.9g %.9g" % tuple(pts[i])
                if colors is not None:
                    line += " %d %d %d" % tuple(colors[i])
                f.write((line + "\n").encode("ascii"))
            if faces is not None:
                for a, b, c in faces:
                    f.write(f"3 {a} {b} {c}\n".encode("ascii"))


_PLY_SCALARS = {
    "float": ("<f4", 4), "float32": ("<f4", 4), "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1), "char": ("i1", 1), "int8": ("i1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2), "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4), "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def read_ply(path):
    """Read a PLY file; returns (points, colors or None, faces or None)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise DataError(f"{path}: not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list]] = []  # (name, count, [(prop, type)])
        while True:
            raw = f.readline()
            if not raw:
                raise DataError(f"{path}: unterminated PLY header")
            line = raw.decode("ascii", "replace").strip()
            if not line or line.startswith("comment"):
                continue
            if line == "end_header":
                break
            tok = line.split()
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if not elements:
                    raise DataError(f"{path}: property before any element")
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
                else:
                    elements[-1][2].append((tok[2], tok[1]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise DataError(f"{path}: unsupported PLY format '{fmt}'")

        points = colors = faces = None
        for name, count, props in elements:
            if name == "vertex":
                names = [p for p, _ in props]
                if names[:3] != ["x", "y", "z"]:
                    raise DataError(f"{path}: vertex element must start with x, y, z")
                if fmt == "ascii":
                    rows = [f.readline().split() for _ in range(count)]
                    arr = np.array(rows, dtype=np.float64) if count else np.zeros((0, len(names)))
                    if arr.shape[1] != len(names):
                        raise DataError(f"{path}: vertex row width mismatch")
                    points = arr[:, :3].astype(np.float32)
                    if "red" in names:
                        r = names.index("red")
                        colors = arr[:, r:r + 3].astype(np.uint8)
                else:
                    try:
                        dt = np.dtype([(p, _PLY_SCALARS[t][0]) for p, t in props])
                    except (KeyError, TypeError) as e:
                        raise DataError(f"{path}: unsupported vertex property: {e}") from e
                    buf = f.read(dt.itemsize * count)
                    if len(buf) != dt.itemsize * count:
                        raise DataError(f"{path}: truncated vertex data")
                    rec = np.frombuffer(buf, dtype=dt)
                    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
                    if "red" in rec.dtype.names:
                        colors = np.stack([rec["red"], rec["green"], rec["blue"]],
                                          axis=1).astype(np.uint8)
            elif name == "face":
                if len(props) != 1 or not isinstance(props[0][1], tuple):
                    raise DataError(f"{path}: face element must be a single index list")
                _, (_, count_t, idx_t) = props[0]
                if fmt == "ascii":
                    out = np.empty((count, 3), dtype=np.int32)
                    for i in range(count):
                        nums = f.readline().split()
                        if not nums or int(nums[0]) != 3:
                            raise DataError(f"{path}: only triangle faces are supported")
                        out[i] = [int(x) for x in nums[1:4]]
                    faces = out
                else:
                    ct, cs = _PLY_SCALARS[count_t]
                    it, isz = _PLY_SCALARS[idx_t]
                    dt = np.dtype([("n", ct), ("idx", it, 3)])
                    buf = f.read(dt.itemsize * count)
                    if len(buf) != dt.itemsize * count:
                        raise DataError(f"{path}: truncated face data")
                    rec = np.frombuffer(buf, dtype=dt)
                    if count and (rec["n"] != 3).any():
                        raise DataError(f"{path}: only triangle faces are supported")
                    faces = rec["idx"].astype(np.int32)
            else:
                raise DataError(f"{path}: unsupported element '{name}'")
    if points is None:
        raise DataError(f"{path}: no vertex element found")
    return points, colors, faces
