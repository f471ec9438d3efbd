"""Triangle mesh storage, OBJ/PLY I/O, spatial queries, and edge utilities.

Meshes are immutable after construction in spirit: operations return new
meshes, and spatial indices are read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

UNKNOWN_LABEL = -1


class MeshError(ValueError):
    pass


class MeshIOError(RuntimeError):
    """Malformed mesh file; message carries a line or byte offset."""


class Mesh:
    """Vertices (V,3, meters), faces (F,3) and optional per-vertex attributes.

    Recognized attributes: "normal" (V,3), "color" (V,3), "label" (V,) int,
    plus arbitrary float arrays of leading dimension V (e.g. weight rows).
    """

    def __init__(self, vertices, faces=None, attributes=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        if faces is None or len(faces) == 0:
            self.faces = np.zeros((0, 3), dtype=np.int64)
        else:
            self.faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        self.attributes = dict(attributes or {})
        self._validate()
        self._bvh = None

    def _validate(self):
        V = self.vertices.shape[0]
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= V:
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("face with repeated vertex indices")
        for name, arr in self.attributes.items():
            arr = np.asarray(arr)
            if arr.shape[0] != V:
                raise MeshError(f"attribute {name!r} has length {arr.shape[0]}, expected {V}")
            self.attributes[name] = arr

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def bounds(self):
        if self.num_vertices == 0:
            raise MeshError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces, self.attributes)

    def triangles(self):
        return self.vertices[self.faces]

    def face_normals(self, normalized=True):
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalized:
            ln = np.linalg.norm(n, axis=1)
            nz = ln > 0
            n[nz] /= ln[nz, None]
        return n

    def bvh(self):
        if self._bvh is None:
            self._bvh = TriangleBVH(self)
        return self._bvh


@dataclass
class SurfaceSheet:
    """A lifted front/back surface mesh with its provenance tags."""

    mesh: Mesh
    view: str            # "front" | "back"
    frame_index: int = 0

    def __post_init__(self):
        if self.view not in ("front", "back"):
            raise MeshError(f"invalid sheet view {self.view!r}")

    @property
    def labels(self):
        return self.mesh.attributes.get("label")


@dataclass
class EdgeSet:
    """Unique undirected edges as (E,2) index pairs with i < j."""

    edges: np.ndarray

    def __len__(self):
        return self.edges.shape[0]


def build_edge_set(mesh: Mesh) -> EdgeSet:
    if mesh.num_faces == 0:
        return EdgeSet(np.zeros((0, 2), dtype=np.int64))
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    return EdgeSet(e)


def filter_stretched_edges(mesh: Mesh, threshold: float) -> Mesh:
    """Drop faces containing any edge with squared length > threshold.

    Vertices are compacted; attribute arrays follow the kept vertices.
    """
    if threshold <= 0:
        raise MeshError("threshold must be positive")
    if mesh.num_faces == 0:
        return Mesh(mesh.vertices.copy(), mesh.faces.copy(), mesh.attributes)
    tri = mesh.triangles()
    d01 = np.sum((tri[:, 0] - tri[:, 1]) ** 2, axis=1)
    d12 = np.sum((tri[:, 1] - tri[:, 2]) ** 2, axis=1)
    d20 = np.sum((tri[:, 2] - tri[:, 0]) ** 2, axis=1)
    keep = (d01 <= threshold) & (d12 <= threshold) & (d20 <= threshold)
    faces = mesh.faces[keep]
    used = np.unique(faces)
    remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.shape[0])
    attrs = {k: np.asarray(v)[used] for k, v in mesh.attributes.items()}
    return Mesh(mesh.vertices[used], remap[faces], attrs)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals; zero vector for isolated vertices."""
    n = np.zeros((mesh.num_vertices, 3))
    if mesh.num_faces:
        fn = mesh.face_normals(normalized=False)  # |fn| = 2 * area
        for k in range(3):
            np.add.at(n, mesh.faces[:, k], fn)
    ln = np.linalg.norm(n, axis=1)
    nz = ln > 0
    n[nz] /= ln[nz, None]
    return n


class TriangleBVH:
    """Median-split BVH over face centroids with exact triangle distances."""

    LEAF_SIZE = 8

    def __init__(self, mesh: Mesh):
        if mesh.num_faces == 0:
            raise MeshError("cannot build BVH over an empty mesh")
        tri = mesh.triangles()
        # Degenerate (zero-area) faces are excluded from queries.
        area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        good = np.nonzero(area2 > 0)[0]
        if good.shape[0] == 0:
            raise MeshError("mesh has only degenerate faces")
        self._face_ids = good
        tri = tri[good]
        self.va = np.ascontiguousarray(tri[:, 0])
        self.vb = np.ascontiguousarray(tri[:, 1])
        self.vc = np.ascontiguousarray(tri[:, 2])
        centroids = tri.mean(axis=1)
        fmin = tri.min(axis=1)
        fmax = tri.max(axis=1)
        n_faces = tri.shape[0]
        max_nodes = 2 * n_faces
        self.bmin = np.empty((max_nodes, 3))
        self.bmax = np.empty((max_nodes, 3))
        self.left = np.full(max_nodes, -1, dtype=np.int64)
        self.right = np.full(max_nodes, -1, dtype=np.int64)
        self.start = np.zeros(max_nodes, dtype=np.int64)
        self.count = np.zeros(max_nodes, dtype=np.int64)
        self.order = np.arange(n_faces, dtype=np.int64)
        self._n_nodes = 0
        self._build(0, n_faces, centroids, fmin, fmax)
        m = self._n_nodes
        self.bmin, self.bmax = self.bmin[:m], self.bmax[:m]
        self.left, self.right = self.left[:m], self.right[:m]
        self.start, self.count = self.start[:m], self.count[:m]

    def _build(self, lo, hi, centroids, fmin, fmax):
        node = self._n_nodes
        self._n_nodes += 1
        idx = self.order[lo:hi]
        self.bmin[node] = fmin[idx].min(axis=0)
        self.bmax[node] = fmax[idx].max(axis=0)
        if hi - lo <= self.LEAF_SIZE:
            self.start[node] = lo
            self.count[node] = hi - lo
            return node
        axis = int(np.argmax(self.bmax[node] - self.bmin[node]))
        mid = (hi - lo) // 2
        part = np.argpartition(centroids[idx, axis], mid, kind="introselect")
        self.order[lo:hi] = idx[part]
        self.left[node] = self._build(lo, lo + mid, centroids, fmin, fmax)
        self.right[node] = self._build(lo + mid, hi, centroids, fmin, fmax)
        return node

    def closest(self, points):
        """(dist, face_index, closest_point) for each query row."""
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        d2, face, pt = _kernels.bvh_closest_points(
            points, self.bmin, self.bmax, self.left, self.right,
            self.start, self.count, self.order, self.va, self.vb, self.vc)
        return np.sqrt(d2), self._face_ids[face], pt


def nearest_surface_point(mesh: Mesh, point):
    """Exact closest point on the triangle set: (point, distance, face index)."""
    if mesh.num_faces == 0:
        raise MeshError("mesh has no faces")
    d, f, p = mesh.bvh().closest(np.asarray(point, dtype=np.float64)[None, :])
    return p[0], float(d[0]), int(f[0])


def nearest_surface_points(mesh: Mesh, points):
    if mesh.num_faces == 0:
        raise MeshError("mesh has no faces")
    return mesh.bvh().closest(points)


def brute_force_nearest(mesh: Mesh, point):
    """Reference O(F) closest-point scan used as the BVH oracle."""
    tri = mesh.triangles()
    point = np.asarray(point, dtype=np.float64)
    out = np.empty(3)
    best, best_f, best_p = np.inf, -1, None
    for f in range(tri.shape[0]):
        a, b, c = tri[f]
        if np.linalg.norm(np.cross(b - a, c - a)) == 0:
            continue
        d2 = _kernels._closest_point_triangle(a, b, c, point, out)
        if d2 < best:
            best, best_f, best_p = d2, f, out.copy()
    return best_p, float(np.sqrt(best)), best_f


def winding_numbers(mesh: Mesh, points, chunk=128):
    """Generalized winding number of each query point (1 inside, 0 outside)."""
    tri = mesh.triangles()
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        p = points[s : s + chunk]
        r = tri[None, :, :, :] - p[:, None, None, :]   # (q,F,3,3)
        a, b, c = r[:, :, 0], r[:, :, 1], r[:, :, 2]
        la = np.linalg.norm(a, axis=-1)
        lb = np.linalg.norm(b, axis=-1)
        lc = np.linalg.norm(c, axis=-1)
        det = np.einsum("qfi,qfi->qf", a, np.cross(b, c))
        denom = (la * lb * lc + np.einsum("qfi,qfi->qf", a, b) * lc
                 + np.einsum("qfi,qfi->qf", b, c) * la
                 + np.einsum("qfi,qfi->qf", c, a) * lb)
        out[s : s + chunk] = np.sum(np.arctan2(det, denom), axis=1) / (2.0 * np.pi)
    return out


def boundary_edge_count(mesh: Mesh) -> int:
    """Number of undirected edges used by exactly one face (0 = closed)."""
    if mesh.num_faces == 0:
        return 0
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int(np.sum(counts == 1))


def ray_crossing_count(mesh: Mesh, origin, direction, tmin=0.0, tmax=np.inf):
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    direction = np.ascontiguousarray(direction, dtype=np.float64)
    tri = mesh.triangles()
    return int(_kernels.ray_crossings(
        origin, direction,
        np.ascontiguousarray(tri[:, 0]), np.ascontiguousarray(tri[:, 1]),
        np.ascontiguousarray(tri[:, 2]), tmin, tmax))


# ---------------------------------------------------------------------------
# OBJ / PLY I/O


def save_mesh(mesh: Mesh, path) -> None:
    path = str(path)
    if path.endswith(".obj"):
        _save_obj(mesh, path)
    elif path.endswith(".ply"):
        save_ply(mesh, path, binary=True)
    else:
        raise MeshIOError(f"unsupported mesh extension: {path}")


def load_mesh(path) -> Mesh:
    path = str(path)
    if path.endswith(".obj"):
        return _load_obj(path)
    if path.endswith(".ply"):
        return load_ply(path)
    raise MeshIOError(f"unsupported mesh extension: {path}")


def _save_obj(mesh: Mesh, path):
    with open(path, "w") as f:
        f.write("# avatarforge mesh\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


def _load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                elif tag == "f":
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    if len(idx) < 3:
                        raise MeshIOError(f"{path}:{lineno}: face with fewer than 3 vertices")
                    for k in range(1, len(idx) - 1):  # fan-triangulate
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except (IndexError, ValueError) as exc:
                raise MeshIOError(f"{path}:{lineno}: malformed OBJ line: {line.strip()!r}") from exc
    try:
        return Mesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), faces)
    except MeshError as exc:
        raise MeshIOError(f"{path}: {exc}") from exc


_PLY_TYPES = {
    "float": ("<f4", float), "float32": ("<f4", float),
    "double": ("<f8", float), "float64": ("<f8", float),
    "uchar": ("u1", int), "uint8": ("u1", int),
    "char": ("i1", int), "int8": ("i1", int),
    "short": ("<i2", int), "ushort": ("<u2", int),
    "int": ("<i4", int), "int32": ("<i4", int),
    "uint": ("<u4", int), "uint32": ("<u4", int),
}


def save_ply(mesh: Mesh, path, binary=True) -> None:
    """PLY writer; normals, uchar colors and the integer "label" attribute
    are written as standard vertex properties."""
    normals = mesh.attributes.get("normal")
    colors = mesh.attributes.get("color")
    labels = mesh.attributes.get("label")
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append("comment avatarforge mesh")
    header.append(f"element vertex {mesh.num_vertices}")
    header += [f"property double {ax}" for ax in "xyz"]
    if normals is not None:
        header += [f"property double n{ax}" for ax in "xyz"]
    if colors is not None:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if labels is not None:
        header.append("property int label")
    header.append(f"element face {mesh.num_faces}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")

    cols = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    data = [mesh.vertices]
    if normals is not None:
        cols += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        data.append(np.asarray(normals, dtype=np.float64))
    rec_extra = []
    if colors is not None:
        c = np.clip(np.asarray(colors), 0, 255)
        if c.dtype.kind == "f" and c.max() <= 1.0 + 1e-9:
            c = c * 255.0
        rec_extra.append(("color", c.astype("u1")))
    if labels is not None:
        rec_extra.append(("label", np.asarray(labels).astype("<i4")))

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vfields = [("v", "<f8", (len(data) * 3,))]
            for name, arr in rec_extra:
                vfields.append((name, arr.dtype, arr.shape[1:]) if arr.ndim > 1 else (name, arr.dtype))
            rec = np.empty(mesh.num_vertices, dtype=np.dtype(vfields))
            rec["v"] = np.concatenate(data, axis=1)
            for name, arr in rec_extra:
                rec[name] = arr
            f.write(rec.tobytes())
            frec = np.empty(mesh.num_faces, dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
            frec["n"] = 3
            frec["idx"] = mesh.faces.astype("<i4")
            f.write(frec.tobytes())
        else:
            flt = np.concatenate(data, axis=1)
            for i in range(mesh.num_vertices):
                row = " ".join(f"{v:.17g}" for v in flt[i])
                for name, arr in rec_extra:
                    vals = np.atleast_1d(arr[i])
                    row += " " + " ".join(str(int(v)) for v in vals)
                f.write((row + "\n").encode("ascii"))
            for face in mesh.faces:
                f.write(f"3 {face[0]} {face[1]} {face[2]}\n".encode("ascii"))


def load_ply(path) -> Mesh:
    with open(path, "rb") as f:
        raw = f.read()
    # Header is ascii up to "end_header".
    end = raw.find(b"end_header")
    if end < 0:
        raise MeshIOError(f"{path}: missing end_header (byte offset {len(raw)})")
    body_start = raw.index(b"\n", end) + 1
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []  # (name, count, [(prop_name, type, is_list, list_count_type)])
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "ply":
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise MeshIOError(f"{path}:{lineno}: unsupported PLY format {fmt!r}")
        elif parts[0] == "comment":
            continue
        elif parts[0] == "element":
            try:
                elements.append([parts[1], int(parts[2]), []])
            except (IndexError, ValueError):
                raise MeshIOError(f"{path}:{lineno}: malformed element line")
        elif parts[0] == "property":
            if not elements:
                raise MeshIOError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], True, parts[2]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MeshIOError(f"{path}:{lineno}: unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[2], parts[1], False, None))
    if fmt is None:
        raise MeshIOError(f"{path}: missing format line")

    parsed = {}
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii", errors="replace").splitlines()
        cursor = 0
        for name, count, props in elements:
            rows = []
            for i in range(count):
                if cursor >= len(text):
                    raise MeshIOError(f"{path}: truncated at element {name!r} row {i} "
                                      f"(line {len(header_lines) + 2 + cursor})")
                tokens = text[cursor].split()
                cursor += 1
                row = {}
                ti = 0
                try:
                    for pname, ptype, is_list, _ in props:
                        conv = _PLY_TYPES[ptype][1]
                        if is_list:
                            n = int(tokens[ti]); ti += 1
                            row[pname] = [conv(tokens[ti + k]) for k in range(n)]
                            ti += n
                        else:
                            row[pname] = conv(tokens[ti]); ti += 1
                except (IndexError, ValueError) as exc:
                    raise MeshIOError(f"{path}: bad {name!r} row {i} "
                                      f"(line {len(header_lines) + 2 + cursor - 1})") from exc
                rows.append(row)
            parsed[name] = rows
    else:
        buf = raw[body_start:]
        offset = 0
        for name, count, props in elements:
            simple = all(not p[2] for p in props)
            if simple:
                dt = np.dtype([(p[0], _PLY_TYPES[p[1]][0]) for p in props])
                need = dt.itemsize * count
                if offset + need > len(buf):
                    raise MeshIOError(f"{path}: truncated {name!r} data at byte offset {body_start + offset}")
                rec = np.frombuffer(buf, dtype=dt, count=count, offset=offset)
                offset += need
                parsed[name] = rec
            else:
                rows = []
                for i in range(count):
                    row = {}
                    for pname, ptype, is_list, ctype in props:
                        if is_list:
                            cdt = np.dtype(_PLY_TYPES[ctype][0])
                            if offset + cdt.itemsize > len(buf):
                                raise MeshIOError(f"{path}: truncated list count at byte offset {body_start + offset}")
                            n = int(np.frombuffer(buf, dtype=cdt, count=1, offset=offset)[0])
                            offset += cdt.itemsize
                            idt = np.dtype(_PLY_TYPES[ptype][0])
                            if offset + n * idt.itemsize > len(buf):
                                raise MeshIOError(f"{path}: truncated list data at byte offset {body_start + offset}")
                            row[pname] = np.frombuffer(buf, dtype=idt, count=n, offset=offset).tolist()
                            offset += n * idt.itemsize
                        else:
                            idt = np.dtype(_PLY_TYPES[ptype][0])
                            if offset + idt.itemsize > len(buf):
                                raise MeshIOError(f"{path}: truncated property at byte offset {body_start + offset}")
                            row[pname] = np.frombuffer(buf, dtype=idt, count=1, offset=offset)[0]
                            offset += idt.itemsize
                    rows.append(row)
                parsed[name] = rows

    if "vertex" not in parsed:
        raise MeshIOError(f"{path}: no vertex element")
    vdata = parsed["vertex"]
    getcol = (lambda k: np.array([r[k] for r in vdata])) if isinstance(vdata, list) else (lambda k: np.asarray(vdata[k]))
    names = ([p for p in vdata[0]] if isinstance(vdata, list) and vdata else
             list(vdata.dtype.names) if not isinstance(vdata, list) else [])
    try:
        verts = np.stack([getcol("x"), getcol("y"), getcol("z")], axis=1).astype(np.float64)
    except (KeyError, ValueError) as exc:
        raise MeshIOError(f"{path}: vertex element missing x/y/z") from exc
    attrs = {}
    if all(k in names for k in ("nx", "ny", "nz")):
        attrs["normal"] = np.stack([getcol("nx"), getcol("ny"), getcol("nz")], axis=1).astype(np.float64)
    if all(k in names for k in ("red", "green", "blue")):
        attrs["color"] = np.stack([getcol("red"), getcol("green"), getcol("blue")], axis=1).astype(np.uint8)
    if "label" in names:
        attrs["label"] = getcol("label").astype(np.int64)

    faces = []
    for row in parsed.get("face", []):
        idx = row["vertex_indices"] if isinstance(row, dict) else list(row["vertex_indices"])
        for k in range(1, len(idx) - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
    try:
        return Mesh(verts, faces, attrs)
    except MeshError as exc:
        raise MeshIOError(f"{path}: {exc}") from exc
