"""Shell tetrahedral grid around a template mesh, SDF initialization, and
differentiable Marching-Tetrahedra surface extraction.

The grid stores per-vertex SDF values (inside < 0) and displacements; the
zero set is extracted as a triangle mesh whose normals point toward
positive SDF. Gradients treat the sign pattern (topology) as fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mesh import Mesh, TriangleBVH, boundary_edge_count, winding_numbers

ZERO_SDF_NUDGE = 1e-10


class TetGridError(ValueError):
    pass


@dataclass
class ShellConfig:
    shell_distance: float = 0.2   # meters around the template surface
    resolution: int = 48          # cells along the longest template axis

    def __post_init__(self):
        if self.shell_distance <= 0 or self.resolution <= 0:
            raise TetGridError("shell_distance and resolution must be positive")


@dataclass
class TetGrid:
    verts: np.ndarray      # (G,3) lattice positions
    tets: np.ndarray       # (K,4) positively oriented
    sdf: np.ndarray        # (G,)
    disp: np.ndarray       # (G,3), |component| <= cell_size/2
    cell_size: float

    def __post_init__(self):
        self.verts = np.asarray(self.verts, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.sdf = np.asarray(self.sdf, dtype=np.float64)
        self.disp = np.asarray(self.disp, dtype=np.float64)
        if not np.all(np.isfinite(self.sdf)):
            raise TetGridError("sdf must be finite")
        lim = 0.5 * self.cell_size
        self.disp = np.clip(self.disp, -lim, lim)

    @property
    def num_verts(self):
        return self.verts.shape[0]

    @property
    def num_tets(self):
        return self.tets.shape[0]

    def with_fields(self, sdf=None, disp=None) -> "TetGrid":
        return replace(self, sdf=self.sdf if sdf is None else sdf,
                       disp=self.disp if disp is None else disp)

    def displaced(self):
        return self.verts + self.disp

    def edges(self):
        """Unique undirected lattice edges over the tetrahedra."""
        t = self.tets
        pairs = np.concatenate([t[:, [0, 1]], t[:, [0, 2]], t[:, [0, 3]],
                                t[:, [1, 2]], t[:, [1, 3]], t[:, [2, 3]]], axis=0)
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    def to_tensors(self):
        return {"verts": self.verts, "tets": self.tets, "sdf": self.sdf,
                "disp": self.disp, "cell_size": np.array([self.cell_size])}

    @classmethod
    def from_tensors(cls, t):
        return cls(t["verts"], t["tets"], t["sdf"], t["disp"], float(t["cell_size"][0]))


# Freudenthal 6-tet split of a cube; corner id = dx + 2*dy + 4*dz. Every cube
# uses the same main diagonal 0-7, so adjacent cubes share face diagonals and
# the lattice is conforming.
_CUBE_TETS = None


def _cube_tet_pattern():
    global _CUBE_TETS
    if _CUBE_TETS is not None:
        return _CUBE_TETS
    corners = np.array([[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
    # corner id in x+2y+4z convention:
    ids = corners[:, 0] + 2 * corners[:, 1] + 4 * corners[:, 2]
    pos = np.zeros((8, 3))
    pos[ids] = corners
    bit = (1, 2, 4)
    tets = []
    import itertools
    for perm in itertools.permutations((0, 1, 2)):
        a = bit[perm[0]]
        b = a | bit[perm[1]]
        tet = [0, a, b, 7]
        p = pos[tet]
        vol = np.linalg.det(np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]]))
        if vol < 0:
            tet = [0, b, a, 7]
        tets.append(tet)
    _CUBE_TETS = np.array(sorted(tets), dtype=np.int64)
    return _CUBE_TETS


def build_shell_grid(template: Mesh, cfg: ShellConfig) -> TetGrid:
    """Lattice cells whose center lies within shell_distance of the template
    surface, each split into 6 tets; grid vertices deduplicated."""
    lo, hi = template.bounds()
    # Expansion capped at the bbox diagonal: a degenerate (huge) shell keeps
    # the whole lattice instead of growing the domain faster than the radius.
    pad = min(cfg.shell_distance, float(np.linalg.norm(hi - lo)))
    lo = lo - pad
    hi = hi + pad
    extent = hi - lo
    cell = float(extent.max()) / cfg.resolution
    if cell <= 0:
        raise TetGridError("degenerate template bounding box")
    ncell = np.maximum(np.ceil(extent / cell - 1e-9).astype(int), 1)
    nx, ny, nz = (int(v) for v in ncell)

    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cells = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    centers = lo + (cells + 0.5) * cell
    dist, _, _ = template.bvh().closest(centers)
    keep = cells[dist <= cfg.shell_distance]
    if keep.shape[0] == 0:
        raise TetGridError("no lattice cell within shell_distance; increase resolution")

    pattern = _cube_tet_pattern()
    # Lattice vertex id = ix + (nx+1) * (iy + (ny+1) * iz), local corner id x+2y+4z.
    corner_off = np.array([[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
    order = corner_off[:, 0] + 2 * corner_off[:, 1] + 4 * corner_off[:, 2]
    off = np.empty((8, 3), dtype=np.int64)
    off[order] = corner_off
    corner_idx = keep[:, None, :] + off[None, :, :]            # (C,8,3)
    flat = (corner_idx[..., 0]
            + (nx + 1) * (corner_idx[..., 1] + (ny + 1) * corner_idx[..., 2]))
    uniq, inv = np.unique(flat.ravel(), return_inverse=True)
    local = inv.reshape(-1, 8)                                  # cube corner -> grid vertex
    gx = uniq % (nx + 1)
    gy = (uniq // (nx + 1)) % (ny + 1)
    gz = uniq // ((nx + 1) * (ny + 1))
    verts = lo + np.stack([gx, gy, gz], axis=1) * cell
    tets = local[:, pattern].reshape(-1, 4)
    return TetGrid(verts, tets, np.zeros(verts.shape[0]), np.zeros_like(verts), cell)


@dataclass
class SdfInit:
    sdf: np.ndarray
    open_template_fallback: bool = False


def init_sdf_from_template(grid: TetGrid, template: Mesh) -> SdfInit:
    """Signed distance of each grid vertex to the template: unsigned BVH
    distance with the sign from a winding-number test (inside < 0). Open
    templates fall back to the closest-face pseudo-normal sign."""
    bvh = template.bvh()
    dist, face, pt = bvh.closest(grid.verts)
    if boundary_edge_count(template) == 0:
        w = winding_numbers(template, grid.verts)
        sign = np.where(w > 0.5, -1.0, 1.0)
        return SdfInit(sign * dist, False)
    normals = template.face_normals()
    d = np.einsum("ij,ij->i", grid.verts - pt, normals[face])
    sign = np.where(d < 0, -1.0, 1.0)
    return SdfInit(sign * dist, True)


@dataclass
class MTOutput:
    """Extracted surface plus per-vertex provenance: each output vertex lies
    on lattice edge (edge_a, edge_b) at parameter t toward edge_b."""

    mesh: Mesh
    edge_a: np.ndarray
    edge_b: np.ndarray
    t: np.ndarray
    nudged_zeros: int = 0


# Marching-tets triangle table over local edges
# e0=(0,1) e1=(0,2) e2=(0,3) e3=(1,2) e4=(1,3) e5=(2,3);
# case code bit k set iff corner k has positive sdf.
_TRI_TABLE = [
    [],
    [(0, 1, 2)],
    [(0, 3, 4)],
    [(1, 2, 3), (3, 2, 4)],
    [(1, 5, 3)],
    [(0, 5, 3), (0, 2, 5)],
    [(0, 1, 5), (0, 5, 4)],
    [(2, 4, 5)],
    [(2, 5, 4)],
    [(0, 4, 5), (0, 5, 1)],
    [(0, 3, 5), (0, 5, 2)],
    [(1, 3, 5)],
    [(1, 4, 3), (1, 2, 4)],
    [(0, 4, 3)],
    [(0, 2, 1)],
    [],
]
_LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], dtype=np.int64)


def _interp_params(sdf, edge_a, edge_b):
    sa = sdf[edge_a]
    sb = sdf[edge_b]
    return sa / (sa - sb)


def marching_tetrahedra(grid: TetGrid) -> MTOutput:
    """Extract the SDF zero set. Zero SDF values are nudged to +1e-10 so the
    topology is deterministic; the count of nudged values is reported."""
    sdf = grid.sdf
    zeros = sdf == 0.0
    nudged = int(np.count_nonzero(zeros))
    if nudged:
        sdf = np.where(zeros, ZERO_SDF_NUDGE, sdf)
    pos = grid.displaced()

    occ = (sdf > 0).astype(np.int64)
    code = (occ[grid.tets] * np.array([1, 2, 4, 8])).sum(axis=1)
    active = np.nonzero((code != 0) & (code != 15))[0]
    if active.size == 0:
        return MTOutput(Mesh(np.zeros((0, 3)), None), np.zeros(0, np.int64),
                        np.zeros(0, np.int64), np.zeros(0), nudged)

    # Unique crossing edges keyed by sorted grid-vertex pairs.
    tet_edges = grid.tets[active][:, _LOCAL_EDGES]          # (A,6,2)
    cross = occ[tet_edges[..., 0]] != occ[tet_edges[..., 1]]
    pairs = np.sort(tet_edges[cross], axis=1)
    uniq_edges, edge_of = np.unique(pairs, axis=0, return_inverse=True)
    # Map each (active tet, local edge) to its unique output vertex.
    vert_of = np.full(tet_edges.shape[:2], -1, dtype=np.int64)
    vert_of[cross] = edge_of

    ea, eb = uniq_edges[:, 0], uniq_edges[:, 1]
    t = _interp_params(sdf, ea, eb)
    verts = (1.0 - t)[:, None] * pos[ea] + t[:, None] * pos[eb]

    tris = []
    codes_a = code[active]
    for case in range(1, 15):
        rows = np.nonzero(codes_a == case)[0]
        if rows.size == 0:
            continue
        for tri_edges in _TRI_TABLE[case]:
            tris.append(vert_of[rows][:, list(tri_edges)])
    faces = np.concatenate(tris, axis=0)

    # Orient every triangle so its normal points toward positive sdf: compare
    # with the direction from the negative to the positive corner centroid.
    tet_of_face = []
    for case in range(1, 15):
        rows = np.nonzero(codes_a == case)[0]
        if rows.size == 0:
            continue
        for _ in _TRI_TABLE[case]:
            tet_of_face.append(active[rows])
    tet_of_face = np.concatenate(tet_of_face)
    corner_pos = pos[grid.tets[tet_of_face]]                # (Ft,4,3)
    corner_occ = occ[grid.tets[tet_of_face]].astype(bool)   # (Ft,4)
    wpos = corner_occ.astype(np.float64)
    wneg = 1.0 - wpos
    cpos = (corner_pos * wpos[..., None]).sum(axis=1) / wpos.sum(axis=1)[:, None]
    cneg = (corner_pos * wneg[..., None]).sum(axis=1) / wneg.sum(axis=1)[:, None]
    ref = cpos - cneg
    tv = verts[faces]
    n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    flip = np.einsum("ij,ij->i", n, ref) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    return MTOutput(Mesh(verts, faces), ea, eb, t, nudged)


def mt_vertex_gradients(grid: TetGrid, mt: MTOutput, upstream):
    """Backward pass of the extraction: accumulate d(loss)/d(vertex) into
    gradients over (sdf, disp). Topology is fixed."""
    upstream = np.asarray(upstream, dtype=np.float64)
    sdf = np.where(grid.sdf == 0.0, ZERO_SDF_NUDGE, grid.sdf)
    sa = sdf[mt.edge_a]
    sb = sdf[mt.edge_b]
    pos = grid.displaced()
    dvec = pos[mt.edge_b] - pos[mt.edge_a]
    denom = (sa - sb) ** 2
    dt_dsa = -sb / denom
    dt_dsb = sa / denom
    g_dot = np.einsum("ij,ij->i", upstream, dvec)
    grad_sdf = np.zeros_like(grid.sdf)
    np.add.at(grad_sdf, mt.edge_a, g_dot * dt_dsa)
    np.add.at(grad_sdf, mt.edge_b, g_dot * dt_dsb)
    grad_disp = np.zeros_like(grid.disp)
    np.add.at(grad_disp, mt.edge_a, (1.0 - mt.t)[:, None] * upstream)
    np.add.at(grad_disp, mt.edge_b, mt.t[:, None] * upstream)
    return grad_sdf, grad_disp


def mt_jacobian(grid: TetGrid, mt: MTOutput, vertex_index: int) -> dict:
    """Analytic partials of one extracted vertex wrt its parent-edge fields:
    d_s_a, d_s_b are (3,) position derivatives; d_disp_a, d_disp_b are (3,3)."""
    if vertex_index < 0 or vertex_index >= mt.t.shape[0]:
        raise TetGridError(f"vertex {vertex_index} has no provenance record")
    a = int(mt.edge_a[vertex_index])
    b = int(mt.edge_b[vertex_index])
    sdf = np.where(grid.sdf == 0.0, ZERO_SDF_NUDGE, grid.sdf)
    sa, sb = sdf[a], sdf[b]
    pos = grid.displaced()
    dvec = pos[b] - pos[a]
    denom = (sa - sb) ** 2
    t = mt.t[vertex_index]
    return {
        "edge": (a, b),
        "t": float(t),
        "dt_ds_a": float(-sb / denom),
        "dt_ds_b": float(sa / denom),
        "d_s_a": dvec * (-sb / denom),
        "d_s_b": dvec * (sa / denom),
        "d_disp_a": (1.0 - t) * np.eye(3),
        "d_disp_b": t * np.eye(3),
    }


def extract_surface_t(grid: TetGrid, sdf_t, disp_t):
    """Differentiable Marching Tetrahedra: returns (vertex Tensor, MTOutput).

    Topology comes from sdf_t's sign pattern and is fixed for the backward
    pass; gradients flow through the per-edge interpolation.
    """
    from .nn.tensor import custom_op

    solid = grid.with_fields(sdf=sdf_t.data, disp=disp_t.data)
    mt = marching_tetrahedra(solid)

    def vjp(g):
        return mt_vertex_gradients(solid, mt, g)

    verts_t = custom_op(mt.mesh.vertices, (sdf_t, disp_t), vjp, name="marching_tets")
    return verts_t, mt


def sdf_laplacian_energy(grid: TetGrid, sdf=None):
    """Graph-Laplacian smoothness of the SDF over lattice edges:
    mean_i (s_i - mean_{j in N(i)} s_j)^2, with its gradient."""
    s = grid.sdf if sdf is None else np.asarray(sdf, dtype=np.float64)
    edges = grid.edges()
    G = grid.num_verts
    deg = np.zeros(G)
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    deg = np.maximum(deg, 1.0)
    nbr_sum = np.zeros(G)
    np.add.at(nbr_sum, edges[:, 0], s[edges[:, 1]])
    np.add.at(nbr_sum, edges[:, 1], s[edges[:, 0]])
    r = s - nbr_sum / deg
    energy = float(np.mean(r * r))
    # d/ds of mean(r^2): through both the diagonal and the averaged neighbors.
    grad = 2.0 * r / G
    back = np.zeros(G)
    np.add.at(back, edges[:, 1], r[edges[:, 0]] / deg[edges[:, 0]])
    np.add.at(back, edges[:, 0], r[edges[:, 1]] / deg[edges[:, 1]])
    grad -= 2.0 * back / G
    return energy, grad
