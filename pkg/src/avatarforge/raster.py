"""Orthographic software rasterizer: normal/depth/segmentation/position/mask
maps, plus a fixed-coverage differentiable variant.

Coverage (pixel-to-triangle assignment) is frozen from the forward pass;
gradients flow through the barycentric interpolation as a function of the
projected vertices, so finite differences match on interior pixels. The
plain and differentiable renders produce identical forward values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .mesh import Mesh, SurfaceSheet, UNKNOWN_LABEL, vertex_normals
from .nn.tensor import Tensor, custom_op


class RasterError(ValueError):
    pass


_VIEW_YAW = {"front": 0.0, "back": np.pi, "left": 0.5 * np.pi, "right": 1.5 * np.pi}


@dataclass
class OrthoCamera:
    """Orthographic camera: orthonormal (right, up, forward) with the camera
    on the +forward side of the window center, viewing along -forward. Depth
    is measured along -forward from the camera plane; background pixels hold
    the far constant (2 * distance)."""

    view: str
    center: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    width: float
    height: float
    img_w: int
    img_h: int
    distance: float = 2.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        self.forward = np.asarray(self.forward, dtype=np.float64)
        M = np.stack([self.right, self.up, self.forward])
        if np.max(np.abs(M @ M.T - np.eye(3))) > 1e-9:
            raise RasterError("camera axes must be orthonormal")
        if self.img_w <= 0 or self.img_h <= 0:
            raise RasterError("zero-area image")

    @classmethod
    def rig(cls, view: str, center=(0.0, 0.9, 0.0), width=2.0, height=2.0,
            img=128, distance=2.0, yaw=None):
        """Standard y-up camera ring; front looks along -z from +z, back is a
        180-degree yaw about +y (so front/back renders flip horizontally)."""
        if yaw is None:
            if view not in _VIEW_YAW:
                raise RasterError(f"unknown rig view {view!r}")
            yaw = _VIEW_YAW[view]
        c, s = np.cos(yaw), np.sin(yaw)
        forward = np.array([s, 0.0, c])
        rightv = np.array([c, 0.0, -s])
        return cls(view, np.asarray(center, dtype=np.float64), rightv,
                   np.array([0.0, 1.0, 0.0]), forward,
                   float(width), float(height), int(img), int(img), float(distance))

    @property
    def far(self) -> float:
        return 2.0 * self.distance

    @property
    def pixel_footprint(self) -> float:
        return self.width / self.img_w

    def project(self, points):
        """(N,3) world -> (N,2) continuous raster coords (x right, y down,
        pixel (i,j) center at (j+0.5, i+0.5)) and (N,) depths."""
        rel = np.asarray(points, dtype=np.float64) - self.center
        x = (rel @ self.right / self.width + 0.5) * self.img_w
        y = (0.5 - rel @ self.up / self.height) * self.img_h
        d = self.distance - rel @ self.forward
        return np.stack([x, y], axis=1), d

    def raster_to_grid(self, coords):
        """Raster coords -> grid_sample pixel-center coords."""
        return coords - 0.5

    def world_to_cam_normal(self, n):
        M = np.stack([self.right, self.up, self.forward])
        return np.asarray(n) @ M.T

    def cam_to_world_normal(self, n):
        M = np.stack([self.right, self.up, self.forward])
        return np.asarray(n) @ M

    def projection_jacobian(self):
        """d(raster x)/d(world), d(raster y)/d(world), d(depth)/d(world)."""
        jx = self.right * (self.img_w / self.width)
        jy = -self.up * (self.img_h / self.height)
        jd = -self.forward
        return jx, jy, jd


@dataclass
class MapStack:
    """Rendered per-view maps. Channels absent from the render are None."""

    normal: np.ndarray = None        # (H,W,3) camera-space unit vectors, bg 0
    depth: np.ndarray = None         # (H,W) meters, bg = camera far
    segmentation: np.ndarray = None  # (H,W,S) one-hot, bg all-zero
    position: np.ndarray = None      # (H,W,3) world coords, bg 0
    mask: np.ndarray = None          # (H,W) in {0,1}
    extra: dict = field(default_factory=dict)
    camera: OrthoCamera = None

    def to_tensors(self, prefix=""):
        out = {}
        for name in ("normal", "depth", "segmentation", "position", "mask"):
            arr = getattr(self, name)
            if arr is not None:
                out[prefix + name] = arr
        for name, arr in self.extra.items():
            out[prefix + "extra_" + name] = arr
        return out

    @classmethod
    def from_tensors(cls, tensors, prefix=""):
        ms = cls()
        for key, arr in tensors.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name.startswith("extra_"):
                ms.extra[name[len("extra_"):]] = arr
            elif name in ("normal", "depth", "segmentation", "position", "mask"):
                setattr(ms, name, arr)
        return ms


DEFAULT_CHANNELS = ("normal", "depth", "mask")


@dataclass
class Coverage:
    """Frozen pixel-to-triangle assignment from a forward rasterization."""

    face: np.ndarray   # (H,W) face id, -1 = background
    bary: np.ndarray   # (H,W,3)
    pix: np.ndarray    # (P,2) covered pixel (row, col)
    pix_face: np.ndarray
    pix_bary: np.ndarray
    pix_verts: np.ndarray  # (P,3) vertex ids of the covering triangle


def _rasterize(verts, faces, camera):
    coords, depth = camera.project(verts)
    if faces.shape[0]:
        fd = depth[faces]
        keep = ~np.all(fd <= 0.0, axis=1)  # cull faces fully behind the camera
        kept_faces = faces[keep]
        kept_ids = np.nonzero(keep)[0]
    else:
        kept_faces = faces
        kept_ids = np.zeros(0, dtype=np.int64)
    fid, bary = _kernels.raster_fill(coords, depth, kept_faces, camera.img_h, camera.img_w)
    covered = fid >= 0
    fid_global = np.full_like(fid, -1)
    if kept_ids.size:
        fid_global[covered] = kept_ids[fid[covered]]
    rows, cols = np.nonzero(covered)
    pix = np.stack([rows, cols], axis=1)
    pix_face = fid_global[rows, cols]
    pix_bary = bary[rows, cols]
    pix_verts = faces[pix_face] if pix_face.size else np.zeros((0, 3), dtype=np.int64)
    return Coverage(fid_global, bary, pix, pix_face, pix_bary, pix_verts), coords, depth


def _interp(cov: Coverage, per_vertex):
    """Barycentric interpolation of per-vertex values at covered pixels."""
    vals = per_vertex[cov.pix_verts]              # (P,3,C) or (P,3)
    if vals.ndim == 2:
        return np.einsum("pk,pk->p", cov.pix_bary, vals)
    return np.einsum("pk,pkc->pc", cov.pix_bary, vals)


def render_maps(mesh: Mesh, camera: OrthoCamera, channels=DEFAULT_CHANNELS,
                seg_classes: int = None) -> MapStack:
    """Z-buffered pixel-center rasterization with barycentric interpolation.

    Segmentation needs a per-vertex "label" attribute (pixel label via the
    nearest-vertex barycentric argmax); any extra float vertex attribute can
    be rendered by naming it in `channels`.
    """
    cov, _, vdepth = _rasterize(mesh.vertices, mesh.faces, camera)
    H, W = camera.img_h, camera.img_w
    rows, cols = cov.pix[:, 0], cov.pix[:, 1]
    out = MapStack(camera=camera)
    out.mask = (cov.face >= 0).astype(np.float64)
    if "depth" in channels:
        img = np.full((H, W), camera.far)
        img[rows, cols] = _interp(cov, vdepth)
        out.depth = img
    if "normal" in channels:
        vn = mesh.attributes.get("normal")
        if vn is None:
            vn = vertex_normals(mesh)
        ncam = camera.world_to_cam_normal(vn)
        raw = _interp(cov, ncam)
        ln = np.linalg.norm(raw, axis=1)
        ln[ln == 0] = 1.0
        img = np.zeros((H, W, 3))
        img[rows, cols] = raw / ln[:, None]
        out.normal = img
    if "position" in channels:
        img = np.zeros((H, W, 3))
        img[rows, cols] = _interp(cov, mesh.vertices)
        out.position = img
    if "segmentation" in channels:
        labels = mesh.attributes.get("label")
        if labels is None:
            raise RasterError("segmentation channel requires a 'label' vertex attribute")
        S = seg_classes if seg_classes is not None else int(labels.max()) + 1
        vert_pick = cov.pix_verts[np.arange(len(cov.pix_face)), np.argmax(cov.pix_bary, axis=1)]
        lab = labels[vert_pick]
        img = np.zeros((H, W, S))
        valid = (lab >= 0) & (lab < S)
        img[rows[valid], cols[valid], lab[valid]] = 1.0
        out.segmentation = img
    for name in channels:
        if name in ("depth", "normal", "position", "segmentation", "mask"):
            continue
        attr = mesh.attributes.get(name)
        if attr is None:
            raise RasterError(f"channel {name!r} has no matching vertex attribute")
        attr = np.asarray(attr, dtype=np.float64)
        img = np.zeros((H, W) + attr.shape[1:])
        img[rows, cols] = _interp(cov, attr)
        out.extra[name] = img
    return out


def _bary_vertex_backward(cov: Coverage, camera: OrthoCamera, coords2d, per_pixel_dattr,
                          attr_vals, grad_verts):
    """Accumulate the barycentric path of d(pixel)/d(vertex positions).

    per_pixel_dattr: (P,2) = sum_c g_c * (attr_1c - attr_0c, attr_2c - attr_0c)
    already contracted with the upstream gradient; attr_vals unused here.
    """
    p2d = coords2d[cov.pix_verts]                  # (P,3,2)
    e1 = p2d[:, 1] - p2d[:, 0]
    e2 = p2d[:, 2] - p2d[:, 0]
    det = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
    det = np.where(det == 0.0, 1e-300, det)
    # A^-1 rows for b12 = A^-1 (q - p0), A columns = (e1, e2)
    inv00 = e2[:, 1] / det
    inv01 = -e2[:, 0] / det
    inv10 = -e1[:, 1] / det
    inv11 = e1[:, 0] / det
    # row vector r = per_pixel_dattr @ A^-1  -> (P,2)
    r0 = per_pixel_dattr[:, 0] * inv00 + per_pixel_dattr[:, 1] * inv10
    r1 = per_pixel_dattr[:, 0] * inv01 + per_pixel_dattr[:, 1] * inv11
    jx, jy, _ = camera.projection_jacobian()
    for k in range(3):
        scale = -cov.pix_bary[:, k]
        gpix = np.stack([scale * r0, scale * r1], axis=1)   # d/dp_k in raster coords
        gworld = gpix[:, 0:1] * jx[None, :] + gpix[:, 1:2] * jy[None, :]
        np.add.at(grad_verts, cov.pix_verts[:, k], gworld)


def render_differentiable(verts_t: Tensor, faces, camera: OrthoCamera,
                          channels=DEFAULT_CHANNELS, normals_t: Tensor = None):
    """Differentiable render of (verts, faces): returns ({channel: Tensor},
    Coverage). Forward values equal render_maps on the same inputs; the
    backward pass reaches verts (and vertex normals when supplied) through
    the frozen-coverage barycentric interpolation."""
    faces = np.asarray(faces, dtype=np.int64)
    cov, coords2d, vdepth = _rasterize(verts_t.data, faces, camera)
    H, W = camera.img_h, camera.img_w
    rows, cols = cov.pix[:, 0], cov.pix[:, 1]
    jx, jy, jd = camera.projection_jacobian()
    out = {"mask": Tensor((cov.face >= 0).astype(np.float64))}

    if "depth" in channels:
        pix_depth = _interp(cov, vdepth)
        img = np.full((H, W), camera.far)
        img[rows, cols] = pix_depth

        def vjp_depth(g):
            gp = g[rows, cols]
            grad = np.zeros_like(verts_t.data)
            # attribute path: d depth_k / d v_k = jd
            for k in range(3):
                np.add.at(grad, cov.pix_verts[:, k],
                          (gp * cov.pix_bary[:, k])[:, None] * jd[None, :])
            dvals = vdepth[cov.pix_verts]
            dattr = np.stack([gp * (dvals[:, 1] - dvals[:, 0]),
                              gp * (dvals[:, 2] - dvals[:, 0])], axis=1)
            _bary_vertex_backward(cov, camera, coords2d, dattr, dvals, grad)
            return (grad,)

        out["depth"] = custom_op(img, (verts_t,), vjp_depth, name="raster_depth")

    if "position" in channels:
        pix_pos = _interp(cov, verts_t.data)
        img = np.zeros((H, W, 3))
        img[rows, cols] = pix_pos

        def vjp_pos(g):
            gp = g[rows, cols]                     # (P,3)
            grad = np.zeros_like(verts_t.data)
            for k in range(3):
                np.add.at(grad, cov.pix_verts[:, k], gp * cov.pix_bary[:, k][:, None])
            vals = verts_t.data[cov.pix_verts]     # (P,3,3)
            dattr = np.stack([np.einsum("pc,pc->p", gp, vals[:, 1] - vals[:, 0]),
                              np.einsum("pc,pc->p", gp, vals[:, 2] - vals[:, 0])], axis=1)
            _bary_vertex_backward(cov, camera, coords2d, dattr, vals, grad)
            return (grad,)

        out["position"] = custom_op(img, (verts_t,), vjp_pos, name="raster_position")

    if "normal" in channels:
        if normals_t is None:
            raise RasterError("differentiable normal channel requires normals_t")
        M = np.stack([camera.right, camera.up, camera.forward])
        ncam = normals_t.data @ M.T
        raw = _interp(cov, ncam)                   # (P,3) pre-normalization
        ln = np.linalg.norm(raw, axis=1)
        ln = np.where(ln == 0, 1.0, ln)
        unit = raw / ln[:, None]
        img = np.zeros((H, W, 3))
        img[rows, cols] = unit

        def vjp_normal(g):
            gp = g[rows, cols]
            # through normalization: dy = (I - nn^T)/|raw| g
            gy = (gp - unit * np.einsum("pc,pc->p", unit, gp)[:, None]) / ln[:, None]
            grad_n = np.zeros_like(normals_t.data)
            gy_world = gy @ M                      # back to world normal basis
            for k in range(3):
                np.add.at(grad_n, cov.pix_verts[:, k], gy_world * cov.pix_bary[:, k][:, None])
            grad_v = None
            if verts_t.requires_grad:
                vals = ncam[cov.pix_verts]
                dattr = np.stack([np.einsum("pc,pc->p", gy, vals[:, 1] - vals[:, 0]),
                                  np.einsum("pc,pc->p", gy, vals[:, 2] - vals[:, 0])], axis=1)
                grad_v = np.zeros_like(verts_t.data)
                _bary_vertex_backward(cov, camera, coords2d, dattr, vals, grad_v)
            return (grad_v, grad_n)

        out["normal"] = custom_op(img, (verts_t, normals_t), vjp_normal, name="raster_normal")

    return out, cov


def vertex_normals_t(verts_t: Tensor, faces) -> Tensor:
    """Differentiable area-weighted unit vertex normals."""
    faces = np.asarray(faces, dtype=np.int64)
    v = verts_t.data
    tri = v[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    fn = np.cross(e1, e2)
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    ln = np.linalg.norm(acc, axis=1)
    safe = np.where(ln == 0, 1.0, ln)
    unit = acc / safe[:, None]

    def vjp(g):
        gacc = (g - unit * np.einsum("vc,vc->v", unit, g)[:, None]) / safe[:, None]
        gacc[ln == 0] = 0.0
        gf = gacc[faces[:, 0]] + gacc[faces[:, 1]] + gacc[faces[:, 2]]
        # d cross(e1,e2) paths: grad_e1 = e2 x gf? careful: d(e1 x e2)^T gf
        ge1 = np.cross(e2, gf)
        ge2 = np.cross(gf, e1)
        grad = np.zeros_like(v)
        np.add.at(grad, faces[:, 0], -ge1 - ge2)
        np.add.at(grad, faces[:, 1], ge1)
        np.add.at(grad, faces[:, 2], ge2)
        return (grad,)

    return custom_op(unit, (verts_t,), vjp, name="vertex_normals")


def back_project_labels(seg_image, sheet: SurfaceSheet, camera: OrthoCamera) -> SurfaceSheet:
    """Assign each sheet vertex the label of the pixel its projection falls
    in; out-of-bounds vertices get the unknown label."""
    seg_image = np.asarray(seg_image)
    if seg_image.ndim == 3:
        labels_img = np.argmax(seg_image, axis=2)
        empty = seg_image.sum(axis=2) == 0
        labels_img = np.where(empty, UNKNOWN_LABEL, labels_img)
    else:
        labels_img = seg_image.astype(np.int64)
    coords, _ = camera.project(sheet.mesh.vertices)
    px = np.floor(coords[:, 0]).astype(np.int64)
    py = np.floor(coords[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < camera.img_w) & (py >= 0) & (py < camera.img_h)
    labels = np.full(sheet.mesh.num_vertices, UNKNOWN_LABEL, dtype=np.int64)
    labels[inside] = labels_img[py[inside], px[inside]]
    attrs = dict(sheet.mesh.attributes)
    attrs["label"] = labels
    return SurfaceSheet(Mesh(sheet.mesh.vertices, sheet.mesh.faces, attrs),
                        sheet.view, sheet.frame_index)


def lift_sheets_from_depth(scan: Mesh, cameras, frame_index=0, seg_classes=None,
                           jump_factor=4.0, extra_channels=()):
    """Build front/back pixel-grid surface sheets from rendered depth maps.

    Per view: vertices at covered pixels' world positions, 4-connected quads
    split into triangles, faces dropped across depth jumps larger than
    jump_factor * pixel footprint. Rendered normals (world space), labels and
    any extra channels ride along as vertex attributes.
    """
    sheets = []
    for camera in cameras:
        channels = ["depth", "normal", "position", "mask"]
        if "label" in scan.attributes:
            channels.append("segmentation")
        channels += list(extra_channels)
        maps = render_maps(scan, camera, tuple(channels), seg_classes=seg_classes)
        mask = maps.mask > 0
        if not mask.any():
            raise RasterError(f"scan not visible in {camera.view} view")
        H, W = mask.shape
        vid = np.full((H, W), -1, dtype=np.int64)
        rows, cols = np.nonzero(mask)
        vid[rows, cols] = np.arange(rows.shape[0])
        verts = maps.position[rows, cols]
        attrs = {"normal": camera.cam_to_world_normal(maps.normal[rows, cols])}
        if maps.segmentation is not None:
            lab = np.argmax(maps.segmentation[rows, cols], axis=1)
            covered_any = maps.segmentation[rows, cols].sum(axis=1) > 0
            attrs["label"] = np.where(covered_any, lab, UNKNOWN_LABEL)
        for name in extra_channels:
            attrs[name] = maps.extra[name][rows, cols]

        jump = jump_factor * camera.pixel_footprint
        d = maps.depth
        faces = []
        ok = lambda a, b: abs(d[a] - d[b]) <= jump
        for i in range(H - 1):
            for j in range(W - 1):
                a, b, c, e = (i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)
                if mask[a] and mask[b] and mask[c] and ok(a, b) and ok(a, c) and ok(b, c):
                    faces.append([vid[a], vid[c], vid[b]])
                if mask[b] and mask[c] and mask[e] and ok(b, c) and ok(b, e) and ok(c, e):
                    faces.append([vid[b], vid[c], vid[e]])
        sheets.append(SurfaceSheet(Mesh(verts, faces, attrs), camera.view, frame_index))
    return tuple(sheets)


def save_map_png(arr, path):
    """8-bit preview of a map image (authoritative data lives in containers)."""
    from PIL import Image

    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        img = ((np.clip(arr, -1, 1) * 0.5 + 0.5) * 255).astype(np.uint8)
    else:
        if arr.ndim == 3:
            arr = arr.argmax(axis=2) / max(1, arr.shape[2] - 1)
        lo, hi = float(arr.min()), float(arr.max())
        span = hi - lo if hi > lo else 1.0
        img = ((arr - lo) / span * 255).astype(np.uint8)
    Image.fromarray(img).save(path)
