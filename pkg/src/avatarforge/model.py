"""Universal clothed-subject model: per-frame encoders, multi-frame bi-plane
aggregation, and the geometry / skinning / displacement decoders.

Identity is fused into a front/back bi-plane feature; grid vertices and
canonical vertices sample it by orthographic projection. The geometry head
predicts residual SDF on top of the template SDF (warm start), so a
zero-initialized final layer reproduces the template surface.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    BatchNormState, ParamStore, Tensor, batchnorm, concat, conv2d,
    grid_sample, linear, mean_over_set, relu, resize_bilinear, softmax,
)
from .raster import OrthoCamera, render_differentiable, render_maps, vertex_normals_t
from .rig import SkinWeights
from .tetgrid import TetGrid, extract_surface_t
from .mesh import Mesh

PAPER_PLANE_CHANNELS = 96
_PAPER_DETAIL = (64, 96, 96, 96, 96)
_PAPER_CONTEXT = (128, 128, 96)
_PAPER_CONTEXT_BACKBONE = 256
_PAPER_FUSE = (256, 128, 96)
_PAPER_DECODER_HIDDEN = (64, 64, 64, 64)


class ModelError(ValueError):
    pass


def _scaled(values, channels):
    s = channels / PAPER_PLANE_CHANNELS
    return tuple(max(8, int(round(v * s))) for v in values)


@dataclass
class ModelConfig:
    """Architecture and camera configuration.

    Channel lists default to the full-scale lists scaled by channels/96
    (minimum 8); the common feature resolution is image_size // 2 and the
    bi-plane lives at full image resolution.
    """

    channels: int = 16              # per-plane feature channels
    seg_classes: int = 8
    frames: int = 3                 # reference frames aggregated per subject
    image_size: int = 128
    window: float = 2.0             # orthographic window (meters, square)
    center: tuple = (0.0, 0.9, 0.0)
    camera_distance: float = 2.0
    skinning_out: int = None        # >= J; extra logits ignored (default J)
    positional_encoding: bool = False
    displacement_max: float = 0.05  # meters, smooth norm clamp
    detail_channels: tuple = None
    context_channels: tuple = None
    context_backbone: int = None
    fuse_channels: tuple = None
    decoder_hidden: tuple = None

    def __post_init__(self):
        if self.channels < 1 or self.frames < 1:
            raise ModelError("channels and frames must be positive")
        if self.detail_channels is None:
            self.detail_channels = _scaled(_PAPER_DETAIL, self.channels)[:-1] + (self.channels,)
        if self.context_channels is None:
            self.context_channels = _scaled(_PAPER_CONTEXT, self.channels)[:-1] + (self.channels,)
        if self.context_backbone is None:
            self.context_backbone = _scaled((_PAPER_CONTEXT_BACKBONE,), self.channels)[0]
        if self.fuse_channels is None:
            self.fuse_channels = _scaled(_PAPER_FUSE, self.channels)[:-1] + (self.channels,)
        if self.decoder_hidden is None:
            self.decoder_hidden = _scaled(_PAPER_DECODER_HIDDEN, self.channels)
        self.detail_channels = tuple(self.detail_channels)
        self.context_channels = tuple(self.context_channels)
        self.fuse_channels = tuple(self.fuse_channels)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.center = tuple(self.center)

    @property
    def feature_size(self) -> int:
        return self.image_size // 2

    @property
    def input_channels(self) -> int:
        return 3 + self.seg_classes + (2 if self.positional_encoding else 0)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def cameras(self):
        return tuple(
            OrthoCamera.rig(view, center=self.center, width=self.window,
                            height=self.window, img=self.image_size,
                            distance=self.camera_distance)
            for view in ("front", "back"))


@dataclass
class BiPlane:
    """Front/back feature planes (2, C, H, W) and the cameras that sample
    them (front channels first)."""

    planes: Tensor
    cameras: tuple

    @property
    def channels(self):
        return self.planes.shape[1]


@dataclass
class CanonicalFrame:
    """Canonicalized inputs for one reference frame: per view, the rendered
    canonical normal (H,W,3) and one-hot segmentation (H,W,S) images."""

    frame_id: int
    maps: dict  # view -> (normal, segmentation)


@dataclass
class CanonicalAvatar:
    mesh: Mesh
    weights: SkinWeights
    biplane: np.ndarray
    frame_ids: tuple = ()
    config_hash: str = ""


class _ConvBNRelu:
    def __init__(self, model, name, cin, cout, stride=1):
        rng = model._rng
        w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        self.w = model.store.add(f"{name}/w", w)
        self.b = model.store.add(f"{name}/b", np.zeros(cout))
        self.gamma = model.store.add(f"{name}/bn_gamma", np.ones(cout))
        self.beta = model.store.add(f"{name}/bn_beta", np.zeros(cout))
        self.state = model._bn(f"{name}/bn", cout)
        self.stride = stride

    def __call__(self, x, train):
        y = conv2d(x, self.w, self.b, stride=self.stride,
                   padding="same" if self.stride == 1 else 1)
        return relu(batchnorm(y, self.gamma, self.beta, self.state, train))


class _PlaneEncoder:
    """Shared per-view encoder: detail branch (stride-3 first conv), context
    branch (3x stride-2 backbone + upsamples), fused to one plane per view."""

    def __init__(self, model, name, cin):
        cfg = model.cfg
        self.cfg = cfg
        chans = cfg.detail_channels
        self.detail = []
        prev = cin
        for i, c in enumerate(chans):
            self.detail.append(_ConvBNRelu(model, f"{name}/detail{i}", prev, c,
                                           stride=3 if i == 0 else 1))
            prev = c
        bb = cfg.context_backbone
        self.backbone = []
        prev = cin
        for i in range(3):
            self.backbone.append(_ConvBNRelu(model, f"{name}/backbone{i}", prev, bb, stride=2))
            prev = bb
        self.context = []
        for i, c in enumerate(cfg.context_channels):
            self.context.append(_ConvBNRelu(model, f"{name}/context{i}", prev, c))
            prev = c
        self.fuse = []
        prev = cfg.detail_channels[-1] + cfg.context_channels[-1]
        for i, c in enumerate(cfg.fuse_channels):
            self.fuse.append(_ConvBNRelu(model, f"{name}/fuse{i}", prev, c))
            prev = c

    def features(self, x, train):
        """x: (views, Cin, H, W) -> (detail, context) at the feature size."""
        fs = self.cfg.feature_size
        d = x
        for blk in self.detail:
            d = blk(d, train)
        d = resize_bilinear(d, fs, fs)
        c = x
        for blk in self.backbone:
            c = blk(c, train)
        c = self.context[0](c, train)
        c = resize_bilinear(c, c.shape[2] * 2, c.shape[3] * 2)
        c = self.context[1](c, train)
        c = resize_bilinear(c, fs, fs)
        for blk in self.context[2:]:
            c = blk(c, train)
        return d, c

    def plane(self, x, train):
        """x: (views, Cin, H, W) -> per-view planes (views, C, H, W)."""
        d, c = self.features(x, train)
        y = concat([d, c], axis=1)
        for blk in self.fuse:
            y = blk(y, train)
        return resize_bilinear(y, self.cfg.image_size, self.cfg.image_size)


class _MLPDecoder:
    """Linear+BN+ReLU hidden stack with a plain final layer; vertices are
    the batch dimension. zero_final gives an exactly-zero initial output."""

    def __init__(self, model, name, cin, hidden, cout, zero_final):
        rng = model._rng
        self.layers = []
        prev = cin
        for i, h in enumerate(hidden):
            w = model.store.add(f"{name}/l{i}/w",
                                rng.standard_normal((prev, h)) * np.sqrt(2.0 / prev))
            b = model.store.add(f"{name}/l{i}/b", np.zeros(h))
            gamma = model.store.add(f"{name}/l{i}/bn_gamma", np.ones(h))
            beta = model.store.add(f"{name}/l{i}/bn_beta", np.zeros(h))
            state = model._bn(f"{name}/l{i}/bn", h)
            self.layers.append((w, b, gamma, beta, state))
            prev = h
        if zero_final:
            w_out = np.zeros((prev, cout))
        else:
            w_out = rng.standard_normal((prev, cout)) * np.sqrt(1.0 / prev)
        self.w_out = model.store.add(f"{name}/out/w", w_out)
        self.b_out = model.store.add(f"{name}/out/b", np.zeros(cout))

    def __call__(self, x, train):
        for w, b, gamma, beta, state in self.layers:
            x = relu(batchnorm(linear(x, w, b), gamma, beta, state, train))
        return linear(x, self.w_out, self.b_out)


def project_to_grid_t(points_t: Tensor, camera: OrthoCamera) -> Tensor:
    """Differentiable orthographic projection to grid_sample pixel coords."""
    jx = camera.right * (camera.img_w / camera.width)
    jy = -camera.up * (camera.img_h / camera.height)
    M = np.stack([jx, jy], axis=1)            # (3,2)
    k = np.array([-camera.center @ jx + 0.5 * camera.img_w - 0.5,
                  -camera.center @ jy + 0.5 * camera.img_h - 0.5])
    return points_t @ Tensor(M) + Tensor(k)


class UniversalModel:
    """Encoders + decoders over a ParamStore; all state needed to reproduce
    an avatar lives in (config, checkpoint, grid)."""

    def __init__(self, cfg: ModelConfig, joint_count: int, seed: int = 0):
        self.cfg = cfg
        self.joints = int(joint_count)
        self.skin_out = cfg.skinning_out or self.joints
        if self.skin_out < self.joints:
            raise ModelError("skinning_out must be >= the skeleton joint count")
        self.store = ParamStore()
        self.bn_states: dict[str, BatchNormState] = {}
        self._rng = np.random.default_rng(seed)
        C = cfg.channels
        self.encoder = _PlaneEncoder(self, "encoder", cfg.input_channels)
        self.pose_encoder = _PlaneEncoder(self, "pose_encoder", 6)
        self.geometry = _MLPDecoder(self, "geometry", 2 * C + 3, cfg.decoder_hidden, 4,
                                    zero_final=True)
        self.skinning = _MLPDecoder(self, "skinning", 2 * C + 3, cfg.decoder_hidden,
                                    self.skin_out, zero_final=True)
        self.displacement = _MLPDecoder(self, "displacement", 2 * C, cfg.decoder_hidden, 3,
                                        zero_final=True)
        self.grid: TetGrid = None
        self.template_sdf: np.ndarray = None
        self._rng = None  # init-time only; nothing after construction draws

    # -- plumbing -------------------------------------------------------------
    def _bn(self, name, channels):
        state = BatchNormState(channels)
        self.bn_states[name] = state
        return state

    def parameter_groups(self):
        names = self.store.names()
        return {
            "encoder": [n for n in names if n.startswith("encoder/")],
            "geometry": [n for n in names if n.startswith("geometry/")],
            "skinning": [n for n in names if n.startswith("skinning/")],
            "pose_encoder": [n for n in names if n.startswith("pose_encoder/")],
            "displacement": [n for n in names if n.startswith("displacement/")],
        }

    def canonical_group(self):
        g = self.parameter_groups()
        return g["encoder"] + g["geometry"]

    def attach_grid(self, grid: TetGrid, template_sdf):
        template_sdf = np.asarray(template_sdf, dtype=np.float64)
        if template_sdf.shape != (grid.num_verts,):
            raise ModelError("template sdf does not match the grid")
        self.grid = grid
        self.template_sdf = template_sdf

    def save(self, path, extra_meta=None):
        for name, st in self.bn_states.items():
            self.store.buffers[f"{name}/mean"] = st.mean
            self.store.buffers[f"{name}/var"] = st.var
            self.store.buffers[f"{name}/count"] = np.array([float(st.count)])
        meta = {"config": asdict(self.cfg), "joints": self.joints}
        if extra_meta:
            meta.update(extra_meta)
        self.store.save(path, meta)

    def load(self, path):
        meta = self.store.load(path)
        for name, st in self.bn_states.items():
            if f"{name}/mean" in self.store.buffers:
                st.mean = self.store.buffers[f"{name}/mean"]
                st.var = self.store.buffers[f"{name}/var"]
                st.count = int(self.store.buffers[f"{name}/count"][0])
        return meta

    # -- encoding -------------------------------------------------------------
    def _frame_input(self, frame: CanonicalFrame) -> Tensor:
        cfg = self.cfg
        views = []
        for view in ("front", "back"):
            if view not in frame.maps:
                raise ModelError(f"frame {frame.frame_id} missing {view} view")
            normal, seg = frame.maps[view]
            if normal.shape != (cfg.image_size, cfg.image_size, 3):
                raise ModelError(f"normal map shape {normal.shape} != image size")
            if seg.shape != (cfg.image_size, cfg.image_size, cfg.seg_classes):
                raise ModelError(f"segmentation shape {seg.shape} incompatible")
            x = np.concatenate([normal, seg], axis=2).transpose(2, 0, 1)
            if cfg.positional_encoding:
                n = cfg.image_size
                ys, xs = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n),
                                     indexing="ij")
                x = np.concatenate([x, ys[None], xs[None]], axis=0)
            views.append(x[None])
        return Tensor(np.concatenate(views, axis=0))

    def encode_frame(self, frame: CanonicalFrame, train=False):
        """Per-view detail/context features, each (views, C, feat, feat)."""
        return self.encoder.features(self._frame_input(frame), train)

    def frame_plane(self, frame: CanonicalFrame, train=False) -> Tensor:
        return self.encoder.plane(self._frame_input(frame), train)

    def aggregate_biplane(self, frames, train=False) -> BiPlane:
        """Mean of per-frame fused planes (sorted by frame id, so frame order
        never changes the result bitwise); duplicate frames are exact."""
        if not frames:
            raise ModelError("aggregate_biplane needs at least one frame")
        frames = sorted(frames, key=lambda f: f.frame_id)
        planes = [self.frame_plane(f, train) for f in frames]
        return BiPlane(mean_over_set(planes), self.cfg.cameras())

    def sample_biplane(self, biplane: BiPlane, points_t: Tensor) -> Tensor:
        """(N,3) points -> (N,2C) sampled features, front then back."""
        C = biplane.channels
        feats = []
        for i, camera in enumerate(biplane.cameras):
            plane = biplane.planes.gather_rows(np.array([i])).reshape(
                C, self.cfg.image_size, self.cfg.image_size)
            coords = project_to_grid_t(points_t, camera)
            feats.append(grid_sample(plane, coords))
        return concat(feats, axis=1)

    # -- decoding -------------------------------------------------------------
    def decode_geometry(self, biplane: BiPlane, train=False):
        """Per grid vertex: residual SDF on top of the template SDF, and a
        displacement bounded strictly inside half a cell (tanh saturation)."""
        if self.grid is None:
            raise ModelError("no grid attached")
        pts = Tensor(self.grid.verts)
        phi = self.sample_biplane(biplane, pts)
        x = concat([phi, pts], axis=1)
        out = self.geometry(x, train)
        sdf = out.slice_cols(0, 1).reshape(self.grid.num_verts) + Tensor(self.template_sdf)
        disp = out.slice_cols(1, 4).tanh() * (0.5 * self.grid.cell_size)
        return sdf, disp

    def extract_canonical(self, biplane: BiPlane, train=False):
        sdf, disp = self.decode_geometry(biplane, train)
        return extract_surface_t(self.grid, sdf, disp)

    def decode_skinning(self, biplane: BiPlane, verts_t: Tensor, train=False) -> Tensor:
        """Softmax weights over the first `joints` logits; rows renormalized
        so they sit exactly on the simplex."""
        phi = self.sample_biplane(biplane, verts_t)
        logits = self.skinning(concat([phi, verts_t], axis=1), train)
        if self.skin_out > self.joints:
            logits = logits.slice_cols(0, self.joints)
        w = softmax(logits, axis=1)
        return w / w.sum(axis=1, keepdims=True)

    def deformation_biplane(self, pose_position_maps: dict, canonical_normals: dict,
                            train=False) -> BiPlane:
        """Pose conditioning: per view, posed-template position map (3) plus
        the rendered canonical-mesh normal image (3), through the pose
        encoder."""
        views = []
        for view in ("front", "back"):
            pos = np.asarray(pose_position_maps[view], dtype=np.float64).transpose(2, 0, 1)
            n = canonical_normals[view]
            nt = n if isinstance(n, Tensor) else Tensor(np.asarray(n, dtype=np.float64))
            nt = nt.transpose((2, 0, 1))
            x = concat([Tensor(pos), nt], axis=0)
            views.append(x.reshape(1, 6, self.cfg.image_size, self.cfg.image_size))
        return BiPlane(self.pose_encoder.plane(concat(views, axis=0), train),
                       self.cfg.cameras())

    def decode_displacement(self, def_biplane: BiPlane, verts_t: Tensor,
                            train=False) -> Tensor:
        """Per-vertex displacement, magnitude smoothly clamped below
        displacement_max."""
        psi = self.sample_biplane(def_biplane, verts_t)
        raw = self.displacement(psi, train)
        m = self.cfg.displacement_max
        r = ((raw * raw).sum(axis=1, keepdims=True) + 1e-24).sqrt()
        scale = (r * (1.0 / m)).tanh() * m / r
        return raw * scale

    # -- full inference ---------------------------------------------------------
    def infer_avatar(self, frames, train=False) -> CanonicalAvatar:
        """encode -> aggregate -> decode geometry -> MT -> decode skinning."""
        biplane = self.aggregate_biplane(frames, train)
        verts_t, mt = self.extract_canonical(biplane, train)
        if verts_t.shape[0] == 0:
            raise ModelError("decoded SDF produced an empty surface")
        weights = self.decode_skinning(biplane, verts_t, train)
        mesh = Mesh(verts_t.data.copy(), mt.mesh.faces.copy(),
                    {"weight": weights.data.copy()})
        return CanonicalAvatar(
            mesh, SkinWeights(weights.data), biplane.planes.data.copy(),
            tuple(sorted(f.frame_id for f in frames)), self.cfg.config_hash())

    # -- rendering helpers -------------------------------------------------------
    def render_canonical_normals(self, verts_t: Tensor, faces, train=False):
        """Differentiable canonical normal renders for the deformation path."""
        normals = vertex_normals_t(verts_t, faces)
        out = {}
        for camera in self.cfg.cameras():
            maps, _ = render_differentiable(verts_t, faces, camera, ("normal",), normals)
            out[camera.view] = maps["normal"]
        return out
