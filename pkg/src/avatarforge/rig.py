"""Skeleton representation, forward kinematics with bone scales, and
forward/inverse linear blend skinning.

All skinning math is double precision. Transforms are 4x4 homogeneous
matrices mapping canonical (rest) space to posed space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

WEIGHT_ROW_TOL = 1e-6
SINGULAR_DET_TOL = 1e-12


class RigError(ValueError):
    pass


def axis_angle_to_matrix(aa):
    """Rodrigues' formula for a batch (J,3) of axis-angle vectors -> (J,3,3)."""
    aa = np.asarray(aa, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=1)
    out = np.tile(np.eye(3), (aa.shape[0], 1, 1))
    nz = theta > 0.0
    if np.any(nz):
        k = aa[nz] / theta[nz, None]
        K = np.zeros((k.shape[0], 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
        K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
        K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
        s = np.sin(theta[nz])[:, None, None]
        c = np.cos(theta[nz])[:, None, None]
        out[nz] = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    return out[0] if single else out


def quat_to_matrix(q):
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    i = int(np.argmax(np.diag(R)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2
    q = np.empty(4)
    q[0] = (R[k, j] - R[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (R[j, i] + R[i, j]) / s
    q[1 + k] = (R[k, i] + R[i, k]) / s
    return q


@dataclass
class Skeleton:
    """Rigged template hierarchy.

    parent[j] < j (topological order); the unique root has parent -1.
    local_bind_rot / local_bind_trans give each joint's rigid bind transform
    in its parent's frame.
    """

    parent: np.ndarray            # (J,) int, root = -1
    local_bind_rot: np.ndarray    # (J,3,3)
    local_bind_trans: np.ndarray  # (J,3) meters
    joint_names: list = field(default_factory=list)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.local_bind_rot = np.asarray(self.local_bind_rot, dtype=np.float64)
        self.local_bind_trans = np.asarray(self.local_bind_trans, dtype=np.float64)
        J = self.parent.shape[0]
        if not self.joint_names:
            self.joint_names = [f"joint_{j}" for j in range(J)]
        if np.sum(self.parent < 0) != 1:
            raise RigError("skeleton must have exactly one root")
        if np.any(self.parent >= np.arange(J)):
            raise RigError("parent indices must satisfy parent[j] < j")
        for j in range(J):
            R = self.local_bind_rot[j]
            if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
                raise RigError(f"bind rotation of joint {j} is not orthonormal")

    @property
    def joint_count(self) -> int:
        return self.parent.shape[0]

    def rest_globals(self):
        """Global bind transforms (J,4,4) with theta=0, scales=1."""
        return self._globals(np.zeros((self.joint_count, 3)), np.ones(self.joint_count))

    def _globals(self, theta, scales):
        J = self.joint_count
        rot = axis_angle_to_matrix(theta)
        G = np.empty((J, 4, 4))
        for j in range(J):
            L = np.eye(4)
            L[:3, :3] = self.local_bind_rot[j] @ rot[j]
            L[:3, 3] = scales[j] * self.local_bind_trans[j]
            G[j] = L if self.parent[j] < 0 else G[self.parent[j]] @ L
        return G

    def rest_joint_positions(self):
        return self.rest_globals()[:, :3, 3].copy()

    def to_json(self) -> str:
        joints = []
        for j in range(self.joint_count):
            joints.append(
                {
                    "name": self.joint_names[j],
                    "parent": int(self.parent[j]),
                    "rotation_quat": [float(v) for v in matrix_to_quat(self.local_bind_rot[j])],
                    "translation": [float(v) for v in self.local_bind_trans[j]],
                }
            )
        return json.dumps({"joints": joints}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Skeleton":
        doc = json.loads(text)
        joints = doc["joints"]
        J = len(joints)
        parent = np.empty(J, dtype=np.int64)
        rot = np.empty((J, 3, 3))
        trans = np.empty((J, 3))
        names = []
        for j, jnt in enumerate(joints):
            parent[j] = jnt["parent"]
            rot[j] = quat_to_matrix(jnt["rotation_quat"])
            trans[j] = jnt["translation"]
            names.append(jnt["name"])
        return cls(parent, rot, trans, names)


@dataclass
class Pose:
    """Per-joint axis-angle rotations (radians) and positive bone scales."""

    theta: np.ndarray        # (J,3)
    bone_scales: np.ndarray  # (J,)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.bone_scales = np.asarray(self.bone_scales, dtype=np.float64)
        if not np.all(np.isfinite(self.theta)):
            raise RigError("pose angles must be finite")
        if np.any(self.bone_scales <= 0):
            raise RigError("bone scales must be positive")

    @classmethod
    def rest(cls, J: int) -> "Pose":
        return cls(np.zeros((J, 3)), np.ones(J))

    def to_json(self) -> str:
        return json.dumps({"theta": self.theta.tolist(), "bone_scales": self.bone_scales.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        doc = json.loads(text)
        return cls(np.asarray(doc["theta"]), np.asarray(doc["bone_scales"]))


@dataclass
class JointTransforms:
    """Canonical-to-posed skinning transforms, one 4x4 per joint."""

    T: np.ndarray  # (J,4,4)

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.T.ndim != 3 or self.T.shape[1:] != (4, 4):
            raise RigError("T must be (J,4,4)")
        if not np.all(self.T[:, 3, :] == np.array([0.0, 0.0, 0.0, 1.0])):
            raise RigError("bottom row of each transform must be (0,0,0,1)")

    @classmethod
    def identity(cls, J: int) -> "JointTransforms":
        return cls(np.tile(np.eye(4), (J, 1, 1)))


class SkinWeights:
    """V x J nonnegative weights, each row on the probability simplex."""

    def __init__(self, W):
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2:
            raise RigError("weights must be a 2-D matrix")
        if np.any(W < -WEIGHT_ROW_TOL):
            raise RigError("weights must be nonnegative")
        rowsum = W.sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > WEIGHT_ROW_TOL):
            bad = int(np.argmax(np.abs(rowsum - 1.0)))
            raise RigError(f"weight row {bad} sums to {rowsum[bad]:.8f}, not 1")
        self.W = np.clip(W, 0.0, None)

    @property
    def shape(self):
        return self.W.shape


def forward_kinematics(skel: Skeleton, pose: Pose) -> JointTransforms:
    """Skinning transforms T_j = G_j(pose) @ G_j(rest)^-1.

    G_j composes, root to joint, the bind transform with the pose rotation
    exp(theta_j) about the joint origin; bone_scales[j] multiplies the
    joint's local translation only.
    """
    J = skel.joint_count
    if pose.theta.shape != (J, 3) or pose.bone_scales.shape != (J,):
        raise RigError(f"pose dimensions {pose.theta.shape} do not match skeleton J={J}")
    G = skel._globals(pose.theta, pose.bone_scales)
    G_rest = skel.rest_globals()
    T = np.empty_like(G)
    for j in range(J):
        T[j] = G[j] @ _affine_inverse(G_rest[j])
        T[j, 3, :] = (0.0, 0.0, 0.0, 1.0)
    return JointTransforms(T)


def _affine_inverse(M):
    R = M[:3, :3]
    t = M[:3, 3]
    inv = np.eye(4)
    Ri = np.linalg.inv(R)
    inv[:3, :3] = Ri
    inv[:3, 3] = -Ri @ t
    return inv


def blend_transforms(weights: SkinWeights, transforms: JointTransforms):
    """Per-vertex blended affine matrices sum_j w_j T_j -> (V,4,4)."""
    return np.einsum("vj,jab->vab", weights.W, transforms.T)


def lbs_pose(verts, weights: SkinWeights, transforms: JointTransforms):
    """Forward LBS: each vertex is mapped by its blended joint transform."""
    verts = np.asarray(verts, dtype=np.float64)
    if verts.shape[0] != weights.shape[0]:
        raise RigError("vertex and weight row counts differ")
    if weights.shape[1] != transforms.T.shape[0]:
        raise RigError("weight columns do not match joint count")
    B = blend_transforms(weights, transforms)
    return np.einsum("vab,vb->va", B[:, :3, :3], verts) + B[:, :3, 3]


def lbs_unpose(verts, weights: SkinWeights, transforms: JointTransforms):
    """Inverse LBS: apply the inverse of the blended transform per vertex."""
    verts = np.asarray(verts, dtype=np.float64)
    if verts.shape[0] != weights.shape[0]:
        raise RigError("vertex and weight row counts differ")
    B = blend_transforms(weights, transforms)
    A = B[:, :3, :3]
    det = np.linalg.det(A)
    bad = np.abs(det) < SINGULAR_DET_TOL
    if np.any(bad):
        idx = int(np.nonzero(bad)[0][0])
        raise RigError(f"singular blended transform at vertex {idx} (|det|={abs(det[idx]):.3e})")
    Ainv = np.linalg.inv(A)
    return np.einsum("vab,vb->va", Ainv, verts - B[:, :3, 3])


def blend_condition_numbers(weights: SkinWeights, transforms: JointTransforms):
    """2-norm condition number of each vertex's blended linear part."""
    A = blend_transforms(weights, transforms)[:, :3, :3]
    return np.linalg.cond(A)


def transfer_weights_nearest(query, reference_verts, ref_weights: SkinWeights) -> SkinWeights:
    """Copy each query vertex's weight row from its nearest reference vertex.

    Euclidean nearest via KD-tree; exact distance ties broken by lowest index.
    """
    reference_verts = np.asarray(reference_verts, dtype=np.float64)
    if reference_verts.shape[0] == 0:
        raise RigError("reference mesh is empty")
    query = np.asarray(query, dtype=np.float64)
    tree = cKDTree(reference_verts)
    dist, idx = tree.query(query, k=1)
    # cKDTree tie-breaking is not specified; resolve exact ties to the lowest index.
    ties = tree.query_ball_point(query, dist + 1e-15)
    for i, cands in enumerate(ties):
        if len(cands) > 1:
            d = np.linalg.norm(reference_verts[cands] - query[i], axis=1)
            close = [c for c, dd in zip(cands, d) if dd <= dist[i] + 1e-12]
            if close:
                idx[i] = min(close)
    return SkinWeights(ref_weights.W[idx])


def pose_with_displacement(verts, dverts, weights: SkinWeights, transforms: JointTransforms):
    """LBS of v + dv: the animation path for pose-dependent displacements."""
    verts = np.asarray(verts, dtype=np.float64)
    dverts = np.asarray(dverts, dtype=np.float64)
    if verts.shape != dverts.shape:
        raise RigError("displacement shape must match vertices")
    return lbs_pose(verts + dverts, weights, transforms)


def lbs_pose_t(verts_t, dverts_t, weights_t, transforms: JointTransforms):
    """Differentiable LBS(v + dv, w, T) over autodiff tensors.

    Gradients reach the vertices/displacements through the blended linear
    part and the weights through each joint's individual transform.
    """
    from .nn.tensor import custom_op

    T = transforms.T
    R = T[:, :3, :3]
    tau = T[:, :3, 3]
    W = weights_t.data
    u = verts_t.data + dverts_t.data
    A = np.einsum("vj,jab->vab", W, R)
    trans = W @ tau
    out = np.einsum("vab,vb->va", A, u) + trans

    def vjp(g):
        gu = np.einsum("vab,va->vb", A, g)
        gw = None
        if weights_t.requires_grad:
            per_joint = np.einsum("jab,vb->vja", R, u) + tau[None, :, :]
            gw = np.einsum("vja,va->vj", per_joint, g)
        return gu, gu, gw

    return custom_op(out, (verts_t, dverts_t, weights_t), vjp, name="lbs_pose")
