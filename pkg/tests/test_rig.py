import numpy as np
import pytest

from avatarforge.rig import (
    JointTransforms, Pose, RigError, Skeleton, SkinWeights,
    forward_kinematics, lbs_pose, lbs_unpose, pose_with_displacement,
    transfer_weights_nearest,
)
from helpers import random_simplex_rows, two_joint_skeleton


def random_pose(rng, J, max_angle=1.5):
    theta = rng.uniform(-max_angle, max_angle, size=(J, 3))
    scales = rng.uniform(0.6, 1.6, size=J)
    return Pose(theta, scales)


def chain_skeleton(rng, J):
    trans = np.zeros((J, 3))
    trans[1:] = rng.uniform(-0.5, 0.5, size=(J - 1, 3))
    return Skeleton(parent=np.arange(J) - 1,
                    local_bind_rot=np.tile(np.eye(3), (J, 1, 1)),
                    local_bind_trans=trans)


def test_rest_pose_gives_identity_transforms():
    skel = two_joint_skeleton()
    T = forward_kinematics(skel, Pose.rest(2))
    assert np.allclose(T.T, np.tile(np.eye(4), (2, 1, 1)), atol=1e-15)


def test_fk_rotated_root_moves_child():
    skel = two_joint_skeleton(offset=(0, 1, 0))
    pose = Pose(theta=[[0, 0, np.pi / 2], [0, 0, 0]], bone_scales=[1, 1])
    G = skel._globals(pose.theta, pose.bone_scales)
    assert np.allclose(G[1, :3, 3], [-1, 0, 0], atol=1e-12)


def test_fk_bone_scales_double_offsets():
    skel = two_joint_skeleton(offset=(0, 1, 0))
    pose = Pose(theta=np.zeros((2, 3)), bone_scales=[2, 2])
    G = skel._globals(pose.theta, pose.bone_scales)
    assert np.allclose(G[1, :3, 3], [0, 2, 0])
    T = forward_kinematics(skel, pose)
    rest_child = skel.rest_joint_positions()[1]
    assert np.allclose(T.T[1, :3, :3] @ rest_child + T.T[1, :3, 3], [0, 2, 0])


def test_fk_dimension_mismatch_and_bad_scale():
    skel = two_joint_skeleton()
    with pytest.raises(RigError):
        forward_kinematics(skel, Pose.rest(3))
    with pytest.raises(RigError):
        Pose(np.zeros((2, 3)), [1.0, 0.0])


def test_fk_deterministic_bitwise():
    rng = np.random.default_rng(11)
    skel = chain_skeleton(rng, 6)
    pose = random_pose(rng, 6)
    T1 = forward_kinematics(skel, pose).T
    T2 = forward_kinematics(skel, pose).T
    assert np.array_equal(T1, T2)


def test_lbs_identity_and_one_hot():
    rng = np.random.default_rng(0)
    verts = rng.standard_normal((50, 3))
    T = JointTransforms.identity(3)
    W = np.zeros((50, 3))
    W[:, 1] = 1.0
    w = SkinWeights(W)
    assert np.allclose(lbs_pose(verts, w, T), verts)

    Tj = np.tile(np.eye(4), (3, 1, 1))
    Tj[1, :3, 3] = (0.3, -0.2, 0.9)
    T = JointTransforms(Tj)
    assert np.allclose(lbs_pose(verts, w, T), verts + Tj[1, :3, 3])


def test_lbs_blend_of_translations():
    verts = np.zeros((1, 3))
    Tj = np.tile(np.eye(4), (2, 1, 1))
    Tj[0, 0, 3] = 1.0
    w = SkinWeights([[0.5, 0.5]])
    out = lbs_pose(verts, w, JointTransforms(Tj))
    assert np.allclose(out, [[0.5, 0, 0]])


def test_lbs_rejects_off_simplex_rows():
    with pytest.raises(RigError):
        SkinWeights([[0.5, 0.6]])
    with pytest.raises(RigError):
        SkinWeights([[1.2, -0.2]])


def test_unpose_inverts_one_hot_rotation():
    rng = np.random.default_rng(3)
    verts = rng.standard_normal((10, 3))
    skel = two_joint_skeleton()
    pose = Pose(theta=[[0.4, -0.2, 0.9], [0, 0, 0]], bone_scales=[1, 1])
    T = forward_kinematics(skel, pose)
    W = np.zeros((10, 2))
    W[:, 0] = 1.0
    w = SkinWeights(W)
    posed = lbs_pose(verts, w, T)
    Tinv = np.linalg.inv(T.T[0])
    expect = (Tinv[:3, :3] @ posed.T).T + Tinv[:3, 3]
    assert np.allclose(lbs_unpose(posed, w, T), expect, atol=1e-12)


def test_round_trip_1000_random_triples():
    rng = np.random.default_rng(42)
    J = 7
    skel = chain_skeleton(rng, J)
    for _ in range(5):
        pose = random_pose(rng, J)
        T = forward_kinematics(skel, pose)
        verts = rng.uniform(-1, 1, size=(200, 3))
        w = SkinWeights(random_simplex_rows(rng, 200, J))
        posed = lbs_pose(verts, w, T)
        back = lbs_unpose(posed, w, T)
        rel = np.abs(back - verts).max() / max(1.0, np.abs(verts).max())
        assert rel <= 1e-9


def test_unpose_reports_singular_vertex():
    Tj = np.tile(np.eye(4), (2, 1, 1))
    Tj[0, :3, :3] = np.diag([1.0, 1.0, -1.0])  # blend with identity -> singular
    w = SkinWeights([[0.5, 0.5]])
    with pytest.raises(RigError, match="vertex 0"):
        lbs_unpose(np.zeros((1, 3)), w, JointTransforms(Tj))


def test_one_hot_rigidity_preserves_distances():
    rng = np.random.default_rng(5)
    J = 4
    skel = chain_skeleton(rng, J)
    pose = random_pose(rng, J)
    pose.bone_scales[:] = 1.0
    T = forward_kinematics(skel, pose)
    verts = rng.standard_normal((20, 3))
    W = np.zeros((20, J))
    W[:, 2] = 1.0
    posed = lbs_pose(verts, SkinWeights(W), T)
    d0 = np.linalg.norm(verts[:, None] - verts[None, :], axis=-1)
    d1 = np.linalg.norm(posed[:, None] - posed[None, :], axis=-1)
    assert np.abs(d0 - d1).max() <= 1e-9


def test_transfer_weights_nearest():
    ref = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    rw = SkinWeights(np.eye(2))
    out = transfer_weights_nearest(np.array([[0.4, 0, 0]]), ref, rw)
    assert np.allclose(out.W, [[1, 0]])
    # identity transfer
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((30, 3))
    w = SkinWeights(random_simplex_rows(rng, 30, 3))
    again = transfer_weights_nearest(pts, pts, w)
    assert np.array_equal(again.W, w.W)
    # single reference vertex
    single = transfer_weights_nearest(pts, ref[:1], SkinWeights([[0.25, 0.75]]))
    assert np.allclose(single.W, np.tile([[0.25, 0.75]], (30, 1)))
    # tie at equal distance goes to lowest index
    tie = transfer_weights_nearest(np.array([[0.5, 0, 0]]), ref, rw)
    assert np.allclose(tie.W, [[1, 0]])
    with pytest.raises(RigError):
        transfer_weights_nearest(pts, np.zeros((0, 3)), rw)


def test_pose_with_displacement_matches_composition():
    rng = np.random.default_rng(21)
    J = 5
    skel = chain_skeleton(rng, J)
    pose = random_pose(rng, J)
    T = forward_kinematics(skel, pose)
    verts = rng.standard_normal((40, 3))
    dv = 0.05 * rng.standard_normal((40, 3))
    w = SkinWeights(random_simplex_rows(rng, 40, J))
    assert np.array_equal(pose_with_displacement(verts, dv, w, T),
                          lbs_pose(verts + dv, w, T))
    assert np.array_equal(pose_with_displacement(verts, np.zeros_like(dv), w, T),
                          lbs_pose(verts, w, T))
    ident = JointTransforms.identity(J)
    shift = np.tile([[0, 0, 0.1]], (40, 1))
    assert np.allclose(pose_with_displacement(verts, shift, w, ident), verts + shift)


def test_skeleton_json_round_trip():
    rng = np.random.default_rng(8)
    skel = chain_skeleton(rng, 5)
    back = Skeleton.from_json(skel.to_json())
    assert np.array_equal(back.parent, skel.parent)
    assert np.allclose(back.local_bind_trans, skel.local_bind_trans)
    assert np.allclose(back.local_bind_rot, skel.local_bind_rot, atol=1e-12)
    pose = random_pose(rng, 5)
    assert np.allclose(Pose.from_json(pose.to_json()).theta, pose.theta)
