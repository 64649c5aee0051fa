import math

import numpy as np
import pytest

from poseprior import kinematics as km


@pytest.fixture(scope="module")
def skel():
    return km.load_skeleton()


def chain3():
    # minimal 3-joint chain for hand-computed FK
    return km.Skeleton(
        joint_names=("a", "b", "c"),
        parent=np.array([-1, 0, 1]),
        rest_offset=np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]),
        upper_body=(0, 1, 2),
        tracked=(2, 1, 0),
        limb_joints=(),
    )


def random_axis_angles(rng, n, max_angle=math.pi - 1e-3):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0.0, max_angle, size=(n, 1))
    return axes * angles


# -- rotations ------------------------------------------------------------------


def test_axis_angle_zero_is_identity():
    np.testing.assert_allclose(km.axis_angle_to_matrix(np.zeros(3)), np.eye(3))


def test_axis_angle_quarter_turn_about_z():
    rot = km.axis_angle_to_matrix([0.0, 0.0, math.pi / 2])
    np.testing.assert_allclose(rot @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_axis_angle_matrix_log_round_trip():
    rng = np.random.default_rng(3)
    aa = random_axis_angles(rng, 1000)
    rot = km.axis_angle_to_matrix(aa)
    back = km.matrix_to_axis_angle(rot)
    mag_err = np.abs(np.linalg.norm(back, axis=1) - np.linalg.norm(aa, axis=1))
    assert mag_err.max() < 1e-9
    np.testing.assert_allclose(back, aa, atol=1e-8)


def test_axis_angle_orthonormality_and_det():
    rng = np.random.default_rng(4)
    rot = km.axis_angle_to_matrix(random_axis_angles(rng, 200))
    eye = np.einsum("nij,nkj->nik", rot, rot)
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(rot), np.ones(200), atol=1e-12)


def test_small_angle_series_branch():
    aa = np.array([1e-9, -2e-9, 0.5e-9])
    rot = km.axis_angle_to_matrix(aa)
    # first-order: I + [aa]x
    expected = np.eye(3) + np.array(
        [[0, -aa[2], aa[1]], [aa[2], 0, -aa[0]], [-aa[1], aa[0], 0]]
    )
    np.testing.assert_allclose(rot, expected, atol=1e-18)


def test_canonicalize_wraps_large_angles():
    axis = np.array([0.0, 0.0, 1.0])
    aa = axis * 3.5 * math.pi
    canon = km.canonicalize_axis_angle(aa)
    assert np.linalg.norm(canon) <= math.pi + 1e-12
    np.testing.assert_allclose(
        km.axis_angle_to_matrix(canon), km.axis_angle_to_matrix(aa), atol=1e-12
    )


def test_rot6d_identity_encoding():
    np.testing.assert_allclose(km.rot6d_encode(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_rot6d_scale_invariance():
    rng = np.random.default_rng(5)
    rot = km.axis_angle_to_matrix(random_axis_angles(rng, 1)[0])
    v = km.rot6d_encode(rot)
    np.testing.assert_allclose(km.rot6d_decode(v * 2.5), km.rot6d_decode(v), atol=1e-12)


def test_rot6d_round_trip_1000():
    rng = np.random.default_rng(6)
    rot = km.axis_angle_to_matrix(random_axis_angles(rng, 1000))
    back = km.rot6d_decode(km.rot6d_encode(rot))
    assert np.abs(back - rot).max() < 1e-9


def test_rot6d_decode_always_valid_rotation():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(100, 6))
    rot = km.rot6d_decode(v)
    eye = np.einsum("nij,nkj->nik", rot, rot)
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape), atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(rot), np.ones(100), atol=1e-9)


def test_rot6d_decode_degenerate_inputs():
    with pytest.raises(km.KinematicsError):
        km.rot6d_decode(np.zeros(6))
    with pytest.raises(km.KinematicsError):
        km.rot6d_decode(np.array([1.0, 0, 0, 2.0, 0, 0]))  # collinear


# -- forward kinematics -----------------------------------------------------------


def test_fk_zero_pose_cumulative_offsets(skel):
    _, pos = km.forward_kinematics(skel, np.zeros((22, 3)), (1.0, 1.0))
    expected = np.zeros((22, 3))
    for j in range(1, 22):
        expected[j] = expected[skel.parent[j]] + skel.rest_offset[j]
    np.testing.assert_allclose(pos, expected, atol=1e-15)
    rot, _ = km.forward_kinematics(skel, np.zeros((22, 3)), (1.0, 1.0))
    np.testing.assert_allclose(rot, np.broadcast_to(np.eye(3), (22, 3, 3)), atol=1e-15)


def test_fk_global_scale(skel):
    _, base = km.forward_kinematics(skel, np.zeros((22, 3)), (1.0, 1.0))
    _, scaled = km.forward_kinematics(skel, np.zeros((22, 3)), (1.1, 1.0))
    np.testing.assert_allclose(scaled, base * 1.1, atol=1e-15)


def test_fk_hand_computed_chain():
    sk = chain3()
    pose = np.zeros((3, 3))
    pose[0] = [0.0, 0.0, math.pi / 2]
    _, pos = km.forward_kinematics(sk, pose, (1.0, 1.0))
    np.testing.assert_allclose(pos[0], [0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(pos[1], [-1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(pos[2], [-2.0, 0.0, 0.0], atol=1e-12)


def test_fk_translation_equivariant_in_rest_offsets(skel):
    import dataclasses
    delta = np.array([0.02, -0.01, 0.03])
    shifted_offsets = skel.rest_offset.copy()
    shifted_offsets[3] += delta  # spine1: shifts its whole subtree at zero pose
    shifted = dataclasses.replace(skel, rest_offset=shifted_offsets)
    _, base = km.forward_kinematics(skel, np.zeros((22, 3)), (1.0, 1.0))
    _, moved = km.forward_kinematics(shifted, np.zeros((22, 3)), (1.0, 1.0))
    subtree = [3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21]
    rest = sorted(set(range(22)) - set(subtree))
    np.testing.assert_allclose(moved[subtree], base[subtree] + delta, atol=1e-15)
    np.testing.assert_allclose(moved[rest], base[rest], atol=1e-15)


def test_fk_dimension_mismatch(skel):
    with pytest.raises(km.KinematicsError):
        km.forward_kinematics(skel, np.zeros((5, 3)), (1.0, 1.0))


def test_fk_batched_matches_single(skel):
    rng = np.random.default_rng(8)
    poses = km.canonicalize_axis_angle(rng.normal(scale=0.4, size=(10, 22, 3)))
    betas = rng.uniform(0.9, 1.1, size=(10, 2))
    rot_b, pos_b = km.forward_kinematics(skel, poses, betas)
    for i in range(10):
        rot_i, pos_i = km.forward_kinematics(skel, poses[i], betas[i])
        np.testing.assert_array_equal(rot_b[i], rot_i)
        np.testing.assert_array_equal(pos_b[i], pos_i)


# -- hmd signal -------------------------------------------------------------------


def test_hmd_zero_pose(skel):
    sig = km.hmd_from_pose(skel, np.zeros((22, 3)), (1.0, 1.0))
    assert sig.shape == (3, 9)
    _, pos = km.forward_kinematics(skel, np.zeros((22, 3)), (1.0, 1.0))
    for k, j in enumerate(skel.tracked):
        np.testing.assert_allclose(sig[k, :6], [1, 0, 0, 0, 1, 0], atol=1e-15)
        np.testing.assert_allclose(sig[k, 6:], pos[j], atol=1e-15)


def test_hmd_matches_manual_extraction(skel):
    rng = np.random.default_rng(9)
    for _ in range(100):
        pose = km.canonicalize_axis_angle(rng.normal(scale=0.5, size=(22, 3)))
        beta = rng.uniform(0.8, 1.2, size=2)
        sig = km.hmd_from_pose(skel, pose, beta)
        rot, pos = km.forward_kinematics(skel, pose, beta)
        for k, j in enumerate(skel.tracked):
            np.testing.assert_array_equal(sig[k, :6], km.rot6d_encode(rot[j]))
            np.testing.assert_array_equal(sig[k, 6:], pos[j])


def test_hmd_beta_scales_positions_not_rotations(skel):
    rng = np.random.default_rng(10)
    pose = km.canonicalize_axis_angle(rng.normal(scale=0.5, size=(22, 3)))
    a = km.hmd_from_pose(skel, pose, (1.0, 1.0))
    b = km.hmd_from_pose(skel, pose, (1.15, 1.05))
    np.testing.assert_array_equal(a[:, :6], b[:, :6])
    assert np.abs(a[:, 6:] - b[:, 6:]).max() > 1e-3


# -- mpjpe ------------------------------------------------------------------------


def test_mpjpe_identical_poses_is_zero(skel):
    rng = np.random.default_rng(11)
    pose = km.canonicalize_axis_angle(rng.normal(scale=0.5, size=(22, 3)))
    assert km.mpjpe(skel, pose, pose, (1.0, 1.0), skel.upper_body) == 0.0


def test_mpjpe_single_joint_exact_displacement(skel):
    # rotating the left elbow moves only the wrist (its sole descendant);
    # chord displacement = 2 * bone * sin(phi/2) = 0.05 m exactly
    bone = np.linalg.norm(skel.rest_offset[20])
    phi = 2.0 * math.asin(0.05 / (2.0 * bone))
    gt = np.zeros((22, 3))
    pred = np.zeros((22, 3))
    pred[18] = [0.0, phi, 0.0]
    got = km.mpjpe(skel, pred, gt, (1.0, 1.0), list(range(22)))
    assert got == pytest.approx(5.0 / 22.0, abs=1e-10)


def test_mpjpe_vs_brute_force(skel):
    rng = np.random.default_rng(12)
    pred = km.canonicalize_axis_angle(rng.normal(scale=0.5, size=(22, 3)))
    gt = km.canonicalize_axis_angle(rng.normal(scale=0.5, size=(22, 3)))
    beta = (1.05, 0.95)
    got = km.mpjpe(skel, pred, gt, beta, skel.upper_body)
    _, pp = km.forward_kinematics(skel, pred, beta)
    _, gp = km.forward_kinematics(skel, gt, beta)
    acc = 0.0
    for j in skel.upper_body:
        acc += math.sqrt(((pp[j] - gp[j]) ** 2).sum())
    expected = acc / len(skel.upper_body) * 100.0
    assert got == pytest.approx(expected, abs=1e-10)


def test_mpjpe_empty_subset_rejected(skel):
    with pytest.raises(km.KinematicsError):
        km.mpjpe(skel, np.zeros((22, 3)), np.zeros((22, 3)), (1.0, 1.0), [])


def test_upper_body_subset_is_13_and_contains_tracked(skel):
    assert len(skel.upper_body) == 13
    assert set(skel.tracked) <= set(skel.upper_body)
    assert skel.joint_count == 22


def test_skeleton_hash_stable(skel):
    assert skel.hash() == km.load_skeleton().hash()
    assert len(skel.hash()) == 16
