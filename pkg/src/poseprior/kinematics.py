"""Articulated skeleton, rotation representations, forward kinematics, MPJPE.

Poses are (J, 3) axis-angle arrays; the skeleton is a fixed-topology tree with
per-joint rest offsets in meters. Bodies are shaped by two bone-scale factors
(global, limbs). Everything here is pure numpy over immutable inputs; the
autodiff twin used by pose refinement lives in :mod:`poseprior.refine`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np


class KinematicsError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree: parent indices (topologically sorted) and rest offsets."""

    joint_names: tuple
    parent: np.ndarray          # (J,) int, parent[i] < i, root has -1
    rest_offset: np.ndarray     # (J, 3) meters
    upper_body: tuple           # joint-index subset
    tracked: tuple              # (head, left_hand, right_hand)
    limb_joints: tuple          # offsets scaled by the limb beta
    mask_groups: dict = field(default_factory=dict)

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        if parent[0] != -1 or np.sum(parent == -1) != 1:
            raise KinematicsError("skeleton must have exactly one root at index 0")
        if np.any(parent[1:] >= np.arange(1, len(parent))):
            raise KinematicsError("parent indices must be topologically sorted")
        if len(self.tracked) != 3:
            raise KinematicsError("tracked must be (head, left_hand, right_hand)")
        if not set(self.tracked) <= set(self.upper_body):
            raise KinematicsError("tracked joints must lie in the upper-body subset")

    def hash(self) -> str:
        payload = json.dumps(
            {
                "joint_names": list(self.joint_names),
                "parent": self.parent.tolist(),
                "rest_offset": self.rest_offset.tolist(),
                "upper_body": list(self.upper_body),
                "tracked": list(self.tracked),
                "limb_joints": list(self.limb_joints),
                "mask_groups": {k: list(v) for k, v in sorted(self.mask_groups.items())},
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def scaled_offsets(self, beta) -> np.ndarray:
        """Rest offsets under shape parameters (global scale, limb scale)."""
        beta = np.asarray(beta, dtype=np.float64)
        off = self.rest_offset * beta[0]
        limbs = np.asarray(self.limb_joints, dtype=np.int64)
        off[limbs] *= beta[1]
        return off


def load_skeleton(path=None) -> Skeleton:
    """Load a skeleton definition file (the packaged 22-joint one by default)."""
    if path is None:
        text = resources.files("poseprior").joinpath("assets/skeleton22.json").read_text("utf-8")
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    return Skeleton(
        joint_names=tuple(raw["joint_names"]),
        parent=np.asarray(raw["parent"], dtype=np.int64),
        rest_offset=np.asarray(raw["rest_offset"], dtype=np.float64),
        upper_body=tuple(raw["upper_body"]),
        tracked=tuple(raw["tracked"]),
        limb_joints=tuple(raw["limb_joints"]),
        mask_groups={k: tuple(v) for k, v in raw["mask_groups"].items()},
    )


# -- rotations ------------------------------------------------------------------


def canonicalize_axis_angle(aa: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the equivalent rotation with magnitude <= pi."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 0.0, theta, 1.0)
    wrapped = np.mod(theta, 2.0 * np.pi)
    over = wrapped > np.pi
    target = np.where(over, wrapped - 2.0 * np.pi, wrapped)  # signed angle in (-pi, pi]
    return aa * (target / safe)


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula; accepts (..., 3), returns (..., 3, 3).

    Angles below 1e-8 rad use the series expansion of sin(t)/t and
    (1-cos t)/t^2 to avoid 0/0.
    """
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    t2 = theta * theta
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        cosc = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    k = _cross_matrix(aa)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + sinc[..., None, None] * k + cosc[..., None, None] * (k @ k)


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    rows = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    return rows


def matrix_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix, magnitude in [0, pi]."""
    rot = np.asarray(rot, dtype=np.float64)
    trace = np.clip(np.trace(rot, axis1=-2, axis2=-1), -1.0, 3.0)
    angle = np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0))
    axis = np.stack(
        [
            rot[..., 2, 1] - rot[..., 1, 2],
            rot[..., 0, 2] - rot[..., 2, 0],
            rot[..., 1, 0] - rot[..., 0, 1],
        ],
        axis=-1,
    )
    sin = np.sin(angle)
    small = angle < 1e-7
    near_pi = np.pi - angle < 1e-5
    scale = np.where(small | near_pi, 0.5, angle / np.where(sin == 0.0, 1.0, 2.0 * sin))
    aa = axis * scale[..., None]
    if np.any(near_pi):
        # axis from the symmetric part: R = 2 n n^T - I at angle pi
        sym = (rot + np.swapaxes(rot, -1, -2)) / 2.0
        diag = np.stack([sym[..., 0, 0], sym[..., 1, 1], sym[..., 2, 2]], axis=-1)
        n = np.sqrt(np.clip((diag + 1.0) / 2.0, 0.0, 1.0))
        # fix signs from off-diagonals relative to the largest component
        flat_n = n.reshape(-1, 3)
        flat_s = sym.reshape(-1, 3, 3)
        flat_mask = near_pi.reshape(-1)
        flat_angle = angle.reshape(-1)
        flat_aa = aa.reshape(-1, 3)
        for i in np.nonzero(flat_mask)[0]:
            k = int(np.argmax(flat_n[i]))
            sign = np.ones(3)
            for j in range(3):
                if j != k and flat_s[i, k, j] < 0:
                    sign[j] = -1.0
            vec = flat_n[i] * sign
            flat_aa[i] = vec / np.linalg.norm(vec) * flat_angle[i]
        aa = flat_aa.reshape(aa.shape)
    return aa


def rot6d_encode(rot: np.ndarray) -> np.ndarray:
    """First two columns of the rotation matrix, flattened to 6 values."""
    rot = np.asarray(rot, dtype=np.float64)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def rot6d_decode(v: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into a rotation matrix."""
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-12):
        raise KinematicsError("rot6d decode: first column is (near-)zero")
    c1 = a / na
    b_perp = b - np.sum(c1 * b, axis=-1, keepdims=True) * c1
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb < 1e-12):
        raise KinematicsError("rot6d decode: columns are (near-)collinear")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


# -- forward kinematics -----------------------------------------------------------


def _scaled_offsets_any(skel: Skeleton, beta) -> np.ndarray:
    """Scaled rest offsets for one beta (J, 3) or a batch (N, J, 3)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1:
        return skel.scaled_offsets(beta)
    off = skel.rest_offset[None, :, :] * beta[:, 0, None, None]
    off = np.array(off)
    limbs = np.asarray(skel.limb_joints, dtype=np.int64)
    off[:, limbs, :] *= beta[:, 1, None, None]
    return off


def forward_kinematics(skel: Skeleton, pose, beta):
    """Global joint rotations and positions; root pinned to the origin.

    ``pose`` is (J, 3) or batched (N, J, 3) with matching ``beta`` (2,) or
    (N, 2); returns (rot, pos) shaped (..., J, 3, 3) and (..., J, 3).
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2:] != (skel.joint_count, 3):
        raise KinematicsError(f"pose shape {pose.shape} does not match skeleton")
    offsets = _scaled_offsets_any(skel, beta)
    if offsets.ndim == 2 and pose.ndim == 3:
        offsets = np.broadcast_to(offsets, pose.shape[:1] + offsets.shape)
    local = axis_angle_to_matrix(pose)
    J = skel.joint_count
    rot = np.empty(pose.shape[:-2] + (J, 3, 3))
    pos = np.zeros(pose.shape[:-2] + (J, 3))
    rot[..., 0, :, :] = local[..., 0, :, :]
    for j in range(1, J):
        p = int(skel.parent[j])
        rot[..., j, :, :] = rot[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + np.einsum(
            "...ij,...j->...i", rot[..., p, :, :], offsets[..., j, :]
        )
    return rot, pos


def hmd_from_pose(skel: Skeleton, pose, beta) -> np.ndarray:
    """Tracked-joint observation: per joint 6-D global rotation + position, (3, 9).

    Batched input yields (N, 3, 9).
    """
    rot, pos = forward_kinematics(skel, pose, beta)
    idx = np.asarray(skel.tracked, dtype=np.int64)
    r6 = rot6d_encode(rot[..., idx, :, :])
    return np.concatenate([r6, pos[..., idx, :]], axis=-1)


def joint_tokens(skel: Skeleton, pose, beta) -> np.ndarray:
    """Per-joint 9-vectors (6-D global rotation + position) for all J joints."""
    rot, pos = forward_kinematics(skel, pose, beta)
    return np.concatenate([rot6d_encode(rot), pos], axis=-1)


def mpjpe(skel: Skeleton, pred_pose, gt_pose, beta, subset) -> float:
    """Mean per-joint position error over ``subset`` in centimeters."""
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise KinematicsError("mpjpe over an empty joint subset")
    _, pp = forward_kinematics(skel, pred_pose, beta)
    _, gp = forward_kinematics(skel, gt_pose, beta)
    d = np.linalg.norm(pp[subset] - gp[subset], axis=-1)
    return float(d.mean() * 100.0)


def mpjpe_batch(skel: Skeleton, pred_poses, gt_poses, betas, subset) -> np.ndarray:
    """Per-sample MPJPE in cm for pose batches; returns (N,)."""
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise KinematicsError("mpjpe over an empty joint subset")
    _, pp = forward_kinematics(skel, pred_poses, betas)
    _, gp = forward_kinematics(skel, gt_poses, betas)
    d = np.linalg.norm(pp[:, subset] - gp[:, subset], axis=-1)
    return d.mean(axis=1) * 100.0
