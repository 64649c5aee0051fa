"""Procedural synthetic pose data and out-of-distribution generators.

Samples interpolate between full-body archetype poses (stand, sit, reach,
walk phases, crouch) and add per-joint noise, which couples upper- and
lower-body joints the way motion-capture data does — without that coupling a
condition-aware latent region could not beat z = 0. Records are (pose, beta)
pairs; the sparse observation x_H is re-derived through forward kinematics on
load and verified against a stored checksum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Skeleton, canonicalize_axis_angle, hmd_from_pose


class DatasetFormatError(ValueError):
    pass


def _pose(entries) -> np.ndarray:
    out = np.zeros((22, 3))
    for j, aa in entries.items():
        out[j] = aa
    return out


# joint indices: 0 pelvis, 1/2 hips, 3/6/9 spine, 4/5 knees, 7/8 ankles,
# 10/11 feet, 12 neck, 13/14 collars, 15 head, 16/17 shoulders,
# 18/19 elbows, 20/21 wrists
ARCHETYPES = {
    "stand": _pose({
        16: (0.0, 0.0, -1.3), 17: (0.0, 0.0, 1.3),
        18: (0.0, 0.0, -0.25), 19: (0.0, 0.0, 0.25),
    }),
    "sit": _pose({
        1: (-1.5, 0.0, 0.0), 2: (-1.5, 0.0, 0.0),
        4: (1.5, 0.0, 0.0), 5: (1.5, 0.0, 0.0),
        3: (0.12, 0.0, 0.0),
        16: (0.0, 0.0, -1.1), 17: (0.0, 0.0, 1.1),
        18: (-0.9, 0.0, -0.3), 19: (-0.9, 0.0, 0.3),
    }),
    "reach": _pose({
        3: (0.1, 0.0, 0.1),
        16: (0.0, 0.0, -1.2), 17: (0.0, 0.0, -1.45),
        18: (0.0, 0.0, -0.2), 19: (-0.3, 0.0, -0.2),
        21: (0.0, 0.3, 0.0),
    }),
    "walk_a": _pose({
        1: (-0.55, 0.0, 0.0), 2: (0.3, 0.0, 0.0),
        4: (0.25, 0.0, 0.0), 5: (0.6, 0.0, 0.0),
        7: (0.2, 0.0, 0.0), 8: (-0.15, 0.0, 0.0),
        3: (0.06, 0.05, 0.0),
        16: (0.45, 0.0, -1.25), 17: (-0.5, 0.0, 1.25),
        18: (0.0, 0.0, -0.35), 19: (0.0, 0.0, 0.35),
    }),
    "walk_b": _pose({
        1: (0.3, 0.0, 0.0), 2: (-0.55, 0.0, 0.0),
        4: (0.6, 0.0, 0.0), 5: (0.25, 0.0, 0.0),
        7: (-0.15, 0.0, 0.0), 8: (0.2, 0.0, 0.0),
        3: (0.06, -0.05, 0.0),
        16: (-0.5, 0.0, -1.25), 17: (0.45, 0.0, 1.25),
        18: (0.0, 0.0, -0.35), 19: (0.0, 0.0, 0.35),
    }),
    "crouch": _pose({
        1: (-1.1, 0.0, 0.0), 2: (-1.1, 0.0, 0.0),
        4: (2.0, 0.0, 0.0), 5: (2.0, 0.0, 0.0),
        3: (0.3, 0.0, 0.0), 6: (0.2, 0.0, 0.0),
        16: (0.6, 0.0, -0.9), 17: (0.6, 0.0, 0.9),
        18: (-0.8, 0.0, -0.4), 19: (-0.8, 0.0, 0.4),
    }),
}

# per-joint noise scale (rad); every joint gets some spread so no coordinate
# range degenerates. The scales are deliberately generous: the trained flow's
# test NLL must stay positive (like mocap-scale data) or the OOD relative
# difference loses its meaning.
_NOISE = np.full(22, 0.22)
_NOISE[[1, 2, 4, 5, 7, 8]] = 0.5
_NOISE[[10, 11]] = 0.45
_NOISE[[16, 17, 18, 19]] = 0.5
_NOISE[[20, 21]] = 0.6
_NOISE[[0]] = 0.3
_NOISE[[15]] = 0.15

BETA_RANGE = (0.9, 1.1)


@dataclass
class MotionPrior:
    """Archetype library + interpolation/noise scheme for pose sampling."""

    archetypes: dict = field(default_factory=lambda: dict(ARCHETYPES))
    noise_scale: np.ndarray = field(default_factory=lambda: _NOISE.copy())

    def sample(self, rng: np.random.Generator):
        """One pose draw; returns (pose (22, 3), archetype name pair)."""
        names = sorted(self.archetypes)
        i, j = rng.choice(len(names), size=2, replace=False)
        w = rng.uniform(0.0, 1.0)
        pose = w * self.archetypes[names[i]] + (1.0 - w) * self.archetypes[names[j]]
        pose = pose + rng.normal(size=(22, 3)) * self.noise_scale[:, None]
        return canonicalize_axis_angle(pose), (names[i], names[j])

    def sample_beta(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(BETA_RANGE[0], BETA_RANGE[1], size=2)


@dataclass
class Dataset:
    """In-memory record set; x_H and the flow condition are derived, not stored."""

    poses: np.ndarray        # (N, J, 3)
    betas: np.ndarray        # (N, 2)
    xh: np.ndarray           # (N, 3, 9)
    skeleton_hash: str
    train_ranges: tuple      # (min (J*3,), max (J*3,)) over the training split
    seed: int
    split: str

    @property
    def count(self) -> int:
        return len(self.poses)

    @property
    def conds(self) -> np.ndarray:
        """Flow/LRA condition vectors [x_H, beta], (N, 29)."""
        return np.concatenate([self.xh.reshape(self.count, -1), self.betas], axis=1)

    @property
    def pose_vecs(self) -> np.ndarray:
        return self.poses.reshape(self.count, -1)


def _xh_checksum(xh: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(xh).tobytes()).hexdigest()


def _generate_split(prior: MotionPrior, skel: Skeleton, n: int, seed: int,
                    split_id: int) -> tuple:
    poses = np.zeros((n, skel.joint_count, 3))
    betas = np.zeros((n, 2))
    for i in range(n):
        rng = np.random.default_rng((seed, split_id, i))
        poses[i], _ = prior.sample(rng)
        betas[i] = prior.sample_beta(rng)
    return poses, betas


def generate_dataset(prior: MotionPrior, skel: Skeleton, n_train: int,
                     n_test: int, seed: int) -> tuple:
    """Deterministic train/test record sets with disjoint per-sample seeds."""
    if n_train < 0 or n_test < 0:
        raise ValueError("record counts must be non-negative")
    tr_poses, tr_betas = _generate_split(prior, skel, n_train, seed, 0)
    te_poses, te_betas = _generate_split(prior, skel, n_test, seed, 1)
    flat = tr_poses.reshape(max(n_train, 1) if n_train else 1, -1)
    if n_train:
        ranges = (flat.min(axis=0), flat.max(axis=0))
    else:
        ranges = (np.full(skel.joint_count * 3, -np.pi), np.full(skel.joint_count * 3, np.pi))
    h = skel.hash()
    train = Dataset(tr_poses, tr_betas, hmd_from_pose(skel, tr_poses, tr_betas) if n_train else np.zeros((0, 3, 9)),
                    h, ranges, seed, "train")
    test = Dataset(te_poses, te_betas, hmd_from_pose(skel, te_poses, te_betas) if n_test else np.zeros((0, 3, 9)),
                   h, ranges, seed, "test")
    return train, test


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "kind": "poseprior-dataset",
        "version": 1,
        "joints": int(ds.poses.shape[1]),
        "betas": int(ds.betas.shape[1]),
        "count": int(ds.count),
        "seed": int(ds.seed),
        "split": ds.split,
        "skeleton_hash": ds.skeleton_hash,
        "train_ranges": {
            "min": ds.train_ranges[0].tolist(),
            "max": ds.train_ranges[1].tolist(),
        },
        "xh_checksum": _xh_checksum(ds.xh),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for i in range(ds.count):
            rec = {"pose": ds.poses[i].tolist(), "beta": ds.betas[i].tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path, skel: Skeleton) -> Dataset:
    """Read a record file, re-derive x_H, and verify it against the checksum."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"bad dataset header: {e}") from None
        if header.get("kind") != "poseprior-dataset":
            raise DatasetFormatError("not a dataset file")
        if header["skeleton_hash"] != skel.hash():
            raise DatasetFormatError("dataset was generated for a different skeleton")
        n = header["count"]
        J = header["joints"]
        poses = np.zeros((n, J, 3))
        betas = np.zeros((n, header["betas"]))
        for i in range(n):
            line = fh.readline()
            if not line:
                raise DatasetFormatError(f"truncated dataset: {i} of {n} records")
            rec = json.loads(line)
            poses[i] = rec["pose"]
            betas[i] = rec["beta"]
    xh = hmd_from_pose(skel, poses, betas) if n else np.zeros((0, 3, 9))
    if _xh_checksum(xh) != header["xh_checksum"]:
        raise DatasetFormatError("derived x_H does not match the stored checksum")
    ranges = (
        np.asarray(header["train_ranges"]["min"], dtype=np.float64),
        np.asarray(header["train_ranges"]["max"], dtype=np.float64),
    )
    return Dataset(poses, betas, xh, header["skeleton_hash"], ranges,
                   header["seed"], header["split"])


# -- out-of-distribution generators ------------------------------------------------


def ood_manipulate(pose, joint_subset, noise_scale: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Add axis-angle Gaussian noise to a joint subset, re-canonicalized."""
    if noise_scale <= 0:
        raise ValueError("noise_scale must be positive")
    joint_subset = np.asarray(joint_subset, dtype=np.int64)
    if joint_subset.size == 0:
        raise ValueError("joint subset must be nonempty")
    out = np.array(pose, dtype=np.float64)
    out[joint_subset] += rng.normal(scale=noise_scale, size=(joint_subset.size, 3))
    return canonicalize_axis_angle(out)


def ood_noise(train_ranges, joints: int, rng: np.random.Generator) -> np.ndarray:
    """Pose-like random noise: uniform per coordinate within the training ranges."""
    lo, hi = train_ranges
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.size != joints * 3:
        raise ValueError("training ranges do not match the joint count")
    return rng.uniform(lo, hi).reshape(joints, 3)
