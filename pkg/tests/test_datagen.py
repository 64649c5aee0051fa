import json
import math

import numpy as np
import pytest

from poseprior import datagen as dg
from poseprior.kinematics import hmd_from_pose, load_skeleton


@pytest.fixture(scope="module")
def skel():
    return load_skeleton()


def test_same_seed_bit_identical_files(tmp_path, skel):
    prior = dg.MotionPrior()
    for name in ("a", "b"):
        train, test = dg.generate_dataset(prior, skel, 50, 20, seed=7)
        dg.save_dataset(train, tmp_path / f"train_{name}.jsonl")
        dg.save_dataset(test, tmp_path / f"test_{name}.jsonl")
    assert (tmp_path / "train_a.jsonl").read_bytes() == (tmp_path / "train_b.jsonl").read_bytes()
    assert (tmp_path / "test_a.jsonl").read_bytes() == (tmp_path / "test_b.jsonl").read_bytes()


def test_empty_train_set_valid_file(tmp_path, skel):
    train, test = dg.generate_dataset(dg.MotionPrior(), skel, 0, 5, seed=1)
    assert train.count == 0 and test.count == 5
    path = tmp_path / "empty.jsonl"
    dg.save_dataset(train, path)
    loaded = dg.load_dataset(path, skel)
    assert loaded.count == 0


def test_rotation_magnitudes_bounded_by_pi(skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 500, 0, seed=3)
    mags = np.linalg.norm(train.poses, axis=-1)
    assert mags.max() <= math.pi + 1e-12


def test_train_test_disjoint(skel):
    train, test = dg.generate_dataset(dg.MotionPrior(), skel, 50, 50, seed=4)
    # no train pose equals any test pose
    assert not np.isin(train.poses.reshape(50, -1)[:, 0], test.poses.reshape(50, -1)[:, 0]).any()


def test_xh_rederives_exactly(tmp_path, skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 20, 0, seed=5)
    path = tmp_path / "t.jsonl"
    dg.save_dataset(train, path)
    loaded = dg.load_dataset(path, skel)
    np.testing.assert_array_equal(loaded.xh, hmd_from_pose(skel, loaded.poses, loaded.betas))
    np.testing.assert_array_equal(loaded.poses, train.poses)


def test_checksum_detects_tampering(tmp_path, skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 5, 0, seed=6)
    path = tmp_path / "t.jsonl"
    dg.save_dataset(train, path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["pose"][3][0] += 0.25
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(dg.DatasetFormatError):
        dg.load_dataset(path, skel)


def test_archetype_coverage():
    prior = dg.MotionPrior()
    assert len(prior.archetypes) >= 4
    seen = set()
    for i in range(300):
        _, pair = prior.sample(np.random.default_rng(i))
        seen.update(pair)
    assert seen == set(prior.archetypes)


def test_upper_lower_body_correlation(skel):
    # archetype interpolation must couple upper and lower body (sit/crouch
    # flex hips and elbows together)
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 2000, 0, seed=8)
    hips_x = train.poses[:, 1, 0]
    elbow_x = train.poses[:, 18, 0]
    corr = np.corrcoef(hips_x, elbow_x)[0, 1]
    assert abs(corr) > 0.15


def test_beta_range(skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 200, 0, seed=9)
    assert train.betas.min() >= 0.9 and train.betas.max() <= 1.1


def test_conds_layout(skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 3, 0, seed=10)
    conds = train.conds
    assert conds.shape == (3, 29)
    np.testing.assert_array_equal(conds[:, :27], train.xh.reshape(3, 27))
    np.testing.assert_array_equal(conds[:, 27:], train.betas)


# -- ood generators ----------------------------------------------------------------


def test_ood_manipulate_zero_noise_limit(skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 1, 0, seed=11)
    pose = train.poses[0]
    out = dg.ood_manipulate(pose, [3, 5], 1e-12, np.random.default_rng(0))
    np.testing.assert_allclose(out, pose, atol=1e-10)


def test_ood_manipulate_untouched_joints_bit_identical(skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 1, 0, seed=12)
    pose = train.poses[0]
    subset = [4, 9, 17]
    out = dg.ood_manipulate(pose, subset, 0.1, np.random.default_rng(1))
    untouched = sorted(set(range(22)) - set(subset))
    np.testing.assert_array_equal(out[untouched], pose[untouched])
    assert np.abs(out[subset] - pose[subset]).max() > 0


def test_ood_manipulate_folded_normal_mean():
    # mean |delta| per coordinate of N(0, sigma) is sigma * sqrt(2/pi)
    sigma = 0.1
    pose = np.zeros((22, 3))
    deltas = []
    for seed in range(4000):
        out = dg.ood_manipulate(pose, [6], sigma, np.random.default_rng(seed))
        deltas.append(np.abs(out[6]))
    mean_abs = np.mean(deltas)
    assert mean_abs == pytest.approx(sigma * math.sqrt(2.0 / math.pi), rel=0.03)


def test_ood_manipulate_rejects_bad_args():
    with pytest.raises(ValueError):
        dg.ood_manipulate(np.zeros((22, 3)), [], 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dg.ood_manipulate(np.zeros((22, 3)), [1], 0.0, np.random.default_rng(0))


def test_ood_noise_within_ranges(skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 100, 0, seed=13)
    lo, hi = train.train_ranges
    for seed in range(50):
        pose = dg.ood_noise(train.train_ranges, 22, np.random.default_rng(seed))
        flat = pose.reshape(-1)
        assert np.all(flat >= lo) and np.all(flat <= hi)


def test_ood_noise_distinct_seeds():
    ranges = (np.full(66, -1.0), np.full(66, 1.0))
    a = dg.ood_noise(ranges, 22, np.random.default_rng(0))
    b = dg.ood_noise(ranges, 22, np.random.default_rng(1))
    assert np.abs(a - b).max() > 0


def test_ood_noise_coverage():
    ranges = (np.full(66, -2.0), np.full(66, 2.0))
    draws = np.stack([
        dg.ood_noise(ranges, 22, np.random.default_rng(s)).reshape(-1)
        for s in range(10000)
    ])
    span = draws.max(axis=0) - draws.min(axis=0)
    assert np.all(span >= 0.95 * 4.0)


def test_load_rejects_wrong_skeleton(tmp_path, skel):
    train, _ = dg.generate_dataset(dg.MotionPrior(), skel, 2, 0, seed=14)
    path = tmp_path / "t.jsonl"
    dg.save_dataset(train, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["skeleton_hash"] = "deadbeef00000000"
    lines[0] = json.dumps(header, sort_keys=True, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(dg.DatasetFormatError):
        dg.load_dataset(path, skel)
