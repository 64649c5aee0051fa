"""Evaluation metrics and CSV report emission.

Latent rules under evaluation: mu (the region mean), zero, an MLP baseline,
and sample-k draws from the learned region (which also yield a per-joint
uncertainty table: RMS distance of sampled decodes from the mu decode).
OOD scoring reports mean NLL per set and the relative difference
RD = |NLL_ood - NLL_gt| / max(NLL_ood, NLL_gt). Oracle-latent distances are
per-sample cosine distances and a batch-level entropy-regularized optimal
transport (Sinkhorn) cost on standardized latents.
"""

from __future__ import annotations

import csv

import numpy as np

from ..datagen import Dataset, ood_manipulate, ood_noise
from ..diffmath import NonFiniteError
from ..flow import FlowModel
from ..kinematics import Skeleton, mpjpe_batch
from ..lra import LatentRegionModel, full_mask, sample_region
from ..training import (
    STREAM_EVAL,
    STREAM_OOD,
    MlpBaseline,
    apply_hand_visibility,
    oracle_latents,
)

CSV_COLUMNS = ("metric", "subset", "value", "count", "seed", "config_hash")

HANDS_CHOICES = ("both", "left", "right", "none")


class MetricsReport:
    """Ordered metric rows with a stable CSV schema."""

    def __init__(self, seed: int, config_hash: str):
        self.seed = seed
        self.config_hash = config_hash
        self.rows = []

    def add(self, metric: str, subset: str, value: float, count: int) -> None:
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite metric value for {metric}/{subset}")
        self.rows.append({
            "metric": metric, "subset": subset, "value": float(value),
            "count": int(count), "seed": self.seed, "config_hash": self.config_hash,
        })

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([
                    row["metric"], row["subset"], repr(row["value"]),
                    row["count"], row["seed"], row["config_hash"],
                ])

    def value(self, metric: str, subset: str) -> float:
        for row in self.rows:
            if row["metric"] == metric and row["subset"] == subset:
                return row["value"]
        raise KeyError(f"no row {metric}/{subset}")


def hands_visibility(hands: str) -> tuple:
    """--hands flag -> (left_visible, right_visible)."""
    if hands not in HANDS_CHOICES:
        raise ValueError(f"hands must be one of {HANDS_CHOICES}")
    return hands in ("both", "left"), hands in ("both", "right")


def eval_tokens(dataset: Dataset, skel: Skeleton) -> np.ndarray:
    """Deployment-time joint tokens: observed values at tracked joints, zeros
    elsewhere (those positions are replaced by the mask token anyway)."""
    tokens = np.zeros((dataset.count, skel.joint_count, 9))
    for k, j in enumerate(skel.tracked):
        tokens[:, j, :] = dataset.xh[:, k, :]
    return tokens


def eval_mask(skel: Skeleton, n: int, left_visible: bool, right_visible: bool) -> np.ndarray:
    base = np.zeros(skel.joint_count)
    base[list(full_mask(skel))] = 1.0
    masks = np.broadcast_to(base, (n, skel.joint_count)).copy()
    head, left, right = skel.tracked
    if not left_visible:
        masks[:, left] = 1.0
    if not right_visible:
        masks[:, right] = 1.0
    return masks


def predict_regions(lra_model: LatentRegionModel, dataset: Dataset, skel: Skeleton,
                    left_visible: bool = True, right_visible: bool = True,
                    chunk: int = 1024):
    """(mu, sigma) for every record under the given hand visibility."""
    tokens = eval_tokens(dataset, skel)
    cond_std = lra_model.standardize_cond(dataset.conds)
    cond_std = apply_hand_visibility(
        cond_std, np.full(dataset.count, left_visible), np.full(dataset.count, right_visible)
    )
    masks = eval_mask(skel, dataset.count, left_visible, right_visible)
    mus = np.empty((dataset.count, lra_model.pose_dim))
    sigmas = np.empty_like(mus)
    for lo in range(0, dataset.count, chunk):
        hi = min(lo + chunk, dataset.count)
        feats = lra_model.encode(tokens[lo:hi], masks[lo:hi], allow_hand_mask=True)
        logits = lra_model.to_latent(lra_model.pool_head_hands(feats), cond_std[lo:hi])
        mu, sigma = lra_model.latent_region(logits, cond_std[lo:hi])
        mus[lo:hi] = mu.data
        sigmas[lo:hi] = sigma.data
    return mus, sigmas, cond_std


def decode_poses(flow: FlowModel, z: np.ndarray, conds: np.ndarray, joints: int,
                 chunk: int = 4096) -> np.ndarray:
    out = np.empty((len(z), joints, 3))
    for lo in range(0, len(z), chunk):
        hi = min(lo + chunk, len(z))
        out[lo:hi] = flow.forward(z[lo:hi], conds[lo:hi]).data.reshape(hi - lo, joints, 3)
    return out


def evaluate(flow: FlowModel, lra_model: LatentRegionModel, dataset: Dataset,
             skel: Skeleton, seed: int, config_hash: str,
             mlp: MlpBaseline | None = None, sample_k: int = 10,
             hands: str = "both"):
    """MPJPE per latent rule plus sample-spread uncertainty.

    Returns (report, per_sample) where per_sample maps mode -> (upper, full)
    per-sample MPJPE arrays in cm.
    """
    left_vis, right_vis = hands_visibility(hands)
    report = MetricsReport(seed, config_hash)
    per_sample = {}
    upper = np.asarray(skel.upper_body)
    full = np.arange(skel.joint_count)
    mus, sigmas, _ = predict_regions(lra_model, dataset, skel, left_vis, right_vis)

    modes = {"mu": mus, "zero": np.zeros_like(mus)}
    if mlp is not None:
        modes["mlp"] = mlp.predict(dataset.conds)

    mu_poses = None
    for mode, z in modes.items():
        poses = decode_poses(flow, z, dataset.conds, skel.joint_count)
        if mode == "mu":
            mu_poses = poses
        up = mpjpe_batch(skel, poses, dataset.poses, dataset.betas, upper)
        fl = mpjpe_batch(skel, poses, dataset.poses, dataset.betas, full)
        per_sample[mode] = (up, fl)
        report.add("mpjpe_upper", mode, up.mean(), dataset.count)
        report.add("mpjpe_full", mode, fl.mean(), dataset.count)

    if sample_k > 0:
        rng = np.random.default_rng((seed, STREAM_EVAL))
        from ..kinematics import forward_kinematics

        _, mu_pos = forward_kinematics(skel, mu_poses, dataset.betas)
        sq_dist = np.zeros((dataset.count, skel.joint_count))
        up_acc = np.zeros(dataset.count)
        fl_acc = np.zeros(dataset.count)
        for k in range(sample_k):
            zs = mus + sigmas * rng.standard_normal(mus.shape)
            poses = decode_poses(flow, zs, dataset.conds, skel.joint_count)
            _, pos = forward_kinematics(skel, poses, dataset.betas)
            sq_dist += ((pos - mu_pos) ** 2).sum(axis=-1)
            up_acc += mpjpe_batch(skel, poses, dataset.poses, dataset.betas, upper)
            fl_acc += mpjpe_batch(skel, poses, dataset.poses, dataset.betas, full)
        per_sample["sample"] = (up_acc / sample_k, fl_acc / sample_k)
        report.add("mpjpe_upper", "sample", up_acc.mean() / sample_k, dataset.count)
        report.add("mpjpe_full", "sample", fl_acc.mean() / sample_k, dataset.count)
        spread = np.sqrt(sq_dist / sample_k).mean(axis=0) * 100.0  # cm per joint
        for j in range(skel.joint_count):
            report.add("uncertainty_cm", f"joint{j:02d}", spread[j], dataset.count)
    return report, per_sample


# -- out-of-distribution ------------------------------------------------------------


def nll_per_sample(flow: FlowModel, pose_vecs: np.ndarray, conds: np.ndarray,
                   chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(pose_vecs))
    for lo in range(0, len(pose_vecs), chunk):
        hi = min(lo + chunk, len(pose_vecs))
        out[lo:hi] = -flow.log_prob(pose_vecs[lo:hi], conds[lo:hi]).data
    return out


def relative_difference(nll_ood: float, nll_gt: float) -> float:
    return abs(nll_ood - nll_gt) / max(nll_ood, nll_gt)


def ood_eval(flow: FlowModel, dataset: Dataset, skel: Skeleton, seed: int,
             config_hash: str, manip_sigma: float = 0.1, manip_joints: int = 4):
    """NLL of GT / manipulated / pose-like-noise sets plus RD scores."""
    if dataset.count == 0:
        raise ValueError("ood evaluation needs a nonempty test set")
    non_tracked = sorted(set(range(skel.joint_count)) - set(skel.tracked))
    manip = np.empty_like(dataset.poses)
    noise = np.empty_like(dataset.poses)
    for i in range(dataset.count):
        rng = np.random.default_rng((seed, STREAM_OOD, i))
        subset = rng.choice(non_tracked, size=manip_joints, replace=False)
        manip[i] = ood_manipulate(dataset.poses[i], subset, manip_sigma, rng)
        noise[i] = ood_noise(dataset.train_ranges, skel.joint_count, rng)
    conds = dataset.conds
    n = dataset.count
    nll_gt = nll_per_sample(flow, dataset.pose_vecs, conds).mean()
    nll_manip = nll_per_sample(flow, manip.reshape(n, -1), conds).mean()
    nll_noise = nll_per_sample(flow, noise.reshape(n, -1), conds).mean()
    report = MetricsReport(seed, config_hash)
    report.add("nll", "gt", nll_gt, n)
    report.add("nll", "manipulated", nll_manip, n)
    report.add("nll", "noise", nll_noise, n)
    report.add("rd", "manipulated", relative_difference(nll_manip, nll_gt), n)
    report.add("rd", "noise", relative_difference(nll_noise, nll_gt), n)
    return report


# -- oracle-latent distances -----------------------------------------------------------


def cosine_distances(candidates: np.ndarray, oracles: np.ndarray):
    """Per-sample 1 - cos; zero-norm vectors use cos = 0 (distance 1).

    Returns (distances, degenerate_count). Samples whose oracle is zero-norm
    are skipped entirely.
    """
    cn = np.linalg.norm(candidates, axis=1)
    on = np.linalg.norm(oracles, axis=1)
    keep = on > 1e-12
    degenerate = int((cn <= 1e-12).sum())
    dots = (candidates * oracles).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where((cn > 1e-12) & keep, dots / (cn * on), 0.0)
    return (1.0 - cos)[keep], degenerate


def sinkhorn_distance(x: np.ndarray, y: np.ndarray, eps: float = 0.05,
                      iterations: int = 200) -> float:
    """Entropy-regularized OT cost between point clouds, standardized jointly.

    Uniform marginals, squared-Euclidean ground cost, log-domain updates;
    returns the transport cost sum(pi * C).
    """
    both = np.concatenate([x, y], axis=0)
    mean = both.mean(axis=0)
    std = both.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xs = (x - mean) / std
    ys = (y - mean) / std
    n, m = len(xs), len(ys)
    c = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(axis=2)
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    u = np.zeros(n)
    v = np.zeros(m)

    def modified(u, v):
        return (-c + u[:, None] + v[None, :]) / eps

    for _ in range(iterations):
        m_uv = modified(u, v)
        u = eps * (log_a - _logsumexp(m_uv, axis=1)) + u
        m_uv = modified(u, v)
        v = eps * (log_b - _logsumexp(m_uv, axis=0)) + v
    pi = np.exp(modified(u, v))
    return float((pi * c).sum())


def _logsumexp(a, axis):
    mx = a.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(a - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def antithetic_cosine(rng: np.random.Generator, oracles: np.ndarray):
    """Random-latent cosine distances via per-sample antithetic pairs.

    Each sample gets the two-draw estimate over {g, -g} (both N(0, I)); the
    cosine terms cancel exactly, so every sample's distance is exactly its
    expectation 1.0 and the Random baseline carries no Monte-Carlo noise.
    Returns (per-sample distances, one representative draw per sample).
    """
    g = rng.standard_normal(oracles.shape)
    d_pos, _ = cosine_distances(g, oracles)
    d_neg, _ = cosine_distances(-g, oracles)
    return 0.5 * (d_pos + d_neg), g


def oracle_distance(flow: FlowModel, lra_model: LatentRegionModel, dataset: Dataset,
                    skel: Skeleton, seed: int, config_hash: str,
                    sinkhorn_eps: float = 0.05, sinkhorn_iters: int = 200):
    """Distance of candidate latents (random / zeros / mu) to the oracle z*."""
    zstar = oracle_latents(flow, dataset.pose_vecs, dataset.conds)
    mus, _, _ = predict_regions(lra_model, dataset, skel)
    rng = np.random.default_rng((seed, STREAM_EVAL, 1))
    random_dist, random_draws = antithetic_cosine(rng, zstar)
    report = MetricsReport(seed, config_hash)
    report.add("cosine_distance", "random", random_dist.mean(), len(random_dist))
    report.add("cosine_degenerate", "random", 0.0, len(random_dist))
    for name, cand in (("zeros", np.zeros_like(zstar)), ("mu", mus)):
        dist, degenerate = cosine_distances(cand, zstar)
        report.add("cosine_distance", name, dist.mean(), len(dist))
        report.add("cosine_degenerate", name, float(degenerate), len(dist))
    for name, cand in (("random", random_draws), ("zeros", np.zeros_like(zstar)),
                       ("mu", mus)):
        report.add("sinkhorn_distance", name,
                   sinkhorn_distance(cand, zstar, sinkhorn_eps, sinkhorn_iters),
                   dataset.count)
    return report


# -- refinement trace reporting ----------------------------------------------------------


REPORT_COLUMNS = ("space", "init_rule", "iteration", "mpjpe_upper", "mpjpe_full")


def aggregate_traces(traces: list) -> list:
    """Mean MPJPE per (space, init_rule, iteration), strictly ordered rows."""
    if not traces:
        raise ValueError("need at least one trace")
    buckets = {}
    for tr in traces:
        for field in ("space", "init_rule", "iterations", "mpjpe_upper", "mpjpe_full"):
            if field not in tr:
                raise ValueError(f"malformed trace: missing {field}")
        for it, up, fl in zip(tr["iterations"], tr["mpjpe_upper"], tr["mpjpe_full"]):
            key = (tr["space"], tr["init_rule"], int(it))
            buckets.setdefault(key, []).append((up, fl))
    rows = []
    for key in sorted(buckets):
        vals = np.asarray(buckets[key])
        rows.append({
            "space": key[0], "init_rule": key[1], "iteration": key[2],
            "mpjpe_upper": float(vals[:, 0].mean()),
            "mpjpe_full": float(vals[:, 1].mean()),
            "count": len(vals),
        })
    return rows


def write_report_csv(rows: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row["space"], row["init_rule"], row["iteration"],
                             repr(row["mpjpe_upper"]), repr(row["mpjpe_full"])])
