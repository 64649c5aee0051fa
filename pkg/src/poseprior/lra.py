"""Transformer latent-region approximator.

Per-joint 9-vector tokens (6-D global rotation + position) are embedded,
masked joints swap in a learned mask token, and a pre-norm encoder produces
per-joint features. The three tracked joints' features are pooled by
concatenation, mapped to a G x M categorical latent (Gumbel-Softmax relaxed for
the reconstruction task, softmax-normalized for the region heads), and two
identical MLPs emit mu_H and sigma_H over the flow's base space.

Masked-joint prediction and pose reconstruction are train-time auxiliary
tasks; the condition [x_H, beta] joins at the latent heads, never inside
attention.
"""

from __future__ import annotations

import math

import numpy as np

from .diffmath import Array, concat, maximum_const, relu, softplus
from .flow import LOG_2PI

SIGMA_FLOOR = 1e-8


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(np.float64)


def mask_schedule(epoch: int, total_epochs: int, skel,
                  bounds=(0.125, 0.25, 0.375, 0.5)) -> tuple:
    """Curriculum mask for a stage-2 epoch: grows legs -> spine -> arms -> pelvis.

    Empty at epoch 0; all-but-tracked from the last phase boundary onward and
    held for the remaining epochs, so the deployment-style input (only head
    and hands visible) dominates the schedule. Tracked joints never mask.
    """
    if epoch < 0 or total_epochs < 1:
        raise ValueError("epoch/total_epochs out of range")
    if len(bounds) != 4:
        raise ValueError("curriculum needs four phase boundaries")
    f = epoch / total_epochs
    order = ("legs", "spine", "arms", "pelvis")
    joints = set()
    for name, b in zip(order, bounds):
        if f >= b:
            joints.update(skel.mask_groups[name])
    joints -= set(skel.tracked)
    return tuple(sorted(joints))


def full_mask(skel) -> tuple:
    """All joints except the tracked ones (the deployment condition)."""
    return tuple(sorted(set(range(skel.joint_count)) - set(skel.tracked)))


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator,
                          hard: bool = False):
    """Relaxed one-hot rows over the last axis; differentiable w.r.t. logits.

    With ``hard=True`` returns plain numpy one-hot rows (argmax of the relaxed
    sample), used at evaluation only.
    """
    if tau <= 0:
        raise ValueError("gumbel-softmax temperature must be positive")
    la = logits if isinstance(logits, Array) else Array(logits)
    g = rng.gumbel(size=la.shape)
    relaxed = ((la + Array(g)) / tau).softmax(axis=-1)
    if not hard:
        return relaxed
    idx = np.argmax(relaxed.data, axis=-1)
    one_hot = np.zeros_like(relaxed.data)
    np.put_along_axis(one_hot, idx[..., None], 1.0, axis=-1)
    return one_hot


def sample_region(mu, sigma, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws from N(mu, diag(sigma)^2); (n, D)."""
    if n < 1:
        raise ValueError("need at least one sample")
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_FLOOR)
    return mu[None, :] + sigma[None, :] * rng.standard_normal((n, mu.size))


def region_log_prob(mu, sigma, z) -> np.ndarray:
    """Diagonal-Gaussian log-density of z under (mu, sigma); broadcasts over rows."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    d = mu.shape[-1]
    q = ((z - mu) / sigma) ** 2
    return -0.5 * q.sum(axis=-1) - np.log(sigma).sum(axis=-1) - 0.5 * d * LOG_2PI


def _init(rng, shape):
    return Array(rng.normal(scale=1.0 / math.sqrt(shape[0]), size=shape), requires_grad=True)


def _zeros(shape):
    return Array(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Array(np.ones(shape), requires_grad=True)


class LatentRegionModel:
    """Encoder trunk plus latent heads; owns all trainable parameters."""

    def __init__(self, joints: int, pose_dim: int, cond_dim: int,
                 embed: int = 64, layers: int = 2, heads: int = 4, ff: int = 128,
                 groups: int = 16, modes: int = 32, head_hidden: int = 128,
                 tau: float = 1.0, seed: int = 0, tracked=(15, 20, 21)):
        if embed % heads != 0:
            raise ValueError("embedding size must be divisible by head count")
        self.joints = joints
        self.pose_dim = pose_dim
        self.cond_dim = cond_dim
        self.embed = embed
        self.layers = layers
        self.heads = heads
        self.ff = ff
        self.groups = groups
        self.modes = modes
        self.head_hidden = head_hidden
        self.tau = tau
        self.tracked = tuple(tracked)
        self.pe = sinusoidal_encoding(joints, embed)
        rng = np.random.default_rng(seed)
        p = {}
        p["embed.w"] = _init(rng, (9, embed))
        p["embed.b"] = _zeros(embed)
        p["mask_token"] = Array(rng.normal(scale=0.02, size=embed), requires_grad=True)
        for l in range(layers):
            pre = f"layer{l}."
            p[pre + "ln1_g"] = _ones(embed)
            p[pre + "ln1_b"] = _zeros(embed)
            for nm in ("wq", "wk", "wv", "wo"):
                p[pre + nm] = _init(rng, (embed, embed))
                p[pre + nm.replace("w", "b")] = _zeros(embed)
            p[pre + "ln2_g"] = _ones(embed)
            p[pre + "ln2_b"] = _zeros(embed)
            p[pre + "ff_w1"] = _init(rng, (embed, ff))
            p[pre + "ff_b1"] = _zeros(ff)
            p[pre + "ff_w2"] = _init(rng, (ff, embed))
            p[pre + "ff_b2"] = _zeros(embed)
        p["final_ln_g"] = _ones(embed)
        p["final_ln_b"] = _zeros(embed)
        p["mjp.w"] = _init(rng, (embed, 9))
        p["mjp.b"] = _zeros(9)
        pooled_dim = 3 * embed
        p["tolat.w1"] = _init(rng, (pooled_dim + cond_dim, head_hidden))
        p["tolat.b1"] = _zeros(head_hidden)
        p["tolat.w2"] = _init(rng, (head_hidden, groups * modes))
        p["tolat.b2"] = _zeros(groups * modes)
        lat_dim = groups * modes
        p["topose.w1"] = _init(rng, (lat_dim + cond_dim, head_hidden))
        p["topose.b1"] = _zeros(head_hidden)
        p["topose.w2"] = _init(rng, (head_hidden, pose_dim))
        p["topose.b2"] = _zeros(pose_dim)
        for head in ("mu", "sigma"):
            # zero-init output layers: mu starts at the base-space mode and
            # sigma at softplus(0); the heads then learn deviations from the
            # uninformed region
            p[f"{head}.w1"] = _init(rng, (lat_dim + cond_dim, head_hidden))
            p[f"{head}.b1"] = _zeros(head_hidden)
            p[f"{head}.w2"] = _zeros((head_hidden, pose_dim))
            p[f"{head}.b2"] = _zeros(pose_dim)
        self._params = p
        self.cond_mean = np.zeros(cond_dim)
        self.cond_std = np.ones(cond_dim)

    def params(self) -> dict:
        return dict(self._params)

    def set_cond_stats(self, mean, std) -> None:
        self.cond_mean = np.asarray(mean, dtype=np.float64).reshape(self.cond_dim)
        std = np.asarray(std, dtype=np.float64).reshape(self.cond_dim)
        self.cond_std = np.where(std < 1e-8, 1.0, std)

    def standardize_cond(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        return (c - self.cond_mean) / self.cond_std

    # -- encoder ---------------------------------------------------------------

    def encode(self, tokens, mask, attn_exclude=None, return_attn: bool = False,
               allow_hand_mask: bool = False):
        """Per-joint features (B, J, E) from (B, J, 9) tokens.

        ``mask`` is a per-batch joint set / bool vector or a (B, J) bool array;
        masked joints' embeddings are replaced by the learned mask token.
        Tracked joints are never maskable, except the two hands under
        ``allow_hand_mask`` (hand-dropout fine-tuning and generation with
        invisible hands). ``attn_exclude`` (diagnostic) removes the given
        joints from every attention's key set.
        """
        p = self._params
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        B, J, _ = tokens.shape
        m = self._mask_matrix(mask, B, J)
        protected = [self.tracked[0]] if allow_hand_mask else list(self.tracked)
        if np.any(m[:, protected] > 0):
            raise ValueError("tracked joints must never be masked (head, at minimum)")
        emb = (Array(tokens.reshape(B * J, 9)) @ p["embed.w"] + p["embed.b"]).leaky_relu()
        emb = emb.reshape((B, J, self.embed))
        mc = Array(m[..., None]).broadcast((B, J, self.embed))
        keep = Array(1.0 - m[..., None]).broadcast((B, J, self.embed))
        x = emb * keep + p["mask_token"].broadcast((B, J, self.embed)) * mc
        x = x + Array(self.pe)
        attn_maps = []
        dh = self.embed // self.heads
        scale = 1.0 / math.sqrt(dh)
        bias = None
        if attn_exclude is not None and len(attn_exclude):
            row = np.zeros(J)
            row[list(attn_exclude)] = -1e30
            bias = Array(row)
        for l in range(self.layers):
            pre = f"layer{l}."
            a = x.layer_norm() * p[pre + "ln1_g"] + p[pre + "ln1_b"]
            q = a @ p[pre + "wq"] + p[pre + "bq"]
            k = a @ p[pre + "wk"] + p[pre + "bk"]
            v = a @ p[pre + "wv"] + p[pre + "bv"]
            outs = []
            for h in range(self.heads):
                sl = slice(h * dh, (h + 1) * dh)
                qh, kh, vh = q[:, :, sl], k[:, :, sl], v[:, :, sl]
                scores = (qh @ kh.transpose((0, 2, 1))) * scale
                if bias is not None:
                    scores = scores + bias
                w = scores.softmax(axis=-1)
                if return_attn:
                    attn_maps.append(w.data)
                outs.append(w @ vh)
            x = x + concat(outs, axis=2) @ p[pre + "wo"] + p[pre + "bo"]
            b = x.layer_norm() * p[pre + "ln2_g"] + p[pre + "ln2_b"]
            x = x + relu(b @ p[pre + "ff_w1"] + p[pre + "ff_b1"]) @ p[pre + "ff_w2"] + p[pre + "ff_b2"]
        feats = x.layer_norm() * p["final_ln_g"] + p["final_ln_b"]
        if return_attn:
            return feats, attn_maps
        return feats

    def _mask_matrix(self, mask, B, J) -> np.ndarray:
        """Normalize a joint set / bool vector / (B, J) array to float (B, J)."""
        if mask is None:
            return np.zeros((B, J))
        mask = np.asarray(mask)
        if mask.ndim == 2:
            return mask.astype(np.float64)
        if mask.dtype == np.bool_:
            row = mask.astype(np.float64)
        else:
            row = np.zeros(J)
            row[mask.astype(np.int64)] = 1.0
        return np.broadcast_to(row, (B, J)).copy()

    # -- heads -------------------------------------------------------------------

    def predict_masked_joints(self, features) -> Array:
        """9-vector prediction per joint, (B, J, 9); the loss selects masked ones."""
        p = self._params
        return features @ p["mjp.w"] + p["mjp.b"]

    def mjp_loss(self, preds, targets, mask) -> Array:
        """Sum of squared 9-D errors over masked joints, averaged over the batch."""
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 2:
            targets = targets[None]
        B, J, _ = targets.shape
        m = self._mask_matrix(mask, B, J)
        if m.sum() == 0:
            raise ValueError("masked-joint loss needs a nonempty mask")
        sq = (preds - Array(targets)).square()
        sel = Array(m[..., None]).broadcast((B, J, 9))
        return (sq * sel).sum(axis=(1, 2)).mean()

    def pool_head_hands(self, features) -> Array:
        """Concatenate the tracked joints' features: (B, 3E)."""
        picked = features.gather(list(self.tracked), axis=1)
        B = picked.shape[0]
        return picked.reshape((B, 3 * self.embed))

    def to_latent(self, pooled, cond_std) -> Array:
        """G x M categorical logits from pooled features and the condition."""
        p = self._params
        h = concat([pooled, Array(cond_std)], axis=1)
        h = (h @ p["tolat.w1"] + p["tolat.b1"]).leaky_relu()
        logits = h @ p["tolat.w2"] + p["tolat.b2"]
        return logits.reshape((pooled.shape[0], self.groups, self.modes))

    def to_pose_space(self, code, cond_std) -> Array:
        """Decode a (relaxed) latent code to a pose vector (B, D)."""
        p = self._params
        code = code if isinstance(code, Array) else Array(code)
        B = code.shape[0]
        flat = code.reshape((B, self.groups * self.modes))
        h = concat([flat, Array(cond_std)], axis=1)
        h = (h @ p["topose.w1"] + p["topose.b1"]).leaky_relu()
        return h @ p["topose.w2"] + p["topose.b2"]

    def rec_loss(self, decoded, pose_vec) -> Array:
        diff = decoded - Array(np.asarray(pose_vec, dtype=np.float64))
        return diff.square().sum(axis=1).mean()

    def latent_region(self, logits, cond_std):
        """(mu, sigma) heads over the softmax-normalized latent representation."""
        p = self._params
        soft = logits.softmax(axis=-1)
        B = soft.shape[0]
        flat = soft.reshape((B, self.groups * self.modes))
        h = concat([flat, Array(cond_std)], axis=1)
        mu = (h @ p["mu.w1"] + p["mu.b1"]).leaky_relu() @ p["mu.w2"] + p["mu.b2"]
        pre = (h @ p["sigma.w1"] + p["sigma.b1"]).leaky_relu() @ p["sigma.w2"] + p["sigma.b2"]
        sigma = maximum_const(softplus(pre), SIGMA_FLOOR)
        return mu, sigma

    def lra_loss(self, mu, sigma, z_star, alpha_nll=1.0, alpha_rec=0.5, alpha_reg=0.25) -> Array:
        """Region loss: oracle NLL + mu-matching term - sigma regularizer."""
        z = Array(np.asarray(z_star, dtype=np.float64))
        diff = mu - z
        log_sigma = sigma.log()
        logp = (diff / sigma).square().sum(axis=1) * -0.5 - log_sigma.sum(axis=1) \
            - 0.5 * self.pose_dim * LOG_2PI
        rec = diff.square().sum(axis=1)
        reg = (log_sigma - sigma + 1.0).sum(axis=1)
        per_sample = logp * -alpha_nll + rec * alpha_rec - reg * alpha_reg
        return per_sample.mean()

    # -- inference -----------------------------------------------------------------

    def region_np(self, tokens, mask, cond_std):
        """(mu, sigma) as numpy for a batch; no gradient tracking."""
        feats = self.encode(tokens, mask)
        pooled = self.pool_head_hands(feats)
        logits = self.to_latent(pooled, cond_std)
        mu, sigma = self.latent_region(logits, cond_std)
        return mu.data, sigma.data
