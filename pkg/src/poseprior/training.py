"""Two-stage optimization and its configuration.

Stage 1 fits the flow by weighted negative log-likelihood (intermediate
supervision taps included). Stage 2 freezes the flow, derives oracle latents
z* = f^{-1}(x, c) for every record once, and trains the latent-region
approximator under curriculum masking with the masked-joint, reconstruction,
and region losses. The flow's nll term is dropped in stage 2 — the flow is
frozen, so its gradient is identically zero. Hand-dropout fine-tuning
continues stage 2 with per-sample hand masking at the final curriculum mask.

All randomness flows from ``TrainConfig.seed`` through named substreams, so a
(seed, config, dataset) triple reproduces checkpoints bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .datagen import Dataset
from .diffmath import Array, NonFiniteError, Tape, backward
from .flow import FlowModel, default_taps
from .kinematics import Skeleton, joint_tokens
from .lra import LatentRegionModel, full_mask, gumbel_softmax_sample, mask_schedule


class ConfigError(ValueError):
    pass


class DivergenceError(NonFiniteError):
    """Training objective became NaN/Inf."""


# substream labels for seed derivation
_STREAM_FLOW = 1
_STREAM_LRA = 2
_STREAM_FINETUNE = 3
_STREAM_MLP = 4
STREAM_EVAL = 5
STREAM_REFINE = 6
STREAM_OOD = 7


@dataclass
class FlowSpec:
    blocks: int = 8
    hidden: int = 256
    taps: list | None = None      # None -> even interior blocks; [] -> off


@dataclass
class LraSpec:
    embed: int = 96
    layers: int = 2
    heads: int = 4
    ff: int = 192
    groups: int = 16
    modes: int = 32
    head_hidden: int = 160
    tau: float = 1.0


@dataclass
class DataSpec:
    n_train: int = 20000
    n_test: int = 2000
    manip_sigma: float = 0.1
    manip_joints: int = 4


@dataclass
class RefineSpec:
    lambda_data: float = 1.0
    lambda_prior: float = 0.01
    lambda_reg: float = 0.1
    instances: int = 200


@dataclass
class EvalSpec:
    sample_k: int = 10
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 200


@dataclass
class TrainConfig:
    lambda_nll: float = 1.0
    lambda_mjp: float = 1.0
    lambda_rec: float = 1.0
    lambda_lra: float = 1.0
    alpha_nll: float = 1.0
    alpha_rec: float = 0.5
    alpha_reg: float = 0.25
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 10
    lra_epochs: int = 10
    finetune_epochs: int = 10
    hand_dropout_p: float = 0.2
    seed: int = 0
    clip_grad_norm: float | None = 10.0
    val_fraction: float = 0.05
    curriculum_bounds: tuple = (0.125, 0.25, 0.375, 0.5)
    flow: FlowSpec = field(default_factory=FlowSpec)
    lra: LraSpec = field(default_factory=LraSpec)
    data: DataSpec = field(default_factory=DataSpec)
    refine: RefineSpec = field(default_factory=RefineSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        for name in ("lambda_nll", "lambda_mjp", "lambda_rec", "lambda_lra",
                     "alpha_nll", "alpha_rec", "alpha_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0.0 <= self.hand_dropout_p <= 1.0):
            raise ConfigError("hand_dropout_p must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curriculum_bounds"] = list(self.curriculum_bounds)
        return d

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


_SECTIONS = {"flow": FlowSpec, "lra": LraSpec, "data": DataSpec,
             "refine": RefineSpec, "eval": EvalSpec}


def config_from_dict(raw: dict) -> TrainConfig:
    """Strict parse: unknown keys anywhere are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            sub_known = {f.name for f in fields(cls)}
            extra = set(value) - sub_known
            if extra:
                raise ConfigError(f"unknown config key {key}.{sorted(extra)[0]}")
            kwargs[key] = cls(**value)
        elif key == "curriculum_bounds":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(raw)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: trains end to end on CPU in minutes."""
    cfg = dict(learning_rate=1e-3, epochs=10, lra_epochs=16)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def full_scale_config(**overrides) -> TrainConfig:
    """Full-scale hyperparameters (16 blocks, hidden 512, G=64/M=128, batch 1024)."""
    cfg = dict(
        learning_rate=1e-4, batch_size=1024, epochs=100, lra_epochs=100,
        flow=FlowSpec(blocks=16, hidden=512),
        lra=LraSpec(embed=256, layers=3, heads=8, ff=512, groups=64, modes=128,
                    head_hidden=256),
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


# -- Adam ---------------------------------------------------------------------------


class AdamState:
    """First/second moment estimates with bias-corrected updates."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    total = np.sqrt(total)
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def collect_grads(params: dict) -> dict:
    grads = {}
    for name, p in params.items():
        if p.grad is not None:
            grads[name] = p.grad
        p.grad = None
    return grads


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


# -- stage 1: flow -----------------------------------------------------------------


def train_flow(config: TrainConfig, dataset: Dataset, skel: Skeleton,
               taps_override=None, log=None):
    """Fit the conditional flow; returns (model, per-epoch history)."""
    if dataset.count == 0:
        raise ValueError("cannot train on an empty dataset")
    D = skel.joint_count * 3
    spec = config.flow
    taps = spec.taps if taps_override is None else taps_override
    taps = default_taps(spec.blocks) if taps is None else tuple(taps)
    model = FlowModel(dim=D, cond_dim=dataset.conds.shape[1], blocks=spec.blocks,
                      hidden=spec.hidden, seed=config.seed, taps=taps)
    x_all = dataset.pose_vecs
    c_all = dataset.conds
    model.set_cond_stats(c_all.mean(axis=0), c_all.std(axis=0))

    rng = np.random.default_rng((config.seed, _STREAM_FLOW))
    n_val = int(round(dataset.count * config.val_fraction))
    order = rng.permutation(dataset.count)
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = model.params()
    state = AdamState(params)
    history = []
    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        epoch_obj = 0.0
        seen = 0
        for batch in _batches(len(perm), config.batch_size, perm):
            with Tape() as tape:
                loss = model.nll_loss(x_all[batch], c_all[batch]) * config.lambda_nll
                val = loss.item()
                if not np.isfinite(val):
                    raise DivergenceError(
                        f"flow NLL diverged at epoch {epoch} after {seen} samples"
                    )
                backward(loss, tape)
            grads = clip_gradients(collect_grads(params), config.clip_grad_norm)
            adam_step(state, params, grads, config.learning_rate)
            epoch_obj += val * len(batch)
            seen += len(batch)
        val_nll = model.nll_plain(x_all[val_idx], c_all[val_idx]) if n_val else float("nan")
        entry = {"epoch": epoch, "train_obj": epoch_obj / max(seen, 1), "val_nll": val_nll}
        history.append(entry)
        if log:
            log(f"flow epoch {epoch}: obj {entry['train_obj']:.4f} val_nll {val_nll:.4f}")
    return model, history


# -- stage 2: latent region approximator ----------------------------------------------


def oracle_latents(flow: FlowModel, pose_vecs: np.ndarray, conds: np.ndarray,
                   chunk: int = 4096) -> np.ndarray:
    """z* = f^{-1}(x, c) for every record (no gradient tracking)."""
    out = np.empty_like(pose_vecs)
    for lo in range(0, len(pose_vecs), chunk):
        hi = min(lo + chunk, len(pose_vecs))
        out[lo:hi] = flow.inverse(pose_vecs[lo:hi], conds[lo:hi]).data
    return out


def build_lra(config: TrainConfig, skel: Skeleton, cond_dim: int) -> LatentRegionModel:
    spec = config.lra
    return LatentRegionModel(
        joints=skel.joint_count, pose_dim=skel.joint_count * 3, cond_dim=cond_dim,
        embed=spec.embed, layers=spec.layers, heads=spec.heads, ff=spec.ff,
        groups=spec.groups, modes=spec.modes, head_hidden=spec.head_hidden,
        tau=spec.tau, seed=config.seed, tracked=skel.tracked,
    )


def _lra_batch_loss(config: TrainConfig, model: LatentRegionModel, tokens_b, cond_std_b,
                    pose_b, zstar_b, mask, rng, allow_hand_mask: bool = False):
    """lambda-weighted stage-2 objective for one batch; returns (loss, terms)."""
    feats = model.encode(tokens_b, mask, allow_hand_mask=allow_hand_mask)
    mask_arr = np.asarray(mask)
    has_mask = bool(mask_arr.any()) if mask_arr.ndim == 2 else mask_arr.size > 0
    if has_mask:
        preds = model.predict_masked_joints(feats)
        l_mjp = model.mjp_loss(preds, tokens_b, mask)
    else:
        l_mjp = Array(0.0)
    pooled = model.pool_head_hands(feats)
    logits = model.to_latent(pooled, cond_std_b)
    code = gumbel_softmax_sample(logits, model.tau, rng)
    decoded = model.to_pose_space(code, cond_std_b)
    l_rec = model.rec_loss(decoded, pose_b)
    mu, sigma = model.latent_region(logits, cond_std_b)
    l_lra = model.lra_loss(mu, sigma, zstar_b, config.alpha_nll, config.alpha_rec,
                           config.alpha_reg)
    loss = l_mjp * config.lambda_mjp + l_rec * config.lambda_rec + l_lra * config.lambda_lra
    return loss, (l_mjp.item(), l_rec.item(), l_lra.item())


def train_lra(config: TrainConfig, dataset: Dataset, flow: FlowModel, skel: Skeleton,
              log=None):
    """Stage 2: curriculum-masked LRA training against frozen-flow oracles."""
    flow_before = params_hash(flow.params())
    model = build_lra(config, skel, dataset.conds.shape[1])
    model.set_cond_stats(flow.cond_mean, flow.cond_std)

    tokens = joint_tokens(skel, dataset.poses, dataset.betas)
    cond_std = model.standardize_cond(dataset.conds)
    pose_vecs = dataset.pose_vecs
    zstar = oracle_latents(flow, pose_vecs, dataset.conds)

    rng = np.random.default_rng((config.seed, _STREAM_LRA))
    params = model.params()
    state = AdamState(params)

    # region loss at initialization (pre-training reference for the history)
    init_mu, init_sigma = model.region_np(tokens[:2048], (), cond_std[:2048])
    init_region_loss = float(model.lra_loss(
        Array(init_mu), Array(init_sigma), zstar[:2048],
        config.alpha_nll, config.alpha_rec, config.alpha_reg).item())

    history = []
    for epoch in range(config.lra_epochs):
        mask = mask_schedule(epoch, config.lra_epochs, skel, config.curriculum_bounds)
        perm = rng.permutation(dataset.count)
        sums = np.zeros(4)
        seen = 0
        for batch in _batches(dataset.count, config.batch_size, perm):
            with Tape() as tape:
                loss, terms = _lra_batch_loss(config, model, tokens[batch],
                                              cond_std[batch], pose_vecs[batch],
                                              zstar[batch], mask, rng)
                val = loss.item()
                if not np.isfinite(val):
                    raise DivergenceError(f"LRA loss diverged at epoch {epoch}")
                backward(loss, tape)
            grads = clip_gradients(collect_grads(params), config.clip_grad_norm)
            adam_step(state, params, grads, config.learning_rate)
            sums += np.array([val, *terms]) * len(batch)
            seen += len(batch)
        entry = {"epoch": epoch, "mask_size": len(mask),
                 "loss": sums[0] / seen, "mjp": sums[1] / seen,
                 "rec": sums[2] / seen, "lra": sums[3] / seen,
                 "lra_init": init_region_loss}
        history.append(entry)
        if log:
            log(f"lra epoch {epoch}: loss {entry['loss']:.4f} (mask {len(mask)})")
    if params_hash(flow.params()) != flow_before:
        raise RuntimeError("frozen flow parameters changed during stage 2")
    return model, history


def hand_dropout_masks(n: int, skel: Skeleton, p: float, rng) -> np.ndarray:
    """Per-sample (n, J) masks: final curriculum mask plus dropped hands."""
    base = np.zeros(skel.joint_count)
    base[list(full_mask(skel))] = 1.0
    masks = np.broadcast_to(base, (n, skel.joint_count)).copy()
    head, left, right = skel.tracked
    drop_left = rng.random(n) < p
    drop_right = rng.random(n) < p
    masks[drop_left, left] = 1.0
    masks[drop_right, right] = 1.0
    return masks


def apply_hand_visibility(cond_std: np.ndarray, left_visible, right_visible) -> np.ndarray:
    """Zero the standardized condition blocks of invisible hands (mean-fill)."""
    out = np.array(cond_std)
    left_visible = np.asarray(left_visible)
    right_visible = np.asarray(right_visible)
    out[~left_visible, 9:18] = 0.0
    out[~right_visible, 18:27] = 0.0
    return out


def finetune_hand_dropout(config: TrainConfig, dataset: Dataset, flow: FlowModel,
                          model: LatentRegionModel, skel: Skeleton,
                          p: float | None = None, epochs: int | None = None,
                          log=None):
    """Continue stage 2 at the full mask, dropping each hand token with prob p.

    A dropped hand is replaced by the mask token and its condition block is
    mean-filled, matching the CLI's --hands flag at generation time.
    """
    p = config.hand_dropout_p if p is None else p
    epochs = config.finetune_epochs if epochs is None else epochs
    flow_before = params_hash(flow.params())

    tokens = joint_tokens(skel, dataset.poses, dataset.betas)
    cond_std = model.standardize_cond(dataset.conds)
    pose_vecs = dataset.pose_vecs
    zstar = oracle_latents(flow, pose_vecs, dataset.conds)
    head, left, right = skel.tracked

    rng = np.random.default_rng((config.seed, _STREAM_FINETUNE))
    params = model.params()
    state = AdamState(params)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(dataset.count)
        sums = 0.0
        seen = 0
        for batch in _batches(dataset.count, config.batch_size, perm):
            masks = hand_dropout_masks(len(batch), skel, p, rng)
            cb = apply_hand_visibility(cond_std[batch], masks[:, left] == 0.0,
                                       masks[:, right] == 0.0)
            with Tape() as tape:
                loss, _ = _lra_batch_loss(config, model, tokens[batch], cb,
                                          pose_vecs[batch], zstar[batch], masks, rng,
                                          allow_hand_mask=True)
                val = loss.item()
                if not np.isfinite(val):
                    raise DivergenceError(f"fine-tune loss diverged at epoch {epoch}")
                backward(loss, tape)
            grads = clip_gradients(collect_grads(params), config.clip_grad_norm)
            adam_step(state, params, grads, config.learning_rate)
            sums += val * len(batch)
            seen += len(batch)
        history.append({"epoch": epoch, "loss": sums / seen})
        if log:
            log(f"finetune epoch {epoch}: loss {sums / seen:.4f}")
    if params_hash(flow.params()) != flow_before:
        raise RuntimeError("frozen flow parameters changed during fine-tuning")
    return model, history


# -- MLP baseline -----------------------------------------------------------------------


class MlpBaseline:
    """2-layer perceptron condition -> latent, the z = MLP_H comparison row."""

    def __init__(self, cond_dim: int, out_dim: int, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        self.hidden = hidden
        # zero-init output layer, mirroring the region heads: the prediction
        # starts at the zero latent and learns deviations
        self._params = {
            "w1": Array(rng.normal(scale=1.0 / np.sqrt(cond_dim), size=(cond_dim, hidden)),
                        requires_grad=True),
            "b1": Array(np.zeros(hidden), requires_grad=True),
            "w2": Array(np.zeros((hidden, out_dim)), requires_grad=True),
            "b2": Array(np.zeros(out_dim), requires_grad=True),
        }
        self.cond_mean = np.zeros(cond_dim)
        self.cond_std = np.ones(cond_dim)

    def params(self) -> dict:
        return dict(self._params)

    def forward(self, cond_std) -> Array:
        p = self._params
        h = (Array(cond_std) @ p["w1"] + p["b1"]).leaky_relu()
        return h @ p["w2"] + p["b2"]

    def predict(self, conds: np.ndarray) -> np.ndarray:
        cs = (np.asarray(conds) - self.cond_mean) / self.cond_std
        return self.forward(cs).data


def train_mlp_baseline(config: TrainConfig, dataset: Dataset, flow: FlowModel,
                       epochs: int | None = None, log=None):
    """Fit the baseline on ||z_hat - z*||^2; returns (model, history)."""
    model = MlpBaseline(dataset.conds.shape[1], flow.dim, seed=config.seed)
    model.cond_mean = flow.cond_mean.copy()
    model.cond_std = flow.cond_std.copy()
    cond_std = (dataset.conds - model.cond_mean) / model.cond_std
    zstar = oracle_latents(flow, dataset.pose_vecs, dataset.conds)

    epochs = config.lra_epochs if epochs is None else epochs
    rng = np.random.default_rng((config.seed, _STREAM_MLP))
    params = model.params()
    state = AdamState(params)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(dataset.count)
        total = 0.0
        seen = 0
        for batch in _batches(dataset.count, config.batch_size, perm):
            with Tape() as tape:
                pred = model.forward(cond_std[batch])
                loss = (pred - Array(zstar[batch])).square().sum(axis=1).mean()
                val = loss.item()
                if not np.isfinite(val):
                    raise DivergenceError("MLP baseline loss diverged")
                backward(loss, tape)
            grads = clip_gradients(collect_grads(params), config.clip_grad_norm)
            adam_step(state, params, grads, config.learning_rate)
            total += val * len(batch)
            seen += len(batch)
        history.append({"epoch": epoch, "loss": total / seen})
        if log:
            log(f"mlp epoch {epoch}: loss {total / seen:.4f}")
    return model, history
