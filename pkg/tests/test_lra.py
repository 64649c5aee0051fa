import math

import numpy as np
import pytest

from poseprior import lra
from poseprior.diffmath import Array, Tape, backward, grad_check
from poseprior.flow import LOG_2PI
from poseprior.kinematics import load_skeleton


def tiny_model(seed=0, **kw):
    args = dict(joints=6, pose_dim=10, cond_dim=4, embed=8, layers=2, heads=2,
                ff=16, groups=3, modes=5, head_hidden=12, seed=seed,
                tracked=(0, 1, 2))
    args.update(kw)
    return lra.LatentRegionModel(**args)


def reference_encode(model, tokens, mask_row, attn_exclude=None):
    """Independent numpy re-implementation of the encoder forward pass."""
    p = {k: v.data for k, v in model.params().items()}
    B, J, _ = tokens.shape
    E, H = model.embed, model.heads
    dh = E // H

    def ln(x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5)

    def smax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def lrelu(x, s=0.01):
        return np.where(x > 0, x, s * x)

    emb = lrelu(tokens.reshape(B * J, 9) @ p["embed.w"] + p["embed.b"]).reshape(B, J, E)
    m = mask_row.astype(float)[None, :, None]
    x = emb * (1 - m) + p["mask_token"] * m
    x = x + model.pe
    bias = np.zeros(J)
    if attn_exclude:
        bias[list(attn_exclude)] = -1e30
    for l in range(model.layers):
        pre = f"layer{l}."
        a = ln(x) * p[pre + "ln1_g"] + p[pre + "ln1_b"]
        q = a @ p[pre + "wq"] + p[pre + "bq"]
        k = a @ p[pre + "wk"] + p[pre + "bk"]
        v = a @ p[pre + "wv"] + p[pre + "bv"]
        heads = []
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, :, sl] @ k[:, :, sl].transpose(0, 2, 1) / math.sqrt(dh)
            w = smax(scores + bias)
            heads.append(w @ v[:, :, sl])
        x = x + np.concatenate(heads, axis=2) @ p[pre + "wo"] + p[pre + "bo"]
        b = ln(x) * p[pre + "ln2_g"] + p[pre + "ln2_b"]
        x = x + np.maximum(b @ p[pre + "ff_w1"] + p[pre + "ff_b1"], 0.0) @ p[pre + "ff_w2"] + p[pre + "ff_b2"]
    return ln(x) * p["final_ln_g"] + p["final_ln_b"]


# -- encoder ------------------------------------------------------------------------


def test_encode_matches_independent_trace():
    model = tiny_model(seed=1)
    rng = np.random.default_rng(2)
    tokens = rng.normal(size=(3, 6, 9))
    mask_row = np.array([False, False, False, True, False, True])
    got = model.encode(tokens, mask_row).data
    expected = reference_encode(model, tokens, mask_row)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_encode_zeroed_weights_bias_pathway():
    model = tiny_model(seed=3)
    for name, arr in model.params().items():
        if name.endswith("_g"):
            arr.data = np.ones_like(arr.data)
        else:
            arr.data = np.zeros_like(arr.data)
    tokens = np.random.default_rng(4).normal(size=(2, 6, 9))
    got = model.encode(tokens, None).data
    expected = reference_encode(model, tokens, np.zeros(6, dtype=bool))
    np.testing.assert_allclose(got, expected, atol=1e-12)
    # zero weights: every token collapses to the same pathway -> rows identical
    np.testing.assert_allclose(got[0, 0], got[1, 0], atol=1e-12)


def test_attention_rows_sum_to_one():
    model = tiny_model(seed=5)
    tokens = np.random.default_rng(6).normal(size=(2, 6, 9))
    _, attn = model.encode(tokens, None, return_attn=True)
    assert len(attn) == model.layers * model.heads
    for w in attn:
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), np.ones(w.shape[:-1]), atol=1e-9)


def test_permutation_equivariance():
    model = tiny_model(seed=7)
    rng = np.random.default_rng(8)
    tokens = rng.normal(size=(2, 6, 9))
    base = model.encode(tokens, None).data
    perm = rng.permutation(6)
    saved_pe = model.pe.copy()
    model.pe = model.pe[perm]
    try:
        permuted = model.encode(tokens[:, perm], None).data
    finally:
        model.pe = saved_pe
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-12)


def test_encode_rejects_masking_tracked():
    model = tiny_model()
    tokens = np.zeros((1, 6, 9))
    with pytest.raises(ValueError):
        model.encode(tokens, [0, 3])


# -- masked joint prediction -----------------------------------------------------------


def test_mjp_zero_when_exact():
    model = tiny_model(seed=9)
    targets = np.random.default_rng(10).normal(size=(2, 6, 9))
    preds = Array(targets)
    loss = model.mjp_loss(preds, targets, [3, 4])
    assert loss.item() == 0.0


def test_mjp_hand_value():
    model = tiny_model()
    targets = np.zeros((1, 6, 9))
    pred = np.zeros((1, 6, 9))
    pred[0, 3, :] = 0.1  # one masked joint, 0.1 error in all 9 dims -> 0.09
    loss = model.mjp_loss(Array(pred), targets, [3])
    assert loss.item() == pytest.approx(0.09, abs=1e-12)


def test_mjp_vs_brute_force():
    model = tiny_model()
    rng = np.random.default_rng(11)
    preds = rng.normal(size=(4, 6, 9))
    targets = rng.normal(size=(4, 6, 9))
    masked = [3, 5]
    got = model.mjp_loss(Array(preds), targets, masked).item()
    acc = 0.0
    for b in range(4):
        for j in masked:
            acc += ((preds[b, j] - targets[b, j]) ** 2).sum()
    assert got == pytest.approx(acc / 4.0, abs=1e-12)


def test_mjp_empty_mask_rejected():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.mjp_loss(Array(np.zeros((1, 6, 9))), np.zeros((1, 6, 9)), [])


# -- pooling ---------------------------------------------------------------------------


def test_pool_concatenates_tracked_in_order():
    model = tiny_model()
    feats = np.zeros((1, 6, 8))
    for j in range(6):
        feats[0, j] = j + 1.0
    pooled = model.pool_head_hands(Array(feats))
    assert pooled.shape == (1, 24)
    np.testing.assert_allclose(pooled.data[0, :8], 1.0)   # tracked[0] = 0
    np.testing.assert_allclose(pooled.data[0, 8:16], 2.0)
    np.testing.assert_allclose(pooled.data[0, 16:], 3.0)


def test_pool_shape_is_3e():
    model = tiny_model()
    feats = model.encode(np.zeros((2, 6, 9)), None)
    assert model.pool_head_hands(feats).shape == (2, 3 * model.embed)


def test_pooled_output_ignores_attention_excluded_joint():
    model = tiny_model(seed=12)
    rng = np.random.default_rng(13)
    tokens = rng.normal(size=(1, 6, 9))
    changed = tokens.copy()
    changed[0, 4] += 10.0
    a = model.pool_head_hands(model.encode(tokens, None, attn_exclude=[4])).data
    b = model.pool_head_hands(model.encode(changed, None, attn_exclude=[4])).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    # sanity: without exclusion the change does propagate
    c = model.pool_head_hands(model.encode(changed, None)).data
    assert np.abs(a - c).max() > 1e-8


# -- categorical latent ------------------------------------------------------------------


def test_to_latent_zero_weights_uniform():
    model = tiny_model(seed=14)
    for name in ("tolat.w1", "tolat.b1", "tolat.w2", "tolat.b2"):
        arr = model.params()[name]
        arr.data = np.zeros_like(arr.data)
    logits = model.to_latent(Array(np.zeros((2, 24))), np.zeros((2, 4)))
    assert logits.shape == (2, 3, 5)
    soft = logits.softmax(axis=-1).data
    np.testing.assert_allclose(soft, np.full((2, 3, 5), 1.0 / 5.0), atol=1e-15)


def test_to_latent_rows_normalize():
    model = tiny_model(seed=15)
    rng = np.random.default_rng(16)
    logits = model.to_latent(Array(rng.normal(size=(3, 24))), rng.normal(size=(3, 4)))
    soft = logits.softmax(axis=-1).data
    np.testing.assert_allclose(soft.sum(axis=-1), np.ones((3, 3)), atol=1e-12)


# -- gumbel-softmax -----------------------------------------------------------------------


def test_gumbel_low_temperature_sharpness():
    logits = np.array([[10.0, 0.0, 0.0]])
    hits = 0
    for seed in range(1000):
        y = lra.gumbel_softmax_sample(logits, 0.1, np.random.default_rng(seed)).data
        if y.max() > 0.99:
            hits += 1
    assert hits >= 990


def test_gumbel_argmax_frequencies_match_softmax():
    logits = np.array([1.0, 0.5, 0.0, -0.5, -1.0])
    e = np.exp(logits - logits.max())
    probs = e / e.sum()
    rng = np.random.default_rng(17)
    counts = np.zeros(5)
    for _ in range(10000):
        y = lra.gumbel_softmax_sample(logits[None, :], 1.0, rng).data[0]
        counts[np.argmax(y)] += 1
    np.testing.assert_allclose(counts / 10000.0, probs, atol=0.02)


def test_gumbel_rows_sum_to_one_any_tau():
    rng = np.random.default_rng(18)
    logits = rng.normal(size=(4, 3, 5))
    for tau in (0.05, 1.0, 10.0):
        y = lra.gumbel_softmax_sample(logits, tau, np.random.default_rng(0)).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones((4, 3)), atol=1e-9)


def test_gumbel_converges_to_one_hot():
    # sharpness needs a clear top logit (cf. the (10, 0, 0) case): Gumbel noise
    # has unit scale, so near-tied logits keep a few percent of soft mass at
    # any temperature
    rng = np.random.default_rng(19)
    logits = rng.normal(size=(64, 4, 6))
    winner = rng.integers(0, 6, size=(64, 4))
    np.put_along_axis(logits, winner[..., None], 10.0, axis=-1)
    y = lra.gumbel_softmax_sample(logits, 0.05, np.random.default_rng(1)).data
    assert y.max(axis=-1).mean() > 0.999


def test_gumbel_gradient_flows():
    logits = Array(np.zeros((1, 2, 3)), requires_grad=True)
    with Tape() as tape:
        y = lra.gumbel_softmax_sample(logits, 1.0, np.random.default_rng(2))
        loss = (y * Array(np.arange(6.0).reshape(1, 2, 3))).sum()
        backward(loss, tape)
    assert logits.grad is not None and np.abs(logits.grad).max() > 0


def test_gumbel_rejects_bad_tau():
    with pytest.raises(ValueError):
        lra.gumbel_softmax_sample(np.zeros((1, 2)), 0.0, np.random.default_rng(0))


def test_gumbel_hard_mode_one_hot():
    y = lra.gumbel_softmax_sample(np.zeros((2, 3, 4)), 1.0, np.random.default_rng(3), hard=True)
    assert set(np.unique(y)) == {0.0, 1.0}
    np.testing.assert_allclose(y.sum(axis=-1), np.ones((2, 3)))


# -- pose decoding -------------------------------------------------------------------------


def test_to_pose_space_deterministic_and_rec_loss():
    model = tiny_model(seed=20)
    rng = np.random.default_rng(21)
    code = rng.normal(size=(2, 3, 5))
    cond = rng.normal(size=(2, 4))
    a = model.to_pose_space(code, cond).data
    b = model.to_pose_space(code, cond).data
    np.testing.assert_array_equal(a, b)
    assert model.rec_loss(Array(a), a).item() == 0.0
    shifted = a + 0.1
    got = model.rec_loss(Array(shifted), a).item()
    acc = ((shifted - a) ** 2).sum(axis=1).mean()
    assert got == pytest.approx(acc, abs=1e-12)


# -- latent region --------------------------------------------------------------------------


def test_sigma_softplus_at_zero_preactivation():
    model = tiny_model(seed=22)
    for name in ("sigma.w1", "sigma.b1", "sigma.w2", "sigma.b2"):
        arr = model.params()[name]
        arr.data = np.zeros_like(arr.data)
    rng = np.random.default_rng(23)
    logits = Array(rng.normal(size=(2, 3, 5)))
    mu, sigma = model.latent_region(logits, rng.normal(size=(2, 4)))
    np.testing.assert_allclose(sigma.data, math.log(2.0), atol=1e-12)
    assert mu.shape == (2, 10) and sigma.shape == (2, 10)


def test_latent_region_distinct_conditions():
    model = tiny_model(seed=24)
    rng = np.random.default_rng(25)
    # output layers are zero-initialized; give them weight so conditions matter
    model.params()["mu.w2"].data = rng.normal(size=(12, 10)) * 0.1
    logits = Array(rng.normal(size=(1, 3, 5)))
    mu1, _ = model.latent_region(logits, rng.normal(size=(1, 4)))
    mu2, _ = model.latent_region(logits, rng.normal(size=(1, 4)))
    assert np.abs(mu1.data - mu2.data).max() > 1e-8


def test_lra_loss_closed_form_at_oracle():
    model = tiny_model()
    D = model.pose_dim
    z = np.random.default_rng(26).normal(size=(3, D))
    mu = Array(z)
    sigma = Array(np.ones((3, D)))
    loss = model.lra_loss(mu, sigma, z)
    assert loss.item() == pytest.approx(0.5 * D * LOG_2PI, abs=1e-10)


def test_lra_loss_rec_term_contribution():
    model = tiny_model()
    D = model.pose_dim
    z = np.zeros((1, D))
    mu_off = np.zeros((1, D))
    mu_off[0, 0] = 2.0  # ||mu - z|| = 2 -> alpha_rec * 4 = 2
    base = model.lra_loss(Array(z), Array(np.ones((1, D))), z).item()
    shifted = model.lra_loss(Array(mu_off), Array(np.ones((1, D))), z).item()
    # nll term also grows by 0.5 * 4 = 2 (unit sigma), rec by 0.5 * 4 = 2
    assert shifted - base == pytest.approx(2.0 + 2.0, abs=1e-10)


def test_lra_loss_gradient_vs_finite_differences():
    model = tiny_model()
    rng = np.random.default_rng(27)
    z = rng.normal(size=(2, model.pose_dim))
    sigma = Array(np.abs(rng.normal(size=(2, model.pose_dim))) + 0.5)

    def f_mu(m):
        return model.lra_loss(m, sigma, z)

    err = grad_check(f_mu, Array(rng.normal(size=(2, model.pose_dim))), h=1e-6)
    assert err < 1e-5

    mu = Array(rng.normal(size=(2, model.pose_dim)))

    def f_sigma(s):
        return model.lra_loss(mu, s, z)

    err = grad_check(f_sigma, Array(np.abs(rng.normal(size=(2, model.pose_dim))) + 0.5), h=1e-6)
    assert err < 1e-5


# -- curriculum ---------------------------------------------------------------------------


def test_mask_schedule_start_empty():
    skel = load_skeleton()
    assert lra.mask_schedule(0, 10, skel) == ()


def test_mask_schedule_final_phase_all_but_tracked():
    skel = load_skeleton()
    final = lra.mask_schedule(9, 10, skel)
    assert final == lra.full_mask(skel)
    assert set(final) == set(range(22)) - set(skel.tracked)


def test_mask_schedule_monotone_and_never_tracked():
    skel = load_skeleton()
    prev = set()
    for e in range(20):
        cur = set(lra.mask_schedule(e, 20, skel))
        assert prev <= cur
        assert not (cur & set(skel.tracked))
        prev = cur


# -- region sampling -----------------------------------------------------------------------


def test_sample_region_floor_sigma_collapses():
    mu = np.arange(5.0)
    s = lra.sample_region(mu, np.zeros(5), 10, np.random.default_rng(28))
    np.testing.assert_allclose(s, np.broadcast_to(mu, (10, 5)), atol=1e-6)


def test_sample_region_law_of_large_numbers():
    mu = np.array([1.0, -2.0, 0.5])
    sigma = np.array([0.5, 1.5, 2.0])
    s = lra.sample_region(mu, sigma, 100_000, np.random.default_rng(29))
    bound = 4.0 * sigma / math.sqrt(100_000)
    assert np.all(np.abs(s.mean(axis=0) - mu) < bound)


def test_sample_region_seeded_determinism():
    mu, sigma = np.zeros(4), np.ones(4)
    a = lra.sample_region(mu, sigma, 7, np.random.default_rng(30))
    b = lra.sample_region(mu, sigma, 7, np.random.default_rng(30))
    np.testing.assert_array_equal(a, b)


def test_sample_region_rejects_zero_draws():
    with pytest.raises(ValueError):
        lra.sample_region(np.zeros(3), np.ones(3), 0, np.random.default_rng(0))
