import concurrent.futures
import logging
import math

import numpy as np
import pytest

from uwbdar import nn
from uwbdar.adapt import (
    InputAdapter,
    ProjectionKernel,
    average_kernel_channels,
    baseline_simple_resize,
    patch_embed,
    patchify,
)
from uwbdar.domainmaps import Axis, DomainMap, FREQUENCY_TIME, RANGE_TIME
from uwbdar.model import (
    BranchSpec,
    EncoderConfig,
    FREQ_LAYERS,
    FusionHead,
    ModelSpec,
    build_model,
    early_fusion_tokens,
    encode,
    forward_earlyfusion_vit,
    forward_isavit_fusion,
    freq_feature,
    freq_min_shape,
    fuse,
    model_from_fusion_head,
    random_bundle,
)
from uwbdar.training import (
    TrainConfig,
    TrainingDiverged,
    few_shot_adapt,
    fresh_lr_scales,
    pev_similarity_stats,
    train,
)

from helpers import FREQ_SHAPE, fusion_batch, fusion_model, gradient_picks
from oracles import (
    bilinear_resize,
    block_pool,
    encoder_reference,
    finite_difference_check,
    freq_reference,
    head_reference,
    ln,
)

CFG8 = EncoderConfig(d=8, layers=1, heads=2)


def test_encoder_matches_straight_line_reference(rng):
    b = random_bundle(CFG8, seed=5)
    # non-trivial norms and biases so every term is exercised
    enc = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in b.encoder.items()}
    tokens = rng.standard_normal((197, 8))
    got = encode(tokens, enc, CFG8)
    ref = encoder_reference(tokens, enc, 1, 2)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


def test_encoder_permutation_invariance(rng):
    b = random_bundle(CFG8, seed=1)
    tokens = rng.standard_normal((197, 8))
    perm = np.concatenate([[0], 1 + rng.permutation(196)])
    np.testing.assert_allclose(encode(tokens[perm], b), encode(tokens, b), rtol=0, atol=1e-12)


def test_encoder_zero_blocks_are_identity(rng):
    b = random_bundle(CFG8, seed=1)
    enc = {k: (np.zeros_like(v) if any(s in k for s in ("attn.wo", "attn.bo", "mlp.w2", "mlp.b2")) else v)
           for k, v in b.encoder.items()}
    tokens = rng.standard_normal((197, 8))
    np.testing.assert_array_equal(encode(tokens, enc, CFG8), tokens[0])


def test_encode_rejects_wrong_dim(rng):
    with pytest.raises(ValueError, match="d=8"):
        encode(rng.standard_normal((197, 6)), random_bundle(CFG8))
    with pytest.raises(ValueError):
        EncoderConfig(d=10, heads=4)


def test_fuse_examples():
    r = np.array([1.0, 2.0, 3.0])
    f = np.array([1.0, -1.0])
    np.testing.assert_array_equal(fuse(r, f, 0.0), [1, 2, 3, 0, 0])
    np.testing.assert_array_equal(fuse(r, f, 1.0), [1, 2, 3, 1, -1])
    np.testing.assert_array_equal(fuse(r, f, 2.0)[3:], [2, -2])
    with pytest.raises(ValueError):
        fuse(r, f, float("nan"))


# -- frequency extractor ----------------------------------------------------


def test_freq_feature_loop_oracle(rng):
    w = FusionHead.init(8, seed=2).freq
    m = rng.standard_normal((12, 41))  # ragged last column is not covered by any block
    got = freq_feature(m, w)
    np.testing.assert_allclose(got, freq_reference(m, w, FREQ_LAYERS), rtol=0, atol=1e-10)
    other = m.copy()
    other[:, -1] += 5.0
    np.testing.assert_allclose(freq_feature(other, w), freq_reference(other, w, FREQ_LAYERS), rtol=0, atol=1e-10)


def test_freq_feature_shapes_and_errors(rng):
    head = FusionHead.init(8, seed=0)
    assert freq_feature(rng.standard_normal((89, 500)), head).shape == (FREQ_LAYERS[-1][2],)
    mh, mw = freq_min_shape()
    with pytest.raises(ValueError, match=f"{mh}x{mw}"):
        freq_feature(np.zeros((mh - 1, mw)), head)
    rmap = DomainMap(RANGE_TIME, np.zeros((20, 40)), Axis("range"), Axis("slow_time"))
    with pytest.raises(ValueError):
        freq_feature(rmap, head)
    fmap = DomainMap(FREQUENCY_TIME, np.full((20, 40), 3.0), Axis("frequency"), Axis("slow_time"))
    # a constant map centres to zero: the feature only depends on the biases
    np.testing.assert_array_equal(freq_feature(fmap, head), freq_feature(np.zeros((20, 40)), head))


# -- composed pipelines -----------------------------------------------------


def isa_fusion_oracle(r, f, bundle, head):
    """ISA tokens, encoder, extractor, norms, fuse, head: every stage from the reference pieces."""
    k = math.ceil(max(r.shape) / 14)
    assert 16 % k == 0
    canvas = bilinear_resize(r, (14 * k, 14 * k))
    k16 = bundle.kernel.mean(axis=1)
    kern = np.stack([block_pool(k16[m], k) for m in range(bundle.config.d)])
    tokens = [bundle.class_token + bundle.pev.class_token_pev]
    for i in range(14):
        for j in range(14):
            patch = canvas[i * k:(i + 1) * k, j * k:(j + 1) * k]
            tokens.append(np.array([(patch * kern[m]).sum() for m in range(bundle.config.d)])
                          + bundle.kernel_bias + bundle.pev.grid[i, j])
    feat_r = encoder_reference(tokens, bundle.encoder, bundle.config.layers, bundle.config.heads)
    feat_f = freq_reference(f, head.freq, head.freq_layers)
    z = np.concatenate([ln(feat_r, head.norms["range.g"], head.norms["range.b"]),
                        head.beta * ln(feat_f, head.norms["freq.g"], head.norms["freq.b"])])
    return head_reference(z, head.classifier)


def perturbed_head(d, seed):
    head = FusionHead.init(d, seed=seed)
    r = np.random.default_rng(seed + 1)
    head.beta = 0.7
    head.norms = {k: v + 0.2 * r.standard_normal(v.shape) for k, v in head.norms.items()}
    return head


def test_isavit_fusion_composed_oracle(rng):
    bundle = random_bundle(CFG8, seed=9)
    head = perturbed_head(8, 3)
    r = rng.standard_normal((20, 100))  # k = 8
    f = rng.standard_normal((12, 40))
    got = forward_isavit_fusion(r, f, bundle, head)
    np.testing.assert_allclose(got, isa_fusion_oracle(r, f, bundle, head), rtol=0, atol=1e-8)
    again = forward_isavit_fusion(r, f, bundle, head)
    assert got.tobytes() == again.tobytes()


def test_beta_zero_ignores_frequency_map(rng):
    bundle = random_bundle(CFG8, seed=9)
    head = perturbed_head(8, 4)
    head.beta = 0.0
    r = rng.standard_normal((20, 100))
    a = forward_isavit_fusion(r, rng.standard_normal((12, 40)), bundle, head)
    b = forward_isavit_fusion(r, 1e3 * rng.standard_normal((12, 40)), bundle, head)
    assert a.tobytes() == b.tobytes()
    model, _ = fusion_model()
    model.params["beta"][:] = 0.0
    x, _, _ = fusion_batch(model)
    y = [x[0], x[1] * -50.0 + 3.0]
    assert model.logits(x).tobytes() == model.logits(y).tobytes()


def test_batched_model_matches_functional(rng):
    bundle = random_bundle(CFG8, seed=2)
    head = perturbed_head(8, 5)
    r = rng.standard_normal((3, 51, 60))
    f = rng.standard_normal((3, 16, 64))
    model = model_from_fusion_head(bundle, head, r.shape[1:], f.shape[1:])
    ad = model.spec.branches[0].adapter
    batched = model.logits([ad.patches(r), f])
    for i in range(3):
        np.testing.assert_allclose(batched[i], forward_isavit_fusion(r[i], f[i], bundle, head), rtol=0, atol=1e-9)


def test_early_fusion_linearity(rng):
    bundle = random_bundle(CFG8, seed=4)
    r = rng.standard_normal((51, 500))
    tok = early_fusion_tokens(r, r, bundle)
    assert tok.shape == (197, 8)
    # identical channels: the summed two-channel projection is a doubled single-channel one
    single = patch_embed(baseline_simple_resize(r), ProjectionKernel(2 * bundle.kernel16(), bundle.kernel_bias),
                         bundle.pev, class_token=bundle.class_token)
    np.testing.assert_allclose(tok, single.tokens, rtol=0, atol=1e-10)
    head = {**FusionHead.init(8, seed=1).classifier}
    head = {k: v for k, v in head.items()}
    head["head.0.w"] = head["head.0.w"][:8]
    np.testing.assert_allclose(forward_earlyfusion_vit(r, r, bundle, head),
                               head_reference(ln(encode(single, bundle), np.ones(8), np.zeros(8)), head),
                               rtol=0, atol=1e-8)


def test_early_fusion_zero_input_gives_pevs():
    bundle = random_bundle(CFG8, seed=4)
    tok = early_fusion_tokens(np.zeros((51, 500)), np.zeros((89, 500)), bundle)
    np.testing.assert_array_equal(tok[1:], bundle.pev.flat)
    np.testing.assert_array_equal(tok[0], bundle.pev.class_token_pev)


def test_early_fusion_batched_matches_functional(rng):
    bundle = random_bundle(CFG8, seed=4)
    ad = InputAdapter("simple", (224, 224), channels=2)
    spec = ModelSpec((BranchSpec("vit", "early", ad),), encoder=CFG8)
    model = build_model(spec, bundle, seed=0)
    r, f = rng.standard_normal((51, 500)), rng.standard_normal((89, 500))
    img = np.stack([baseline_simple_resize(r), baseline_simple_resize(f)])[None]
    head = {k: v for k, v in model.params.items() if k.startswith("head.")}
    head["norm.g"], head["norm.b"] = model.params["b0.norm.g"], model.params["b0.norm.b"]
    np.testing.assert_allclose(model.logits([ad.patches(img)])[0], forward_earlyfusion_vit(r, f, bundle, head),
                               rtol=0, atol=1e-9)


# -- training ---------------------------------------------------------------


def test_gradients_match_finite_differences():
    model, _ = fusion_model()
    model.params["beta"][:] = 0.8
    x, y, _ = fusion_batch(model, n=4)
    picks, groups = gradient_picks(model, n_per_group=8)
    worst, rows = finite_difference_check(model, x, y, picks)
    assert {name for name, *_ in rows} & set(groups["kernel"])
    assert worst < 1e-3, max(rows, key=lambda r: r[-1])


def test_first_adam_step_on_linear_toy():
    # loss = 0.5 * ||w x - t||^2, gradient (w x - t) x^T
    w = np.array([[0.5, -1.0, 2.0], [0.0, 0.25, -0.75]])
    x = np.array([1.0, -2.0, 0.5])
    t = np.array([0.3, -0.1])
    g = np.outer(w @ x - t, x)
    params = {"w": w.copy()}
    nn.Adam(lr=1e-2).step(params, {"w": g})
    # first bias-corrected step: m_hat = g, v_hat = g^2
    expect = w - 1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params["w"], expect, rtol=0, atol=1e-10)


def learnable_problem(n=40, seed=0):
    model, _ = fusion_model(seed=seed)
    r = np.random.default_rng(seed)
    y = np.arange(n) % 7
    ranges = r.standard_normal((n, 10, 30)) * 0.1
    ranges[np.arange(n), y, :] += 2.0  # class = bright row
    freqs = r.standard_normal((n, 12, 40))
    ad = model.spec.branches[0].adapter
    return model, [ad.patches(ranges), freqs], y


def test_training_reduces_loss_and_is_reproducible():
    model, x, y = learnable_problem()
    cfg = TrainConfig(epochs=12, batch=10, fresh_lr_scale=10.0)
    a, trace = train(model, x, y, cfg, seed=1)
    b, trace2 = train(model, x, y, cfg, seed=1)
    assert trace == trace2
    assert np.mean(trace[-3:]) < np.mean(trace[:3])
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    # the input model is not modified
    assert np.array_equal(model.params["beta"], [1.0])


def test_training_aborts_on_nan():
    model, x, y = learnable_problem(n=10)
    model.params["head.0.w"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(model, x, y, TrainConfig(epochs=1, batch=5))
    assert err.value.batch_index == 0 and err.value.lr == 1e-4


def test_train_config_bounds():
    with pytest.raises(ValueError):
        TrainConfig(lr=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch, cfg.adapt_epochs, cfg.adapt_batch) == (30, 25, 10, 5)


def test_few_shot_adapt(caplog):
    model, x, y = learnable_problem(n=10)
    with caplog.at_level(logging.WARNING):
        same, trace = few_shot_adapt(model, [v[:0] for v in x], y[:0])
    assert trace == [] and "no shots" in caplog.text
    assert all(np.array_equal(same.params[k], model.params[k]) for k in model.params)
    before = {k: v.copy() for k, v in model.params.items()}
    adapted, trace = few_shot_adapt(model, [v[:5] for v in x], y[:5], TrainConfig())
    assert len(trace) == 10
    assert all(np.array_equal(before[k], model.params[k]) for k in model.params)
    assert not np.array_equal(adapted.params["b0.pev"], model.params["b0.pev"])
    # the head-only boost used in training does not carry over to adaptation
    boosted, _ = few_shot_adapt(model, [v[:5] for v in x], y[:5], TrainConfig(fresh_lr_scale=10.0))
    assert all(np.array_equal(boosted.params[k], adapted.params[k]) for k in model.params)


def test_beta_shrinks_when_frequency_is_noise():
    # the noise is redrawn every step; a fixed draw can be fit in-sample and rewards beta
    finals = []
    for seed in range(3):
        model, x, y = learnable_problem(n=140, seed=seed)
        model = model.copy()
        r = np.random.default_rng(seed + 50)
        opt = nn.Adam(1e-4)
        scale = fresh_lr_scales(model, 10.0)
        names = set(model.trainable())
        for _ in range(150):
            idx = r.choice(len(y), 10, replace=False)
            _, grads = model.loss_and_grads([x[0][idx], r.standard_normal((10, *FREQ_SHAPE))], y[idx])
            opt.step(model.params, {k: g for k, g in grads.items() if k in names}, scale)
        finals.append(abs(float(model.params["beta"][0])))
    assert np.median(finals) < 1.0, finals


def test_fixed_beta_stays_put():
    model, _ = fusion_model(beta_trainable=False)
    x, y, _ = fusion_batch(model, n=6)
    trained, _ = train(model, x, y, TrainConfig(epochs=2, batch=3, fresh_lr_scale=10.0))
    assert trained.params["beta"][0] == 1.0


def test_inference_is_thread_safe():
    model, _ = fusion_model()
    x, _, _ = fusion_batch(model, n=8)
    ref = model.logits(x)
    with concurrent.futures.ThreadPoolExecutor(4) as ex:
        outs = list(ex.map(lambda _: model.logits(x), range(8)))
    assert all(o.tobytes() == ref.tobytes() for o in outs)


def test_argmax_ties_pick_lowest_index():
    model, _ = fusion_model()
    for k in list(model.params):
        if k.startswith("head."):
            model.params[k][:] = 0.0
    x, _, _ = fusion_batch(model, n=3)
    assert model.predict(x).tolist() == [0, 0, 0]


def test_build_model_rejects_mismatched_bundle():
    bundle = random_bundle(CFG8)
    spec = ModelSpec((BranchSpec("vit", "range", InputAdapter("isa", (10, 10))),), encoder=EncoderConfig(d=16, heads=2))
    with pytest.raises(ValueError):
        build_model(spec, bundle)


def test_pev_similarity_after_toy_pretraining(toy_bundle):
    stats = pev_similarity_stats(toy_bundle.pev)
    assert toy_bundle.provenance == "toy-pretrained"
    assert stats["adjacent"] > stats["far"], stats
    # the random control carries no spatial structure by construction; just report it
    control = pev_similarity_stats(random_bundle(EncoderConfig(d=64)).pev)
    assert abs(control["adjacent"] - control["far"]) < 0.1
