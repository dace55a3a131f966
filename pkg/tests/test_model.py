from dataclasses import replace

import numpy as np
import pytest

from crossvit_sca import tensor as T
from crossvit_sca.fusion import AttentionWeights, LayerNormParams
from crossvit_sca.model import (
    DESK_CONFIG,
    FULL_CONFIG,
    ConfigError,
    CrossViT,
    EncoderBlock,
    PatchEmbedder,
    StochasticDepthSchedule,
    drop_probability,
    embed,
    encoder_forward,
    init_parameters,
    parameter_count,
    patchify,
    stochastic_block,
)
from crossvit_sca.rng import make_rng
from crossvit_sca.tensor import ShapeError, Tensor
from crossvit_sca.train import cross_entropy

from conftest import max_rel_err, numeric_grad


def closed_form_count(c):
    """Parameter total written out term by term."""
    total = 0
    for patch, dim in ((c.s_patch, c.dim_s), (c.l_patch, c.dim_l)):
        n = (c.image_size // patch) ** 2
        total += patch * patch * dim + dim + dim + (n + 1) * dim
        block = 2 * 2 * dim + 4 * dim * dim + dim * c.mlp_dim + c.mlp_dim + c.mlp_dim * dim + dim
        total += c.depth * block
    fusion = c.dim_l * c.dim_s + c.dim_s + c.dim_s * c.dim_l + c.dim_l  # f and g
    fusion += 2 * c.dim_s + 4 * c.dim_s * c.dim_s  # norm and attention on the attended width
    fusion += 2 * c.dim_l + 2 * c.dim_s  # affine calibration of both sides
    total += c.cls_depth * fusion
    total += 2 * c.dim_l + c.dim_l * c.num_classes + c.num_classes
    return total


def images(rng, b, size=32):
    return rng.uniform(0.0, 1.0, size=(b, size, size))


# ---------------------------------------------------------------- config


def test_desk_and_full_configs():
    assert DESK_CONFIG.validate() is DESK_CONFIG
    assert (FULL_CONFIG.image_size, FULL_CONFIG.s_patch, FULL_CONFIG.dim_s, FULL_CONFIG.heads) == (256, 16, 256, 12)
    assert FULL_CONFIG.violations(buildable=False) == []
    with pytest.raises(ConfigError, match="dim divisible by heads"):
        FULL_CONFIG.validate()


@pytest.mark.parametrize("change, message", [
    (dict(s_patch=5), "divisible by s_patch"),
    (dict(l_patch=4), "l_patch > s_patch"),
    (dict(heads=5), "dim divisible by heads"),
    (dict(layer_drop_p=1.0), "layer_drop_p"),
    (dict(keep_ratio=0.0), "keep_ratio"),
    (dict(relevance_mode="cosine"), "relevance_mode"),
])
def test_config_invariants(change, message):
    with pytest.raises(ConfigError, match=message):
        replace(DESK_CONFIG, **change).validate()


def test_config_dict_round_trip():
    assert type(DESK_CONFIG).from_dict(DESK_CONFIG.to_dict()) == DESK_CONFIG


# ---------------------------------------------------------------- patches / embedding


def test_patchify_examples():
    img = np.arange(16.0).reshape(4, 4)
    tokens = patchify(img, 2)
    assert tokens.shape == (4, 4)
    assert tokens[0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert tokens[3].tolist() == [10.0, 11.0, 14.0, 15.0]
    assert patchify(np.zeros((256, 256)), 16).shape == (256, 256)
    const = patchify(np.full((8, 8), 0.3), 4)
    assert np.all(const == const[0])
    with pytest.raises(ShapeError):
        patchify(np.zeros((6, 6)), 4)


def test_patchify_batched_matches_single(rng):
    x = rng.uniform(size=(3, 8, 8))
    assert np.array_equal(patchify(x, 4)[1], patchify(x[1], 4))


def test_embed_zero_weights_and_row_count(rng):
    d, n, p = 5, 4, 9
    emb = PatchEmbedder(3, Tensor(np.zeros((p, d))), Tensor(np.zeros(d)), Tensor(np.zeros((1, d))),
                        Tensor(np.zeros((n + 1, d))), dropout_p=0.5)
    out = embed(rng.standard_normal((n, p)), emb)
    assert out.shape == (n + 1, d) and np.all(out.data == 0)
    emb.proj_w = Tensor(rng.standard_normal((p, d)))
    x = rng.standard_normal((2, n, p))
    assert np.array_equal(embed(x, emb).data, embed(x, emb).data)
    assert embed(x, emb).shape == (2, n + 1, d)


# ---------------------------------------------------------------- encoder


def block(rng, d=8, heads=2, mlp=16, zero_out=False, grad=False):
    def mat(*shape):
        return Tensor(np.zeros(shape) if zero_out else rng.standard_normal(shape) * 0.3, requires_grad=grad)

    attn = AttentionWeights(mat(d, d), mat(d, d), mat(d, d), mat(d, d), heads) if not zero_out else \
        AttentionWeights(Tensor(rng.standard_normal((d, d))), Tensor(rng.standard_normal((d, d))),
                         Tensor(rng.standard_normal((d, d))), Tensor(np.zeros((d, d))), heads)
    ln = LayerNormParams(Tensor(np.ones(d)), Tensor(np.zeros(d)))
    return EncoderBlock(attn, ln, ln, Tensor(rng.standard_normal((d, mlp))), Tensor(np.zeros(mlp)),
                        mat(mlp, d), mat(d))


def test_encoder_zero_outputs_is_identity(rng):
    x = Tensor(rng.standard_normal((5, 8)))
    assert np.array_equal(encoder_forward(x, block(rng, zero_out=True)).data, x.data)


def test_encoder_single_token_attends_to_itself(rng):
    b = block(rng)
    x = Tensor(rng.standard_normal((1, 8)))
    ln = b.ln1(x).data
    expected_attn = ln @ b.attn.w_v.data @ b.attn.w_o.data
    h = x.data + expected_attn
    hidden = T.gelu(Tensor(b.ln2(Tensor(h)).data @ b.mlp_w1.data + b.mlp_b1.data)).data
    expected = h + hidden @ b.mlp_w2.data + b.mlp_b2.data
    assert np.allclose(encoder_forward(x, b).data, expected, rtol=0, atol=1e-12)


def test_encoder_input_gradient(rng):
    b = block(rng)
    probe = Tensor(rng.standard_normal((6, 8)))
    x = Tensor(rng.standard_normal((6, 8)), requires_grad=True)

    def loss():
        return T.sum(T.mul(encoder_forward(x, b), probe))

    T.backward(loss())
    assert max_rel_err(x.grad, numeric_grad(lambda: float(loss().data), x.data)) < 1e-4


# ---------------------------------------------------------------- stochastic depth


def test_drop_probability_examples():
    lin = StochasticDepthSchedule("linear_schedule", 0.0, 6)
    assert drop_probability(3, lin) == 0.5
    assert drop_probability(6, lin) == 0.0
    assert drop_probability(1, lin) == pytest.approx(5 / 6)
    const = StochasticDepthSchedule("constant", 0.05, 6)
    assert all(drop_probability(l, const) == 0.05 for l in range(1, 7))
    with pytest.raises(ValueError):
        drop_probability(0, lin)


def test_stochastic_block_identity_cases(rng):
    b = block(rng)
    x = Tensor(rng.standard_normal((4, 8)))
    ref = encoder_forward(x, b).data
    assert np.array_equal(stochastic_block(x, b, 0.0, training=True, rng=make_rng(0)).data, ref)
    assert np.array_equal(stochastic_block(x, b, 0.7, training=False).data, ref)


def test_stochastic_block_execution_frequency():
    rng = make_rng(11)
    calls = []

    def fake(seq, scale):
        calls.append(scale)
        return seq

    x = Tensor(np.zeros((1, 2)))
    for _ in range(10_000):
        stochastic_block(x, fake, 0.5, training=True, rng=rng)
    assert 0.48 <= len(calls) / 10_000 <= 0.52
    assert set(calls) == {2.0}


# ---------------------------------------------------------------- full model


@pytest.fixture(scope="module")
def desk_model():
    return CrossViT(DESK_CONFIG)


def test_forward_shape_and_identical_rows(desk_model, rng):
    x = images(rng, 3)
    x[2] = x[0]
    out = desk_model(x).data
    assert out.shape == (3, 2)
    assert np.array_equal(out[0], out[2])


def test_forward_batch_permutation(desk_model, rng):
    x = images(rng, 5)
    perm = rng.permutation(5)
    a, b = desk_model(x).data, desk_model(x[perm]).data
    assert np.max(np.abs(a[perm] - b)) < 1e-13


def test_init_is_deterministic_and_counted():
    a, b = init_parameters(DESK_CONFIG), init_parameters(DESK_CONFIG)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert parameter_count(a) == closed_form_count(DESK_CONFIG) == 45506
    other = init_parameters(replace(DESK_CONFIG, seed=1))
    assert not np.array_equal(other["head.w"].data, a["head.w"].data)


def test_bidirectional_adds_mirror_stage():
    cfg = replace(DESK_CONFIG, fusion_direction="bidirectional")
    p = init_parameters(cfg)
    fusion = cfg.dim_s * cfg.dim_l * 2 + cfg.dim_s + cfg.dim_l + 2 * cfg.dim_l + 4 * cfg.dim_l ** 2 \
        + 2 * cfg.dim_s + 2 * cfg.dim_l
    assert parameter_count(p) == closed_form_count(DESK_CONFIG) + fusion
    assert CrossViT(cfg)(np.zeros((1, 32, 32))).shape == (1, 2)


def test_train_equals_inference_without_randomness(rng):
    cfg = replace(DESK_CONFIG, layer_drop_p=0.0, dropout_p=0.0, emb_dropout_p=0.0)
    m = CrossViT(cfg)
    x = images(rng, 4)
    assert np.array_equal(m(x, training=True, rng=make_rng(5)).data, m(x).data)


def test_training_forward_is_seeded(rng):
    m = CrossViT(replace(DESK_CONFIG, dropout_p=0.2, layer_drop_p=0.3))
    x = images(rng, 2)
    a = m(x, training=True, rng=make_rng(4)).data
    b = m(x, training=True, rng=make_rng(4)).data
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        m(x, training=True)


def test_logits_finite_for_many_seeds(desk_model):
    for seed in range(1000):
        x = make_rng(seed).uniform(size=(1, 32, 32))
        assert np.all(np.isfinite(desk_model(x).data))


def test_rejects_bad_images(desk_model):
    with pytest.raises(ShapeError):
        desk_model(np.zeros((1, 16, 16)))
    with pytest.raises(ValueError):
        desk_model(np.full((1, 32, 32), 2.0))


@pytest.mark.parametrize("modes", [
    dict(),
    dict(calibration_mode="mlp", relevance_mode="mlp"),
])
def test_every_parameter_gets_gradient(modes, rng):
    m = CrossViT(replace(DESK_CONFIG, keep_ratio=1.0, **modes))
    x = images(rng, 4)
    T.backward(cross_entropy(m(x), [0, 1, 0, 1]))
    dead = [name for name, p in m.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_bidirectional_mirror_stage_never_reaches_the_head(rng):
    # the head reads the L CLS and L-to-S fusion reads only S patches, so the S CLS update is unused
    m = CrossViT(replace(DESK_CONFIG, keep_ratio=1.0, fusion_direction="bidirectional"))
    T.backward(cross_entropy(m(images(rng, 4)), [0, 1, 0, 1]))
    dead = {name for name, p in m.params.items() if p.grad is None or not np.any(p.grad)}
    assert dead == {name for name in m.params if ".s_to_l." in name}


def test_sca_model_matches_plain_cross_attention_model(rng, monkeypatch):
    import crossvit_sca.model as M
    from crossvit_sca.fusion import fuse_block

    m = CrossViT(replace(DESK_CONFIG, keep_ratio=1.0))
    x = images(rng, 3)
    sca = m(x).data

    def plain(cls, patches, proj, c_l, c_s, scorer, k, w, ln, **kw):
        return fuse_block(cls, patches, proj, w, ln, **kw)

    monkeypatch.setattr(M, "selective_cross_attention", plain)
    assert np.max(np.abs(sca - m(x).data)) < 1e-12
