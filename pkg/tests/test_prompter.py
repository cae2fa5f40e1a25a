import numpy as np
import pytest

import oracles
from conftest import weighted_sum
from ivtune.analysis import mp_block_count
from ivtune.autograd import Parameter, Tensor, grad
from ivtune.prompter import (
    HybridOp, MPBlock, SimpleFeatureTransform, hybrid_op, mp_alpha, mp_beta, sft,
)


def _block(fusion, width=6, latent=4, r=2, grid=2, seed=0, randomize=True):
    rng = np.random.default_rng(seed)
    block = MPBlock(rng, width, latent, r, grid, fusion)
    if randomize:
        for _, p in block.named_parameters():
            p.data += rng.normal(scale=0.3, size=p.shape)
    return block


def _streams(width=6, n=4, b=2, seed=1):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(b, n, width))), Tensor(rng.normal(size=(b, n, width))))


# -- sft ------------------------------------------------------------------------

def test_sft_defaults_are_plain_layer_norm():
    zv, zp = _streams()
    p = SimpleFeatureTransform(6)
    a, b = sft(zv, zp, p)
    one, zero = np.ones(6), np.zeros(6)
    np.testing.assert_allclose(a.data, oracles.layer_norm(zv.data, one, zero), rtol=1e-14)
    np.testing.assert_allclose(b.data, oracles.layer_norm(zp.data, one, zero), rtol=1e-14)


def test_sft_constant_tokens_give_phi():
    p = SimpleFeatureTransform(3)
    p.phi1.data[:] = [1.0, 2.0, 3.0]
    p.phi2.data[:] = [-1.0, 0.5, 0.0]
    p.omega1.data[:] = 7.0
    const = Tensor(np.full((1, 2, 3), 4.0))
    a, b = sft(const, const, p)
    assert np.array_equal(a.data[0, 1], p.phi1.data)
    assert np.array_equal(b.data[0, 0], p.phi2.data)


def test_sft_formula_c3():
    p = SimpleFeatureTransform(3)
    p.omega1.data[:] = [2.0, -1.0, 0.5]
    p.phi1.data[:] = [0.1, 0.2, 0.3]
    p.omega2.data[:] = [1.5, 1.5, 1.5]
    p.phi2.data[:] = [0.0, -0.5, 1.0]
    v = np.array([[[0.3, -1.2, 2.0]]])
    w = np.array([[[4.0, 1.0, -2.0]]])
    a, b = sft(Tensor(v), Tensor(w), p)
    ln = lambda x: (x - x.mean()) / np.sqrt(x.var() + 1e-5)  # noqa: E731
    np.testing.assert_allclose(a.data[0, 0], ln(v[0, 0]) * p.omega1.data + p.phi1.data)
    np.testing.assert_allclose(b.data[0, 0], ln(w[0, 0]) * p.omega2.data + p.phi2.data)


def test_sft_shape_mismatch():
    with pytest.raises(ValueError):
        sft(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 3, 3))), SimpleFeatureTransform(3))


# -- hybrid op ------------------------------------------------------------------

def _ho(d=4, r=4, seed=0):
    return HybridOp(np.random.default_rng(seed), d, r)


def _maps(d=4, seed=2):
    return Tensor(np.random.default_rng(seed).normal(size=(2, d, 3, 3)))


def test_ho_zero_kernel_leaves_selected_channels():
    ho = _ho(d=4, r=2)
    ho.dw_weight.data[:] = 0
    m = _maps()
    # the 1x1 stack applied straight to the input, no convolution anywhere
    h = oracles._pw(m.data, ho.pw1_weight.data, ho.pw1_bias.data)
    h = np.maximum(oracles._bn_train(h, ho), 0.0)
    expected = oracles._pw(h, ho.pw2_weight.data, ho.pw2_bias.data)
    np.testing.assert_allclose(hybrid_op(m, ho).data, expected, rtol=1e-12, atol=1e-12)


def test_ho_all_zero_weights_output_zero():
    ho = _ho()
    for _, p in ho.named_parameters():
        p.data[:] = 0
    assert np.array_equal(hybrid_op(_maps(), ho).data, np.zeros((2, 4, 3, 3)))


def test_ho_one_of_four_channels_convolved():
    ho = _ho(d=4, r=4)
    assert ho.conv_channels == 1 and ho.dw_weight.shape == (1, 3, 3)
    # changing the kernel only moves channel 0 of the pre-1x1 tensor
    ho.pw1_weight.data[:] = np.eye(4)
    ho.pw2_weight.data[:] = np.eye(4)
    m = Tensor(np.abs(_maps().data) + 5)   # positive so relu is inactive
    before = hybrid_op(m, ho).data
    ho.dw_weight.data += 1.0
    after = hybrid_op(m, ho).data
    changed = [c for c in range(4) if not np.array_equal(before[:, c], after[:, c])]
    assert changed == [0]


def test_ho_matches_oracle():
    ho = _ho(d=5, r=2, seed=3)
    m = _maps(d=5)
    np.testing.assert_allclose(hybrid_op(m, ho).data, oracles.hybrid_op(m.data, ho),
                               rtol=1e-11, atol=1e-12)


def test_ho_batch_count_guard():
    with pytest.raises(ValueError, match=">= 2"):
        hybrid_op(Tensor(np.ones((1, 4, 1, 1))), _ho())


def test_ho_rejects_empty_latent():
    with pytest.raises(ValueError):
        HybridOp(np.random.default_rng(0), 0, 4)


# -- MP-alpha / MP-beta -------------------------------------------------------------------

def test_alpha_zero_s3_gives_zero():
    block = _block("alpha")
    block.s3.weight.data[:] = 0
    block.s3.bias.data[:] = 0
    assert np.array_equal(mp_alpha(*_streams(), block).data, np.zeros((2, 4, 6)))


def test_alpha_zero_inputs_zero_biases():
    block = _block("alpha", randomize=False)
    block.s3.weight.data[:] = np.random.default_rng(0).normal(size=block.s3.weight.shape)
    z = Tensor(np.zeros((2, 4, 6)))
    assert np.array_equal(mp_alpha(z, z, block).data, np.zeros((2, 4, 6)))


@pytest.mark.parametrize("fusion", ["alpha", "beta"])
def test_block_matches_oracle(fusion):
    block = _block(fusion, latent=2, r=2, grid=1, width=4)
    zv, zp = _streams(width=4, n=1)
    fn = mp_alpha if fusion == "alpha" else mp_beta
    np.testing.assert_allclose(fn(zv, zp, block).data, oracles.mp_block(zv.data, zp.data, block),
                               rtol=1e-11, atol=1e-12)


def test_beta_zero_projections_give_zero():
    block = _block("beta")
    for lin in (block.s3, block.s4):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    assert np.array_equal(mp_beta(*_streams(), block).data, np.zeros((2, 4, 6)))


def test_beta_zero_s4_severs_prompt_stream():
    block = _block("beta")
    block.s4.weight.data[:] = 0
    zv, zp = _streams()
    other = Tensor(np.random.default_rng(7).normal(size=zp.shape))
    assert np.array_equal(mp_beta(zv, zp, block).data, mp_beta(zv, other, block).data)


def test_beta_needs_s4():
    with pytest.raises(ValueError):
        mp_beta(*_streams(), _block("alpha"))


def test_stream_shape_mismatch():
    zv, _ = _streams()
    with pytest.raises(ValueError):
        mp_beta(zv, Tensor(np.zeros((2, 4, 5))), _block("beta"))


def test_fresh_blocks_output_exact_zero():
    for fusion in ("alpha", "beta"):
        block = _block(fusion, randomize=False)
        assert np.array_equal(block(*_streams()).data, np.zeros((2, 4, 6)))


@pytest.mark.parametrize("fusion", ["alpha", "beta"])
def test_infrared_path_is_convolution_free(fusion):
    block = _block(fusion, seed=4)
    zv, _ = _streams()
    zp = Parameter(np.random.default_rng(5).normal(size=(2, 4, 6)), name="zp")
    (g1,) = grad(weighted_sum(block(zv, zp)), [zp])
    for name in ("dw_weight", "dw_bias", "pw1_weight", "pw1_bias", "pw2_weight", "pw2_bias"):
        getattr(block.ho, name).data[:] = 0
    (g2,) = grad(weighted_sum(block(zv, zp)), [zp])
    assert np.any(g1 != 0)
    np.testing.assert_array_equal(g1, g2)


@pytest.mark.parametrize("width,latent,r,fusion", [
    (6, 4, 2, "beta"), (64, 16, 4, "beta"), (64, 8, 4, "alpha"), (10, 5, 3, "beta"),
    (8, 1, 4, "alpha"),
])
def test_block_count_closed_form_vs_enumeration(width, latent, r, fusion):
    block = MPBlock(np.random.default_rng(0), width, latent, r, 2, fusion)
    shapes = oracles.mp_block_shapes("b", width, latent, r, fusion == "beta")
    enumerated = sum(int(np.prod(s)) for _, s in shapes)
    assert block.num_parameters() == enumerated == mp_block_count(width, latent, r, fusion)
