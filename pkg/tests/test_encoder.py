import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kl_scalar, pog
from xlstm_hved.encoder import (DimensionReduction, LatentGaussian, ModalityEncoder, SAVEEncoder,
                                SpatialAttention, drb_reduce, encode_modality, kl_standard_normal,
                                pog_fuse, reparameterize, spatial_attention)
from xlstm_hved.nn import zero_parameters
from xlstm_hved.subsets import ModalitySubset, all_subsets
from xlstm_hved.tensor import ContractViolation, Tensor, dtype_scope, finite_diff_check, no_grad
from xlstm_hved.tensor import functional as F


def gaussian(mu, var, modality=None, level=0):
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), mu.shape)
    return LatentGaussian(Tensor(mu, dtype=np.float64), Tensor(np.log(var), dtype=np.float64), level, modality)


# -- product of Gaussians -------------------------------------------------------------

def test_pog_single_expert_with_prior():
    g = pog_fuse([gaussian(0.0, 1.0, 0)])
    assert abs(g.mu.item()) <= 1e-6
    assert abs(np.exp(g.logvar.item()) - 0.5) <= 1e-6


def test_pog_two_experts_with_prior():
    g = pog_fuse([gaussian(1.0, 1.0, 0), gaussian(3.0, 1.0, 1)])
    assert abs(g.mu.item() - 4 / 3) <= 1e-6
    assert abs(np.exp(g.logvar.item()) - 1 / 3) <= 1e-6


def test_pog_without_prior_is_plain_product():
    g = pog_fuse([gaussian(2.0, 4.0, 0)], include_prior=False)
    assert abs(g.mu.item() - 2.0) <= 1e-12 and abs(np.exp(g.logvar.item()) - 4.0) <= 1e-12


def test_pog_random_ten_elements_match_closed_form():
    rng = np.random.default_rng(5)
    mus = rng.normal(size=(3, 10))
    variances = np.exp(rng.uniform(-2, 2, size=(3, 10)))
    g = pog_fuse([gaussian(mus[i], variances[i], i) for i in range(3)])
    for j in range(10):
        mean, var = pog(mus[:, j], variances[:, j])
        assert abs(g.mu.data[j] - mean) <= 1e-12
        assert abs(np.exp(g.logvar.data[j]) - var) <= 1e-12


def test_pog_errors():
    with pytest.raises(ContractViolation):
        pog_fuse([])
    with pytest.raises(ContractViolation):
        pog_fuse([gaussian([0.0, 1.0], 1.0, 0), gaussian([0.0], 1.0, 1)])


@settings(max_examples=40)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 4))
def test_pog_permutation_invariant_bit_exact(seed, n):
    rng = np.random.default_rng(seed)
    experts = [gaussian(rng.normal(size=6), np.exp(rng.uniform(-3, 3, 6)), m) for m in range(n)]
    ref = pog_fuse(experts)
    for perm in itertools.permutations(experts):
        g = pog_fuse(list(perm))
        assert g.mu.data.tobytes() == ref.mu.data.tobytes()
        assert g.logvar.data.tobytes() == ref.logvar.data.tobytes()


@settings(max_examples=40)
@given(seed=st.integers(0, 2 ** 31))
def test_fused_precision_is_sum_of_precisions(seed):
    rng = np.random.default_rng(seed)
    experts = [gaussian(rng.normal(size=8), np.exp(rng.uniform(-3, 3, 8)), m) for m in range(4)]
    g = pog_fuse(experts)
    expected = sum(e.precision() for e in experts) + 1.0
    np.testing.assert_allclose(g.precision(), expected, rtol=1e-6)


# -- reparameterization and KL -------------------------------------------------------

def test_reparameterize_modes():
    g = gaussian([0.5, -1.0], [4.0, 0.25])
    np.testing.assert_array_equal(reparameterize(g, np.zeros(2)).data, g.mu.data)
    np.testing.assert_array_equal(reparameterize(g, np.full(2, 1e9), mode="mean").data, g.mu.data)
    np.testing.assert_allclose(reparameterize(g, np.ones(2)).data, [2.5, -0.5])
    with pytest.raises(ContractViolation):
        reparameterize(g, np.array([np.nan, 0.0]))


def test_reparameterize_gradients():
    rng = np.random.default_rng(2)
    eps = rng.normal(size=5)
    with dtype_scope(np.float64):
        mu, logvar = Tensor(rng.normal(size=5), requires_grad=True), Tensor(rng.normal(size=5), requires_grad=True)
        F.sum(reparameterize(LatentGaussian(mu, logvar, 0), eps)).backward()
    np.testing.assert_array_equal(mu.grad, np.ones(5))
    np.testing.assert_allclose(logvar.grad, 0.5 * np.exp(0.5 * logvar.data) * eps, rtol=1e-12)
    with dtype_scope(np.float64):
        rep = finite_diff_check(lambda t: F.sum(reparameterize(LatentGaussian(mu, t, 0), eps)),
                                logvar, h=1e-5, tol=1e-6, floor=1e-9)
    assert rep.passed


def test_kl_values():
    assert kl_standard_normal(gaussian(0.0, 1.0)).item() == 0.0
    assert abs(kl_standard_normal(gaussian(1.0, 1.0)).item() - 0.5) <= 1e-7


def test_kl_matches_scalar_oracle(rng):
    mu, logvar = rng.normal(size=(2, 3, 4)), rng.uniform(-3, 3, size=(2, 3, 4))
    g = LatentGaussian(Tensor(mu, dtype=np.float64), Tensor(logvar, dtype=np.float64), 0)
    expected = sum(kl_scalar(m, lv) for m, lv in zip(mu.ravel(), logvar.ravel())) / 2
    assert abs(kl_standard_normal(g).item() - expected) <= 1e-10 * expected


@settings(max_examples=30)
@given(seed=st.integers(0, 2 ** 31))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    g = LatentGaussian(Tensor(rng.normal(0, 3, size=(2, 7))), Tensor(rng.uniform(-10, 10, size=(2, 7))), 0)
    assert kl_standard_normal(g).item() >= 0


# -- blocks ------------------------------------------------------------------------

def test_spatial_attention_zero_conv_halves(rng):
    block = SpatialAttention(rng=rng)
    zero_parameters(block)
    f = Tensor(rng.normal(size=(1, 3, 4, 4, 4)))
    out = spatial_attention(f, block)
    assert out.shape == f.shape
    np.testing.assert_allclose(out.data, 0.5 * f.data, rtol=1e-6)


def test_drb_shapes_and_zero_weights(rng):
    block = DimensionReduction(64, rng)
    f = Tensor(rng.normal(size=(1, 64, 2, 3, 2)))
    assert drb_reduce(f, block).shape == (1, 32, 2, 3, 2)
    block.conv.weight.data[:] = 0
    np.testing.assert_array_equal(drb_reduce(f, block).data, 0)
    with pytest.raises(ContractViolation):
        drb_reduce(Tensor(np.zeros((1, 3, 2, 2, 2))), DimensionReduction(4, rng))
    with pytest.raises(ContractViolation):
        DimensionReduction(5, rng)


def test_encode_modality_shapes_and_zero_heads(rng):
    enc = ModalityEncoder(rng=rng)
    for head in enc.heads:
        zero_parameters(head)
    with no_grad():
        out = encode_modality(Tensor(np.zeros((1, 1, 16, 16, 16))), enc)
    assert len(out.gaussians) == 4
    for lvl, (g, c) in enumerate(zip(out.gaussians, (8, 16, 32, 64))):
        assert g.shape == (1, c) + (16 // 2 ** lvl,) * 3
        assert np.all(g.mu.data == 0) and np.all(g.logvar.data == 0)


def test_encode_modality_rejects_indivisible_extent(rng):
    with pytest.raises(ContractViolation):
        ModalityEncoder(rng=rng)(Tensor(np.zeros((1, 1, 12, 16, 16))))


def test_encoder_gradient_of_deepest_mean():
    rng = np.random.default_rng(8)
    with dtype_scope(np.float64):
        enc = ModalityEncoder(channels=(2, 4, 4, 4), rng=rng)
        x = Tensor(rng.normal(size=(1, 1, 16, 16, 16)))
        rep = finite_diff_check(lambda t: F.sum(enc(t).gaussians[3].mu), x, h=1e-5, tol=1e-6,
                                max_coords=16, floor=1e-8)
    assert rep.passed, rep


def test_logvar_is_clamped(rng):
    enc = ModalityEncoder(channels=(2, 2, 2, 2), rng=rng)
    for head in enc.heads:
        head.logvar.bias.data[:] = 50.0
    with no_grad():
        out = enc(Tensor(rng.normal(size=(1, 1, 16, 16, 16))))
    assert all(g.logvar.data.max() <= 10.0 for g in out.gaussians)


# -- subset encoding ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_encoder():
    with dtype_scope(np.float64):
        return SAVEEncoder(channels=(2, 4, 4, 4), rng=np.random.default_rng(3))


@pytest.fixture(scope="module")
def images():
    return Tensor(np.random.default_rng(4).normal(size=(1, 4, 16, 16, 16)), dtype=np.float64)


def test_full_subset_equals_pog_of_four_experts(small_encoder, images):
    with no_grad():
        enc = small_encoder.encode_subset(images, ModalitySubset.full())
        outs = [small_encoder.modality_encoders[m](images[:, m:m + 1], m) for m in range(4)]
    for lvl in range(4):
        g = pog_fuse([o.gaussians[lvl] for o in outs])
        np.testing.assert_array_equal(enc.fused[lvl].mu.data, g.mu.data)
        np.testing.assert_array_equal(enc.skips[lvl].data, g.mu.data)


def test_single_modality_mean_is_shrunk_by_prior(small_encoder, images):
    with no_grad():
        enc = small_encoder.encode_subset(images, ModalitySubset.from_mask("0010"))
        g = small_encoder.modality_encoders[2](images[:, 2:3], 2).gaussians[1]
    lam = g.precision()
    np.testing.assert_allclose(enc.fused[1].mu.data, g.mu.data * lam / (lam + 1), rtol=1e-12)


def test_missing_channels_are_never_read(small_encoder, images):
    subset = ModalitySubset.from_mask("1010")
    poisoned = images.data.copy()
    poisoned[:, [1, 3]] = np.nan
    clean = images.data * subset.channel_mask()[None, :, None, None, None]
    with no_grad():
        a = small_encoder.encode_subset(Tensor(poisoned, dtype=np.float64), subset)
        b = small_encoder.encode_subset(Tensor(clean, dtype=np.float64), subset)
    assert a.bottleneck.data.tobytes() == b.bottleneck.data.tobytes()


def test_adding_a_modality_never_increases_variance(small_encoder, images):
    with no_grad():
        fused = {s: small_encoder.encode_subset(images, s).fused for s in all_subsets()}
    for small, big in itertools.product(all_subsets(), repeat=2):
        if all(b or not a for a, b in zip(small.bits, big.bits)):
            for g_s, g_b in zip(fused[small], fused[big]):
                assert np.all(g_b.logvar.data <= g_s.logvar.data + 1e-12)


def test_sample_mode_is_reproducible_given_stream(small_encoder, images):
    s = ModalitySubset.from_mask("0111")
    with no_grad():
        a = small_encoder.encode_subset(images, s, "sample", np.random.default_rng(9))
        b = small_encoder.encode_subset(images, s, "sample", np.random.default_rng(9))
        c = small_encoder.encode_subset(images, s, "mean")
        d = small_encoder.encode_subset(images, s, "mean")
    assert a.bottleneck.data.tobytes() == b.bottleneck.data.tobytes()
    assert c.bottleneck.data.tobytes() == d.bottleneck.data.tobytes()
    with pytest.raises(ContractViolation):
        small_encoder.encode_subset(images, s, "sample")


def test_empty_subset_rejected(small_encoder, images):
    with pytest.raises(ContractViolation):
        small_encoder.encode_subset(images, ModalitySubset.from_mask("0000"))
