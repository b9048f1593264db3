"""Stem-stage tests: kernel synthesis, steerability, order-mixing convolution,
magnitude normalization, residuals, pooling, dropout.

The rotation-equivariance convention checked throughout: rotating the input
by alpha rotates every order-m stream spatially and multiplies it by
e^{i m alpha}.  At 90-degree multiples the grid rotation is exact, so the
checks here carry no interpolation error.
"""

import numpy as np
import pytest

import harmnet.ctensor as ct
import harmnet.stem as hs
from harmnet.constants import EPS
from harmnet.errors import ConfigError, ShapeError


def const_leaves(params):
    return {k: ct.CTensor(v) for k, v in params.items()}


def rand_sfm(rng, orders, b, c, h, w):
    return hs.StreamedFeatureMap(
        {m: ct.CTensor(rng.standard_normal((b, c, h, w)) + 1j * rng.standard_normal((b, c, h, w)))
         for m in orders})


def rot_grid(arr, quarter_turns):
    """rot_{90 q}: positive rotation goes from +x toward +y (image y points
    down), i.e. np.rot90 with a negative count."""
    return np.rot90(arr, -quarter_turns, axes=(2, 3)).copy()


def rot_sfm(x, quarter_turns=1):
    """The group action on streams: spatial rotation plus phase e^{i m alpha}."""
    out = {}
    for m, s in x.streams.items():
        ph = np.exp(1j * m * quarter_turns * np.pi / 2)
        out[m] = ct.CTensor(ph * rot_grid(s.data, quarter_turns))
    return hs.StreamedFeatureMap(out)


def sfm_error(a, b):
    num = max(np.linalg.norm(a.streams[m].data - b.streams[m].data) for m in a.orders)
    den = max(np.linalg.norm(b.streams[m].data) for m in b.orders)
    return num / max(den, 1e-12)


# ---------------------------------------------------------------------------
# kernel synthesis
# ---------------------------------------------------------------------------

def test_synthesize_order0_all_ones_profile():
    k = hs.synthesize_kernel(np.ones(2), 0.0, m=0, k=3).data
    assert np.allclose(k.imag, 0)
    assert k[1, 1] == pytest.approx(1.0)
    for y, x in ((0, 1), (2, 1), (1, 0), (1, 2)):
        assert k[y, x] == pytest.approx(1.0)       # r = 1 exactly
    for y, x in ((0, 0), (0, 2), (2, 0), (2, 2)):
        assert k[y, x] == 0.0                       # r = sqrt(2) > 1 -> zero


def test_synthesize_order1_reference_values():
    beta = 0.31
    prof = np.array([0.7, 1.3])
    k = hs.synthesize_kernel(prof, beta, m=1, k=3).data
    assert k[1, 1] == 0.0                           # center forced to zero for m != 0
    # (dy, dx) = (0, 1): theta = 0
    assert k[1, 2] == pytest.approx(1.3 * np.exp(1j * beta), abs=1e-14)
    # (dy, dx) = (1, 0): theta = pi/2
    assert k[2, 1] == pytest.approx(1.3 * np.exp(1j * (np.pi / 2 + beta)), abs=1e-14)


def test_synthesize_linear_interpolation_between_radii():
    prof = np.array([0.0, 2.0, 4.0])
    k = hs.synthesize_kernel(prof, 0.0, m=0, k=5).data
    r = np.sqrt(2.0)
    expected = 2.0 * (2.0 - r) + 4.0 * (r - 1.0)    # lerp between radii 1 and 2
    assert k[1, 1] == pytest.approx(expected, rel=1e-14)
    assert k[0, 0] == 0.0                           # r = 2*sqrt(2) beyond last radius
    assert k[0, 1] == 0.0                           # r = sqrt(5) > 2 as well


def test_synthesize_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        hs.synthesize_kernel(np.ones(3), 0.0, m=0, k=4)
    with pytest.raises(ConfigError):
        hs.synthesize_kernel(np.ones(4), 0.0, m=0, k=5)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_steerability_rot90_is_phase_multiplication(k):
    rng = ct.make_rng(100 + k)
    for m in (-2, -1, 0, 1, 2):
        for _ in range(5):
            prof = rng.uniform(-1, 1, size=hs.n_radii(k))
            beta = rng.uniform(-np.pi, np.pi)
            w = hs.synthesize_kernel(prof, beta, m=m, k=k).data
            rotated = np.rot90(w)
            expected = np.exp(1j * m * np.pi / 2) * w
            assert np.max(np.abs(rotated - expected)) < 1e-12, (k, m)


# ---------------------------------------------------------------------------
# harmonic convolution
# ---------------------------------------------------------------------------

def test_impulse_response_is_point_reflected_kernel():
    rng = ct.make_rng(21)
    bank = hs.HarmonicFilterBank("lift", (0,), (-1, 0, 1), 1, 1, 5, rng)
    img = np.zeros((1, 1, 5, 5))
    img[0, 0, 2, 2] = 1.0
    x = hs.lift_image(ct.CTensor(img))
    leaves = const_leaves(bank.params)
    y = hs.harmonic_conv(x, bank, leaves)
    for m in (-1, 0, 1):
        base = f"lift.f+0{m:+d}"
        kern = hs.synthesize_block(leaves[f"{base}.radial"], leaves[f"{base}.phase"], m, 5).data[0, 0]
        assert np.max(np.abs(y.streams[m].data[0, 0] - kern[::-1, ::-1])) < 1e-14


def test_lemma1_rot90_equivariance_full_streams():
    rng = ct.make_rng(22)
    bank = hs.HarmonicFilterBank("hc", (-1, 0, 1), (-1, 0, 1), 2, 3, 5, rng)
    leaves = const_leaves(bank.params)
    x = rand_sfm(rng, (-1, 0, 1), 2, 2, 8, 8)
    for q in (1, 2, 3):
        lhs = hs.harmonic_conv(rot_sfm(x, q), bank, leaves)
        rhs = rot_sfm(hs.harmonic_conv(x, bank, leaves), q)
        assert sfm_error(lhs, rhs) < 1e-10, q


def test_lifting_conv_equivariance_from_raw_image():
    rng = ct.make_rng(23)
    bank = hs.HarmonicFilterBank("lift", (0,), (-1, 0, 1), 1, 4, 5, rng)
    leaves = const_leaves(bank.params)
    img = rng.standard_normal((1, 1, 10, 10))
    x = hs.lift_image(ct.CTensor(img))
    xr = hs.lift_image(ct.CTensor(rot_grid(img, 1)))
    lhs = hs.harmonic_conv(xr, bank, leaves)
    rhs = rot_sfm(hs.harmonic_conv(x, bank, leaves), 1)
    assert sfm_error(lhs, rhs) < 1e-10


def test_harmonic_conv_zero_input_and_shape_errors():
    rng = ct.make_rng(24)
    bank = hs.HarmonicFilterBank("hc", (-1, 0, 1), (-1, 0, 1), 2, 2, 3, rng)
    leaves = const_leaves(bank.params)
    zero = hs.StreamedFeatureMap(
        {m: ct.CTensor(np.zeros((1, 2, 6, 6), dtype=np.complex128)) for m in (-1, 0, 1)})
    y = hs.harmonic_conv(zero, bank, leaves)
    for m in (-1, 0, 1):
        assert np.all(y.streams[m].data == 0)
    bad_ch = hs.StreamedFeatureMap(
        {m: ct.CTensor(np.zeros((1, 3, 6, 6), dtype=np.complex128)) for m in (-1, 0, 1)})
    with pytest.raises(ShapeError):
        hs.harmonic_conv(bad_ch, bank, leaves)
    lone = hs.StreamedFeatureMap({0: ct.CTensor(np.zeros((1, 2, 6, 6), dtype=np.complex128))})
    with pytest.raises(ShapeError):
        hs.harmonic_conv(lone, bank, leaves)
    with pytest.raises(ConfigError):
        hs.harmonic_conv(zero, bank, leaves, stride=2)


def test_bank_rejects_out_of_range_orders():
    with pytest.raises(ConfigError):
        hs.HarmonicFilterBank("bad", (0, 2), (-1, 0, 1), 1, 1, 3, ct.make_rng(0))


def test_projection_bank_restricted_to_order_zero_filters():
    rng = ct.make_rng(7)
    proj = hs.HarmonicFilterBank("p", (0,), (-1, 0, 1), 2, 3, 1, rng, filter_orders=(0,))
    # one real connection (0 -> 0); the +-1 outputs are structural zero blocks
    assert proj.connections == [(0, 0)]
    assert sum(v.size for v in proj.params.values()) == 2 * 3 * 2
    leaves = const_leaves(proj.params)
    x = rand_sfm(rng, (0,), 1, 2, 4, 4)
    y = hs.harmonic_conv(x, proj, leaves, padding=0)
    assert np.all(y.streams[-1].data == 0) and np.all(y.streams[1].data == 0)
    assert np.any(y.streams[0].data != 0)
    with pytest.raises(ConfigError):
        hs.HarmonicFilterBank("q", (0,), (1,), 1, 1, 1, rng, filter_orders=(0,))


# ---------------------------------------------------------------------------
# fused magnitude batch norm + C-ReLU
# ---------------------------------------------------------------------------

def test_hbn_crelu_hand_computed_batch():
    # batch magnitudes {1, 3}: mean 2, population variance 1
    x = hs.StreamedFeatureMap(
        {0: ct.CTensor(np.array([1.0 * np.exp(1j * 0.2), 3.0 * np.exp(1j * np.pi / 3)]).reshape(2, 1, 1, 1))})
    state = hs.HBatchNormState("bn", 1, orders=(0,))
    y = hs.hbn_crelu(x, state, const_leaves(state.params), train=True)
    out = y.streams[0].data.reshape(2)
    expected_hi = (1.0 / np.sqrt(1.0 + EPS)) * np.exp(1j * np.pi / 3)
    assert out[0] == 0.0                            # ReLU((1-2)/...) = 0
    assert abs(out[1] - expected_hi) < 1e-12
    # running stats picked up the batch statistics
    assert state.buffers["bn.mean+0"][0] == pytest.approx(0.9 * 0 + 0.1 * 2.0)
    assert state.buffers["bn.var+0"][0] == pytest.approx(0.9 * 1 + 0.1 * 1.0)


def test_hbn_crelu_nonnegative_and_phase_preserving():
    rng = ct.make_rng(25)
    x = rand_sfm(rng, (-1, 0, 1), 3, 4, 5, 5)
    state = hs.HBatchNormState("bn", 4)
    params = dict(state.params)
    params["bn.b"] = np.full(4, -0.3)               # force some clipping
    y = hs.hbn_crelu(x, state, const_leaves(params), train=True)
    for m in (-1, 0, 1):
        mag = np.abs(y.streams[m].data)
        assert np.min(mag) >= 0
        keep = mag > 1e-9
        pin = x.streams[m].data / np.abs(x.streams[m].data)
        pout = np.where(keep, y.streams[m].data / np.where(keep, mag, 1.0), pin)
        assert np.max(np.abs(pout - pin)) < 1e-12
        assert np.any(~keep)                        # clipping actually happened


def test_hbn_crelu_kill_all_with_large_negative_shift():
    rng = ct.make_rng(26)
    x = rand_sfm(rng, (0,), 4, 2, 3, 3)
    state = hs.HBatchNormState("bn", 2, orders=(0,))
    params = dict(state.params)
    params["bn.b"] = np.full(2, -10.0)
    y = hs.hbn_crelu(x, state, const_leaves(params), train=True)
    assert np.all(y.streams[0].data == 0)


def test_hbn_crelu_eval_uses_initial_stats():
    x = hs.StreamedFeatureMap({0: ct.CTensor(np.full((1, 1, 1, 1), 2.0 + 0j))})
    state = hs.HBatchNormState("bn", 1, orders=(0,))
    y = hs.hbn_crelu(x, state, const_leaves(state.params), train=False)
    # initialized stats mu=0, var=1: ReLU(2/sqrt(1+eps))
    assert y.streams[0].data.reshape(()) == pytest.approx(2.0 / np.sqrt(1 + EPS), rel=1e-12)


def test_hbn_crelu_rot90_he():
    rng = ct.make_rng(27)
    x = rand_sfm(rng, (-1, 0, 1), 2, 3, 4, 4)
    state = hs.HBatchNormState("bn", 3)
    params = dict(state.params)
    params["bn.b"] = np.full(3, -0.2)
    leaves = const_leaves(params)
    lhs = hs.hbn_crelu(rot_sfm(x, 1), state, leaves, train=False)
    rhs = rot_sfm(hs.hbn_crelu(x, state, leaves, train=False), 1)
    assert sfm_error(lhs, rhs) < 1e-12


# ---------------------------------------------------------------------------
# legacy variants (the ablation's equivariance-violation witness)
# ---------------------------------------------------------------------------

def test_legacy_crelu_kills_small_magnitudes():
    x = hs.StreamedFeatureMap({0: ct.CTensor(np.full((1, 1, 1, 1), 2.0 * np.exp(1j * 0.4)))})
    y = hs.legacy_crelu(x, ct.CTensor(np.array([-3.0])))
    assert y.streams[0].data.reshape(()) == 0.0


def test_legacy_cbn_negative_gamma_flips_phase():
    x = hs.StreamedFeatureMap(
        {0: ct.CTensor(np.array([1.0, 3.0]).astype(np.complex128).reshape(2, 1, 1, 1) * np.exp(1j * 0.7))})
    state = hs.HBatchNormState("bn", 1, orders=(0,))
    params = dict(state.params)
    params["bn.a"] = np.array([-1.0])               # gamma < 0
    y = hs.legacy_cbn(x, state, const_leaves(params), train=True)
    out = y.streams[0].data.reshape(2)
    # element with magnitude 3 normalizes to +1, gamma flips it to -1:
    # the "magnitude" path went negative -> phase rotated by pi
    assert out[1].real < 0 or out[1].imag < 0
    expected = -1.0 / np.sqrt(1 + EPS) * np.exp(1j * 0.7)
    assert abs(out[1] - expected) < 1e-12


# ---------------------------------------------------------------------------
# residual, pooling, dropout
# ---------------------------------------------------------------------------

def test_residual_add_laws():
    rng = ct.make_rng(28)
    a = rand_sfm(rng, (-1, 0, 1), 1, 2, 3, 3)
    zero = a.map(lambda s: ct.CTensor(np.zeros_like(s.data)))
    same = hs.residual_add(a, zero)
    twice = hs.residual_add(a, a)
    for m in (-1, 0, 1):
        assert np.array_equal(same.streams[m].data, a.streams[m].data)
        assert np.allclose(twice.streams[m].data, 2 * a.streams[m].data)
    lhs = hs.residual_add(rot_sfm(a), rot_sfm(a))
    rhs = rot_sfm(twice)
    assert sfm_error(lhs, rhs) < 1e-14
    with pytest.raises(ShapeError):
        hs.residual_add(a, hs.StreamedFeatureMap({0: a.streams[0]}))


def test_avg_pool_streams():
    rng = ct.make_rng(29)
    const = hs.StreamedFeatureMap(
        {m: ct.CTensor(np.full((1, 1, 4, 4), 0.3 + 0.4j)) for m in (-1, 0, 1)})
    pooled = hs.avg_pool_streams(const)
    for m in (-1, 0, 1):
        assert np.allclose(pooled.streams[m].data, 0.3 + 0.4j)
    checker = np.indices((4, 4)).sum(axis=0) % 2 * 2.0 - 1.0
    x = hs.StreamedFeatureMap({0: ct.CTensor(checker[None, None].astype(np.complex128))})
    assert np.max(np.abs(hs.avg_pool_streams(x).streams[0].data)) == 0.0
    y = rand_sfm(rng, (-1, 0, 1), 1, 2, 6, 6)
    lhs = hs.avg_pool_streams(rot_sfm(y))
    rhs = rot_sfm(hs.avg_pool_streams(y))
    assert sfm_error(lhs, rhs) < 1e-14


def test_channel_dropout_consistent_across_streams():
    rng = ct.make_rng(30)
    x = rand_sfm(rng, (-1, 0, 1), 2, 8, 3, 3)
    out = hs.channel_dropout(x, 0.5, ct.make_rng(7), train=True)
    ref = out.streams[0].data / np.where(x.streams[0].data == 0, 1, x.streams[0].data)
    for m in (-1, 0, 1):
        ratio = out.streams[m].data / x.streams[m].data
        assert np.allclose(ratio, ref)             # same mask on every stream
        vals = np.unique(np.round(ratio.real, 9))
        assert set(vals).issubset({0.0, 2.0})      # dropped or scaled by 1/(1-p)
    eval_out = hs.channel_dropout(x, 0.5, ct.make_rng(7), train=False)
    assert eval_out is x


# ---------------------------------------------------------------------------
# full stem
# ---------------------------------------------------------------------------

def test_stem_shapes_and_zero_image():
    rng = ct.make_rng(31)
    stem = hs.Stem("stem", 1, [2, 3], convs_per_block=2, kernel_size=3, dropout=[0, 0], rng=rng)
    leaves = const_leaves(stem.params)
    img = ct.CTensor(rng.standard_normal((2, 1, 16, 16)))
    y = stem.forward(img, leaves, train=False)
    assert y.orders == (-1, 0, 1)
    assert y.shape == (2, 3, 4, 4)
    z = stem.forward(ct.CTensor(np.zeros((1, 1, 16, 16))), leaves, train=False)
    for m in (-1, 0, 1):
        assert np.all(z.streams[m].data == 0)


def test_stem_rot90_he_end_to_end():
    rng = ct.make_rng(32)
    stem = hs.Stem("stem", 1, [2, 3], convs_per_block=2, kernel_size=5, dropout=[0, 0], rng=rng)
    params = dict(stem.params)
    for k in params:
        if k.endswith(".b"):
            params[k] = np.full_like(params[k], -0.1)   # exercise the ReLU clip
    leaves = const_leaves(params)
    img = rng.standard_normal((1, 1, 16, 16))
    out = stem.forward(ct.CTensor(img), leaves, train=False)
    for q in (1, 2, 3):
        lhs = stem.forward(ct.CTensor(rot_grid(img, q)), leaves, train=False)
        rhs = rot_sfm(out, q)
        assert sfm_error(lhs, rhs) < 1e-10, q


def test_stem_gradients_match_finite_differences():
    rng = ct.make_rng(33)
    stem = hs.Stem("stem", 1, [2, 2], convs_per_block=1, kernel_size=3, dropout=[0, 0], rng=rng)
    img = rng.standard_normal((2, 1, 8, 8))
    targets = {m: (rng.standard_normal((2, 2, 2, 2)) + 1j * rng.standard_normal((2, 2, 2, 2)))
               for m in (-1, 0, 1)}

    def f(leaves):
        y = stem.forward(ct.CTensor(img), leaves, train=False)
        total = None
        for m in (-1, 0, 1):
            d = ct.sub(y.streams[m], ct.CTensor(targets[m]))
            dm = ct.magnitude(d)
            term = ct.sum_(ct.mul(dm, dm))
            total = term if total is None else ct.add(total, term)
        return total

    err = ct.finite_difference_check(f, stem.params, sample=4)
    assert err < 1e-4


def test_stem_legacy_variant_runs():
    rng = ct.make_rng(34)
    stem = hs.Stem("stem", 1, [2], convs_per_block=1, kernel_size=3, dropout=[0],
                   rng=rng, norm="legacy")
    leaves = const_leaves(stem.params)
    img = ct.CTensor(rng.standard_normal((1, 1, 8, 8)))
    y = stem.forward(img, leaves, train=True)
    assert y.shape == (1, 2, 4, 4)
    assert any(k.endswith("act0.bias") for k in stem.params)


def test_layer_norm_streams_matches_encoder_norm():
    import harmnet.encoder as enc
    rng = ct.make_rng(35)
    x = rand_sfm(rng, (-1, 0, 1), b=2, c=3, h=4, w=4)
    got = hs.layer_norm_streams(x)
    want = enc.unpatchify(enc.he_layer_norm(enc.patchify(x)))
    for m in (-1, 0, 1):
        assert np.max(np.abs(got.streams[m].data - want.streams[m].data)) < 1e-13


def test_stem_layernorm_variant_he_and_params():
    rng = ct.make_rng(36)
    stem = hs.Stem("stem", 1, [2, 3], convs_per_block=1, kernel_size=3,
                   dropout=[0, 0], rng=rng, norm="layernorm")
    assert stem.buffers() == {}
    assert any(k.endswith("act0.bias") for k in stem.params)
    assert not any(".norm" in k for k in stem.params)
    leaves = const_leaves(stem.params)
    img = rng.standard_normal((1, 1, 16, 16))
    out = stem.forward(ct.CTensor(img), leaves, train=False)
    assert out.shape == (1, 3, 4, 4)
    for q in (1, 2, 3):
        lhs = stem.forward(ct.CTensor(rot_grid(img, q)), leaves, train=False)
        assert sfm_error(lhs, rot_sfm(out, q)) < 1e-10, q
