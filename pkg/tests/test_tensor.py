import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segxfer.tensor import (
    channel_affine,
    ShapeError,
    Tape,
    Tensor,
    UsageError,
    add,
    concat_channels,
    conv2d_same,
    dense,
    elu,
    flatten,
    grad_check,
    load_tensor,
    maxpool2,
    maxpool2_winners,
    no_tape,
    save_tensor,
    softmax_channels,
    softmax_weighted_nll,
    tensor_from_bytes,
    tensor_to_bytes,
    tsum,
    upsample2,
    weighted_nll,
)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_oracle(x, k, b):
    """Nested-loop zero-padded cross-correlation."""
    C, H, W = x.shape
    O, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                s = b[o]
                for c in range(C):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < H and 0 <= jj < W:
                                s += x[c, ii, jj] * k[o, c, di, dj]
                out[o, i, j] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- conv


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 4, 4))
    out = conv2d_same(T(x), T(np.ones((1, 1, 1, 1))), T([0.0]))
    np.testing.assert_array_equal(out.numpy(), x)


def test_conv_zero_input_gives_bias(rng):
    b = np.array([0.5, -2.0, 3.25])
    out = conv2d_same(T(np.zeros((2, 8, 8))), T(rng.normal(size=(3, 2, 3, 3))), T(b))
    for c in range(3):
        assert np.all(out.numpy()[c] == b[c])


def test_conv_hand_computed():
    x = np.arange(1, 10, dtype=float).reshape(1, 3, 3)
    out = conv2d_same(T(x), T(np.ones((1, 1, 3, 3))), T([0.0])).numpy()
    assert out[0, 1, 1] == 45
    assert out[0, 0, 0] == 12


@pytest.mark.parametrize("cin,cout,k,h,w", [(1, 1, 3, 5, 5), (3, 2, 3, 4, 6), (2, 4, 1, 3, 3), (4, 3, 3, 8, 2)])
def test_conv_matches_nested_loops(rng, cin, cout, k, h, w):
    x = rng.normal(size=(cin, h, w))
    kern = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    out = conv2d_same(T(x), T(kern), T(b)).numpy()
    np.testing.assert_allclose(out, conv_oracle(x, kern, b), rtol=1e-12, atol=1e-12)


def test_conv_batched_matches_per_image(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    kern, b = rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    batched = conv2d_same(T(x), T(kern), T(b)).numpy()
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d_same(T(x[i]), T(kern), T(b)).numpy(), atol=1e-12)


@pytest.mark.parametrize(
    "xs,ks,bs",
    [((2, 4, 4), (1, 3, 3, 3), (1,)), ((1, 4, 4), (1, 1, 2, 2), (1,)), ((1, 4, 4), (2, 1, 3, 3), (3,))],
    ids=["channel-mismatch", "even-kernel", "bias-mismatch"],
)
def test_conv_shape_errors(xs, ks, bs):
    with pytest.raises(ShapeError):
        conv2d_same(T(np.zeros(xs)), T(np.zeros(ks)), T(np.zeros(bs)))


def test_conv_linear_in_input(rng):
    k, b = T(rng.normal(size=(2, 1, 3, 3))), T(np.zeros(2))
    x1, x2 = rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 5, 5))
    lhs = conv2d_same(T(2 * x1 + x2), k, b).numpy()
    rhs = 2 * conv2d_same(T(x1), k, b).numpy() + conv2d_same(T(x2), k, b).numpy()
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ---------------------------------------------------------------- pooling / upsampling


def test_maxpool_single_window():
    assert maxpool2(T([[[1, 2], [3, 4]]])).numpy().item() == 4


def test_maxpool_1_to_16():
    x = np.arange(1, 17, dtype=float).reshape(1, 4, 4)
    np.testing.assert_array_equal(maxpool2(T(x)).numpy()[0], [[6, 8], [14, 16]])


def test_maxpool_tie_picks_first_in_row_major():
    x = T(np.full((1, 4, 4), 3.0), grad=True)
    with Tape() as tape:
        y = maxpool2(x)
        loss = tsum(y)
    np.testing.assert_array_equal(y.numpy(), np.full((1, 2, 2), 3.0))
    assert np.all(maxpool2_winners(tape, y) == 0)
    g = tape.backward(loss, wrt=[x])[x][0]
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(g, expected)


def test_maxpool_odd_size_rejected():
    with pytest.raises(ShapeError):
        maxpool2(T(np.zeros((1, 3, 4))))


def test_upsample_definition():
    out = upsample2(T([[[1, 2], [3, 4]]])).numpy()[0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_backward_all_fours(rng):
    x = T(rng.normal(size=(2, 3, 3)), grad=True)
    with Tape() as tape:
        loss = tsum(upsample2(x))
    np.testing.assert_array_equal(tape.backward(loss, wrt=[x])[x], np.full((2, 3, 3), 4.0))


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_pool_of_upsample_is_identity(c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    np.testing.assert_array_equal(maxpool2(upsample2(T(x))).numpy(), x)


# ---------------------------------------------------------------- concat / elu / softmax / dense


def test_concat_channels_order_and_shape(rng):
    a, b = rng.normal(size=(1, 2, 2)), rng.normal(size=(2, 2, 2))
    out = concat_channels(T(a), T(b)).numpy()
    assert out.shape == (3, 2, 2)
    np.testing.assert_array_equal(out[0], a[0])
    np.testing.assert_array_equal(out[1:], b)


def test_concat_top_decoder_stage_has_3n_channels():
    n = 16
    assert concat_channels(T(np.zeros((2 * n, 4, 4))), T(np.zeros((n, 4, 4)))).shape == (48, 4, 4)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(T(np.zeros((1, 2, 2))), T(np.zeros((1, 4, 4))))


def test_elu_values():
    out = elu(T([0.0, 1.0, -1.0])).numpy()
    assert out[0] == 0 and out[1] == 1
    assert out[2] == pytest.approx(math.expm1(-1.0), abs=1e-15)
    assert out[2] == pytest.approx(-0.63212, abs=1e-5)


@pytest.mark.parametrize("x0", [-3.0, -0.7, -1e-3])
def test_elu_negative_derivative(x0):
    x = T([x0], grad=True)
    with Tape() as tape:
        y = elu(x)
        loss = tsum(y)
    g = tape.backward(loss, wrt=[x])[x][0]
    assert g == pytest.approx(y.numpy()[0] + 1, rel=1e-12)
    assert grad_check(lambda t: tsum(elu(t)), [x]) < 1e-8


def test_softmax_closed_forms():
    np.testing.assert_allclose(softmax_channels(T([0.0, 0.0])).numpy(), [0.5, 0.5])
    np.testing.assert_allclose(softmax_channels(T([math.log(2), 0.0])).numpy(), [2 / 3, 1 / 3], rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(c=st.integers(2, 6), h=st.integers(1, 5), shift=st.floats(-50, 50), seed=st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one_and_shift_invariant(c, h, shift, seed):
    logits = np.random.default_rng(seed).normal(scale=5, size=(c, h, h))
    p = softmax_channels(T(logits)).numpy()
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    assert np.all((p > 0) & (p < 1)) or c == 1
    shifted = logits.copy()
    shifted[:, 0, 0] += shift
    np.testing.assert_allclose(softmax_channels(T(shifted)).numpy(), p, atol=1e-12)


def test_softmax_stable_for_large_logits():
    p = softmax_channels(T([1000.0, 0.0])).numpy()
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_dense_examples(rng):
    x = rng.normal(size=4)
    np.testing.assert_array_equal(dense(T(x), T(np.eye(4)), T(np.zeros(4))).numpy(), x)
    b = rng.normal(size=3)
    np.testing.assert_array_equal(dense(T(np.zeros(5)), T(rng.normal(size=(3, 5))), T(b)).numpy(), b)
    np.testing.assert_array_equal(dense(T([1.0, 1.0]), T([[1.0, 2.0], [3.0, 4.0]]), T([0.0, 0.0])).numpy(), [3, 7])


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        dense(T(np.zeros(3)), T(np.zeros((2, 4))), T(np.zeros(2)))


# ---------------------------------------------------------------- tape semantics


def test_backward_of_sum_is_ones(rng):
    x = T(rng.normal(size=(2, 3)), grad=True)
    with Tape() as tape:
        loss = tsum(x)
    np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((2, 3)))


def test_unused_leaf_gets_zero_gradient(rng):
    x, unused = T(rng.normal(size=3), grad=True), T(rng.normal(size=(2, 2)), grad=True)
    with Tape() as tape:
        loss = tsum(x)
    g = tape.backward(loss, wrt=[x, unused])
    np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))


def test_loss_not_on_tape_is_usage_error(rng):
    x = T(rng.normal(size=3), grad=True)
    stray = tsum(x)
    with Tape() as tape:
        tsum(x)
    with pytest.raises(UsageError):
        tape.backward(stray)


def test_non_scalar_loss_is_usage_error(rng):
    x = T(rng.normal(size=3), grad=True)
    with Tape() as tape:
        y = elu(x)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_two_passes_accumulate(rng):
    x = T(rng.normal(size=(1, 4, 4)), grad=True)
    k, b = T(rng.normal(size=(2, 1, 3, 3))), T(np.zeros(2))
    with Tape() as tape:
        l1 = tsum(elu(conv2d_same(x, k, b)))
    g1 = tape.backward(l1, wrt=[x])[x]
    with Tape() as tape:
        l2 = tsum(maxpool2(x))
    g2 = tape.backward(l2, wrt=[x])[x]
    with Tape() as tape:
        both = add(tsum(elu(conv2d_same(x, k, b))), tsum(maxpool2(x)))
    np.testing.assert_allclose(tape.backward(both, wrt=[x])[x], g1 + g2, atol=1e-12)


def test_replay_is_bit_exact(rng):
    x = T(rng.normal(size=(1, 8, 8)).astype(np.float32), grad=True)
    k = T(rng.normal(size=(3, 1, 3, 3)).astype(np.float32), grad=True)
    b = T(np.zeros(3, dtype=np.float32), grad=True)
    with Tape() as tape:
        y = softmax_channels(upsample2(maxpool2(elu(conv2d_same(x, k, b)))))
    outputs = tape.replay()
    np.testing.assert_array_equal(outputs[-1], y.numpy())


def test_no_tape_records_nothing(rng):
    with Tape() as tape:
        with no_tape():
            elu(T(rng.normal(size=3)))
    assert len(tape.entries) == 0


def test_tensors_are_immutable(rng):
    t = T(rng.normal(size=3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


# ---------------------------------------------------------------- gradient checks


def test_grad_check_dense():
    rng = np.random.default_rng(0)
    x, w, b = T(rng.normal(size=3), True), T(rng.normal(size=(3, 3)), True), T(rng.normal(size=3), True)
    assert grad_check(lambda x, w, b: tsum(elu(dense(x, w, b))), [x, w, b]) < 1e-6


def test_grad_check_composed_block():
    rng = np.random.default_rng(1)
    x = T(rng.normal(size=(2, 4, 4)), True)
    k = T(rng.normal(scale=0.5, size=(3, 2, 3, 3)), True)
    b = T(rng.normal(scale=0.1, size=3), True)
    w = T(rng.normal(scale=0.3, size=(2, 12)), True)
    c = T(np.zeros(2), True)

    def fn(x, k, b, w, c):
        h = maxpool2(elu(conv2d_same(x, k, b)))
        logits = dense(flatten(h), w, c)
        return softmax_weighted_nll(logits, np.array(1), np.array([0.3, 0.8]), axis=0, batched=False)

    assert grad_check(fn, [x, k, b, w, c]) < 1e-4


def test_grad_check_requires_float64():
    with pytest.raises(UsageError):
        grad_check(lambda t: tsum(t), [Tensor(np.zeros(2, np.float32), requires_grad=True)])


def test_fused_loss_matches_unfused(rng):
    logits = rng.normal(size=(4, 3, 3))
    labels = rng.integers(0, 4, size=(3, 3))
    w = rng.uniform(0.1, 1, size=4)
    fused = softmax_weighted_nll(T(logits), labels, w, axis=0, batched=False).item()
    plain = weighted_nll(softmax_channels(T(logits)), labels, w, axis=0, batched=False).item()
    assert fused == pytest.approx(plain, rel=1e-12)


def test_fused_loss_gradient_survives_saturation():
    # a confidently wrong pixel still pushes its logits back
    logits = T([[[60.0]], [[-60.0]]], grad=True)
    with Tape() as tape:
        loss = softmax_weighted_nll(logits, np.array([[1]]), np.array([1.0, 1.0]), axis=0, batched=False)
    g = tape.backward(loss, wrt=[logits])[logits]
    assert loss.item() == pytest.approx(-math.log(1e-12))
    np.testing.assert_allclose(g[:, 0, 0], [1.0, -1.0], atol=1e-12)


# ---------------------------------------------------------------- TNSR format


def test_tnsr_header_layout():
    raw = tensor_to_bytes(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert raw[:4] == b"TNSR"
    assert raw[4:7] == bytes([1, 0, 2])
    assert raw[7:15] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[15:] == np.array([1, 2, 3], dtype="<f4").tobytes()


@settings(max_examples=30, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=0, max_size=4),
    u8=st.booleans(),
    seed=st.integers(0, 2**31 - 1),
)
def test_tnsr_roundtrip_is_byte_identical(shape, u8, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=shape).astype(np.uint8) if u8 else rng.normal(size=shape).astype(np.float32)
    raw = tensor_to_bytes(arr)
    back = tensor_from_bytes(raw)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)
    assert tensor_to_bytes(back) == raw


def test_tnsr_file_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(1, 4, 4)).astype(np.float32)
    save_tensor(tmp_path / "a.tnsr", arr)
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.tnsr"), arr)


@pytest.mark.parametrize(
    "raw",
    [b"XXXX\x01\x00\x00", b"TNSR\x02\x00\x00", b"TNSR\x01\x07\x00", b"TNSR\x01\x00\x01\x02\x00\x00\x00\x00"],
    ids=["magic", "version", "dtype", "truncated"],
)
def test_tnsr_rejects_malformed(raw):
    with pytest.raises(ValueError):
        tensor_from_bytes(raw)


def test_tnsr_rejects_float64():
    with pytest.raises(ValueError):
        tensor_to_bytes(np.zeros(2))


def test_channel_affine_matches_broadcast(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    shift, scale = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    out = channel_affine(T(x), T(shift), T(scale)).numpy()
    np.testing.assert_allclose(out, (x - shift[None, :, None, None]) * scale[None, :, None, None])
    single = channel_affine(T(x[0]), T(shift), T(scale)).numpy()
    np.testing.assert_allclose(single, out[0])


def test_grad_check_channel_affine():
    rng = np.random.default_rng(2)
    x = T(rng.normal(size=(2, 3, 3, 3)), True)
    shift, scale = T(rng.normal(size=3), True), T(rng.normal(size=3), True)
    assert grad_check(lambda x, a, b: tsum(elu(channel_affine(x, a, b))), [x, shift, scale]) < 1e-6


def test_conv_backward_skips_constant_input(rng):
    x = T(rng.normal(size=(2, 4, 4)))
    k = T(rng.normal(size=(3, 2, 3, 3)), True)
    b = T(np.zeros(3), True)
    with Tape() as tape:
        loss = tsum(elu(conv2d_same(x, k, b)))
    grads = tape.backward(loss)
    assert x not in grads
    # same kernel gradient as when the input gradient is also formed
    xg = T(x.numpy(), True)
    with Tape() as tape2:
        loss2 = tsum(elu(conv2d_same(xg, k, b)))
    full = tape2.backward(loss2)
    np.testing.assert_allclose(grads[k], full[k])
    np.testing.assert_allclose(grads[b], full[b])
    assert full[xg].shape == x.shape
