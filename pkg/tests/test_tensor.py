import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import away_from_zero, gradient_error
from vistra.tensor import AdamState, Tape, TapeError, Tensor, adam_step, ops

CASES = 20
TOL = 1e-3


def _weighted(out, seed):
    """Reduce a tensor to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


# ---------------------------------------------------------------- oracles

def conv2d_direct(x, k, stride, padding):
    """Six nested loops, float64."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if padding == "same":
        ho, wo = math.ceil(h / stride), math.ceil(w / stride)
        th = max((ho - 1) * stride + kh - h, 0)
        tw = max((wo - 1) * stride + kw - w, 0)
        x = np.pad(x, ((0, 0), (0, 0), (th // 2, th - th // 2), (tw // 2, tw - tw // 2)))
    else:
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[b, ic, i * stride + di, j * stride + dj] * k[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def direct_dft2(a):
    """O(N^2) unitary 2D DFT of a complex plane."""
    h, w = a.shape
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ a @ fw.T / np.sqrt(h * w)


def scalar_adam(x, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    xs = []
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        xs.append(x)
    return xs


# ---------------------------------------------------------------- conv2d

def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, "same")
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv2d_zero_kernel():
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
    out = ops.conv2d(Tensor(x), Tensor(np.zeros((5, 3, 3, 3))))
    assert not out.data.any()


@pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
def test_conv2d_matches_direct_summation(stride, padding):
    rng = np.random.default_rng(stride * 10 + len(padding))
    x = rng.normal(size=(1, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k), stride, padding).data
    ref = conv2d_direct(x, k, stride, padding)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, atol=1e-5, rtol=0)


def test_conv2d_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3, 8, 8\).*\(4, 2, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))


# ---------------------------------------------------------------- backward contract

def test_backward_sum_of_squares():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        root = ops.sum(ops.mul(x, x))
    grads = tape.backward(root)
    np.testing.assert_allclose(grads[x], 2 * x.data, rtol=1e-6)
    assert x.grad is grads[x]


def test_backward_avgpooled_conv_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    err = gradient_error(lambda a, b: ops.mean(ops.global_avg_pool(ops.conv2d(a, b))), [x, k])
    assert err < TOL


def test_constant_leaf_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.arange(3.0))
    with Tape() as tape:
        root = ops.sum(ops.mul(x, c))
    grads = tape.backward(root)
    assert c not in grads and c.grad is None
    assert x in grads


def test_disconnected_leaf_gets_zero_buffer():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        ops.mul(y, 2.0)
        root = ops.sum(x)
    grads = tape.backward(root)
    assert grads[y].shape == (2, 2) and not grads[y].any()


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_twice_without_reset_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        root = ops.sum(x * x)
    tape.backward(root)
    with pytest.raises(TapeError):
        tape.backward(root)
    tape.reset()
    with tape:
        root = ops.sum(x * x)
    tape.backward(root)


def test_nan_root_is_reported():
    from vistra.tensor import NonFiniteError

    x = Tensor(np.array([np.nan, 1.0]), requires_grad=True)
    with Tape() as tape:
        root = ops.sum(x)
    with pytest.raises(NonFiniteError):
        tape.backward(root)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.mul(x, 2.0)
    assert not y.requires_grad


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, AdamState())
    np.testing.assert_array_equal(p["w"], before)


def test_adam_first_step_is_sign_step():
    g = np.array([0.5, -3.0, 1e-3], dtype=np.float32)
    p = {"w": np.zeros(3, dtype=np.float32)}
    adam_step(p, {"w": g}, AdamState(lr=0.01))
    np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-5)


def test_adam_matches_scalar_oracle_on_parabola():
    ref = scalar_adam(1.0, 10)
    p = {"x": np.array([1.0], dtype=np.float32)}
    st_ = AdamState()
    for expected in ref:
        adam_step(p, {"x": 2 * p["x"]}, st_)
        assert abs(float(p["x"][0]) - expected) < 1e-6
    assert st_.step == 10


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3, np.float32)}, {"w": np.zeros(2, np.float32)}, AdamState())


# ---------------------------------------------------------------- FFT

def test_fft_delta_has_flat_spectrum():
    z = np.zeros((1, 8, 8, 2))
    z[0, 0, 0, 0] = 1.0
    mag = np.hypot(*np.moveaxis(ops.fft2(Tensor(z)).data, -1, 0))
    np.testing.assert_allclose(mag, 1 / 8, rtol=1e-6)


def test_fft_roundtrip_32():
    x = np.random.default_rng(4).normal(size=(3, 32, 32, 2))
    back = ops.ifft2(ops.fft2(Tensor(x))).data
    assert np.abs(back - x).max() < 1e-5


def test_fft_matches_direct_dft_and_parseval():
    rng = np.random.default_rng(5)
    plane = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    z = np.stack([plane.real, plane.imag], -1)[None]
    out = ops.fft2(Tensor(z)).data[0]
    ref = direct_dft2(plane)
    np.testing.assert_allclose(out[..., 0] + 1j * out[..., 1], ref, atol=1e-4)
    energy_space = np.sum(np.abs(plane) ** 2)
    energy_freq = np.sum(out.astype(np.float64) ** 2)
    assert abs(energy_space - energy_freq) / energy_space < 1e-4


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="powers of two"):
        ops.fft2(Tensor(np.zeros((1, 12, 8, 2))))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_fft_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 16, 16, 2)), rng.normal(size=(2, 16, 16, 2))
    lhs = ops.fft2(Tensor(a * x + b * y)).data
    rhs = a * ops.fft2(Tensor(x)).data + b * ops.fft2(Tensor(y)).data
    assert np.abs(lhs - rhs).max() < 1e-5 * max(1.0, abs(a) + abs(b)) * 4


# ---------------------------------------------------------------- gradient suite

def _case(name, rng):
    """Return (function, input arrays, has_kinks) for one randomized case."""
    seed = int(rng.integers(1 << 30))
    if name == "add":
        shape = tuple(rng.integers(1, 5, size=3))
        return (lambda a, b: _weighted(ops.add(a, b), seed)), [rng.normal(size=shape), rng.normal(size=(1, shape[1], 1))], False
    if name == "mul":
        shape = tuple(rng.integers(1, 5, size=3))
        return (lambda a, b: _weighted(ops.mul(a, b), seed)), [rng.normal(size=shape), rng.normal(size=shape[-1:])], False
    if name == "relu":
        shape = tuple(rng.integers(1, 6, size=2))
        return (lambda a: _weighted(ops.relu(a), seed)), [away_from_zero(rng.normal(size=shape))], False
    if name == "sigmoid":
        return (lambda a: _weighted(ops.sigmoid(a), seed)), [3 * rng.normal(size=tuple(rng.integers(1, 6, size=2)))], False
    if name == "dense":
        n, i, o = rng.integers(1, 6, size=3)
        return (lambda x, w, b: _weighted(ops.dense(x, w, b), seed)), [rng.normal(size=(n, i)), rng.normal(size=(i, o)), rng.normal(size=o)], False
    if name == "conv2d":
        stride = int(rng.integers(1, 3))
        padding = ["same", "valid"][int(rng.integers(2))]
        k = int(rng.choice([1, 3]))
        c, o = rng.integers(1, 4, size=2)
        hw = int(rng.integers(k + 1, 8))
        f = lambda x, w: _weighted(ops.conv2d(x, w, stride, padding), seed)  # noqa: E731
        return f, [rng.normal(size=(2, c, hw, hw)), rng.normal(size=(o, c, k, k))], False
    if name in ("batch_norm_train", "batch_norm_eval"):
        training = name.endswith("train")
        c = int(rng.integers(1, 4))
        shape = (int(rng.integers(2, 5)), c, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        mean0, var0 = rng.normal(size=c), rng.uniform(0.5, 2, size=c)

        def f(x, g, b):
            return _weighted(ops.batch_norm(x, g, b, mean0.copy(), var0.copy(), training), seed)

        return f, [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)], False
    if name == "avg_pool2d":
        size = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        padding = ["same", "valid"][int(rng.integers(2))]
        hw = int(rng.integers(size, 9))
        return (lambda x: _weighted(ops.avg_pool2d(x, size, stride, padding), seed)), [rng.normal(size=(2, 2, hw, hw))], False
    if name == "global_avg_pool":
        return (lambda x: _weighted(ops.global_avg_pool(x), seed)), [rng.normal(size=(2, 3, *rng.integers(1, 6, size=2)))], False
    if name == "softmax_cross_entropy":
        n, k = rng.integers(1, 6), rng.integers(2, 7)
        labels = rng.integers(0, k, size=n)
        return (lambda z: ops.softmax_cross_entropy(z, labels)), [2 * rng.normal(size=(n, k))], False
    if name == "binary_cross_entropy":
        shape = tuple(rng.integers(1, 6, size=2))
        t = rng.integers(0, 2, size=shape)
        return (lambda p: ops.binary_cross_entropy(p, t)), [rng.uniform(0.05, 0.95, size=shape)], False
    if name == "sigmoid_binary_cross_entropy":
        shape = tuple(rng.integers(1, 6, size=2))
        t = rng.integers(0, 2, size=shape)
        return (lambda z: ops.sigmoid_binary_cross_entropy(z, t)), [2 * rng.normal(size=shape)], False
    if name == "concat":
        a = rng.normal(size=(2, int(rng.integers(1, 4)), 3, 3))
        b = rng.normal(size=(2, int(rng.integers(1, 4)), 3, 3))
        return (lambda x, y: _weighted(ops.concat([x, y], axis=1), seed)), [a, b], False
    if name == "upsample2x":
        return (lambda x: _weighted(ops.upsample2x(x), seed)), [rng.normal(size=(1, 2, *rng.integers(1, 5, size=2)))], False
    if name == "downsample2x":
        hw = 2 * rng.integers(1, 5, size=2)
        return (lambda x: _weighted(ops.downsample2x(x), seed)), [rng.normal(size=(1, 2, *hw))], False
    if name == "fft2":
        return (lambda z: _weighted(ops.fft2(z), seed)), [rng.normal(size=(2, 4, 8, 2))], False
    if name == "ifft2":
        return (lambda z: _weighted(ops.ifft2(z), seed)), [rng.normal(size=(1, 8, 4, 2))], False
    if name == "real_part":
        return (lambda z: _weighted(ops.real_part(ops.ifft2(z)), seed)), [rng.normal(size=(1, 4, 4, 2))], False
    if name == "as_complex":
        return (lambda x: _weighted(ops.fft2(ops.as_complex(x)), seed)), [rng.normal(size=(2, 4, 4))], False
    if name == "roll":
        shift = tuple(int(s) for s in rng.integers(-3, 4, size=2))
        return (lambda x: _weighted(ops.roll(x, shift), seed)), [rng.normal(size=(1, 2, 5, 6))], False
    if name == "separable_resample":
        h, w = rng.integers(2, 7, size=2)
        rows, cols = rng.normal(size=(int(rng.integers(2, 7)), h)), rng.normal(size=(int(rng.integers(2, 7)), w))
        return (lambda x: _weighted(ops.separable_resample(x, rows, cols), seed)), [rng.normal(size=(1, 3, h, w))], False
    if name == "getitem":
        return (lambda x: _weighted(x[:, 1:3, ::2], seed)), [rng.normal(size=(2, 4, 5))], False
    if name == "mean_sum_reshape":
        return (lambda x: ops.sum(ops.mean(x.reshape(2, -1), axis=0) * ops.mean(x))), [rng.normal(size=(2, 3, 2))], False
    raise KeyError(name)


PRIMITIVES = [
    "add", "mul", "relu", "sigmoid", "dense", "conv2d", "batch_norm_train", "batch_norm_eval",
    "avg_pool2d", "global_avg_pool", "softmax_cross_entropy", "binary_cross_entropy",
    "sigmoid_binary_cross_entropy", "concat", "upsample2x", "downsample2x", "fft2", "ifft2",
    "real_part", "as_complex", "roll", "separable_resample", "getitem", "mean_sum_reshape",
]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    rng = np.random.default_rng(PRIMITIVES.index(name))
    worst = 0.0
    for case in range(CASES):
        f, arrays, kinks = _case(name, rng)
        worst = max(worst, gradient_error(f, arrays, seed=case, kinks=kinks))
    assert worst < TOL, f"{name}: worst relative error {worst:.2e}"


# ---------------------------------------------------------------- determinism

def test_bit_identical_reruns():
    rng = np.random.default_rng(6)
    x, k = rng.normal(size=(4, 8, 16, 16)), rng.normal(size=(16, 8, 3, 3))

    def run():
        xt = Tensor(x, requires_grad=True)
        kt = Tensor(k, requires_grad=True)
        with Tape() as tape:
            y = ops.conv2d(xt, kt)
            loss = ops.mean(ops.relu(ops.batch_norm(y, np.ones(16), np.zeros(16), np.zeros(16), np.ones(16), True)))
        g = tape.backward(loss)
        return y.data, g[xt], g[kt]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_float32_by_default():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
