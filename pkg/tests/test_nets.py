import math

import numpy as np
import pytest

from gradcheck import gradient_error
from vistra.nets import (
    ChannelAddress,
    GeneratorConfig,
    HeadSpec,
    RecognitionConfig,
    UnknownLayerError,
    build_encoder,
    build_generator,
    build_recognition_net,
    channel_objective,
    encode,
    forward_to_layer,
    generate,
    loss_categorical,
    loss_mean_binary,
    replace_head,
)
from vistra.tensor import Tape, Tensor, ops


@pytest.fixture(scope="module")
def net():
    return build_recognition_net(seed=0)


def _image(seed, n=1):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, 64, 64)).astype(np.float32)


def test_channel_enumeration(net):
    cfg = RecognitionConfig()
    expected = sum(cfg.stem) + sum(b.b0 + b.b1_reduce + b.b1 + b.b2_reduce + 2 * b.b2 + b.b3 for b in cfg.blocks)
    addrs = list(net.addresses())
    assert len(addrs) == expected
    assert len(set(addrs)) == len(addrs)
    assert len(net.conv_layers()) >= 20


def test_zero_image_finite_everywhere(net):
    outs = net.forward(np.zeros((1, 3, 64, 64), np.float32), net.conv_layers() + ["head/logits"])
    assert all(np.all(np.isfinite(t.data)) for t in outs.values())


def test_block_parameter_count(net):
    w = RecognitionConfig().blocks[1]
    c_in = RecognitionConfig().blocks[0].out

    def conv(i, o, k):  # kernel + batch-norm gain and shift
        return i * o * k * k + 2 * o

    expected = (
        conv(c_in, w.b0, 1)
        + conv(c_in, w.b1_reduce, 1)
        + conv(w.b1_reduce, w.b1, 3)
        + conv(c_in, w.b2_reduce, 1)
        + conv(w.b2_reduce, w.b2, 3)
        + conv(w.b2, w.b2, 3)
        + conv(c_in, w.b3, 1)
    )
    assert net.parameter_count("mixed4/") == expected


def test_invalid_width_rejected():
    with pytest.raises(ValueError):
        build_recognition_net(RecognitionConfig(stem=(16, 0, 32)))
    with pytest.raises(ValueError):
        HeadSpec(classes=0)


def test_unknown_layer_lists_valid_names(net):
    with pytest.raises(UnknownLayerError, match="conv1/a3x3"):
        forward_to_layer(net, _image(0), ChannelAddress("mixed9", 0))
    with pytest.raises(UnknownLayerError):
        net.resolve(ChannelAddress("mixed3/branch0/a1x1", 999))


def test_address_parse_roundtrip():
    a = ChannelAddress("mixed4/branch1/b3x3", 7)
    assert ChannelAddress.parse(str(a)) == a
    with pytest.raises(ValueError):
        ChannelAddress.parse("mixed4")


def test_identity_kernel_first_layer():
    net = build_recognition_net(seed=0)
    k = np.zeros_like(net.params["conv1/a3x3/kernel"])
    k[0, 1, 1, 1] = 1.0  # channel 0 copies green at the kernel center
    net.params["conv1/a3x3/kernel"] = k
    net.params["conv1/a3x3/gamma"][:] = 1.0
    net.params["conv1/a3x3/beta"][:] = 0.0
    net.buffers["conv1/a3x3/mean"][:] = 0.0
    net.buffers["conv1/a3x3/var"][:] = 1.0 - 1e-3  # var + eps == 1
    img = _image(1)
    out = forward_to_layer(net, img, ChannelAddress("conv1/a3x3", 0)).data
    # stride 2 "same" on 64 pads (0, 1): window i is centered on pixel 2i + 1
    assert np.allclose(out[0], img[0, 1, 1::2, 1::2], atol=1e-6)


def test_slice_consistency(net):
    img = _image(2)
    full = net.forward(img, ["mixed4/branch2/b3x3"])["mixed4/branch2/b3x3"].data
    for c in (0, 5):
        m = forward_to_layer(net, img, ChannelAddress("mixed4/branch2/b3x3", c)).data
        assert np.array_equal(m, full[:, c])


def test_forward_to_layer_gradient(net):
    small = build_recognition_net(RecognitionConfig(input_extent=16), seed=3)
    f = channel_objective(small, ChannelAddress("conv2/c3x3", 4))
    img = np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 16))
    assert gradient_error(lambda x: f(x), [img], kinks=True) < 1e-3


def test_objective_is_mean_of_map(net):
    img = _image(3)
    addr = ChannelAddress("mixed3/branch1/b3x3", 2)
    m = forward_to_layer(net, img, addr).data[0]
    total = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            total += float(m[i, j])
    assert channel_objective(net, addr)(img).item() == pytest.approx(total / m.size, rel=1e-5)


def test_objective_constant_map():
    net = build_recognition_net(seed=0)
    net.params["conv1/a3x3/kernel"][2] = 0.0
    net.params["conv1/a3x3/beta"][2] = 0.75
    net.buffers["conv1/a3x3/mean"][2] = 0.0
    val = channel_objective(net, ChannelAddress("conv1/a3x3", 2))(_image(4)).item()
    assert val == pytest.approx(0.75, abs=1e-6)


def test_negated_gain_flips_pre_activation_objective():
    net = build_recognition_net(seed=0)
    addr = ChannelAddress("mixed3/branch0/a1x1", 3)
    net.params["mixed3/branch0/a1x1/beta"][3] = 0.0
    net.buffers["mixed3/branch0/a1x1/mean"][3] = 0.0
    img = _image(5)
    a = channel_objective(net, addr, pre_activation=True)(img).item()
    net.params["mixed3/branch0/a1x1/gamma"][3] *= -1
    b = channel_objective(net, addr, pre_activation=True)(img).item()
    assert a != 0 and b == pytest.approx(-a, rel=1e-5)


def test_categorical_uniform_is_log_c():
    z = Tensor(np.zeros((4, 10)))
    assert loss_categorical(z, [0, 3, 9, 2]).item() == pytest.approx(math.log(10), rel=1e-6)


def test_categorical_range_error():
    with pytest.raises(ValueError):
        loss_categorical(Tensor(np.zeros((1, 10))), [10])


def test_perfect_predictions_near_zero():
    z = np.full((2, 5), -60.0)
    z[0, 1] = z[1, 4] = 60.0
    assert loss_categorical(Tensor(z), [1, 4]).item() < 1e-6
    p = Tensor(np.array([[1.0, 0.0, 1.0]]))
    val = loss_mean_binary(p, np.array([[1, 0, 1]])).item()
    assert 0 <= val <= 2e-7


def test_losses_vs_float64_oracle():
    rng = np.random.default_rng(11)
    z = rng.normal(0, 2, (6, 7)).astype(np.float32)
    y = rng.integers(0, 7, 6)
    ref = 0.0
    for row, lab in zip(z.astype(np.float64), y):
        m = row.max()
        ref += -(row[lab] - m - math.log(sum(math.exp(v - m) for v in row)))
    assert loss_categorical(Tensor(z), y).item() == pytest.approx(ref / 6, abs=1e-6)

    p = rng.uniform(0.05, 0.95, (6, 8)).astype(np.float32)
    t = rng.integers(0, 2, (6, 8))
    ref = np.mean([-(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)) for pi, ti in zip(p.ravel().astype(float), t.ravel())])
    assert loss_mean_binary(Tensor(p), t).item() == pytest.approx(ref, abs=1e-6)


def test_loss_gradients():
    rng = np.random.default_rng(12)
    y = rng.integers(0, 5, 4)
    assert gradient_error(lambda z: loss_categorical(z, y), [rng.normal(size=(4, 5))]) < 1e-3
    t = rng.integers(0, 2, (4, 3))
    p = rng.uniform(0.1, 0.9, (4, 3))
    assert gradient_error(lambda q: loss_mean_binary(q, t), [p]) < 1e-3


def test_replace_head_keeps_backbone(net):
    new = replace_head(net, HeadSpec(8, hidden=None, activation="sigmoid"), seed=1)
    assert new.params["head/logits/weight"].shape == (RecognitionConfig().blocks[-1].out, 8)
    assert "head/hidden/weight" not in new.params
    for k, v in net.params.items():
        if not k.startswith("head/"):
            assert np.array_equal(v, new.params[k])
    assert abs(new.params["head/logits/weight"].std() - 0.01) < 0.003
    assert new.digest != net.digest


# ---------------------------------------------------------------- generator

@pytest.fixture(scope="module")
def gen():
    return build_generator(GeneratorConfig(), seed=0)


def test_generator_zero_gain_deterministic():
    g = build_generator(seed=0)
    for k in g.params:
        if k.endswith("/gain"):
            g.params[k][:] = 0.0
    w = np.random.default_rng(0).normal(size=32)
    assert np.array_equal(generate(g, w, 1).data, generate(g, w, 2).data)


def test_generator_noise_seed_contract(gen):
    w = np.random.default_rng(1).normal(size=32)
    a, b, c = generate(gen, w, 5).data, generate(gen, w, 5).data, generate(gen, w, 6).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_generator_output_range(gen):
    ws = np.random.default_rng(2).normal(0, 3, (100, 32))
    img = generate(gen, ws, 0).data
    assert img.shape == (100, 3, 64, 64)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_generator_wrong_latent_length(gen):
    with pytest.raises(ValueError, match="length 32"):
        generate(gen, np.zeros(31), 0)


def test_generator_gradient_flows_to_latent(gen):
    w = Tensor(np.random.default_rng(3).normal(size=32), requires_grad=True)
    with Tape() as tape:
        loss = ops.mean(generate(gen, w, 0))
        grads = tape.backward(loss)
    assert np.any(grads[w] != 0)


def test_encoder_shape():
    enc = build_encoder()
    code = encode(enc, np.zeros((2, 3, 64, 64), np.float32))
    assert code.shape == (2, 32)
