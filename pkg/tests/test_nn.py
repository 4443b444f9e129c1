import numpy as np
import pytest

from weightgen import generator, nn
from weightgen.errors import ConfigError, ShapeError

from oracles import finite_difference, rel_err


def _loss_through(layer, x, r, train=True):
    return float(np.sum(layer.forward(x, train=train) * r))


def test_conv2d_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    layer = nn.Conv2d(3, 4, 3, stride=2, pad=1, rng=rng)
    x = rng.standard_normal((2, 3, 7, 7))
    r = rng.standard_normal(layer.forward(x).shape)

    out = layer.forward(x)
    layer.weight.zero_grad()
    dx = layer.backward(r)

    want_dx = finite_difference(lambda t: _loss_through(layer, t, r), x.copy())
    assert rel_err(dx, want_dx) < 1e-7

    def loss_w(w):
        layer.weight.value = w
        return _loss_through(layer, x, r)

    want_dw = finite_difference(loss_w, layer.weight.value.copy())
    assert rel_err(layer.weight.grad, want_dw) < 1e-7


def test_generated_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    plan = generator.plan_layer(4, 3, 3, 2, 3)
    factors = generator.init_random(plan, rng)
    layer = nn.GeneratedConv2d(factors, stride=1, pad=0, quantized=False)
    x = rng.standard_normal((2, 3, 6, 6))
    r = rng.standard_normal(layer.forward(x).shape)

    layer.forward(x)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(r)
    want_dx = finite_difference(lambda t: _loss_through(layer, t, r), x.copy())
    assert rel_err(dx, want_dx) < 1e-7

    for p in layer.params():
        def loss_p(v, p=p):
            setattr(factors, p.name, v)
            p.value = v
            return _loss_through(layer, x, r)

        want = finite_difference(loss_p, p.value.copy())
        assert rel_err(p.grad, want) < 1e-7, p.name


def test_generated_conv_quantized_forward_uses_generated_kernel():
    rng = np.random.default_rng(2)
    plan = generator.plan_layer(4, 3, 3, 2, 3)
    factors = generator.init_random(plan, rng)
    layer = nn.GeneratedConv2d(factors, quantized=True)
    x = rng.standard_normal((2, 3, 6, 6))
    out = layer.forward(x)
    from weightgen import tensor
    want = tensor.conv2d_forward(x, generator.generate(factors, quantized=True))
    assert np.array_equal(out, want)


def test_batchnorm_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    layer = nn.BatchNorm2d(3)
    layer.gamma.value = rng.uniform(0.5, 1.5, 3)
    layer.beta.value = rng.standard_normal(3)
    x = rng.standard_normal((4, 3, 5, 5))
    r = rng.standard_normal(x.shape)

    layer.forward(x, train=True)
    layer.gamma.zero_grad()
    layer.beta.zero_grad()
    dx = layer.backward(r)

    want_dx = finite_difference(lambda t: _loss_through(layer, t, r, train=True), x.copy())
    assert rel_err(dx, want_dx) < 1e-6

    def loss_gamma(g):
        layer.gamma.value = g
        return _loss_through(layer, x, r, train=True)

    assert rel_err(layer.gamma.grad,
                   finite_difference(loss_gamma, layer.gamma.value.copy())) < 1e-7

    def loss_beta(b):
        layer.beta.value = b
        return _loss_through(layer, x, r, train=True)

    assert rel_err(layer.beta.grad,
                   finite_difference(loss_beta, layer.beta.value.copy())) < 1e-7


def test_batchnorm_running_stats_and_eval_mode():
    rng = np.random.default_rng(4)
    layer = nn.BatchNorm2d(2, momentum=0.1)
    x = rng.standard_normal((8, 2, 4, 4)) * 2.0 + 1.0
    for _ in range(200):
        layer.forward(x, train=True)
    assert rel_err(layer.running_mean, x.mean(axis=(0, 2, 3))) < 1e-6
    m = 8 * 4 * 4
    assert rel_err(layer.running_var, x.var(axis=(0, 2, 3)) * m / (m - 1)) < 1e-6
    out = layer.forward(x, train=False)
    assert abs(out.mean()) < 0.1
    with pytest.raises(ShapeError):
        layer.forward(rng.standard_normal((2, 3, 4, 4)))


def test_relu_and_flatten_roundtrip():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 4, 4)) + 0.05  # keep away from the kink
    relu = nn.ReLU()
    r = rng.standard_normal(x.shape)
    relu.forward(x)
    dx = relu.backward(r)
    want = finite_difference(lambda t: _loss_through(relu, t, r), x.copy())
    assert rel_err(dx, want) < 1e-7

    flat = nn.Flatten()
    y = flat.forward(x)
    assert y.shape == (3, 32)
    assert np.array_equal(flat.backward(y), x)


def test_adaptive_avgpool_windows_4_to_3():
    # 4 -> 3 uses overlapping windows rows (0,1), (1,2), (2,3).
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    pool = nn.AdaptiveAvgPool2d(3)
    out = pool.forward(x)
    assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert out[0, 0, 1, 1] == pytest.approx((5 + 6 + 9 + 10) / 4)
    assert out[0, 0, 2, 2] == pytest.approx((10 + 11 + 14 + 15) / 4)

    rng = np.random.default_rng(6)
    xr = rng.standard_normal((2, 3, 4, 4))
    r = rng.standard_normal((2, 3, 3, 3))
    pool.forward(xr)
    dx = pool.backward(r)
    want = finite_difference(lambda t: _loss_through(pool, t, r), xr.copy())
    assert rel_err(dx, want) < 1e-7


def test_linear_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    layer = nn.Linear(6, 4, rng=rng)
    x = rng.standard_normal((5, 6))
    r = rng.standard_normal((5, 4))
    layer.forward(x)
    layer.weight.zero_grad()
    layer.bias.zero_grad()
    dx = layer.backward(r)
    assert rel_err(dx, finite_difference(
        lambda t: _loss_through(layer, t, r), x.copy())) < 1e-7

    def loss_w(w):
        layer.weight.value = w
        return _loss_through(layer, x, r)

    assert rel_err(layer.weight.grad,
                   finite_difference(loss_w, layer.weight.value.copy())) < 1e-7


def test_actquant_grid_and_straight_through():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4, 4))
    layer = nn.ActQuant(bits=4)
    y = layer.forward(x)
    assert np.unique(y).size <= 2**4 - 1
    r = rng.standard_normal(x.shape)
    assert np.array_equal(layer.backward(r), r)  # max-scale, nothing clipped


def test_sequential_end_to_end_gradients():
    rng = np.random.default_rng(9)
    net = nn.build_network("C4K3S1-AvgPool2-FC3", 2, 5, rng)
    x = rng.standard_normal((3, 2, 5, 5))
    r = rng.standard_normal((3, 3))

    net.forward(x, train=True)
    net.zero_grad()
    dx = net.backward(r)
    want_dx = finite_difference(
        lambda t: float(np.sum(net.forward(t, train=True) * r)), x.copy()
    )
    assert rel_err(dx, want_dx) < 1e-6

    for name, p in net.named_params():
        def loss_p(v, p=p):
            p.value[...] = v
            return float(np.sum(net.forward(x, train=True) * r))

        want = finite_difference(loss_p, p.value.copy())
        assert rel_err(p.grad, want) < 1e-5, name


def test_build_network_reference_arch_shapes():
    rng = np.random.default_rng(10)
    net = nn.build_network("C32K5S2-C32K5S1-C32K5S1-AvgPool3-FC10", 1, 28, rng,
                           generated=(1, 2), n_basis=2, n_cross=12)
    x = rng.standard_normal((2, 1, 28, 28))
    out = net.forward(x)
    assert out.shape == (2, 10)
    gen = net.generated_layers()
    assert len(gen) == 2
    for layer in gen:
        assert layer.factors.plan.intra_active
        assert layer.factors.plan.cross_active
        assert abs(generator.param_ratio(layer.factors.plan) - 0.0684) < 0.001
    # conv feature map sizes: 28 -> 12 -> 8 -> 4, then adaptive pool to 3.
    fc = [l for l in net.layers if isinstance(l, nn.Linear)][0]
    assert fc.weight.value.shape == (10, 288)


def test_parse_arch_and_build_errors():
    with pytest.raises(ConfigError):
        nn.parse_arch("C32K5S2-Banana7")
    with pytest.raises(ConfigError):
        nn.parse_arch("")
    rng = np.random.default_rng(11)
    with pytest.raises(ConfigError):
        nn.build_network("C4K3S1-FC2", 1, 8, rng, generated=(5,))
    with pytest.raises(ConfigError):
        nn.build_network("C4K9S1-FC2", 1, 4, rng)
