import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import randomize
from tcprune.autograd import (SGD, ParameterStore, avgpool_forward, backward_pass, bn_forward, conv_forward,
                              finite_diff_check, forward_pass, load_checkpoint, maxpool_forward, save_checkpoint,
                              sgd_step)
from tcprune.errors import ConfigError, FormatError, NumericError, StructuralError, UsageError
from tcprune.graph import LayerSpec, ModelGraph
from tcprune.losses import cross_entropy_with_grad, mmd_with_grad, representation_rows
from tcprune.zoo import build_small_resnet, build_small_vgg, init_params


def naive_conv(x, w, b, s, p):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    y = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    y[ni, oi, i, j] = (xp[ni, :, i * s:i * s + k, j * s:j * s + k] * w[oi]).sum()
            if b is not None:
                y[ni, oi] += b[oi]
    return y


def naive_pool(x, k, s, p, op):
    n, c, h, w = x.shape
    fill = -np.inf if op is np.max else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    y = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            y[:, :, i, j] = op(xp[:, :, i * s:i * s + k, j * s:j * s + k], axis=(2, 3))
    return y


def single(kind, **kw):
    """One-layer graph over a (C,H,W) input."""
    shape = kw.pop("input_shape")
    layer = LayerSpec("l", kind, shape[0], kw.pop("out", shape[0]), **kw)
    return ModelGraph([layer], shape, 2, name="single")


# --- kernels against loop oracles --------------------------------------------

@pytest.mark.parametrize("s,p,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 3)])
def test_conv_matches_loop_oracle(rng, s, p, k):
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    y, _ = conv_forward(x, w, b, s, p)
    np.testing.assert_allclose(y, naive_conv(x, w, b, s, p), atol=1e-12)


@pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 2, 1), (3, 1, 1)])
def test_pools_match_loop_oracle(rng, k, s, p):
    x = rng.normal(size=(2, 3, 6, 6))
    np.testing.assert_allclose(maxpool_forward(x, k, s, p)[0], naive_pool(x, k, s, p, np.max), atol=1e-12)
    if p == 0:
        np.testing.assert_allclose(avgpool_forward(x, k, s, p)[0], naive_pool(x, k, s, p, np.mean), atol=1e-12)


def test_bn_eval_and_train_statistics(rng):
    x = rng.normal(2.0, 3.0, size=(16, 3, 4, 4))
    gamma, beta = np.ones(3), np.zeros(3)
    y, _, stats = bn_forward(x, gamma, beta, np.zeros(3), np.ones(3), train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(stats[0], 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(stats[1], 0.9 + 0.1 * v, rtol=1e-12)
    ye, _, _ = bn_forward(x, gamma, beta, m, x.var(axis=(0, 2, 3)), train=False)
    np.testing.assert_allclose(ye, y, atol=1e-9)


# --- documented forward/backward examples -------------------------------------

def test_identity_graph_returns_input(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    g = ModelGraph([], (3, 4, 4), 2)
    np.testing.assert_array_equal(forward_pass(g, ParameterStore(profile="high"), x).output, x)


def test_zero_1x1_conv_gives_zero():
    g = single("conv", input_shape=(2, 3, 3), out=3, kernel=1)
    p = ParameterStore({"l.weight": np.zeros((3, 2, 1, 1)), "l.bias": np.zeros(3)})
    out = forward_pass(g, p, np.random.default_rng(0).normal(size=(1, 2, 3, 3))).output
    assert np.all(out == 0)


def test_all_ones_3x3_conv_center_and_corner():
    g = single("conv", input_shape=(1, 3, 3), out=1, kernel=3, padding=1, bias=False)
    p = ParameterStore({"l.weight": np.ones((1, 1, 3, 3))})
    out = forward_pass(g, p, np.ones((1, 1, 3, 3))).output[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[2, 2] == 4


def test_single_neuron_linear_gradients():
    g = single("fc", input_shape=(1,), out=1, bias=False)
    p = ParameterStore({"l.weight": np.array([[2.0]])}, profile="high")
    tr = forward_pass(g, p, np.array([[3.0]]))
    grads = backward_pass(tr, np.ones((1, 1)))
    assert grads.params["l.weight"][0, 0] == 3.0
    assert grads.activations["input"][0, 0] == 2.0


def test_relu_dead_zone_blocks_gradient():
    g = single("relu", input_shape=(3,))
    tr = forward_pass(g, ParameterStore(), np.array([[-1.0, 0.5, -0.2]]))
    grads = backward_pass(tr, np.ones((1, 3)))
    np.testing.assert_array_equal(grads.activations["input"], [[0.0, 1.0, 0.0]])


def test_residual_with_zero_branch_passes_gradient_through(rng):
    g = build_small_resnet([(4, 2)], 2, input_shape=(4, 4, 4), stem_channels=4)
    p = init_params(g, 0, "high")
    for name in list(p.params):
        if name.startswith("block1.") and name.endswith(".weight"):
            p.params[name][:] = 0.0
    x = rng.normal(size=(2, 4, 4, 4))
    tr = forward_pass(g, p, x)
    # with f == 0 the block output equals relu(skip); skip is stem output (already >= 0)
    np.testing.assert_allclose(tr.activations["block1.add"], tr.activations["stem.relu"], atol=1e-12)
    up = rng.normal(size=tr.activations["block1.add"].shape)
    sub = ModelGraph([l for l in g.layers if not l.id.startswith(("gap", "flatten", "fc", "block1.relu3"))],
                     g.input_shape, 2)
    tr2 = forward_pass(sub, p, x)
    grads = backward_pass(tr2, up)
    np.testing.assert_allclose(grads.activations["stem.relu"], up, atol=1e-12)


def test_unrecorded_trace_cannot_backprop(vgg):
    p = init_params(vgg)
    tr = forward_pass(vgg, p, np.zeros((1, 3, 8, 8), np.float32), record=False)
    with pytest.raises(UsageError):
        backward_pass(tr, np.zeros_like(tr.output))


def test_structural_and_numeric_errors(vgg):
    p = init_params(vgg)
    with pytest.raises(StructuralError, match="input"):
        forward_pass(vgg, p, np.zeros((1, 3, 9, 9)))
    x = np.zeros((1, 3, 8, 8))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        forward_pass(vgg, p, x)
    bad = p.copy()
    bad.params["conv2.weight"] = np.zeros((6, 5, 3, 3), np.float32)
    with pytest.raises(StructuralError, match="conv2"):
        forward_pass(vgg, bad, np.zeros((1, 3, 8, 8)))


def test_forward_is_pure_in_train_mode(vgg, rng):
    p = init_params(vgg)
    before = p.copy()
    tr = forward_pass(vgg, p, rng.normal(size=(4, 3, 8, 8)), train=True)
    assert p.equal(before)
    assert set(tr.bn_stats) == set(p.buffers)


# --- optimiser ----------------------------------------------------------------

def test_sgd_examples():
    p = ParameterStore({"w": np.array([1.0])}, profile="high")
    assert sgd_step(p, {"w": np.array([0.0])}, lr=0.3).params["w"][0] == 1.0
    assert sgd_step(p, {"w": np.array([0.5])}, lr=0.1).params["w"][0] == pytest.approx(0.95, abs=1e-15)
    opt = SGD(momentum=0.9)
    q = p.copy()
    w0 = q.params["w"][0]
    opt.step(q, {"w": np.array([1.0])}, 0.1)
    w1 = q.params["w"][0]
    opt.step(q, {"w": np.array([1.0])}, 0.1)
    w2 = q.params["w"][0]
    assert w1 - w0 == pytest.approx(-0.1, abs=1e-12)
    assert w2 - w1 == pytest.approx(-0.19, abs=1e-12)
    with pytest.raises(ConfigError):
        sgd_step(p, {"w": np.array([1.0])}, lr=0.0)
    with pytest.raises(ConfigError):
        SGD(momentum=1.0)


# --- finite differences ---------------------------------------------------------

LAYER_CASES = [
    ("conv s1 p1", dict(kind="conv", input_shape=(2, 5, 5), out=3, kernel=3, padding=1)),
    ("conv s2 p1", dict(kind="conv", input_shape=(2, 5, 5), out=3, kernel=3, stride=2, padding=1)),
    ("conv 1x1", dict(kind="conv", input_shape=(3, 4, 4), out=2, kernel=1)),
    ("fc", dict(kind="fc", input_shape=(5,), out=3)),
    ("bn", dict(kind="bn", input_shape=(3, 4, 4))),
    ("bn vector", dict(kind="bn", input_shape=(4,))),
    ("maxpool 2", dict(kind="maxpool", input_shape=(2, 4, 4), kernel=2, stride=2)),
    ("maxpool 3 s2 p1", dict(kind="maxpool", input_shape=(2, 5, 5), kernel=3, stride=2, padding=1)),
    ("avgpool", dict(kind="avgpool", input_shape=(2, 4, 4), kernel=2, stride=2)),
    ("relu", dict(kind="relu", input_shape=(3, 3, 3))),
]


@pytest.mark.parametrize("name,spec", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
@pytest.mark.parametrize("train", [False, True])
def test_layer_gradients(name, spec, train):
    spec = dict(spec)
    kind = spec.pop("kind")
    g = single(kind, **spec)
    p = randomize(g, 3)
    x = np.random.default_rng(5).normal(size=(4,) + tuple(g.input_shape))
    res = finite_diff_check(g, p, x, train=train)
    assert res.max_relative_error < 1e-6, res.per_parameter
    if kind == "conv":
        return  # a conv reading the raw input skips its (unused) input gradient
    # input gradient too (covers parameter-free layers)
    tr = forward_pass(g, p, x)
    w = np.random.default_rng(6).normal(size=tr.output.shape)
    dx = backward_pass(tr, w).activations["input"]
    idx = tuple(np.unravel_index(7, x.shape))
    xp, xm = x.copy(), x.copy()
    xp[idx] += 1e-6
    xm[idx] -= 1e-6
    num = ((forward_pass(g, p, xp).output * w).sum() - (forward_pass(g, p, xm).output * w).sum()) / 2e-6
    assert abs(num - dx[idx]) <= 1e-6 * max(1.0, abs(num))


def full_loss_head(ns, ys, beta):
    def head(trace):
        cls, g = cross_entropy_with_grad(trace.output[:ns], ys)
        out = np.zeros_like(trace.output)
        out[:ns] = g
        point, zs, zt = representation_rows(trace, ns)
        mmd, gs, gt = mmd_with_grad(zs, zt, sigmas=[1.5])
        extra = {point: (beta * np.concatenate([gs, gt])).reshape(trace.activations[point].shape)}
        return cls + beta * mmd, out, extra
    return head


@pytest.mark.parametrize("arch", ["vgg", "resnet"])
@pytest.mark.parametrize("train", [False, True])
def test_full_loss_gradient(arch, train, vgg, resnet):
    g = vgg if arch == "vgg" else resnet
    p = randomize(g, 11)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 3, 8, 8))
    res = finite_diff_check(g, p, x, head=full_loss_head(3, np.array([0, 1, 2]), 0.7), train=train)
    assert res.max_relative_error < 1e-4, res.per_parameter


def test_finite_diff_linear_quadratic_and_empty():
    g = single("fc", input_shape=(4,), out=2)
    p = randomize(g, 0)
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert finite_diff_check(g, p, x).max_relative_error < 1e-8
    g0 = single("relu", input_shape=(4,))
    r = finite_diff_check(g0, ParameterStore(profile="high"), x)
    assert r.max_relative_error == 0.0
    r = finite_diff_check(g, p, x, eps=1e-12)
    assert any("eps" in w for w in r.warnings)


# --- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, resnet):
    p = init_params(resnet, 4)
    path = tmp_path / "m.tcpw"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert q.equal(p)
    blob = path.read_bytes()
    (tmp_path / "t.tcpw").write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.tcpw")
    (tmp_path / "b.tcpw").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "b.tcpw")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(3, 7), st.sampled_from([(1, 0), (3, 1), (2, 0)]),
       st.integers(1, 2), st.integers(0, 10_000))
def test_conv_property_matches_oracle(n, c, h, kp, s, seed):
    k, p = kp
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(2, c, k, k))
    y, _ = conv_forward(x, w, None, s, p)
    np.testing.assert_allclose(y, naive_conv(x, w, None, s, p), atol=1e-10)
