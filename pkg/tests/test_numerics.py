import numpy as np
import pytest

from adalign.numerics import nn, optim
from adalign.numerics import tensor as T
from adalign.numerics.params import ParamStore
from adalign.numerics.rng import Rng
from adalign.numerics.tensor import GraphError, Tensor

from conftest import check_grads


def _store(rng, **shapes):
    ps = ParamStore(np.float64)
    for name, shape in shapes.items():
        ps.add(name, rng.normal(size=shape))
    return ps


UNARY = {
    "tanh": T.tanh,
    "exp": lambda a: T.exp(a * 0.3),
    "gelu": T.gelu,
    "softmax": lambda a: T.softmax(a, -1) * np.arange(4.0),
    "log_softmax": lambda a: T.log_softmax(a, 0) * np.arange(4.0),
    "mean_axis": lambda a: T.mean(a * a, axis=1),
    "transpose": lambda a: T.transpose(a, (1, 0)) * np.arange(3.0),
    "take": lambda a: a[np.array([0, 2, 2])] * a,
    "masked_fill": lambda a: T.masked_fill(a, np.eye(3, 4, dtype=bool), -2.0) * a,
    "broadcast": lambda a: T.broadcast_to(T.reshape(a, (1, 3, 4)), (2, 3, 4)) * a,
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_ops_match_finite_differences(op, rng):
    ps = _store(rng, a=(3, 4))
    f = UNARY[op]
    assert check_grads(lambda: T.reduce_sum(f(ps["a"]) * f(ps["a"])), ps) < 1e-6


def test_matmul_linear_concat_grads(rng):
    ps = _store(rng, a=(2, 3, 4), w=(4, 5), b=(5,), c=(2, 3, 5))
    loss = lambda: T.reduce_sum(T.tanh(T.concat([T.linear(ps["a"], ps["w"], ps["b"]), ps["c"]], 1)))
    assert check_grads(loss, ps) < 1e-6


def test_batched_matmul_broadcast_grads(rng):
    ps = _store(rng, a=(2, 3, 4), b=(4, 2))
    assert check_grads(lambda: T.reduce_sum(T.tanh(ps["a"] @ ps["b"])), ps) < 1e-6


def test_layer_norm_grads(rng):
    ps = _store(rng, x=(3, 6), g=(6,), b=(6,))
    w = rng.normal(size=(3, 6))
    assert check_grads(lambda: T.reduce_sum(T.layer_norm(ps["x"], ps["g"], ps["b"]) * w), ps) < 1e-6


def test_cross_entropy_grads_and_value(rng):
    ps = _store(rng, z=(2, 3, 5))
    targets = rng.integers(5, size=(2, 3))
    weights = np.array([[1, 1, 0], [1, 0, 0]], dtype=float)
    loss = T.cross_entropy(ps["z"], targets, weights)
    z = ps["z"].data
    lse = np.log(np.exp(z).sum(-1))
    nll = lse - np.take_along_axis(z, targets[..., None], -1)[..., 0]
    assert float(loss.data) == pytest.approx(float((nll * weights).sum() / weights.sum()), rel=1e-12)
    assert check_grads(lambda: T.cross_entropy(ps["z"], targets, weights), ps) < 1e-6


def test_embedding_grads_accumulate_repeats(rng):
    ps = _store(rng, E=(5, 3))
    ids = np.array([[1, 1, 4]])
    assert check_grads(lambda: T.reduce_sum(T.tanh(T.embedding(ps["E"], ids))), ps) < 1e-6


def test_conv_and_pool_grads(rng):
    ps = _store(rng, x=(1, 6, 6, 2), W=(3, 3, 2, 3), b=(3,))
    loss = lambda: T.reduce_sum(T.tanh(T.adaptive_avg_pool2d(T.conv2d(ps["x"], ps["W"], ps["b"]), 2)))
    assert check_grads(loss, ps) < 1e-6


def test_conv_matches_direct_loop(rng):
    # channel-last: x [B, H, W, C], kernel [k, k, Cin, Cout]
    x = rng.normal(size=(1, 5, 5, 2))
    W = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(W), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    assert out.shape == (1, 3, 3, 4)
    for o in range(4):
        for i in range(3):
            for j in range(3):
                patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                assert out[0, i, j, o] == pytest.approx((patch * W[..., o]).sum() + b[o])


def test_adaptive_pool_uneven_bins():
    # 7 -> 3 bins: [0,3), [2,5), [4,7)
    P = T.adaptive_pool_matrix(7, 3)
    assert np.allclose(P.sum(1), 1.0)
    assert np.allclose(P[0, :3], 1 / 3) and np.allclose(P[2, 4:], 1 / 3)


def test_attention_with_gated_extra_kv_grads(rng):
    ps = ParamStore(np.float64)
    r = Rng(3)
    nn.init_attention(ps, "att", 8, 2, r)
    ps.add("gate", np.array([0.3, -0.2]))
    ps.add("x", rng.normal(size=(2, 3, 8)))
    ps.add("e", rng.normal(size=(2, 2, 8)))
    loss = lambda: T.reduce_sum(T.tanh(nn.attention(ps["x"], None, ps, "att", 2, causal=True,
                                                     extra_kv=ps["e"], gate=ps["gate"])))
    assert check_grads(loss, ps) < 1e-5


def test_gelu_keeps_float32():
    x = Tensor(np.ones((2, 2), np.float32))
    assert T.gelu(x).dtype == np.float32


def test_backward_needs_scalar_seed():
    with pytest.raises(GraphError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_sgd_momentum_two_steps():
    ps = ParamStore(np.float64)
    ps.add("w", np.array([1.0]))
    opt = optim.SGD(ps, lr=0.1, momentum=0.9)
    opt.step({"w": np.array([1.0])})
    opt.step({"w": np.array([1.0])})
    # v1 = 1, v2 = 1.9; w = 1 - 0.1 - 0.19
    assert ps["w"].data[0] == pytest.approx(0.71, abs=1e-12)


def test_adam_first_step_is_lr_sized():
    ps = ParamStore(np.float64)
    ps.add("w", np.array([0.0, 0.0]))
    optim.Adam(ps, lr=0.01).step({"w": np.array([5.0, -1e-3])})
    assert np.allclose(ps["w"].data, [-0.01, 0.01], atol=1e-7)


def test_optimizers_leave_frozen_params_alone():
    for kind in ("sgd", "adam"):
        ps = ParamStore(np.float64)
        ps.add("a", np.ones(2))
        ps.add("b", np.ones(2), trainable=False)
        optim.make_optimizer(kind, ps, 0.1).step({"a": np.ones(2), "b": np.ones(2)})
        assert np.array_equal(ps["b"].data, np.ones(2))
        assert not np.array_equal(ps["a"].data, np.ones(2))


def test_nonfinite_gradient_names_parameter():
    ps = ParamStore(np.float64)
    ps.add("layer.w", np.ones(2))
    with pytest.raises(optim.NonFiniteGradient, match="layer.w"):
        optim.SGD(ps, 0.1).step({"layer.w": np.array([1.0, np.nan])})
    assert np.array_equal(ps["layer.w"].data, np.ones(2))


def test_clip_grads_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert optim.clip_grads(g, 1.0) == pytest.approx(5.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0, rel=1e-9)


def test_param_digest_and_state_roundtrip(rng):
    ps = _store(rng, a=(2,), b=(3,))
    d = ps.digest()
    st = ps.state()
    ps["a"].data = ps["a"].data + 1
    assert ps.digest() != d
    ps.load_state(st)
    assert ps.digest() == d


def test_rng_children_are_stable_and_distinct():
    a = Rng(7).child("x").normal(size=4)
    assert np.array_equal(a, Rng(7).child("x").normal(size=4))
    assert not np.array_equal(a, Rng(7).child("y").normal(size=4))
    assert not np.array_equal(a, Rng(8).child("x").normal(size=4))
