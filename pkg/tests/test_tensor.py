import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colt.tensor import (
    ConfigError,
    DataError,
    ShapeError,
    Tensor,
    UsageError,
    batch_norm,
    conv2d,
    global_avg_pool,
    matmul,
    max_pool2d,
    no_grad,
    relu,
    reshape,
    softmax_cross_entropy,
    sum_all,
)

from oracles import conv2d_loops, cross_entropy_closed_form

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


# -- forward examples ---------------------------------------------------------
def test_matmul_identity_and_hand_values():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(matmul(a, Tensor([[1, 0], [0, 1]])).data, [[1, 2], [3, 4]])
    assert np.array_equal(matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])
    assert not matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(6).reshape(3, 2))).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_examples():
    ones = Tensor(np.ones((1, 1, 3, 3)))
    assert np.array_equal(conv2d(ones, Tensor([[[[2.0]]]])).data, np.full((1, 1, 3, 3), 2.0))
    x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
    out = conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert np.array_equal(out.data[0, 0], [[12, 16], [24, 28]])
    assert not conv2d(x, Tensor(np.zeros((4, 1, 2, 2)))).data.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3), st.sampled_from([1, 3]),
       st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_conv2d_matches_loops(b, c, size, f, k, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, size, size))
    w = rng.standard_normal((f, c, k, k))
    got = conv2d(t64(x, False), t64(w, False), padding=pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, padding=pad), rtol=1e-12, atol=1e-12)


def test_conv2d_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ConfigError, match="non-integral"):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


def test_cross_entropy_examples():
    for k in (2, 5, 10):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, 1, 1])
        assert loss.item() == pytest.approx(math.log(k), rel=1e-6)
    loss = softmax_cross_entropy(t64([[10.0, -10.0]]), [0])
    assert loss.item() == pytest.approx(cross_entropy_closed_form([10.0, -10.0], 0), rel=1e-6)
    assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_global_avg_pool_of_constant():
    x = Tensor(np.full((2, 3, 5, 4), 1.75))
    np.testing.assert_array_equal(global_avg_pool(x).data, np.full((2, 3), 1.75))


def test_max_pool_drops_ragged_edge():
    x = Tensor(np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5))
    assert np.array_equal(max_pool2d(x).data[0, 0], [[6, 8], [16, 18]])


# -- backward -----------------------------------------------------------------
def test_square_gradient():
    x = t64(3.0)
    (x * x).sum().backward()
    assert x.grad == pytest.approx(6.0)


def test_gradients_accumulate_over_reuse():
    x = t64([1.0, 2.0])
    y = sum_all(x * 3.0 + x * x)
    y.backward()
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_detached_tensor_gets_no_grad():
    x = t64([1.0, 2.0])
    d = x.detach()
    sum_all(x * d).backward()
    assert d.grad is None and x.grad is not None


def test_backward_usage_errors():
    with pytest.raises(UsageError):
        (t64([1.0, 2.0]) * 2.0).backward()
    with pytest.raises(UsageError):
        sum_all(Tensor([1.0])).backward()


def test_no_grad_records_nothing():
    x = t64([1.0])
    with no_grad():
        y = x * 2.0
    assert y.node is None


def _numeric_grad(f, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def test_linear_sum_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 3))
    x = t64(rng.standard_normal((3, 2)))
    sum_all(matmul(t64(A, False), x)).backward()
    num = _numeric_grad(lambda: float((A @ x.data).sum()), x.data)
    np.testing.assert_allclose(x.grad, num, rtol=1e-6)


# -- randomized gradient check over small networks -----------------------------
KINK_MARGIN = 2e-2


def _small_network(rng):
    """A random conv or dense net in float64; ``forward()`` returns the loss and its kink distances."""
    kind = rng.choice(["conv", "conv_bn", "dense"])
    B, K = 3, int(rng.integers(2, 5))
    labels = rng.integers(0, K, size=B)
    if kind == "dense":
        d_in, hidden = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x = rng.standard_normal((B, d_in))
        params = {"w1": t64(rng.standard_normal((d_in, hidden))), "b1": t64(rng.standard_normal(hidden) * 0.1),
                  "w2": t64(rng.standard_normal((hidden, K)))}

        def forward():
            pre = matmul(t64(x, False), params["w1"]) + params["b1"]
            return softmax_cross_entropy(matmul(relu(pre), params["w2"]), labels), [pre.data]
    else:
        C, F, size = int(rng.integers(1, 3)), int(rng.integers(1, 4)), 4
        x = rng.standard_normal((B, C, size, size))
        params = {"k": t64(rng.standard_normal((F, C, 3, 3)) * 0.5), "w": t64(rng.standard_normal((F, K)))}
        if kind == "conv_bn":
            params["gamma"] = t64(1 + 0.1 * rng.standard_normal(F))
            params["beta"] = t64(0.1 * rng.standard_normal(F))

        def forward():
            pre = conv2d(t64(x, False), params["k"], padding=1)
            if kind == "conv_bn":
                pre = batch_norm(pre, params["gamma"], params["beta"])
            act = relu(pre)
            pooled = max_pool2d(act)
            feats = global_avg_pool(pooled)
            blocks = act.data.reshape(B, -1, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, -1, 4)
            top2 = np.sort(blocks, axis=-1)[..., -2:]
            # a max-pool tie only matters when the winner is positive (otherwise the window is all zero)
            gaps = np.where(top2[..., 1] > KINK_MARGIN, top2[..., 1] - top2[..., 0], np.inf)
            return softmax_cross_entropy(matmul(feats, params["w"]), labels), [pre.data, gaps]
    return params, forward


def _kink_distance(values) -> float:
    return min(float(np.min(np.abs(v))) for v in values)


def test_gradcheck_twenty_random_networks():
    checked, seed = 0, 0
    while checked < 20:
        rng = np.random.default_rng(seed)
        seed += 1
        params, forward = _small_network(rng)
        loss, kinks = forward()
        if _kink_distance(kinks) < KINK_MARGIN:
            continue  # a ReLU input or max-pool tie sits within the finite-difference step
        loss.backward()
        for name, p in params.items():
            num = _numeric_grad(lambda: forward()[0].item(), p.data)
            rel = np.abs(p.grad - num) / np.maximum(np.abs(p.grad) + np.abs(num), 1e-7)
            assert rel.max() < 1e-4, f"seed {seed - 1} {name}: rel err {rel.max():.2e}"
        checked += 1
    assert seed < 200


def test_reshape_roundtrip_gradient():
    x = t64(np.arange(6.0))
    sum_all(reshape(x, (2, 3)) * t64(np.arange(6.0).reshape(2, 3), False)).backward()
    np.testing.assert_array_equal(x.grad, np.arange(6.0))


def test_no_grad_is_per_thread():
    import threading

    inside, release = threading.Event(), threading.Event()

    def hold():
        with no_grad():
            inside.set()
            release.wait(5)

    worker = threading.Thread(target=hold)
    worker.start()
    inside.wait(5)
    y = t64([1.0]) * 2.0
    release.set()
    worker.join()
    assert y.requires_grad and y.node is not None
