import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedexdnn import numkernel as nk
from fedexdnn.numkernel import GradTape, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nk.matmul(np.eye(2), a).value, a)
    assert np.array_equal(nk.matmul(a, [[0.0], [1.0]]).value, [[2.0], [4.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert np.allclose(nk.matmul(a, b).value, loop_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(nk.ShapeError):
        nk.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_cosine_cases(rng):
    a = rng.standard_normal(5)
    assert nk.cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-12)
    assert nk.cosine_sim([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert nk.cosine_sim([1.0, 1.0], [1.0, -1.0]).item() == pytest.approx(0.0, abs=1e-15)
    assert nk.cosine_sim([2.0, 0.0], [1.0, 0.0]).item() == pytest.approx(1.0)


def test_cosine_zero_vector_rejected():
    with pytest.raises(nk.DegenerateInputError):
        nk.cosine_sim([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_cosine_symmetric_and_bounded(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    ab, ba = nk.cosine_sim(a, b).item(), nk.cosine_sim(b, a).item()
    assert ab == pytest.approx(ba, abs=1e-15)
    assert abs(ab) <= 1 + 1e-12


def test_softmax_cases():
    assert np.allclose(nk.softmax_scaled([3.0, 3.0, 3.0], 7.0).value, 1 / 3)
    out = nk.softmax_scaled([1.0, 0.0], 2.0).value
    e2 = math.exp(2)
    assert out == pytest.approx([e2 / (e2 + 1), 1 / (e2 + 1)], abs=1e-12)
    assert out == pytest.approx([0.88080, 0.11920], abs=1e-5)
    assert nk.softmax_scaled([1.0, 0.0, 0.0], 100.0).value[0] > 0.99


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(0.01, 20))
def test_softmax_is_distribution(x, gamma):
    out = nk.softmax_scaled(x, gamma, axis=1).value
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_grad_check_quadratic_and_constant(rng):
    x = rng.standard_normal(6)
    err = nk.grad_check(lambda p: (p["x"] * p["x"]).sum() * 0.5, {"x": x})
    assert err < 1e-8
    leaf = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        out = (leaf * leaf).sum() * 0.5
    assert np.allclose(tape.gradient(out, [leaf])[0], x, atol=1e-12)
    assert nk.grad_check(lambda p: nk.as_tensor(3.0) + 0.0 * p["x"].sum(), {"x": x}) == 0.0


def _sq(t):
    return t * t


PRIMITIVES = {
    "add": lambda p: (p["a"] + p["b"]).sum(),
    "sub": lambda p: (p["a"] - p["b"] * 2.0).sum(),
    "mul": lambda p: (p["a"] * p["b"]).sum(),
    "div": lambda p: (p["a"] / (p["b"] * p["b"] + 1.0)).sum(),
    "matmul": lambda p: nk.matmul(p["a"], nk.transpose(p["b"])).sum(),
    "tanh": lambda p: nk.tanh(p["a"]).sum(),
    "sigmoid": lambda p: (nk.sigmoid(p["a"]) * p["b"]).sum(),
    "relu": lambda p: (nk.relu(p["a"] + 0.05) * p["b"]).sum(),
    "exp": lambda p: nk.exp(p["a"] * 0.5).sum(),
    "log": lambda p: nk.log(p["a"] * p["a"] + 1.0).sum(),
    "softplus": lambda p: nk.softplus(p["a"] * 3.0).sum(),
    "mean": lambda p: (p["a"].mean(axis=0) * p["b"].mean(axis=0)).sum(),
    "normalize": lambda p: (nk.normalize(p["a"]) * p["b"]).sum(),
    "concat": lambda p: _sq(nk.concat([p["a"], p["b"]], axis=1)).sum(),
    "take": lambda p: (nk.take(p["a"], (slice(None), 1)) * nk.take(p["b"], [0, 0, 2]).sum(axis=1)).sum(),
    "reshape": lambda p: _sq(nk.reshape(p["a"], (6, 2))).sum() * p["b"].sum(),
    "cosine_matrix": lambda p: _sq(nk.cosine_matrix(p["a"], p["b"])).sum(),
    "softmax": lambda p: (nk.softmax_scaled(p["a"], 2.0, axis=1) * p["b"]).sum(),
    "guarded_log": lambda p: nk.guarded_log(nk.sigmoid(p["a"])).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(name, seed):
    r = np.random.default_rng(seed)
    params = {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 4))}
    assert nk.grad_check(PRIMITIVES[name], params) <= 1e-4


def test_broadcast_gradient_sums_over_broadcast_axes():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        out = (a * b).sum()
    ga, gb = tape.gradient(out, [a, b])
    assert np.array_equal(gb, [3.0, 3.0])
    assert ga.shape == (3, 2)


def test_unused_source_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        out = (a * 2.0).sum()
    assert np.array_equal(tape.gradient(out, {"b": b})["b"], np.zeros(2))


def test_tensor_values_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.value[0] = 5.0


def test_adam_minimises_quadratic():
    x = {"x": np.array([3.0, -2.0])}
    opt = nk.Adam(x, lr=0.1)
    for _ in range(300):
        opt.step({"x": 2 * x["x"]})
    assert np.all(np.abs(x["x"]) < 1e-2)
