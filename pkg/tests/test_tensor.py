import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import matmul_loops
from rilm import tensor as T
from rilm.tensor import GradError, ShapeError, Tape, Tensor, grad_check


def test_softmax_symmetric():
    assert np.array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(x, c):
    p = T.softmax(Tensor(x)).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, p, atol=1e-12)


@given(arrays(np.float64, (2, 6), elements=st.floats(-50, 50)))
def test_log_softmax_is_log_of_softmax(x):
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-12)


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    out = T.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - matmul_loops(a.tolist(), b.tolist()))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_add_shape_error_names_dims():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_sum_softmax_is_zero(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(T.tsum(T.softmax(x)))
    assert np.max(np.abs(x.grad)) < 1e-15


def test_backward_twice_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(GradError):
        T.backward(loss)
    # a fresh graph still refuses while x holds the old gradient
    with pytest.raises(GradError, match="zero_grad"):
        T.backward(T.tsum(T.mul(x, x)))
    T.zero_grad([x])
    T.backward(T.tsum(T.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradError, match="scalar"):
        T.backward(T.mul(x, x))


def test_tape_is_topological_and_visits_each_node_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, x)
    loss = T.tsum(T.mul(z, y))
    tape = Tape.from_output(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for n in tape:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_grad_check_square_at_three():
    assert grad_check(lambda t: T.tsum(T.square(t)), Tensor([3.0])) < 1e-8


def test_mlp_gradients_match_finite_differences(rng):
    w1, w2, w3 = (Tensor(rng.normal(size=s), requires_grad=True) for s in [(4, 6), (6, 5), (5, 1)])
    x = rng.normal(size=(3, 4))

    def loss_of(w):
        def f(t):
            params = {"w1": w1, "w2": w2, "w3": w3}
            params[w] = t
            h = T.relu(T.matmul(Tensor(x), params["w1"]))
            h = T.exp(T.scale(T.matmul(h, params["w2"]), 0.1))
            return T.tsum(T.square(T.matmul(h, params["w3"])))
        return f

    for name, w in (("w1", w1), ("w2", w2), ("w3", w3)):
        T.zero_grad([w1, w2, w3])
        assert grad_check(loss_of(name), w, 1e-5) < 1e-4


def test_layer_norm_grad_check(rng):
    gamma, beta = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
    x = Tensor(rng.normal(size=(4, 8)))
    weights = rng.normal(size=(4, 8))
    f = lambda t: T.tsum(T.mul(T.layer_norm(t, gamma, beta), Tensor(weights)))
    assert grad_check(f, x) < 1e-4


# every differentiable op gets 20 random finite-difference instances
_UNARY = {
    "exp": lambda t: T.exp(T.scale(t, 0.3)),
    "log": lambda t: T.log(T.add(T.square(t), Tensor(1.0))),
    "relu": lambda t: T.relu(t),
    "softmax": T.softmax,
    "log_softmax": T.log_softmax,
    "logsumexp": lambda t: T.logsumexp(t),
    "transpose": lambda t: T.transpose(t, (1, 0)),
    "reshape": lambda t: T.reshape(t, (4, 3)),
    "getitem": lambda t: t[1:, ::2],
    "mean": lambda t: T.mean(t, axis=0),
    "concat": lambda t: T.concat([t, T.scale(t, 2.0)], axis=1),
    "masked_fill": lambda t: T.masked_fill(t, np.eye(3, 4, dtype=bool), -5.0),
    "gather_last": lambda t: T.gather_last(t, np.array([0, 3, 1])),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_op_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    op = _UNARY[name]
    for _ in range(20):
        x = Tensor(rng.normal(size=(3, 4)))
        if name == "relu":  # keep away from the kink
            x.data += np.sign(x.data) * 0.05
        w = rng.normal(size=op(Tensor(x.data)).shape)
        assert grad_check(lambda t: T.tsum(T.mul(op(t), Tensor(w))), x) < 1e-4


def test_binary_ops_and_embedding_finite_differences(rng):
    for _ in range(20):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        assert grad_check(lambda t: T.tsum(T.square(T.mul(t, Tensor(b)))), Tensor(a)) < 1e-4
        assert grad_check(lambda t: T.tsum(T.square(T.sub(Tensor(a), t))), Tensor(b)) < 1e-4
        ids = rng.integers(0, 3, size=(2, 5))
        w = rng.normal(size=(2, 5, 4))
        assert grad_check(lambda t: T.tsum(T.mul(T.embedding(t, ids), Tensor(w))), Tensor(a)) < 1e-4
        m = rng.normal(size=(2, 4, 3))
        assert grad_check(lambda t: T.tsum(T.square(T.matmul(Tensor(m), t))), Tensor(rng.normal(size=(3, 2)))) < 1e-4


def test_determinism_bit_identical(rng):
    x = rng.normal(size=(5, 7))
    w = rng.normal(size=(7, 3))
    r1 = T.log_softmax(T.matmul(Tensor(x), Tensor(w))).data
    r2 = T.log_softmax(T.matmul(Tensor(x), Tensor(w))).data
    assert r1.tobytes() == r2.tobytes()
