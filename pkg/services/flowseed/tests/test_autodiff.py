import numpy as np
import pytest

from autodiff import ParamStore, Tape, Tensor
from errors import ConfigurationError, NumericalError, ShapeError, TapeStateError


def check_gradients(graph, arrays, h=1e-2, tol=1e-3, seed=0):
    """
    Compare tape gradients of sum(graph(...) * W) against central differences, W a fixed
    random weighting so no entry's gradient can cancel out.
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    tape = Tape()
    out_shape = tape.forward(graph, [Tensor(a) for a in arrays]).shape
    weights = Tensor(np.random.default_rng(seed).normal(size=out_shape))

    def loss(t, *xs):
        return t.sum(t.mul(graph(t, *xs), weights))

    inputs = [tape.variable(a) for a in arrays]
    tape.forward(loss, inputs)
    tape.backward()

    for i, a in enumerate(arrays):
        analytic = tape.grad(inputs[i])
        numeric = np.zeros(a.shape)
        for idx in np.ndindex(*a.shape):
            plus, minus = [x.copy() for x in arrays], [x.copy() for x in arrays]
            plus[i][idx] += np.float32(h)
            minus[i][idx] -= np.float32(h)
            step = float(plus[i][idx]) - float(minus[i][idx])
            fp = float(Tape(record=False).forward(loss, [Tensor(x) for x in plus]).data)
            fm = float(Tape(record=False).forward(loss, [Tensor(x) for x in minus]).data)
            numeric[idx] = (fp - fm) / step
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
        assert err < tol, f"input {i}: relative gradient error {err:.2e}"


@pytest.fixture
def arrays(rng):
    return {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(4, 5)),
        "row": rng.normal(size=(4,)),
        "batch": rng.normal(size=(2, 3, 4)),
    }


OPS = {
    "add-broadcast": (lambda t, x, y: t.add(x, y), ("a", "row")),
    "sub": (lambda t, x, y: t.sub(x, y), ("a", "a")),
    "mul-broadcast": (lambda t, x, y: t.mul(x, y), ("batch", "row")),
    "matmul": (lambda t, x, y: t.matmul(x, y), ("a", "b")),
    "batched-matmul": (lambda t, x, y: t.matmul(x, y), ("batch", "b")),
    "transpose": (lambda t, x: t.transpose(x), ("batch",)),
    "reshape": (lambda t, x: t.reshape(x, (4, 6)), ("batch",)),
    "concat": (lambda t, x, y: t.concat([x, y], axis=-1), ("a", "a")),
    "slice": (lambda t, x: t.slice_last(x, 1, 3), ("batch",)),
    "scale-add": (lambda t, x: t.add_scalar(t.scale(x, -2.5), 0.7), ("a",)),
    "silu": (lambda t, x: t.silu(x), ("batch",)),
    "gelu": (lambda t, x: t.gelu(x), ("batch",)),
    "softmax": (lambda t, x: t.softmax(x), ("batch",)),
    "layer-norm": (lambda t, x: t.layer_norm(x), ("batch",)),
    "mean": (lambda t, x: t.mean(x), ("batch",)),
    "mse": (lambda t, x, y: t.mse(x, y), ("a", "a")),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, arrays):
    graph, keys = OPS[name]
    inputs = [arrays[k] for k in keys]
    if name in ("sub", "concat", "mse"):
        inputs[1] = inputs[1][::-1].copy()
    check_gradients(graph, inputs)


def test_relu_and_max_pool_gradients(rng):
    # Values kept away from the kinks and ties
    x = rng.choice([-1, 1], size=(3, 5)) * rng.uniform(0.2, 1.0, size=(3, 5))
    check_gradients(lambda t, a: t.relu(a), [x])
    distinct = rng.permutation(15).reshape(3, 5) * 0.1
    check_gradients(lambda t, a: t.max_pool(a, axis=1), [distinct])


def test_max_pool_ties_go_to_first_index():
    tape = Tape()
    x = tape.variable(np.array([[1.0, 3.0, 3.0]]))
    tape.forward(lambda t, a: t.sum(t.max_pool(a, axis=-1)), [x])
    tape.backward()
    assert np.array_equal(tape.grad(x), [[0.0, 1.0, 0.0]])


def test_values_are_float32_and_flatten_row_major():
    t = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert t.data.dtype == np.float32
    assert list(t.values) == [0, 1, 2, 3, 4, 5]


def test_shared_subexpression_accumulates():
    tape = Tape()
    x = tape.variable(np.array([2.0]))
    tape.forward(lambda t, a: t.sum(t.mul(a, a)), [x])
    tape.backward()
    assert tape.grad(x)[0] == pytest.approx(4.0)


def test_parameters_accumulate_into_store():
    store = ParamStore()
    store.add("w", np.array([[1.0, 2.0]]))
    tape = Tape(store)
    x = Tensor(np.array([[3.0]]))
    for _ in range(2):
        tape.forward(lambda t, a: t.sum(t.matmul(a, t.param("w"))), [x])
        tape.backward()
    assert np.allclose(store.grads["w"], [[6.0, 6.0]])
    store.zero_grad()
    assert not store.grads["w"].any()


def test_backward_twice_is_a_state_error():
    tape = Tape()
    x = tape.variable(np.ones(3))
    tape.forward(lambda t, a: t.sum(a), [x])
    tape.backward()
    with pytest.raises(TapeStateError):
        tape.backward()


def test_backward_without_forward_is_a_state_error():
    with pytest.raises(TapeStateError):
        Tape().backward()


def test_inference_tape_records_nothing():
    tape = Tape(record=False)
    x = tape.variable(np.ones(3))
    tape.forward(lambda t, a: t.sum(a), [x])
    with pytest.raises(TapeStateError):
        tape.backward()


def test_shape_errors_name_the_op():
    tape = Tape()
    with pytest.raises(ShapeError, match="matmul"):
        tape.forward(lambda t, a, b: t.matmul(a, b), [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])
    with pytest.raises(ShapeError, match="add"):
        tape.forward(lambda t, a, b: t.add(a, b), [Tensor(np.ones((2, 3))), Tensor(np.ones((4,)))])
    with pytest.raises(ShapeError):
        tape.forward(lambda t, a: t.sum(a), [Tensor(np.ones((2, 2)))])
        tape.backward(np.ones((3,)))


def test_non_finite_output_is_a_numerical_error():
    tape = Tape()
    with pytest.raises(NumericalError, match="scale"):
        tape.forward(lambda t, a: t.scale(a, 1e39), [Tensor(np.ones(2))])


def test_store_rejects_duplicates_and_unknown_names():
    store = ParamStore()
    store.add("a", np.zeros(2))
    with pytest.raises(ConfigurationError):
        store.add("a", np.zeros(2))
    with pytest.raises(ConfigurationError):
        store.get("missing")
    with pytest.raises(ShapeError):
        store.set("a", np.zeros(3))


def test_squared_norm_gradient_matches_symbolic(rng):
    w = rng.normal(size=(3, 4)).astype(np.float32)
    x = rng.normal(size=(4, 1)).astype(np.float32)
    tape = Tape()
    xv = tape.variable(x)
    wt = Tensor(w)

    def loss(t, a):
        y = t.matmul(wt, a)
        return t.sum(t.mul(y, y))

    tape.forward(loss, [xv])
    tape.backward()
    w64, x64 = w.astype(np.float64), x.astype(np.float64)
    assert np.allclose(tape.grad(xv), 2 * w64.T @ w64 @ x64, atol=1e-5)


def test_sum_gradient_is_ones():
    tape = Tape()
    x = tape.variable(np.arange(6.0).reshape(2, 3))
    tape.forward(lambda t, a: t.sum(a), [x])
    tape.backward()
    assert np.array_equal(tape.grad(x), np.ones((2, 3)))
