import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esam3.numerics import (
    CorruptTensorError,
    NumericalError,
    Record,
    RecordError,
    ShapeError,
    Tensor,
    backward,
    grad_check,
    load,
    no_record,
    save,
)
from esam3.numerics import tensor as T
from esam3.numerics.serialize import from_bytes, to_bytes


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_row_softmax_examples():
    np.testing.assert_allclose(T.row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.row_softmax(Tensor([[math.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_row_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).standard_normal((5, 7)) * 10
    s = T.row_softmax(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-12
    np.testing.assert_allclose(T.row_softmax(Tensor(x + shift)).data, s, atol=1e-9)


def test_matmul_identity_and_shape_error():
    a = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    with pytest.raises(ShapeError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert (2, 3) in info.value.shapes


def test_backward_sum_and_mean_square():
    x = Tensor(np.ones((2, 2)) * 3.0, requires_grad=True)
    with Record() as rec:
        loss = T.sum(x)
    backward(loss, rec)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    y = Tensor([1.0, 2.0], requires_grad=True)
    with Record() as rec:
        loss = T.mean(y * y)
    backward(loss, rec)
    np.testing.assert_allclose(y.grad, [1.0, 2.0])


def test_untracked_inputs_get_no_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0])
    with Record() as rec:
        loss = T.sum(a * b)
    backward(loss, rec)
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


def test_backward_rejects_missing_loss_and_cycles():
    a = Tensor([1.0], requires_grad=True)
    with Record() as rec:
        T.sum(a * 2.0)
    stray = T.sum(a * 3.0)
    with pytest.raises(RecordError):
        backward(stray, rec)
    with Record() as rec:
        out = T.sum(a * 2.0)
    rec.entries.reverse()
    with pytest.raises(RecordError):
        backward(out, rec)


def test_record_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    x = _param(rng, 1, 6, 6, 2)
    w = _param(rng, 3, 3, 2, 4)
    with Record() as rec:
        y = T.relu(T.conv2d(x, w, stride=2, pad=1))
        z = T.sum(T.row_softmax(T.reshape(y, (9, 4))))
    values = rec.replay()
    assert np.array_equal(values[y.id], y.data)
    assert np.array_equal(values[z.id], z.data)


def test_no_record_suspends_recording():
    a = Tensor([1.0], requires_grad=True)
    with Record() as rec:
        with no_record():
            T.sum(a * 2.0)
    assert len(rec) == 0


def test_log_of_nonpositive_raises():
    with pytest.raises(NumericalError):
        T.log(Tensor([0.0, 1.0]))


OP_CASES = {
    "add_broadcast": lambda x, c: T.sum((x + c["b"]) * c["r"]),
    "sub": lambda x, c: T.sum((c["b"] - x) * c["r"]),
    "mul_broadcast": lambda x, c: T.sum(x * c["row"] * c["r"]),
    "div": lambda x, c: T.sum(c["r"] / (T.exp(x) + 1.0)),
    "matmul": lambda x, c: T.sum(T.matmul(x, c["m"]) * c["r2"]),
    "batched_matmul": lambda x, c: T.sum(T.matmul(T.reshape(x, (2, 2, 3)), c["bm"])),
    "relu": lambda x, c: T.sum(T.relu(x) * c["r"]),
    "sigmoid": lambda x, c: T.sum(T.sigmoid(x) * c["r"]),
    "log": lambda x, c: T.sum(T.log(x * x + 1.0) * c["r"]),
    "exp": lambda x, c: T.sum(T.exp(x) * c["r"]),
    "softplus": lambda x, c: T.sum(T.softplus(x) * c["r"]),
    "log_sigmoid": lambda x, c: T.sum(T.log_sigmoid(x) * c["r"]),
    "tanh": lambda x, c: T.sum(T.tanh(x) * c["r"]),
    "mean_axis": lambda x, c: T.sum(T.mean(x, axis=0) * c["row"][0]),
    "sum_keepdims": lambda x, c: T.sum(T.sum(x, axis=1, keepdims=True) * x),
    "transpose": lambda x, c: T.sum(T.transpose(x) * c["r"].T),
    "slice": lambda x, c: T.sum(x[1:, ::2] * 3.0) + T.sum(T.slice(x, np.array([0, 0, 2])) * c["row"]),
    "concat": lambda x, c: T.sum(T.concat([x, x * 2.0], axis=1) * c["cat"]),
    "row_softmax": lambda x, c: T.sum(T.row_softmax(x) * c["r"]),
    "conv2d": lambda x, c: T.sum(T.conv2d(T.reshape(x, (1, 3, 4, 1)), c["w"], stride=1, pad=1) * c["cr"]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_core_op_gradients(name):
    rng = np.random.default_rng(11)
    consts = {
        "b": rng.standard_normal((3, 4)),
        "r": rng.standard_normal((3, 4)),
        "row": rng.standard_normal((1, 4)),
        "m": rng.standard_normal((4, 2)),
        "r2": rng.standard_normal((3, 2)),
        "bm": rng.standard_normal((2, 3, 2)),
        "cat": rng.standard_normal((3, 8)),
        "w": rng.standard_normal((3, 3, 1, 2)),
        "cr": rng.standard_normal((1, 3, 4, 2)),
    }
    x = Tensor(rng.standard_normal((3, 4)))
    f = OP_CASES[name]
    assert grad_check(lambda t: f(t, consts), x, eps=1e-6) < 1e-4


def test_grad_check_examples():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 5)))
    assert grad_check(T.sum, x) < 1e-9
    assert grad_check(lambda t: T.sum(T.row_softmax(t) * T.row_softmax(t)), x, eps=1e-5) < 1e-6


def test_grad_check_validates_eps_and_probes():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        grad_check(T.sum, x, eps=1e-2)
    with pytest.raises(NumericalError):
        grad_check(lambda t: T.sum(T.log(t)), Tensor([1e-7]), eps=1e-6)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
            ref[:, i, j] = np.einsum("bhwc,hwco->bo", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_add_n_matches_python_sum():
    rng = np.random.default_rng(1)
    parts = [Tensor(rng.standard_normal((2, 3))) for _ in range(4)]
    np.testing.assert_allclose(T.add_n(parts).data, sum(p.data for p in parts))
    assert T.add_n([Tensor(1.0), Tensor([2.0])]).item() == 3.0


def test_serialization_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 2, 4))
    path = tmp_path / "x.tensor"
    save(Tensor(arr), path)
    assert np.array_equal(load(path).data, arr)
    blob = bytearray(to_bytes(arr))
    blob[-1] ^= 0xFF
    with pytest.raises(CorruptTensorError):
        from_bytes(bytes(blob))
    with pytest.raises(CorruptTensorError):
        from_bytes(to_bytes(arr)[:-8])
