import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hcn import checkpoint
from hcn import tensor as T
from hcn.optim import Adam
from hcn.tensor import Parameter, ParamSet, Tape, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def fd_grad(f, x, eps=1e-3):
    return T.numeric_grad(f, x, eps)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_dot():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    f = lambda: T.sum_all(T.matmul(a, b))
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    assert rel_err(a.grad, fd_grad(f, a, 1e-3)) < 1e-4


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_shared_weight_grad():
    rng = np.random.default_rng(1)
    x, w = leaf(rng.normal(size=(3, 2, 4))), leaf(rng.normal(size=(4, 5)))
    f = lambda: T.sum_all(T.mul(T.matmul(x, w), Tensor(np.arange(30.0).reshape(3, 2, 5))))
    for p in (x, w):
        assert T.grad_check(f, p) < 1e-6


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3])


def test_softmax_no_overflow():
    out = T.softmax_rows(Tensor([[1000.0, 0.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1, 0, 0]], atol=1e-9)


def test_softmax_hand_value():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]])


def test_softmax_of_sum_has_zero_gradient():
    x = leaf(np.random.default_rng(2).normal(size=(3, 5)))
    f = lambda: T.sum_all(T.softmax_rows(x))
    assert T.grad_check(f, x) < 1e-4 or np.abs(T._analytic_grad(f, x)).max() < 1e-12
    np.testing.assert_allclose(T._analytic_grad(f, x), 0.0, atol=1e-12)


def test_masked_softmax_matches_subvector():
    x = np.array([[0.3, -1.2, 2.0, 0.7, 5.0]])
    mask = np.array([[False, True, False, True, False]])
    out = T.softmax_rows(Tensor(x), mask).data
    sub = np.exp(x[0, [1, 3]]) / np.exp(x[0, [1, 3]]).sum()
    np.testing.assert_allclose(out[0, [1, 3]], sub, rtol=1e-12)
    assert out[0, [0, 2, 4]].tolist() == [0.0, 0.0, 0.0]


def test_fully_masked_row_is_zero():
    out = T.softmax_rows(Tensor(np.ones((1, 3))), np.zeros((1, 3), bool)).data
    assert out.tolist() == [[0.0, 0.0, 0.0]]


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


# -- concat / affine -------------------------------------------------------

def test_concat_single_part_is_identity():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.concat_features([a]).data, a.data)


def test_concat_two_columns():
    out = T.concat_features([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])])
    assert out.data.tolist() == [[1, 3], [2, 4]]


def test_concat_routes_ones():
    a, b = leaf(np.ones((2, 2))), leaf(np.ones((2, 3)))
    with Tape() as tape:
        loss = T.sum_all(T.concat_features([a, b]))
    tape.backward(loss)
    assert np.all(a.grad == 1) and np.all(b.grad == 1)
    assert T.grad_check(lambda: T.sum_all(T.concat_features([a, b])), b, 1e-3) < 1e-8


def test_concat_leading_mismatch():
    with pytest.raises(T.ShapeError):
        T.concat_features([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))])


def test_affine_examples():
    out = T.affine(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))
    np.testing.assert_array_equal(out.data, np.eye(2))
    out = T.affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([[1.0]]))
    assert out.data.tolist() == [[6.0]]


def test_affine_gradients():
    rng = np.random.default_rng(3)
    x, W, b = leaf(rng.normal(size=(5, 3))), leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(1, 4)))
    wts = Tensor(rng.normal(size=(5, 4)))
    f = lambda: T.sum_all(T.mul(T.affine(x, W, b), wts))
    for p in (x, W, b):
        assert T.grad_check(f, p, 1e-3) < 1e-4


def test_bias_must_be_a_row():
    with pytest.raises(T.ShapeError):
        T.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- loss ------------------------------------------------------------------

@pytest.mark.parametrize("label", [0, 1])
def test_bce_at_zero_logit(label):
    loss = T.sigmoid_bce(Tensor([[0.0]]), np.array([[label]]))
    assert loss.data.item() == pytest.approx(math.log(2))


def test_bce_extreme_logit_is_finite():
    loss = T.sigmoid_bce(Tensor([[-50.0]]), np.array([[0]])).data.item()
    assert np.isfinite(loss) and 0 <= loss < 1e-20


@pytest.mark.parametrize("y", [-8.0, -1.5, 0.3, 4.0, 12.0])
def test_bce_fused_equals_naive(y):
    for t in (0, 1):
        s = 1 / (1 + math.exp(-y))
        naive = -t * math.log(s) - (1 - t) * math.log(1 - s)
        assert T.sigmoid_bce(Tensor([[y]]), [[t]]).data.item() == pytest.approx(naive, rel=1e-10)


def test_bce_gradient_formula():
    y = leaf([[0.5], [-2.0], [3.0]])
    t = np.array([[1], [0], [1]])
    with Tape() as tape:
        loss = T.sigmoid_bce(y, t)
    tape.backward(loss)
    s = 1 / (1 + np.exp(-y.data))
    np.testing.assert_allclose(y.grad, (s - t) / 3, rtol=1e-12)


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        T.sigmoid_bce(Tensor([[0.0]]), [[0.5]])


# -- backward --------------------------------------------------------------

def test_backward_linear():
    W = Parameter("W", np.random.default_rng(0).normal(size=(2, 2)))
    with Tape() as tape:
        loss = T.sum_all(W)
    tape.backward(loss)
    assert np.all(W.grad == 1.0)


def test_backward_quadratic():
    W = Parameter("W", np.random.default_rng(0).normal(size=(2, 2)))
    with Tape() as tape:
        loss = T.sum_all(T.mul(W, W))
    tape.backward(loss)
    np.testing.assert_allclose(W.grad, 2 * W.data)


def test_backward_requires_scalar():
    W = Parameter("W", np.ones((2, 2)))
    with Tape() as tape:
        out = T.mul(W, W)
    with pytest.raises(ValueError):
        tape.backward(out)


def test_unreachable_parameter_keeps_zero_grad():
    a, b = Parameter("a", np.ones((2, 2))), Parameter("b", np.ones((2, 2)))
    ps = ParamSet([a, b])
    ps.zero_grad()
    with Tape() as tape:
        loss = T.sum_all(T.mul(a, a))
        T.sum_all(b)  # recorded but not part of the loss
    tape.backward(loss)
    assert np.all(b.grad == 0)


def test_tape_records_in_execution_order_and_visits_once():
    a = Parameter("a", np.ones((1, 2)))
    calls = []
    with Tape() as tape:
        x = T.scale(a, 2.0)
        y = T.scale(x, 3.0)
        loss = T.sum_all(y)
    assert [op.output for op in tape.ops] == [x, y, loss]
    for op in tape.ops:
        fn = op.backward
        op.backward = (lambda f, o: lambda g: (calls.append(o), f(g))[1])(fn, op.output)
    tape.backward(loss)
    assert calls == [loss, y, x]
    np.testing.assert_allclose(a.grad, 6.0)


def test_backward_is_linear():
    rng = np.random.default_rng(4)
    W = Parameter("W", rng.normal(size=(3, 3)))
    c = Tensor(rng.normal(size=(3, 3)))

    def grad_of(fn):
        W.zero_grad()
        with Tape() as tape:
            loss = fn()
        tape.backward(loss)
        return W.grad.copy()

    l1 = lambda: T.sum_all(T.softmax_rows(T.matmul(W, c)))
    l2 = lambda: T.sum_all(T.mul(T.relu(W), c))
    both = lambda: T.add(l1(), l2())
    np.testing.assert_allclose(grad_of(both), grad_of(l1) + grad_of(l2), atol=1e-10)


def test_ops_outside_a_tape_record_nothing():
    W = Parameter("W", np.ones((2, 2)))
    out = T.mul(W, W)
    assert not out.requires_grad


def test_finite_after_backward():
    rng = np.random.default_rng(5)
    W = Parameter("W", rng.normal(size=(4, 4)) * 50)
    with Tape() as tape:
        loss = T.sigmoid_bce(T.reshape(T.sum_axis(T.softmax_rows(W), 1), (4, 1)), np.ones((4, 1)))
    tape.backward(loss)
    assert np.all(np.isfinite(W.grad))


# -- gather ----------------------------------------------------------------

def test_gather_rows_padding_and_scatter():
    table = leaf(np.arange(12.0).reshape(4, 3))
    idx = np.array([[0, 2, 2], [3, 0, 1]])
    out = T.gather_rows(table, idx, padding_idx=0)
    assert np.all(out.data[0, 0] == 0) and np.all(out.data[1, 1] == 0)
    with Tape() as tape:
        loss = T.sum_all(T.gather_rows(table, idx, padding_idx=0))
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad[:, 0], [0, 1, 2, 1])


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.ones((3, 2))), np.array([3]))


# -- randomized gradient checks -------------------------------------------

OPS = {
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "softmax": lambda a, b: T.mul(T.softmax_rows(a), b),
    "concat": lambda a, b: T.concat_features([a, b]),
    "affine": lambda a, b: T.affine(a, T.transpose(b), Tensor(np.ones((1, b.shape[-2])))),
    "relu": lambda a, b: T.mul(T.relu(a), b),
    "repeat": lambda a, b: T.repeat_rows(T.sum_axis(a, -2), 3),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_random_shapes_grad_check(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    worst = 0.0
    for _ in range(100 // len(OPS) + 1):
        m, k = rng.integers(1, 5, size=2)
        a = leaf(rng.normal(size=(m, k)) + 0.05)  # keep relu away from its kink
        b = leaf(rng.normal(size=(m, k)))
        w = None

        def f():
            nonlocal w
            out = OPS[op](a, b)
            if w is None:
                w = Tensor(np.random.default_rng(0).normal(size=out.shape))
            return T.sum_all(T.mul(out, w))

        f()
        for x in (a, b):
            worst = max(worst, T.grad_check(f, x, 1e-6))
    assert worst <= 1e-4


# -- determinism -----------------------------------------------------------

def test_forward_backward_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        W = Parameter("W", rng.normal(size=(4, 6)))
        x = Tensor(rng.normal(size=(3, 5, 4)))
        with Tape() as tape:
            loss = T.sum_all(T.softmax_rows(T.matmul(x, W)))
        tape.backward(loss)
        return loss.data.copy(), W.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# -- adam ------------------------------------------------------------------

def _quadratic_step(w, target, opt):
    opt.zero_grad()
    with Tape() as tape:
        d = T.add_bias(w, Tensor([[-target]]))
        loss = T.sum_all(T.mul(d, d))
    tape.backward(loss)
    opt.step()


def test_adam_first_step_moves_by_lr():
    w = Parameter("w", [[1.0]])
    opt = Adam(ParamSet([w]), lr=0.1)
    _quadratic_step(w, 0.0, opt)
    assert w.data.item() == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_leaves_parameter():
    w = Parameter("w", [[1.5]])
    opt = Adam(ParamSet([w]), lr=0.1)
    w.zero_grad()
    opt.step()
    assert w.data.item() == 1.5


def test_adam_converges_on_shifted_quadratic():
    w = Parameter("w", [[0.0]])
    opt = Adam(ParamSet([w]), lr=0.1)
    for _ in range(200):
        _quadratic_step(w, 3.0, opt)
    assert abs(w.data.item() - 3.0) < 0.1


# -- parameters and checkpoints -------------------------------------------

def test_param_names_unique():
    ps = ParamSet([Parameter("a", np.ones((1, 1)))])
    with pytest.raises(KeyError):
        ps.add(Parameter("a", np.ones((1, 1))))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    ps = ParamSet([Parameter("hin.long.layer2.Wk", rng.normal(size=(4, 2))),
                   Parameter("bias", rng.normal(size=(1, 3))),
                   Parameter("seed", rng.normal(size=(2, 4)))])
    path = tmp_path / "p.hcnp"
    checkpoint.save(path, ps)
    back = checkpoint.load(path)
    assert list(back) == ps.names()
    for p in ps:
        np.testing.assert_array_equal(back[p.name], p.data.astype(np.float32))


def test_checkpoint_byte_layout():
    blob = checkpoint.dumps({"ab": np.array([[1.0, 2.0]])})
    expected = (b"HCNP" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + b"ab" + bytes([2])
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], "<f4").tobytes())
    assert blob == expected


def test_checkpoint_bad_magic():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE" + bytes(8))
