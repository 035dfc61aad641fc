"""Tensor, Parameter, and tape semantics."""

import numpy as np
import pytest

from res3atn import ops
from res3atn.tensor import Parameter, Tape, Tensor, active_tape, backward, zero_grads


def test_tensor_coerces_integers_to_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.data.tolist() == [1.0, 2.0, 3.0]


def test_tensor_preserves_float64():
    t = Tensor(np.zeros(3, dtype=np.float64))
    assert t.dtype == np.float64


def test_tensor_defaults():
    t = Tensor(np.ones((2, 3)))
    assert not t.requires_grad
    assert t.grad is None
    assert t.tape is None
    assert t.shape == (2, 3)
    assert t.ndim == 2
    assert t.size == 6


def test_detach_shares_storage_without_grad():
    t = Tensor(np.ones(4), requires_grad=True)
    d = t.detach()
    assert not d.requires_grad
    d.data[0] = 7.0
    assert t.data[0] == 7.0


def test_parameter_requires_grad_and_roles():
    p = Parameter(np.ones(2), name="w", role="mask")
    assert p.requires_grad
    assert p.name == "w"
    assert p.role == "mask"
    with pytest.raises(ValueError, match="unknown parameter role"):
        Parameter(np.ones(2), role="elsewhere")


def test_accumulate_grad_sums_and_checks_shape():
    t = Tensor(np.zeros(3), requires_grad=True)
    t.accumulate_grad(np.ones(3))
    t.accumulate_grad(np.ones(3) * 2)
    assert t.grad.tolist() == [3.0, 3.0, 3.0]
    with pytest.raises(ValueError, match="gradient shape"):
        t.accumulate_grad(np.ones(4))


def test_ops_without_tape_are_untracked():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ops.relu(x)
    assert y.tape is None
    with pytest.raises(RuntimeError, match="not produced under an active tape"):
        backward(ops.sum_all(y))


def test_fanout_gradients_accumulate():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = ops.sum_all(ops.add(x, x))
    backward(loss)
    assert x.grad.tolist() == [2.0]


def test_fanout_through_mul_uses_both_paths():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        loss = ops.sum_all(ops.mul(x, x))  # d/dx x^2 = 2x
    backward(loss)
    assert x.grad.tolist() == [4.0]


def test_add_gradient_buffers_do_not_alias():
    # both addends of one add must receive independent gradient buffers
    x = Tensor([1.0, 1.0], requires_grad=True)
    y = Tensor([1.0, 1.0], requires_grad=True)
    with Tape():
        s = ops.add(x, y)
        loss = ops.sum_all(ops.add(s, s))
    backward(loss)
    assert x.grad.tolist() == [2.0, 2.0]
    assert y.grad.tolist() == [2.0, 2.0]


def test_tape_is_consumed_by_backward():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    backward(loss)
    assert tape.consumed
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(loss)


def test_consumed_tape_rejects_recording():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
        backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            ops.sum_all(x)


def test_backward_requires_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = ops.relu(x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)


def test_backward_rejects_foreign_loss():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = ops.sum_all(x)
    with Tape() as other:
        with pytest.raises(RuntimeError, match="not produced under this tape"):
            other.backward(loss)


def test_nested_tapes_record_independently():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        a = ops.mul(x, x)
        with Tape():
            inner = ops.sum_all(ops.add(a, x))
        backward(inner)
        # the inner tape saw add and sum_all only: d(inner)/dx via those is 1,
        # the mul recorded outside contributes nothing to the inner pass
        assert x.grad.tolist() == [1.0]
        assert a.grad.tolist() == [1.0]
        outer = ops.sum_all(a)
    zero_grads([x, a])
    backward(outer)
    assert x.grad.tolist() == [4.0]


def test_active_tape_tracks_stack():
    assert active_tape() is None
    with Tape() as t1:
        assert active_tape() is t1
        with Tape() as t2:
            assert active_tape() is t2
        assert active_tape() is t1
    assert active_tape() is None


def test_requires_grad_false_input_gets_no_grad():
    x = Tensor([1.0], requires_grad=True)
    c = Tensor([5.0])
    with Tape():
        loss = ops.sum_all(ops.mul(x, c))
    backward(loss)
    assert x.grad.tolist() == [5.0]
    assert c.grad is None


def test_zero_grads():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = ops.sum_all(x)
    backward(loss)
    assert x.grad is not None
    zero_grads([x])
    assert x.grad is None
