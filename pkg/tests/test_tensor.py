import numpy as np
import pytest

from neurospike.errors import (
    DomainError,
    InvalidStateError,
    NumericError,
    ShapeError,
)
from neurospike.tensor import (
    AdamState,
    ClassWeights,
    Tensor,
    adam_step,
    gradcheck,
    init_uniform,
    is_grad_enabled,
    no_grad,
    weighted_bce,
)
from tests.utils import double


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: (a * b + a).sum(),
        lambda a, b: (a / (b * b + 1.0)).sum(),
        lambda a, b: (a - b).exp().mean(),
        lambda a, b: (a * a + 1.0).log().sum(),
        lambda a, b: (a**3).sum(),
        lambda a, b: a.sigmoid().sum() + b.relu().sum(),
        lambda a, b: (a.softmax(axis=-1) * b).sum(),
        lambda a, b: (a.transpose() * b.transpose()).reshape(-1).sum(),
    ],
)
def test_elementwise_gradients(fn):
    a = double((3, 4), seed=1)
    b = double((3, 4), seed=2)
    assert gradcheck(fn, [a, b]) < 1e-6


def test_broadcast_gradient_is_summed_back():
    a = double((5, 3), seed=3)
    bias = double((3,), seed=4)
    assert gradcheck(lambda x, y: ((x + y) ** 2).sum(), [a, bias]) < 1e-6
    a.zero_grad()
    bias.zero_grad()
    ((a + bias) * 2.0).sum().backward()
    assert bias.grad.shape == (3,)
    np.testing.assert_allclose(bias.grad, np.full(3, 10.0))


def test_batched_matmul_gradient():
    a = double((2, 3, 4), seed=5)
    b = double((4, 2), seed=6)
    assert gradcheck(lambda x, y: (x @ y).sum(), [a, b]) < 1e-6


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)).matmul(Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_sum_over_axis_and_mean():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum(axis=0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    assert Tensor(np.arange(6.0)).mean().item() == pytest.approx(2.5)


def test_float32_is_the_default_storage():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64


def test_sigmoid_is_stable_on_both_tails():
    out = Tensor(np.array([-1000.0, 0.0, 1000.0])).sigmoid()
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out.data))


def test_log_of_non_positive_is_a_domain_error():
    with pytest.raises(DomainError):
        Tensor(np.array([1.0, 0.0])).log()


def test_backward_requires_a_scalar_or_a_seed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.ones((2, 2)))
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_backward_without_grad_is_invalid():
    with pytest.raises(InvalidStateError):
        Tensor(np.ones(2)).sum().backward()


def test_tape_is_freed_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 3.0).exp()
    loss = y.sum()
    loss.backward()
    assert y.grad is None
    assert y._prev == ()
    assert x.grad is not None


def test_shared_node_accumulates_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_non_finite_leaf_gradient_raises():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericError):
        (x**0.5).sum().backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad


def test_init_uniform_bounds():
    t = init_uniform((50, 40), 25, np.random.default_rng(0))
    assert t.requires_grad
    assert np.abs(t.data).max() <= 0.2 + 1e-6


@pytest.mark.parametrize(
    "weights, expected",
    [
        (ClassWeights(), np.log(2.0)),
        (ClassWeights(w0=1.0, w1=2.0), 2.0 * np.log(2.0)),
    ],
)
def test_weighted_bce_value(weights, expected):
    pred = Tensor(np.array([0.5, 0.5]))
    loss = weighted_bce(pred, np.array([1.0, 1.0]), weights)
    assert loss.item() == pytest.approx(expected, rel=1e-6)


def test_weighted_bce_weights_rows_by_class():
    pred = Tensor(np.array([[0.9, 0.1], [0.2, 0.8]]))
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    weights = ClassWeights(w0=0.5, w1=3.0)
    loss = weighted_bce(pred, target, weights, classes=np.array([0, 1]))
    per_row = -np.log([0.9, 0.8])
    expected = (2 * 0.5 * per_row[0] + 2 * 3.0 * per_row[1]) / 4
    assert loss.item() == pytest.approx(expected, rel=1e-9)


def test_weighted_bce_gradient():
    logits = double((4, 2), seed=7)
    target = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    weights = ClassWeights(w0=0.6, w1=2.5)
    error = gradcheck(
        lambda x: weighted_bce(x.sigmoid(), target, weights), [logits]
    )
    assert error < 1e-6


def test_weighted_bce_clamps_but_keeps_gradient():
    pred = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    loss = weighted_bce(pred, np.array([1.0, 0.0]))
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(-np.log(1e-7), rel=1e-6)
    loss.backward()
    assert pred.grad[0] < 0 < pred.grad[1]


@pytest.mark.parametrize("bad", [np.array([1.5]), np.array([-0.1])])
def test_weighted_bce_rejects_values_outside_unit_interval(bad):
    with pytest.raises(DomainError):
        weighted_bce(Tensor(bad), np.array([1.0]))


def test_weighted_bce_rejects_nan_and_shape_mismatch():
    with pytest.raises(NumericError):
        weighted_bce(Tensor(np.array([np.nan])), np.array([1.0]))
    with pytest.raises(ShapeError):
        weighted_bce(Tensor(np.array([0.5, 0.5])), np.array([1.0]))


def test_adam_first_step_moves_by_learning_rate():
    param = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    param.grad = np.array([2.0, -0.5])
    state = AdamState(lr=1e-3)
    adam_step([param], state)
    np.testing.assert_allclose(param.data, [1.0 - 1e-3, -1.0 + 1e-3])
    assert state.t == 1


def test_adam_minimises_a_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    for _ in range(1000):
        x.zero_grad()
        ((x - 1.0) ** 2).sum().backward()
        adam_step([x], state)
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=5e-2)


def test_adam_state_mismatch():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    a.grad = np.ones(2)
    b.grad = np.ones(3)
    state = AdamState()
    adam_step([a], state)
    with pytest.raises(InvalidStateError):
        adam_step([a, b], state)


def test_adam_requires_gradients():
    with pytest.raises(InvalidStateError):
        adam_step([Tensor(np.ones(2), requires_grad=True)], AdamState())


def test_adam_with_zero_gradients_is_the_identity():
    param = Tensor(np.array([0.3, -1.2, 4.0]), requires_grad=True)
    state = AdamState()
    for _ in range(200):
        param.grad = np.zeros(3)
        adam_step([param], state)
    np.testing.assert_array_equal(param.data, [0.3, -1.2, 4.0])
    np.testing.assert_array_equal(state.m[0], 0.0)
    np.testing.assert_array_equal(state.v[0], 0.0)
    assert state.t == 200


def test_adam_first_step_with_unit_gradient():
    param = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    param.grad = np.array([1.0])
    adam_step([param], AdamState())
    assert param.data[0] == pytest.approx(-5e-4, rel=1e-7)


def test_unit_weights_give_plain_cross_entropy():
    generator = np.random.default_rng(8)
    p = generator.uniform(0.05, 0.95, size=(6, 2))
    target = (generator.random((6, 2)) > 0.5).astype(np.float64)
    loss = weighted_bce(Tensor(p, dtype=np.float64), target, ClassWeights())
    plain = -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p))
    assert loss.item() == pytest.approx(plain, rel=1e-12)
