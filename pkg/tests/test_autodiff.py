import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncap import autodiff as ad
from dyncap.autodiff import DomainError, ShapeError, Tape, Tensor, backward, finite_difference_check


def grad_of(f, x):
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    return backward(tape, out, [leaf])[leaf]


# ---------------------------------------------------------------- forward


def test_matmul_forward():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[17.0], [39.0]])


def test_elementwise_forward():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(ad.add(a, b).data, [4.0, 2.0])
    assert np.array_equal(ad.sub(a, b).data, [-2.0, -6.0])
    assert np.array_equal(ad.mul(a, b).data, [3.0, -8.0])
    assert np.array_equal(ad.absolute(a).data, [1.0, 2.0])
    assert ad.sum(a).item() == -1.0
    assert ad.mean(b).item() == 3.5


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    assert out[1] == 0.5 and out[0] == 0.0 and out[2] == 1.0


def test_scalar_broadcast_only():
    assert np.array_equal(ad.mul(Tensor([1.0, 2.0]), Tensor(3.0)).data, [3.0, 6.0])
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_operator_sugar():
    a = Tensor([1.0, 2.0])
    assert np.array_equal((a + 1.0).data, [2.0, 3.0])
    assert np.array_equal((1.0 - a).data, [0.0, -1.0])
    assert np.array_equal((2.0 * a).data, [2.0, 4.0])
    assert np.array_equal((-a).data, [-1.0, -2.0])


# ---------------------------------------------------------------- backward


def test_backward_matmul_matches_hand_gradient():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.matmul(a, b))
    g = backward(tape, loss)
    assert np.array_equal(g[a], [[3.0, 4.0]])
    assert np.array_equal(g[b], [[1.0], [2.0]])


def test_backward_square_sum():
    assert np.array_equal(grad_of(lambda x: ad.sum(ad.square(x)), [1.0, -3.0]), [2.0, -6.0])


def test_backward_reused_input_accumulates():
    assert np.array_equal(grad_of(lambda x: ad.sum(ad.mul(x, x)), [2.0, 5.0]), [4.0, 10.0])


def test_unreached_param_gets_zero_gradient():
    a = Tensor([1.0], requires_grad=True)
    unused = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.square(a))
    g = backward(tape, loss, [a, unused])
    assert np.array_equal(g[unused], np.zeros((1, 2)))


def test_backward_needs_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ad.square(a)
    with pytest.raises(ShapeError):
        backward(tape, out)


def test_nothing_recorded_outside_tape():
    a = Tensor([1.0], requires_grad=True)
    ad.square(a)
    assert ad.active_tape() is None


def test_assign_only_on_trainable_leaves():
    with pytest.raises(TypeError):
        Tensor([1.0]).assign([2.0])
    t = Tensor([1.0], requires_grad=True)
    with pytest.raises(ShapeError):
        t.assign([1.0, 2.0])
    t.assign([3.0])
    assert t.item() == 3.0


def test_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([0.0]))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor([-1.0]))
    with pytest.raises(DomainError):
        ad.gate_mix(Tensor([1.0]), Tensor([1.5]), None)


def test_item_needs_single_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


# ---------------------------------------------------------------- finite differences

rng = np.random.default_rng(1234)

UNARY = {
    "sum": lambda x: ad.sum(x),
    "mean": lambda x: ad.mean(x),
    "square": lambda x: ad.sum(ad.square(x)),
    "abs": lambda x: ad.sum(ad.absolute(ad.add(x, Tensor(np.full(x.shape, 3.0))))),
    "sigmoid": lambda x: ad.sum(ad.sigmoid(x)),
    "tanh": lambda x: ad.sum(ad.tanh(x)),
    "log": lambda x: ad.sum(ad.log(ad.add(ad.square(x), 1.0))),
    "sqrt": lambda x: ad.sum(ad.sqrt(ad.add(ad.square(x), 1.0))),
    "scale": lambda x: ad.sum(ad.scale(ad.square(x), -2.5)),
    "clamp": lambda x: ad.sum(ad.square(ad.clamp(x, -5.0, 5.0))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_finite_difference_unary(name):
    for _ in range(10):
        x = rng.normal(size=(3, 2))
        assert finite_difference_check(UNARY[name], x) < 1e-4


@pytest.mark.parametrize("name", ["matmul", "add", "sub", "mul", "add_row"])
def test_finite_difference_binary(name):
    for _ in range(10):
        other = rng.normal(size=(3, 2))
        w = rng.normal(size=(2, 4))
        row = rng.normal(size=2)
        f = {
            "matmul": lambda x: ad.sum(ad.square(ad.matmul(x, Tensor(w)))),
            "add": lambda x: ad.sum(ad.square(ad.add(x, Tensor(other)))),
            "sub": lambda x: ad.sum(ad.square(ad.sub(Tensor(other), x))),
            "mul": lambda x: ad.sum(ad.mul(x, Tensor(other))),
            "add_row": lambda x: ad.sum(ad.square(ad.add_row(x, Tensor(row)))),
        }[name]
        assert finite_difference_check(f, rng.normal(size=(3, 2))) < 1e-4


def test_finite_difference_second_operand():
    for _ in range(10):
        x = Tensor(rng.normal(size=(3, 2)))
        assert finite_difference_check(lambda w: ad.sum(ad.square(ad.matmul(x, w))), rng.normal(size=(2, 4))) < 1e-4
        assert finite_difference_check(lambda r: ad.sum(ad.square(ad.add_row(x, r))), rng.normal(size=2)) < 1e-4


def test_finite_difference_gate_mix_both_inputs():
    for _ in range(10):
        x = rng.normal(size=(4, 3))
        noise = rng.normal(size=(4, 3))
        lam = rng.uniform(0.1, 0.9, size=3)
        target = rng.normal(size=(4, 3))
        f_lam = lambda t: ad.sum(ad.square(ad.sub(ad.gate_mix(Tensor(x), t, noise), Tensor(target))))  # noqa: E731
        f_x = lambda t: ad.sum(ad.square(ad.sub(ad.gate_mix(t, Tensor(lam), noise), Tensor(target))))  # noqa: E731
        assert finite_difference_check(f_lam, lam, step=1e-6) < 1e-4
        assert finite_difference_check(f_x, x) < 1e-4


def test_fd_step_range_enforced():
    with pytest.raises(ValueError):
        finite_difference_check(lambda x: ad.sum(x), [1.0], step=1e-2)


def test_fd_nonfinite_raises():
    with pytest.raises(DomainError):
        finite_difference_check(lambda x: ad.sum(ad.scale(x, float("inf"))), [1.0])


def test_gate_mix_gradient_is_clipped():
    # the sqrt(1 - lam) derivative blows up next to lam = 1
    lam = Tensor([1.0 - 1e-12], requires_grad=True)
    with Tape() as tape:
        out = ad.sum(ad.gate_mix(Tensor([[0.0]]), lam, np.array([[1.0]]), grad_clip=1e3))
    assert abs(backward(tape, out)[lam][0]) == 1e3


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear_in_loss(values, a, b):
    x = np.array(values)
    f = lambda t: ad.sum(ad.square(t))  # noqa: E731
    g = lambda t: ad.sum(ad.tanh(t))  # noqa: E731
    combined = grad_of(lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b)), x)
    assert np.allclose(combined, a * grad_of(f, x) + b * grad_of(g, x), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_backward_is_deterministic(seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    f = lambda t: ad.mean(ad.sigmoid(ad.matmul(t, Tensor(w))))  # noqa: E731
    assert np.array_equal(grad_of(f, x), grad_of(f, x))
