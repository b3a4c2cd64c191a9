import numpy as np
import pytest

from ikqe import autodiff as ad
from oracles import central_difference, max_rel_error


def grad_check(build, *shapes, seed=0, positive=False, tol=1e-6):
    """Compare tape gradients of sum(build(*xs) * W) against central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    params = [ad.parameter(x) for x in xs]
    out = build(*params)
    W = rng.normal(size=out.shape)

    def f():
        return float(np.sum(build(*[ad.constant(p.data) for p in params]).data * W))

    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.mul(build(*params), W))
    tape.backward(loss)
    for p in params:
        num = central_difference(f, p.data)
        assert max_rel_error(p.grad, num) <= tol, build


SEG = np.array([0, 2, 2, 0, 1, 2, 4])

PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "add_rowwise": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "mul_rowwise": (lambda a, b: ad.mul(a, b), [(3, 4), (1, 4)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(5,)]),
    "minimum": (lambda a, b: ad.minimum(a, b), [(6,), (6,)]),
    "maximum": (lambda a, b: ad.maximum(a, b), [(6,), (6,)]),
    "relu": (lambda a: ad.relu(a), [(4, 3)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(4, 3)]),
    "logsigmoid": (lambda a: ad.logsigmoid(a), [(4, 3)]),
    "exp": (lambda a: ad.exp(a), [(4,)]),
    "softmax": (lambda a: ad.softmax(a, axis=1), [(3, 5)]),
    "softmax0": (lambda a: ad.softmax(a, axis=0), [(3, 5)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "transpose": (lambda a: ad.transpose(a), [(3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), [(1, 4), (3, 4)]),
    "take": (lambda a: a[:, [1, 1, 3]], [(3, 4)]),
    "gather_rows": (lambda a: ad.gather_rows(a, [2, 0, 2, 1]), [(3, 4)]),
    "gather_1d": (lambda a: ad.gather_rows(a, [2, 0, 2]), [(3,)]),
    "scatter_add_rows": (lambda a: ad.scatter_add_rows(a, [1, 0, 1], 3), [(3, 4)]),
    "segment_sum": (lambda a: ad.segment_reduce(a, SEG, 5, "sum"), [(7, 3)]),
    "segment_mean": (lambda a: ad.segment_reduce(a, SEG, 5, "mean"), [(7, 3)]),
    "segment_max": (lambda a: ad.segment_reduce(a, SEG, 5, "max"), [(7, 3)]),
    "segment_min": (lambda a: ad.segment_reduce(a, SEG, 5, "min"), [(7, 3)]),
    "reduce_sum": (lambda a: ad.reduce_sum(a), [(3, 4)]),
    "reduce_sum_axis": (lambda a: ad.reduce_sum(a, axis=0), [(3, 4)]),
    "reduce_mean": (lambda a: ad.reduce_mean(a, axis=1), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    build, shapes = PRIMITIVES[name]
    grad_check(build, *shapes, seed=seed)


@pytest.mark.parametrize("name,build", [
    ("log", lambda a: ad.log(a)),
    ("sqrt", lambda a: ad.sqrt(a)),
    ("clamp01", lambda a: ad.clamp01(ad.scale(a, 0.4))),
    ("clamp", lambda a: ad.clamp(a, 0.7, 1.6)),
])
def test_positive_domain_gradients(name, build):
    grad_check(build, (4, 3), positive=True)


def test_composite_six_primitives():
    def build(x, w, b):
        h = ad.relu(ad.add(ad.matmul(x, w), b))
        s = ad.softmax(h, axis=1)
        return ad.segment_reduce(ad.mul(s, h), [0, 1, 0, 1], 2, "max")
    grad_check(build, (4, 3), (3, 5), (5,))


def test_examples():
    eye = ad.constant(np.eye(2))
    m = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(m, eye).data, m.data)
    assert ad.sigmoid(ad.constant(0.0)).data == 0.5
    w = ad.parameter([1.0, 2.0])
    with ad.Tape() as tape:
        loss = ad.reduce_sum(w * w)
    tape.backward(loss)
    assert list(w.grad) == [2.0, 4.0]


def test_segment_max_routes_to_argmax_lowest_on_ties():
    a = ad.parameter([[1.0], [3.0], [3.0], [0.0]])
    with ad.Tape() as tape:
        out = ad.segment_reduce(a, [0, 0, 0, 1], 3, "max")
        loss = ad.reduce_sum(out)
    tape.backward(loss)
    assert a.grad[:, 0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert out.data[2, 0] == 0.0  # empty segment


def test_gradient_accumulates_across_reuse():
    w = ad.parameter([3.0])
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.add(ad.mul(w, w), ad.scale(w, 2.0)))
    tape.backward(loss)
    assert w.grad.tolist() == [8.0]
    with ad.Tape() as tape:
        loss = ad.reduce_sum(w)
    tape.backward(loss)
    assert w.grad.tolist() == [9.0]


def test_unused_parameter_gets_zero_grad():
    store = ad.ParameterStore()
    a, b = store.add("a", [1.0, 2.0]), store.add("b", [5.0])
    with ad.Tape() as tape:
        loss = ad.reduce_sum(a * a)
    tape.backward(loss)
    assert np.array_equal(b.grad, [0.0])


def test_errors():
    with pytest.raises(ValueError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(IndexError):
        ad.gather_rows(ad.constant(np.ones((2, 3))), [2])
    with pytest.raises(IndexError):
        ad.scatter_add_rows(ad.constant(np.ones((2, 3))), [0, 5], 3)
    with pytest.raises(ValueError):
        ad.segment_reduce(ad.constant(np.ones((2, 3))), [0, 1], 2, "median")
    w = ad.parameter([1.0, 2.0])
    with ad.Tape() as tape:
        out = w * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_no_tape_records_nothing():
    w = ad.parameter([1.0])
    out = w * w
    assert not out.requires_grad


def test_tensor_grad_allocation():
    assert ad.constant([1.0]).grad is None
    p = ad.parameter(np.zeros((2, 3)))
    assert p.grad.shape == (2, 3)


def test_bitwise_deterministic_gradients():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(50, 8))
    seg = rng.integers(0, 10, 50)

    def run():
        x = ad.parameter(x0)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.sigmoid(ad.segment_reduce(x, seg, 10, "mean")))
        tape.backward(loss)
        return x.grad

    assert np.array_equal(run(), run())


def test_adam_first_step_and_zero_grad():
    store = ad.ParameterStore()
    w = store.add("w", [0.0])
    w.grad = np.array([1.0])
    ad.adam_step(store, lr=0.1)
    assert w.data[0] == pytest.approx(-0.1, abs=1e-6)
    assert store.step == 1 and w.grad[0] == 0.0
    u = ad.ParameterStore()
    v = u.add("v", [2.0])
    ad.adam_step(u, lr=0.1)
    assert v.data[0] == 2.0


def test_adam_converges_on_quadratic():
    store = ad.ParameterStore()
    w = store.add("w", [0.0])
    for _ in range(100):
        with ad.Tape() as tape:
            d = ad.sub(w, 3.0)
            loss = ad.reduce_sum(ad.mul(d, d))
        tape.backward(loss)
        ad.adam_step(store, lr=0.1)
    # independent scalar recurrence
    x, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2 * (x - 3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(w.data[0] - 3) < 0.1
    assert w.data[0] == pytest.approx(x, abs=1e-12)


def test_adam_missing_grad():
    store = ad.ParameterStore()
    w = store.add("w", [0.0])
    w.grad = None
    with pytest.raises(ValueError):
        ad.adam_step(store, 0.1)


def test_store_state_dict():
    store = ad.ParameterStore()
    store.add("a", np.ones((2, 2)))
    store.add("p", np.zeros(3), trainable=False)
    assert store.num_parameters() == 4 and store.num_parameters(False) == 7
    with pytest.raises(KeyError):
        store.add("a", [1.0])
    state = store.state_dict()
    state["a"] += 1
    store.load_state_dict(state)
    assert np.all(store["a"].data == 2)
    with pytest.raises(ValueError):
        store.load_state_dict({"a": np.ones(3)})
    with pytest.raises(KeyError):
        store.load_state_dict({"zz": np.ones(3)})
