import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grad_check, rel_err
from longseq import autograd as ag
from longseq import ledger as L
from longseq.autograd import Tensor
from longseq.errors import DeterminismError, ShapeError, ValidationError

TRIALS = settings(max_examples=5, deadline=None, derandomize=True)


class _Consts:
    """Random constants drawn once per shape, so repeated calls see the same op."""

    def __init__(self, rng):
        self.rng, self.cache = rng, {}

    def __call__(self, shape):
        if shape not in self.cache:
            self.cache[shape] = Tensor(self.rng.normal(size=shape))
        return self.cache[shape]


# unary primitives: name -> (op, input sampler)
UNARY = {
    "add_bcast": (lambda r: (lambda x: ag.add(x, r((x.shape[-1],)))), lambda r, s: r.normal(size=s)),
    "sub_rev": (lambda r: (lambda x: ag.sub(r(x.shape), x)), lambda r, s: r.normal(size=s)),
    "mul": (lambda r: (lambda x: ag.mul(x, r(x.shape))), lambda r, s: r.normal(size=s)),
    "mul_self": (lambda r: (lambda x: ag.mul(x, x)), lambda r, s: r.normal(size=s)),
    "scale": (lambda r: (lambda x: ag.mul(x, -1.7)), lambda r, s: r.normal(size=s)),
    "matmul_lhs": (lambda r: (lambda x: ag.matmul(x, r((x.shape[-1], 3)))), lambda r, s: r.normal(size=s)),
    "matmul_rhs": (lambda r: (lambda x: ag.matmul(r((2, x.shape[0])), x)), lambda r, s: r.normal(size=s)),
    "linear_x": (lambda r: (lambda x: ag.linear(x, r((3, x.shape[-1])))), lambda r, s: r.normal(size=s)),
    "linear_w": (lambda r: (lambda w: ag.linear(r((4, w.shape[-1])), w)), lambda r, s: r.normal(size=s)),
    "reshape": (lambda r: (lambda x: ag.reshape(x, (-1,))), lambda r, s: r.normal(size=s)),
    "transpose": (lambda r: (lambda x: ag.transpose(x)), lambda r, s: r.normal(size=s)),
    "take_repeat": (lambda r: (lambda x: ag.take(x, [0, x.shape[0] - 1, 0], axis=0)), lambda r, s: r.normal(size=s)),
    "embedding": (lambda r: (lambda w: ag.embedding(w, np.array([[0, 1], [1, 1]]) % w.shape[0])),
                  lambda r, s: r.normal(size=s)),
    "narrow": (lambda r: (lambda x: ag.narrow(x, -1, 0, max(1, x.shape[-1] - 1))), lambda r, s: r.normal(size=s)),
    "concat": (lambda r: (lambda x: ag.concat([x, ag.mul(x, x)], axis=-1)), lambda r, s: r.normal(size=s)),
    "split": (lambda r: (lambda x: ag.mul(*ag.split(ag.concat([x, x], 0), [x.shape[0]] * 2, 0))),
              lambda r, s: r.normal(size=s)),
    "sum_axis": (lambda r: (lambda x: ag.sum_(x, axis=0)), lambda r, s: r.normal(size=s)),
    "mean_keep": (lambda r: (lambda x: ag.mean(x, axis=-1, keepdims=True)), lambda r, s: r.normal(size=s)),
    "exp": (lambda r: (lambda x: ag.exp(x)), lambda r, s: r.normal(size=s)),
    "log": (lambda r: (lambda x: ag.log(x)), lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "rsqrt": (lambda r: (lambda x: ag.rsqrt(x)), lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "silu": (lambda r: (lambda x: ag.silu(x)), lambda r, s: 2 * r.normal(size=s)),
    "softmax": (lambda r: (lambda x: ag.softmax_lastdim(x)), lambda r, s: r.normal(size=s)),
    "rms_norm_x": (lambda r: (lambda x: ag.rms_norm(x, r((x.shape[-1],)))), lambda r, s: r.normal(size=s)),
    "rms_norm_w": (lambda r: (lambda w: ag.rms_norm(r(w.shape), w)), lambda r, s: r.normal(size=s)),
    "cross_entropy": (lambda r: (lambda z: ag.cross_entropy(z, np.r_[[-100], np.arange(z.shape[0] - 1)] % z.shape[1])[0]),
                      lambda r, s: r.normal(size=s)),
    "checkpoint": (lambda r: (lambda x: ag.checkpoint(lambda t: ag.silu(ag.mul(t, t)), x)), lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@TRIALS
@given(seed=st.integers(0, 2 ** 31 - 1), rows=st.integers(2, 4), cols=st.integers(2, 5))
def test_primitive_gradients_match_finite_differences(name, seed, rows, cols):
    rng = np.random.default_rng(seed)
    make_op, sample = UNARY[name]
    op = make_op(_Consts(rng))
    x = sample(rng, (rows, cols))
    assert grad_check(op, x, rng) < 1e-6


def test_matmul_against_hand_computed_3x4_by_4x2(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ag.sum_(ag.matmul(ta, tb)).backward()
    np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T, rtol=1e-14)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((3, 2)), rtol=1e-14)
    fd = ag.finite_diff_grad(lambda t: ag.sum_(ag.matmul(t, Tensor(b))), a)
    assert rel_err(ta.grad, fd) < 1e-7


def test_shared_input_gradients_accumulate():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ag.add(ag.mul(x, x), ag.mul(x, 3.0))
    ag.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 3.0)


def test_backward_is_bitwise_deterministic(rng):
    x = rng.normal(size=(5, 6))
    w = rng.normal(size=(4, 6))

    def run():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        loss, _ = ag.cross_entropy(ag.linear(ag.silu(xt), wt), np.array([0, 1, 2, 3, -100]))
        loss.backward()
        return xt.grad.tobytes(), wt.grad.tobytes()

    assert run() == run()


def test_checkpoint_matches_plain_to_1e12(rng):
    x = rng.normal(size=(3, 8))
    w = rng.normal(size=(8, 8))

    def f(t, wt):
        return ag.silu(ag.matmul(ag.rms_norm(t, Tensor(np.ones(8))), wt))

    wa, wb = Tensor(w, requires_grad=True), Tensor(w, requires_grad=True)
    xa, xb = Tensor(x, requires_grad=True), Tensor(x, requires_grad=True)
    ya = f(xa, wa)
    yb = ag.checkpoint(lambda t: f(t, wb), xb)
    np.testing.assert_array_equal(ya.data, yb.data)
    ag.sum_(ag.mul(ya, ya)).backward()
    ag.sum_(ag.mul(yb, yb)).backward()
    assert np.max(np.abs(xa.grad - xb.grad)) <= 1e-12
    assert np.max(np.abs(wa.grad - wb.grad)) <= 1e-12


def test_checkpoint_replay_nondeterminism_is_detected():
    calls = []

    def flaky(t):
        calls.append(1)
        return ag.mul(t, float(len(calls)))

    x = Tensor(np.ones(3), requires_grad=True)
    y = ag.checkpoint(flaky, x)
    with pytest.raises(DeterminismError):
        ag.sum_(y).backward()


def test_checkpoint_input_is_tagged_in_ledger():
    led = L.MemoryLedger()
    with led.activate():
        x = Tensor(np.ones((4, 4)), requires_grad=True)
        y = ag.checkpoint(lambda t: ag.exp(t), x)
        assert led.live_bytes(L.DEVICE, "activation-checkpoint") == 128
        ag.sum_(y).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad


def test_float32_mode():
    with ag.precision("float32"):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_cross_entropy_ignores_minus_100_and_counts():
    z = Tensor(np.zeros((3, 4)), requires_grad=True)
    loss, n = ag.cross_entropy(z, np.array([1, -100, 2]))
    assert n == 2
    assert float(loss.data) == pytest.approx(2 * np.log(4))
    loss.backward()
    np.testing.assert_array_equal(z.grad[1], 0.0)


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ValidationError):
        ag.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ag.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        ag.split(Tensor(np.zeros(5)), [2, 2])
