import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catchfm import tensor as T
from catchfm.model import Model, ModelConfig
from catchfm.tensor import NonFiniteLoss, ShapeError, Tape, Tensor, grad_check


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_softmax_of_uniform_logits():
    y = T.softmax(Tensor(np.zeros((3, 7))))
    assert np.allclose(y.data, 1 / 7)


def test_cross_entropy_of_uniform_logits_is_log_v():
    loss = T.cross_entropy(Tensor(np.zeros((4, 11))), np.array([0, 3, 5, 10]))
    assert loss.item() == pytest.approx(np.log(11), abs=1e-12)


def test_cross_entropy_with_no_targets_is_zero():
    loss = T.cross_entropy(Tensor(np.zeros((2, 5))), np.array([-1, -1]), ignore_index=-1)
    assert loss.item() == 0.0


def test_cross_entropy_nan_raises():
    with pytest.raises(NonFiniteLoss):
        T.cross_entropy(Tensor(np.array([[np.nan, 0.0]])), np.array([0]))


def test_rope_identity_at_position_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
    assert np.array_equal(T.rope_rotate(x, np.zeros(3)).data, x.data)


def test_rope_rejects_odd_dimension():
    with pytest.raises(ShapeError):
        T.rope_rotate(Tensor(np.ones((2, 5))), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16).map(lambda h: 2 * h), st.integers(0, 5000))
def test_rope_preserves_pair_norms(dim, pos):
    x = np.random.default_rng(dim + pos).normal(size=(dim,))
    y = T.rope_rotate(Tensor(x), np.array(pos)).data
    half = dim // 2
    assert np.allclose(np.hypot(x[:half], x[half:]), np.hypot(y[:half], y[half:]), atol=1e-6)


def test_rope_angles_follow_the_frequency_law():
    cos, sin = T.rope_angles(np.array([3]), 8)
    k = np.arange(4)
    theta = 3 * 10000.0 ** (-2 * k / 8)
    assert np.allclose(cos[0, :4], np.cos(theta)) and np.allclose(sin[0, 4:], np.sin(theta))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=40))
def test_softmax_rows_sum_to_one(xs):
    y = T.softmax(Tensor(np.array(xs, dtype=np.float32)[None, :]))
    assert abs(float(y.data.sum()) - 1) < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_add_shape_mismatch_is_error():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_quadratic_grad_check():
    x = Tensor(np.array([3.0]), requires_grad=True)
    assert grad_check(lambda: T.sum_all(x * x), [x]) < 1e-9
    with Tape() as tape:
        y = T.sum_all(x * x)
    tape.backward(y)
    assert x.grad[0] == pytest.approx(6.0)


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(x * x + x)
    tape.backward(y)
    assert x.grad[0] == pytest.approx(5.0)


OPS = {
    "add": lambda r, p: T.add(p[0], p[1]),
    "mul": lambda r, p: T.mul(p[0], p[1]),
    "matmul": lambda r, p: T.matmul(p[0], p[2]),
    "softmax": lambda r, p: T.softmax(p[0], axis=-1),
    "layer_norm": lambda r, p: T.layer_norm(p[0], p[3], p[4]),
    "gelu": lambda r, p: T.gelu(p[0]),
    "rope": lambda r, p: T.rope_rotate(p[0], r.integers(0, 50, size=p[0].shape[:-1])),
    "transpose": lambda r, p: T.transpose(p[0], (1, 0)),
}


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(sorted(OPS)), st.integers(1, 8), st.integers(1, 32).map(lambda h: 2 * h), st.integers(0, 2**16))
def test_every_op_passes_grad_check(op, rows, dim, seed):
    rng = np.random.default_rng(seed)
    params = [_param(rng, rows, dim), _param(rng, rows, dim), _param(rng, dim, 3), _param(rng, dim), _param(rng, dim)]
    fixed_rng_state = rng.bit_generator.state
    weights = rng.normal(size=(64, 64))

    def f():
        rng.bit_generator.state = fixed_rng_state
        out = OPS[op](rng, params)
        return T.sum_all(out * Tensor(weights[: out.shape[0], : out.shape[1]]))

    assert grad_check(f, params, samples=16) < 1e-5


def test_embedding_and_cross_entropy_grad_check():
    rng = np.random.default_rng(3)
    table = _param(rng, 10, 6)
    w = _param(rng, 6, 10)
    ids = np.array([1, 4, 4, 9])
    assert grad_check(lambda: T.cross_entropy(T.matmul(T.embedding_lookup(table, ids), w), np.array([2, 2, 0, -1]),
                                              ignore_index=-1), [table, w]) < 1e-5


def test_single_attention_block_grad_check():
    cfg = ModelConfig(n_layers=1, d_model=64, n_heads=4, max_len=16, vocab_size=20)
    model = Model.init(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 6, 64)), requires_grad=True)
    pos = np.array([[0, 0, 1, 1, 2, 3]])
    probe = rng.normal(size=(1, 6, 64))
    blockp = [p for n, p in model.params.items() if n.startswith("layers.0.")]
    err = grad_check(lambda: T.sum_all(model._block(0, x, pos) * Tensor(probe)), [x] + blockp, samples=12)
    assert err < 1e-6
