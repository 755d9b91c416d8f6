import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from clinseq import numerics as nx
from clinseq.numerics import Tensor
from clinseq.numerics.gradcheck import check_grad, random_tensor

TOL = 1e-3


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- forward examples


def test_softmax_uniform():
    assert np.allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_sigmoid_zero():
    assert nx.sigmoid(Tensor(0.0)).data == 0.5


def test_shape_errors_name_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_graph_only_when_needed():
    a, b = Tensor(np.ones(2)), leaf(np.ones(2))
    assert not nx.add(a, a).requires_grad
    assert nx.add(a, b).requires_grad
    with nx.no_grad():
        assert not nx.add(a, b).requires_grad


# ---------------------------------------------------------------- backward examples


def test_square_grad():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_sum_grad_all_ones():
    x = leaf(np.arange(5.0))
    nx.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(5))


def test_softmax_pick_matches_fd(rng):
    x = random_tensor(rng, 6)
    errs = check_grad(lambda: nx.take(nx.softmax(x), 2), [x])
    assert max(errs) < TOL


def test_non_scalar_backward_rejected():
    with pytest.raises(nx.ShapeError):
        nx.add(leaf(np.ones(3)), 1.0).backward()


def test_grads_accumulate_until_zeroed():
    x = leaf(2.0)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(8.0)
    x.zero_grad()
    (x * x).backward()
    assert x.grad == pytest.approx(4.0)


# ---------------------------------------------------------------- per-op finite differences

def _ops(rng):
    a = random_tensor(rng, 3, 4)
    b = random_tensor(rng, 3, 4)
    row = random_tensor(rng, 4)
    w = random_tensor(rng, 4, 5)
    bias = random_tensor(rng, 5)
    sq = random_tensor(rng, 2, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    gain = random_tensor(rng, 4)
    table = random_tensor(rng, 7, 4)
    ids = np.array([[1, 3, 3], [0, 6, 1]])
    mask = np.where(np.tril(np.ones((4, 4))) > 0, 0.0, -np.inf)
    scores = random_tensor(rng, 2, 4, 4)
    weights = rng.normal(size=(3, 4))

    def wsum(t):
        return nx.tsum(nx.mul(t, Tensor(rng_fixed(t.shape))))

    return {
        "add_broadcast": (lambda: wsum(nx.add(a, row)), [a, row]),
        "sub": (lambda: wsum(nx.sub(a, b)), [a, b]),
        "mul": (lambda: wsum(nx.mul(a, b)), [a, b]),
        "scalar_div": (lambda: wsum(a / 2.5), [a]),
        "exp": (lambda: wsum(nx.exp(a)), [a]),
        "log": (lambda: wsum(nx.log(pos)), [pos]),
        "sigmoid": (lambda: wsum(nx.sigmoid(a)), [a]),
        "softplus": (lambda: wsum(nx.softplus(a)), [a]),
        "gelu": (lambda: wsum(nx.gelu(a)), [a]),
        "relu": (lambda: wsum(nx.relu(a + 0.05)), [a]),
        "abs": (lambda: wsum(nx.tabs(pos)), [pos]),
        "square": (lambda: wsum(nx.square(a)), [a]),
        "mean_axis": (lambda: wsum(nx.tmean(sq, axis=1)), [sq]),
        "reshape_transpose": (lambda: wsum(nx.transpose(nx.reshape(a, (4, 3)), (1, 0)).reshape(3, 4)), [a]),
        "matmul_batched": (lambda: wsum(nx.matmul(sq, w)[..., :4].reshape(2, 3, 4)[0]), [sq, w]),
        "linear": (lambda: wsum(nx.linear(a, w, bias)[:, :4]), [a, w, bias]),
        "softmax": (lambda: wsum(nx.softmax(a)), [a]),
        "log_softmax": (lambda: wsum(nx.log_softmax(a)), [a]),
        "layer_norm": (lambda: wsum(nx.layer_norm(a, gain, row)), [a, gain, row]),
        "embedding": (lambda: wsum(nx.embedding(table, ids)[0]), [table]),
        "take": (lambda: wsum(nx.reshape(nx.take(a, (np.array([0, 2, 2]), np.array([1, 1, 3]))), (1, 3))), [a]),
        "concat": (lambda: wsum(nx.concat([a, b], axis=0)[1:4]), [a, b]),
        "masked_softmax": (lambda: wsum(nx.softmax(nx.attention_bias_add(scores, mask))[:, :3, :].reshape(2, 3, 4)[0]), [scores]),
        "weighted": (lambda: nx.tsum(nx.mul(a, Tensor(weights))), [a]),
    }


def rng_fixed(shape):
    return np.random.default_rng(hash(shape) % 2**32).normal(size=shape)


@pytest.mark.parametrize("name", sorted(_ops(np.random.default_rng(0))))
def test_op_gradient_matches_finite_differences(name):
    fn, tensors = _ops(np.random.default_rng(1))[name]
    errs = check_grad(fn, tensors, step=1e-4)
    assert max(errs) < TOL, (name, errs)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_property_elementwise_chain_grad(x):
    t = Tensor(x.copy(), requires_grad=True)
    errs = check_grad(lambda: nx.tsum(nx.mul(nx.sigmoid(t), nx.exp(nx.mul(t, 0.3)))), [t])
    assert errs[0] < TOL


# ---------------------------------------------------------------- invariants


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_property_softmax_rows_sum_to_one(x):
    p = nx.softmax(Tensor(x)).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 16)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_property_layer_norm_standardises(x):
    # guard degenerate rows where eps dominates the variance
    x = x + np.arange(x.shape[1]) * 0.5
    d = x.shape[1]
    out = nx.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10, allow_nan=False)),
                min_size=1, max_size=4),
       st.floats(0.1, 5.0))
def test_property_clip_is_idempotent(grads, max_norm):
    grads = [g.copy() for g in grads]
    nx.clip_grad_norm(grads, max_norm)
    before = [g.copy() for g in grads]
    nx.clip_grad_norm(grads, max_norm)
    for a, b in zip(before, grads):
        assert np.allclose(a, b, rtol=1e-12, atol=0)


def test_tensor_grad_shape_matches():
    x = leaf(np.ones((2, 3)))
    nx.tsum(nx.mul(x, x)).backward()
    assert x.grad.shape == x.shape and x.size == 6


# ---------------------------------------------------------------- optimizer


def test_adamw_first_step_magnitude_is_lr():
    p = leaf(np.array([1.0, -2.0, 0.5]))
    state = nx.OptimizerState.for_params([p], weight_decay=0.0, epsilon=0.0)
    nx.adamw_step([p], [np.array([0.3, -7.0, 2.0])], state, lr=0.01)
    assert np.allclose(p.data, [0.99, -1.99, 0.49], atol=1e-12)


def test_adamw_zero_grad_no_decay_is_noop():
    p = leaf(np.array([1.0, 2.0]))
    state = nx.OptimizerState.for_params([p], weight_decay=0.0)
    nx.adamw_step([p], [np.zeros(2)], state, lr=0.1)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adamw_two_steps_match_hand_recurrence():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
    theta = 0.7
    p = Tensor(np.array([[theta]]), requires_grad=True)
    state = nx.OptimizerState.for_params([p], beta1=b1, beta2=b2, epsilon=eps, weight_decay=wd)
    m = v = 0.0
    for t, g in enumerate([0.4, -1.3], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        theta = theta - lr * (mh / (math.sqrt(vh) + eps) + wd * theta)
        nx.adamw_step([p], [np.array([[g]])], state, lr)
    assert p.data[0, 0] == pytest.approx(theta, abs=1e-10)
    assert state.step_count == 2


def test_adamw_non_finite_grad_skips_and_flags():
    p = leaf(np.array([1.0]))
    state = nx.OptimizerState.for_params([p])
    assert nx.adamw_step([p], [np.array([np.nan])], state, 0.1) is False
    assert p.data[0] == 1.0 and state.step_count == 0 and state.skipped == 1


def test_adamw_rejects_bad_inputs():
    p = leaf(np.array([1.0]))
    state = nx.OptimizerState.for_params([p])
    with pytest.raises(ValueError):
        nx.adamw_step([p], [np.array([1.0])], state, -0.1)
    q = leaf(np.ones(2))
    with pytest.raises(ValueError):
        nx.adamw_step([q], [np.ones(2)], state, 0.1)


def test_weight_decay_only_on_matrices():
    w, b = leaf(np.ones((2, 2))), leaf(np.ones(2))
    opt = nx.AdamW([w, b], weight_decay=0.5)
    opt.step(0.1)  # zero grads: only decay moves anything
    assert np.allclose(w.data, 0.95) and np.array_equal(b.data, np.ones(2))


def test_step_count_increments_by_one():
    p = leaf(np.ones(2))
    opt = nx.AdamW([p])
    for k in range(1, 4):
        p.grad = np.ones(2)
        opt.step(0.01)
        assert opt.state.step_count == k


# ---------------------------------------------------------------- clipping


def test_clip_scales_large_norm():
    g = [np.array([6.0, 8.0])]
    assert nx.clip_grad_norm(g, 1.0) == pytest.approx(10.0)
    assert np.allclose(g[0], [0.6, 0.8])


def test_clip_leaves_small_norm():
    g = [np.array([0.3, 0.4])]
    assert nx.clip_grad_norm(g, 1.0) == pytest.approx(0.5)
    assert np.allclose(g[0], [0.3, 0.4])


def test_clip_multi_tensor_post_norm(rng):
    g = [rng.normal(size=(3, 4)) * 5, rng.normal(size=7) * 5, rng.normal(size=(2, 2, 2)) * 5]
    nx.clip_grad_norm(g, 1.3)
    assert nx.global_norm(g) == pytest.approx(1.3, abs=1e-9)
