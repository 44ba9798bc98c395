import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergeflow.nn import (ParameterStore, Tensor, TrainingNumericsError,
                          adam_update, clip_grads, load_checkpoint, ops,
                          save_checkpoint)
from conftest import fd_gradient


def rng_for(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- basic ops

def test_layer_norm_constant_row_is_bias():
    x = Tensor(np.full((3, 5), 4.2))
    gain = Tensor(rng_for(0).standard_normal(5))
    bias = Tensor(rng_for(1).standard_normal(5))
    out = ops.layer_norm(x, gain, bias)
    assert np.allclose(out.data, np.broadcast_to(bias.data, (3, 5)), atol=1e-9)


def test_residual_add_identity():
    x = Tensor(rng_for(2).standard_normal((4, 3)))
    out = ops.residual_add(x, Tensor(np.zeros((4, 3))))
    assert np.array_equal(out.data, x.data)


def test_affine_gradient_matches_finite_differences():
    rng = rng_for(3)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    assert fd_gradient(lambda: ops.affine(x, w, b), [x, w, b], h=1e-5) < 1e-6


def test_layer_norm_gradient():
    rng = rng_for(4)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    g = Tensor(rng.standard_normal(6), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    assert fd_gradient(lambda: ops.layer_norm(x, g, b), [x, g, b]) < 1e-5


# ---------------------------------------------------------------- attention

def test_attention_singleton_mask_returns_value_row():
    rng = rng_for(5)
    q = Tensor(rng.standard_normal((3, 4)))
    k = Tensor(rng.standard_normal((6, 4)))
    v = Tensor(rng.standard_normal((6, 4)))
    mask = np.zeros((3, 6), dtype=bool)
    mask[0, 2] = mask[1, 5] = mask[2, 0] = True
    out = ops.masked_attention(q, k, v, mask)
    assert np.array_equal(out.data[0], v.data[2])
    assert np.array_equal(out.data[1], v.data[5])
    assert np.array_equal(out.data[2], v.data[0])


def test_attention_uniform_is_mean_of_values():
    rng = rng_for(6)
    q = Tensor(np.ones((2, 4)))
    k = Tensor(np.ones((5, 4)))
    v = Tensor(rng.standard_normal((5, 4)))
    out = ops.masked_attention(q, k, v, np.ones((2, 5), dtype=bool))
    assert np.allclose(out.data, v.data.mean(axis=0), atol=1e-12)


def test_attention_gradient():
    rng = rng_for(7)
    q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    assert fd_gradient(lambda: ops.masked_attention(q, k, v, mask), [q, k, v]) < 1e-5


def test_attention_masked_rows_isolated_bitwise():
    """Perturbing a value row masked everywhere leaves the output identical."""
    rng = rng_for(8)
    q = Tensor(rng.standard_normal((3, 4)))
    k = Tensor(rng.standard_normal((5, 4)))
    v_data = rng.standard_normal((5, 4))
    mask = np.ones((3, 5), dtype=bool)
    mask[:, 2] = False
    base = ops.masked_attention(q, k, Tensor(v_data), mask).data
    v_data2 = v_data.copy()
    v_data2[2] += 1e6
    k2 = k.data.copy()
    k2[2] -= 3e5
    again = ops.masked_attention(Tensor(q.data), Tensor(k2), Tensor(v_data2), mask).data
    assert np.array_equal(base, again)


def test_attention_all_false_row_zero():
    rng = rng_for(9)
    q = Tensor(rng.standard_normal((2, 3)))
    kv = Tensor(rng.standard_normal((4, 3)))
    mask = np.zeros((2, 4), dtype=bool)
    mask[0, 1] = True
    out = ops.masked_attention(q, kv, kv, mask)
    assert np.array_equal(out.data[1], np.zeros(3))


# ---------------------------------------------------------------- masked softmax

def test_masked_softmax_uniform():
    valid = np.array([True, True, False, True, True, False])
    p = ops.masked_softmax(Tensor(np.zeros(6)), valid)
    assert np.array_equal(p.data[~valid], np.zeros(2))
    assert np.allclose(p.data[valid], 0.25, atol=1e-15)


def test_masked_softmax_single_valid():
    valid = np.zeros(6, dtype=bool)
    valid[3] = True
    p = ops.masked_softmax(Tensor(rng_for(10).standard_normal(6)), valid)
    assert p.data[3] == 1.0
    assert p.data.sum() == 1.0


def test_masked_softmax_matches_subvector_oracle():
    rng = rng_for(11)
    logits = rng.standard_normal(6)
    valid = np.array([True, True, False, True, False, True])
    p = ops.masked_softmax(Tensor(logits), valid)
    sub = logits[valid]
    oracle = np.exp(sub - sub.max())
    oracle /= oracle.sum()
    assert np.allclose(p.data[valid], oracle, atol=1e-12)
    assert np.all(p.data[~valid] == 0.0)


def test_masked_probabilities_exactly_zero():
    rng = rng_for(12)
    logits = Tensor(rng.standard_normal((8, 6)) * 5)
    valid = rng.random((8, 6)) < 0.5
    valid[:, 0] = True
    p = ops.masked_softmax(logits, valid)
    assert np.all(p.data[~valid] == 0.0)
    sums = p.data.sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-12)


# ---------------------------------------------------------------- categorical

def test_entropy_uniform_is_log4():
    p = ops.masked_softmax(Tensor(np.zeros(4)), np.ones(4, dtype=bool))
    assert ops.categorical_entropy(p.data) == pytest.approx(np.log(4.0), abs=1e-12)


def test_degenerate_distribution():
    probs = np.array([0.0, 1.0, 0.0])
    assert ops.categorical_entropy(probs) == 0.0
    assert ops.categorical_log_prob(probs, 1) == 0.0
    with pytest.raises(ValueError):
        ops.categorical_log_prob(probs, 0)


def test_sample_frequencies_match_probabilities():
    probs = np.array([0.1, 0.25, 0.05, 0.6])
    rng = rng_for(13)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[ops.categorical_sample(probs, rng)] += 1
    for i, p in enumerate(probs):
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts[i] - n * p) <= 3 * sigma


def test_entropy_rows_gradient():
    rng = rng_for(14)
    logits = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    valid = np.ones((3, 5), dtype=bool)
    valid[1, 2:] = False
    assert fd_gradient(lambda: ops.entropy_rows(ops.masked_softmax(logits, valid)),
                       [logits]) < 1e-6


# ---------------------------------------------------------------- pooling

def test_sum_pool_all_false_is_zero():
    x = Tensor(rng_for(15).standard_normal((4, 3)))
    assert np.array_equal(ops.sum_pool(x, np.zeros(4, dtype=bool)).data, np.zeros(3))


def test_sum_pool_one_hot_selects_row():
    x = Tensor(rng_for(16).standard_normal((4, 3)))
    mask = np.array([False, False, True, False])
    assert np.array_equal(ops.sum_pool(x, mask).data, x.data[2])


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=255),
       st.integers(min_value=0, max_value=10_000))
def test_sum_pool_permutation_commutes(rows, mask_bits, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, 3))
    mask = np.array([(mask_bits >> i) & 1 == 1 for i in range(rows)])
    perm = rng.permutation(rows)
    a = ops.sum_pool(Tensor(x), mask).data
    b = ops.sum_pool(Tensor(x[perm]), mask[perm]).data
    assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradients_no_change():
    store = ParameterStore(seed=1)
    store.add("w", (4, 4))
    before = store.params["w"].copy()
    adam_update(store, {"w": np.zeros((4, 4), dtype=np.float32)}, lr=1e-2)
    assert np.array_equal(store.params["w"], before)


def test_adam_descends_quadratic():
    store = ParameterStore(seed=2, dtype=np.float64)
    store.add("w", (1,), init="ones")
    for _ in range(5):
        w = store.params["w"]
        adam_update(store, {"w": 2.0 * w}, lr=0.05)  # d/dw w^2
    assert store.params["w"][0] < 1.0


def test_adam_reaches_quadratic_minimum():
    """200 steps on a random 5-d convex quadratic: gradient norm < 1e-3."""
    rng = rng_for(17)
    a = rng.standard_normal((5, 5))
    quad = a @ a.T + 5.0 * np.eye(5)
    b = rng.standard_normal(5)
    store = ParameterStore(seed=3, dtype=np.float64)
    store.add("w", (5,), init="zeros")
    for _ in range(200):
        w = store.params["w"]
        adam_update(store, {"w": quad @ w - b}, lr=0.1)
    grad = quad @ store.params["w"] - b
    assert np.linalg.norm(grad) < 1e-3
    w_star = np.linalg.solve(quad, b)  # closed-form minimum oracle
    assert np.allclose(store.params["w"], w_star, atol=1e-3)


def test_adam_rejects_nonfinite_gradient():
    store = ParameterStore(seed=4)
    store.add("layer.w", (2,))
    with pytest.raises(TrainingNumericsError, match="layer.w"):
        adam_update(store, {"layer.w": np.array([np.nan, 1.0])}, lr=1e-3)


def test_grad_clip_rescales():
    grads = {"a": np.array([3.0, 4.0])}
    clipped = clip_grads(grads, 0.5)
    assert np.isclose(np.linalg.norm(clipped["a"]), 0.5)
    small = {"a": np.array([0.1, 0.0])}
    assert clip_grads(small, 0.5)["a"] is small["a"]


# ---------------------------------------------------------------- store

def test_store_init_deterministic():
    a = ParameterStore(seed=5)
    b = ParameterStore(seed=5)
    for s in (a, b):
        s.add("w", (3, 3))
        s.add("b", (3,), init="zeros")
    assert np.array_equal(a.params["w"], b.params["w"])
    c = ParameterStore(seed=6)
    c.add("w", (3, 3))
    assert not np.array_equal(a.params["w"], c.params["w"])


def test_store_rejects_duplicates():
    s = ParameterStore(seed=0)
    s.add("w", (2,))
    with pytest.raises(ValueError):
        s.add("w", (2,))


def test_checkpoint_roundtrip(tmp_path):
    store = ParameterStore(seed=7)
    store.add("w", (4, 2))
    store.add("b", (2,), init="zeros")
    adam_update(store, {"w": np.ones((4, 2), dtype=np.float32),
                        "b": np.ones(2, dtype=np.float32)}, lr=1e-3)
    path = tmp_path / "ck.mfck"
    save_checkpoint(path, store, extra={"note": 1})
    again, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    assert again.step == store.step
    for name in store.params:
        assert np.array_equal(again.params[name], store.params[name])
        assert np.array_equal(again.m[name], store.m[name])
        assert np.array_equal(again.v[name], store.v[name])


def test_checkpoint_bytes_stable(tmp_path):
    store = ParameterStore(seed=8)
    store.add("w", (3, 3))
    p1, p2 = tmp_path / "a.mfck", tmp_path / "b.mfck"
    save_checkpoint(p1, store, extra={})
    save_checkpoint(p2, store, extra={})
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------- composite gradient

def test_composite_graph_gradient_randomized():
    """Chained primitives pass central finite differences on random shapes."""
    rng = rng_for(18)
    for trial in range(3):
        x = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
        g = Tensor(rng.standard_normal(5), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)
        mask = rng.random((3, 4, 4)) < 0.7
        mask[:, np.arange(4), np.arange(4)] = True

        def build():
            t = ops.affine(x, w, b)
            t = ops.layer_norm(t, g, b)
            t = ops.masked_attention(t, t, t, mask)
            t = ops.relu(t)
            return ops.sum_pool(t, mask[:, :, 0])

        assert fd_gradient(build, [x, w, g, b]) < 1e-5
