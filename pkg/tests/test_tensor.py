"""Kernel-level correctness: exact identities, stability, and the
finite-difference gradient oracle applied to every registered kernel."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recyclab import tensor as T


def leafs(tape, *arrays):
    return [tape.leaf(np.asarray(a, dtype=np.float64), trainable=True) for a in arrays]


# ---------------------------------------------------------------------------
# exact forward identities


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    t = T.Tape()
    out = T.matmul(t.leaf(np.eye(3)), t.leaf(a))
    np.testing.assert_array_equal(out.value, a)


def test_softmax_symmetry():
    t = T.Tape()
    out = T.softmax(t.leaf(np.array([0.0, 0.0])), axis=-1)
    np.testing.assert_allclose(out.value, [0.5, 0.5], rtol=0, atol=0)


def test_layer_norm_hand_value():
    # (x - mean)/sqrt(pop var): mean 2, var 2/3 -> +-1/sqrt(2/3) = +-1.224745
    t = T.Tape()
    out = T.layer_norm(t.leaf(np.array([1.0, 2.0, 3.0])), np.ones(3), np.zeros(3), eps=0.0)
    np.testing.assert_allclose(out.value, [-1.2247448714, 0.0, 1.2247448714], atol=1e-9)
    assert abs(out.value.mean()) < 1e-12
    assert abs(out.value.var() - 1.0) < 1e-12


def test_softmax_rows_sum_to_one_with_large_inputs():
    rng = np.random.default_rng(1)
    for scale in (1.0, 1e2, 1e6, 1e300):
        x = rng.normal(size=(5, 7)) * scale
        t = T.Tape()
        p = T.softmax(t.leaf(x), axis=-1).value
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_cross_entropy_uniform_logits():
    t = T.Tape()
    loss = T.cross_entropy(t.leaf(np.array([0.0, 0.0])), 0)
    np.testing.assert_allclose(loss.value, np.log(2.0), atol=1e-12)


def test_kl_zero_on_identical_distributions():
    rng = np.random.default_rng(2)
    for _ in range(5):
        p = rng.dirichlet(np.ones(6))
        t = T.Tape()
        kl = T.kl_divergence(p, T.log_softmax(t.leaf(np.log(p)), axis=-1))
        assert abs(float(kl.value)) < 1e-10


def test_kl_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        q_logits = rng.normal(size=5)
        t = T.Tape()
        kl = float(T.kl_divergence(p, T.log_softmax(t.leaf(q_logits), axis=-1)).value)
        assert kl >= -1e-12
        q = np.exp(q_logits - q_logits.max())
        q /= q.sum()
        if np.max(np.abs(p - q)) > 1e-3:
            assert kl > 0


def test_kl_rejects_unnormalized():
    t = T.Tape()
    lq = T.log_softmax(t.leaf(np.zeros(3)), axis=-1)
    with pytest.raises(T.InputError):
        T.kl_divergence(np.array([0.5, 0.5, 0.5]), lq)


def test_mse_zero_on_equal():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 4))
    t = T.Tape()
    assert float(T.mse(t.leaf(a), t.leaf(a.copy())).value) == 0.0


# ---------------------------------------------------------------------------
# backward basics


def test_backward_square():
    t = T.Tape()
    x = t.leaf(np.array(3.0), trainable=True)
    g = t.backward(T.mul(x, x))
    np.testing.assert_allclose(g[x.nid], 6.0)


def test_backward_softmax_sum_is_constant():
    t = T.Tape()
    x = t.leaf(np.array([0.3, -1.2, 2.0]), trainable=True)
    root = T.sum_all(T.softmax(x, axis=-1))
    g = t.backward(root)
    np.testing.assert_allclose(g[x.nid], np.zeros(3), atol=1e-15)


def test_backward_rejects_nonscalar_root():
    t = T.Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(T.UsageError):
        t.backward(T.scale(x, 2.0))


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(4, 4))
    x = rng.normal(size=(2, 4))

    def run():
        t = T.Tape()
        wt = t.leaf(w.copy(), trainable=True)
        h = T.gelu(T.matmul(t.leaf(x.copy()), wt))
        root = T.mean_all(T.mul(h, h))
        return t.backward(root)[wt.nid]

    g1, g2 = run(), run()
    assert g1.tobytes() == g2.tobytes()


def test_gradients_cover_reachable_nodes_with_matching_shapes():
    t = T.Tape()
    x = t.leaf(np.ones((2, 3)), trainable=True)
    y = T.gelu(x)
    z = T.sum_all(y)
    g = t.backward(z)
    for node_t in (x, y, z):
        assert g[node_t.nid].shape == node_t.value.shape


def test_constant_operands_stay_out_of_gradient_map():
    t = T.Tape()
    x = t.leaf(np.ones((2, 2)), trainable=True)
    frozen = np.full((2, 2), 3.0)  # baked constant, never becomes a node
    root = T.sum_all(T.mul(x, frozen))
    g = t.backward(root)
    assert len(t.nodes) == 3  # leaf, mul, sum_all
    assert set(g) == {0, 1, 2}
    np.testing.assert_array_equal(g[x.nid], frozen)


def test_debug_mode_flags_nonfinite_with_node_id():
    t = T.Tape(debug=True)
    x = t.leaf(np.array([1.0, -1.0]))
    with pytest.raises(T.NumericError, match=r"node \d+"):
        T.log_softmax(T.scale(x, np.inf), axis=-1)


def test_shape_mismatch_names_both_shapes():
    t = T.Tape()
    a = t.leaf(np.ones((2, 3)))
    b = t.leaf(np.ones((4, 5)))
    with pytest.raises(T.ShapeMismatch, match=r"2, 3.*4, 5"):
        T.matmul(a, b)


# ---------------------------------------------------------------------------
# finite-difference oracle on itself


def test_finite_diff_exact_quadratic():
    rng = np.random.default_rng(6)
    theta = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}

    def half_sq_norm(tape, ts):
        total = T.sum_all(T.mul(ts["w"], ts["w"]))
        total = T.add(total, T.sum_all(T.mul(ts["b"], ts["b"])))
        return T.scale(total, 0.5)

    assert T.finite_diff_check(half_sq_norm, theta, h=1e-5) < 1e-8


def test_finite_diff_constant_function():
    def const(tape, ts):
        return T.scale(T.sum_all(T.mul(ts["x"], 0.0)), 1.0)

    assert T.finite_diff_check(const, {"x": np.ones(4)}, h=1e-5) == 0.0


def test_finite_diff_one_layer_model_two_step_sizes_agree():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5))
    targets = np.array([1, 3])
    theta = {"w": rng.normal(size=(5, 4)) * 0.5, "b": np.zeros(4)}

    def f(tape, ts):
        logits = T.add(T.matmul(x, ts["w"]), ts["b"])
        return T.cross_entropy(logits, targets)

    assert T.finite_diff_check(f, theta, h=1e-5) < 1e-4
    assert T.finite_diff_check(f, theta, h=1e-6) < 1e-4


def test_finite_diff_two_layer_mlp():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 6))
    targets = np.array([0, 2, 1])
    theta = {
        "w1": rng.normal(size=(6, 8)) * 0.4,
        "b1": rng.normal(size=8) * 0.1,
        "w2": rng.normal(size=(8, 4)) * 0.4,
        "b2": np.zeros(4),
    }

    def f(tape, ts):
        h = T.gelu(T.add(T.matmul(x, ts["w1"]), ts["b1"]))
        logits = T.add(T.matmul(h, ts["w2"]), ts["b2"])
        return T.cross_entropy(logits, targets)

    assert T.finite_diff_check(f, theta, h=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# every kernel passes the gradient oracle (property over >= 10 seeds)


def _kernel_cases(rng):
    """Scalar-rooted deterministic functions exercising every kernel."""
    x23 = rng.normal(size=(2, 3))
    x34 = rng.normal(size=(3, 4))
    x3 = rng.normal(size=3)
    xb = rng.normal(size=(2, 2, 3))
    probs = rng.dirichlet(np.ones(4), size=2)
    ids = np.array([1, 0, 1])
    targets = np.array([2, 0])
    w23 = rng.normal(size=(2, 3))
    w24 = rng.normal(size=(2, 4))
    w6 = rng.normal(size=6)
    w33 = rng.normal(size=(3, 3))
    return {
        "add": ({"a": x23, "b": rng.normal(size=3)},
                lambda t, s: T.sum_all(T.mul(T.add(s["a"], s["b"]), w23))),
        "sub": ({"a": x23, "b": x23 * 0.5},
                lambda t, s: T.mean_all(T.mul(T.sub(s["a"], s["b"]), s["a"]))),
        "mul": ({"a": x23, "b": rng.normal(size=(2, 3))},
                lambda t, s: T.sum_all(T.mul(s["a"], s["b"]))),
        "scale": ({"a": x23}, lambda t, s: T.sum_all(T.scale(s["a"], -1.7))),
        "affine": ({"a": x23},
                   lambda t, s: T.sum_all(T.mul(T.affine(s["a"], 0.3, np.ones((2, 3))), s["a"]))),
        "gelu": ({"a": x23}, lambda t, s: T.sum_all(T.mul(T.gelu(s["a"]), w23))),
        "matmul": ({"a": x23, "b": x34},
                   lambda t, s: T.mean_all(T.mul(T.matmul(s["a"], s["b"]), w24))),
        "matmul_batched": ({"a": xb, "b": rng.normal(size=(2, 3, 2))},
                           lambda t, s: T.sum_all(T.matmul(s["a"], s["b"]))),
        "transpose": ({"a": x23},
                      lambda t, s: T.sum_all(T.mul(T.transpose(s["a"], (1, 0)), x23.T))),
        "reshape": ({"a": x23},
                    lambda t, s: T.sum_all(T.mul(T.reshape(s["a"], (6,)), w6))),
        "take_rows": ({"a": x23},
                      lambda t, s: T.sum_all(T.mul(T.take_rows(s["a"], ids), w33))),
        "slice1d": ({"a": x3}, lambda t, s: T.sum_all(T.mul(T.slice1d(s["a"], 1, 3), np.array([0.7, -0.2])))),
        "layer_norm": ({"x": x23, "g": 1.0 + 0.1 * rng.normal(size=3), "b": rng.normal(size=3)},
                       lambda t, s: T.sum_all(T.mul(T.layer_norm(s["x"], s["g"], s["b"]), w23))),
        "softmax": ({"x": x23},
                    lambda t, s: T.sum_all(T.mul(T.softmax(s["x"], -1), w23))),
        "log_softmax": ({"x": x23},
                        lambda t, s: T.sum_all(T.mul(T.log_softmax(s["x"], -1), w23))),
        "unit_normalize": ({"x": x23},
                           lambda t, s: T.sum_all(T.mul(T.unit_normalize(s["x"]), w23))),
        "cross_entropy": ({"x": rng.normal(size=(2, 4))}, lambda t, s: T.cross_entropy(s["x"], targets)),
        "kl_divergence": ({"x": rng.normal(size=(2, 4))},
                          lambda t, s: T.kl_divergence(probs, T.log_softmax(s["x"], -1))),
        "mse": ({"a": x23, "b": rng.normal(size=(2, 3))}, lambda t, s: T.mse(s["a"], s["b"])),
    }


@pytest.mark.parametrize("seed", range(10))
def test_every_kernel_passes_gradient_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    for name, (params, f) in _kernel_cases(rng).items():
        err = T.finite_diff_check(f, params, h=1e-5)
        assert err < 1e-4, f"kernel {name}: max rel grad error {err:.3e}"


# ---------------------------------------------------------------------------
# hypothesis properties


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8))
def test_softmax_is_distribution(xs):
    t = T.Tape()
    p = T.softmax(t.leaf(np.array(xs)), axis=-1).value
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=2**31 - 1))
def test_kl_gibbs_inequality(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    t = T.Tape()
    lq = T.log_softmax(t.leaf(rng.normal(size=n)), axis=-1)
    assert float(T.kl_divergence(p, lq).value) >= -1e-12
