"""Model assembly contracts: deterministic init, composition identities,
adapter behavior, schema stability, and prompt-style classification."""

import numpy as np
import pytest

from recyclab import model as M


CFG = M.ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=24,
                    max_seq_len=16, adapter_bottleneck=4, dropout_rate=0.1)


def random_tokens(rng, b=3, s=8, vocab=CFG.vocab_size):
    return rng.integers(M.N_SPECIAL_TOKENS, vocab, size=(b, s))


def logits_of(model, tokens):
    b, s = tokens.shape
    positions = np.stack([np.arange(b), np.full(b, s // 2)], axis=1)
    logits, _, _, _ = M.forward_mlm(model, tokens, positions)
    return logits


# ---------------------------------------------------------------------------
# init


def test_init_deterministic_bitwise():
    a = M.init_params(CFG, seed=7)
    b = M.init_params(CFG, seed=7)
    assert a.equal(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_init_seeds_differ():
    a = M.init_params(CFG, seed=1)
    b = M.init_params(CFG, seed=2)
    assert np.linalg.norm(a.flatten() - b.flatten()) > 0


def test_init_layernorm_gains_are_ones_biases_zero():
    pv = M.init_params(CFG, seed=0)
    for name in pv:
        if name.endswith(".gain"):
            np.testing.assert_array_equal(pv[name], np.ones_like(pv[name]))
        elif name.endswith((".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            np.testing.assert_array_equal(pv[name], np.zeros_like(pv[name]))


def test_init_weights_truncated_at_two_sigma():
    pv = M.init_params(M.ModelConfig(), seed=3)
    w = pv["embed.token"]
    assert np.abs(w).max() <= 2 * 0.02 + 1e-12
    assert 0.015 < w.std() < 0.025


# ---------------------------------------------------------------------------
# flatten / schema


def test_flatten_roundtrip_bitwise():
    pv = M.init_params(CFG, seed=4)
    again = pv.unflatten(pv.flatten())
    assert pv.equal(again)
    assert all(pv[k].tobytes() == again[k].tobytes() for k in pv)


def test_schema_depends_only_on_config():
    assert M.init_params(CFG, seed=0).schema() == M.init_params(CFG, seed=99).schema()
    assert (M.init_adapter_delta(CFG, seed=0).segments.schema()
            == M.init_adapter_delta(CFG, seed=5).segments.schema())


def test_adapter_parameter_fraction_below_five_percent():
    cfg = M.ModelConfig()  # default toy config
    backbone = sum(int(np.prod(s)) for _, s in M.param_schema(cfg))
    adapters = sum(int(np.prod(s)) for _, s in M.adapter_schema(cfg))
    assert adapters / backbone < 0.05


# ---------------------------------------------------------------------------
# composition


def test_compose_zero_full_delta_is_logit_identical():
    rng = np.random.default_rng(0)
    theta = M.init_params(CFG, seed=5)
    tokens = random_tokens(rng)
    base = logits_of(M.compose(theta, None), tokens)
    composed = logits_of(M.compose(theta, M.zero_delta(CFG)), tokens)
    np.testing.assert_array_equal(base, composed)


def test_compose_fresh_adapter_is_identity():
    rng = np.random.default_rng(1)
    theta = M.init_params(CFG, seed=6)
    tokens = random_tokens(rng)
    base = logits_of(M.compose(theta, None), tokens)
    adapted = logits_of(M.compose(theta, M.init_adapter_delta(CFG, seed=11)), tokens)
    np.testing.assert_allclose(adapted, base, atol=1e-12)


def test_compose_all_zero_adapter_is_identity():
    rng = np.random.default_rng(2)
    theta = M.init_params(CFG, seed=6)
    tokens = random_tokens(rng)
    base = logits_of(M.compose(theta, None), tokens)
    adapted = logits_of(M.compose(theta, M.zero_delta(CFG, kind=M.ADAPTER)), tokens)
    np.testing.assert_allclose(adapted, base, atol=1e-12)


def test_compose_does_not_mutate_inputs():
    theta = M.init_params(CFG, seed=7)
    delta = M.zero_delta(CFG)
    delta.segments.segments["embed.token"] += 1.0
    before = theta["embed.token"].copy()
    M.compose(theta, delta)
    np.testing.assert_array_equal(theta["embed.token"], before)


def test_direct_apply_same_delta_to_different_backbones_differs():
    rng = np.random.default_rng(3)
    t0 = M.init_params(CFG, seed=1)
    t1 = M.init_params(CFG, seed=2)
    delta = M.full_delta_from(M.init_params(CFG, seed=3), t0)
    m0, m1 = M.compose(t0, delta), M.compose(t1, delta)
    diffs = 0
    for _ in range(8):
        tokens = random_tokens(rng)
        diffs += int(not np.allclose(logits_of(m0, tokens), logits_of(m1, tokens)))
    assert diffs == 8


def test_compose_schema_mismatch_names_segment():
    theta = M.init_params(CFG, seed=0)
    bad_cfg = M.ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=24,
                            max_seq_len=16, adapter_bottleneck=8)
    bad = M.zero_delta(bad_cfg, kind=M.ADAPTER)
    bad.segments.config = None  # bypass the structure check to hit the schema path
    with pytest.raises(M.CompositionError, match="layer0.attn_adapter.down.w"):
        M.compose(theta, bad)


def test_compose_structure_mismatch_rejected():
    theta = M.init_params(CFG, seed=0)
    other = M.ModelConfig(n_layers=3, n_heads=2, d_model=16, d_ff=32, vocab_size=24,
                          max_seq_len=16, adapter_bottleneck=4)
    with pytest.raises(M.CompositionError):
        M.compose(theta, M.zero_delta(other))


# ---------------------------------------------------------------------------
# forward


def test_forward_eval_deterministic_bitwise():
    rng = np.random.default_rng(4)
    model = M.compose(M.init_params(CFG, seed=8), None)
    tokens = random_tokens(rng)
    a = logits_of(model, tokens)
    b = logits_of(model, tokens)
    assert a.tobytes() == b.tobytes()


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(5)
    model = M.compose(M.init_params(CFG, seed=9), M.init_adapter_delta(CFG, seed=1))
    tokens = random_tokens(rng)
    _, _, _, attn = M.forward_mlm(model, tokens, np.zeros((0, 2), dtype=np.int64))
    for layer_attn in attn:
        assert np.all(layer_attn >= 0)
        np.testing.assert_allclose(layer_attn.sum(axis=-1), 1.0, atol=1e-6)


def test_hidden_states_unit_normalized():
    rng = np.random.default_rng(6)
    model = M.compose(M.init_params(CFG, seed=10), None)
    tokens = random_tokens(rng)
    _, hidden, normed, _ = M.forward_mlm(model, tokens, np.zeros((0, 2), dtype=np.int64))
    assert len(hidden) == len(normed) == CFG.n_layers
    for h in normed:
        np.testing.assert_allclose(np.linalg.norm(h, axis=-1), 1.0, atol=1e-9)


def test_vocab_permutation_permutes_logits():
    rng = np.random.default_rng(7)
    theta = M.init_params(CFG, seed=12)
    perm = rng.permutation(CFG.vocab_size)
    permuted = theta.copy()
    permuted.segments["embed.token"] = theta["embed.token"][perm]
    permuted.segments["head.bias"] = theta["head.bias"][perm]

    tokens = random_tokens(rng)
    # remap input ids so the permuted model sees the same embedding rows
    inv = np.empty_like(perm)
    inv[perm] = np.arange(CFG.vocab_size)
    base = logits_of(M.compose(theta, None), tokens)
    remapped = logits_of(M.compose(permuted, None), inv[tokens])
    np.testing.assert_allclose(remapped, base[:, perm], atol=1e-10)


def test_dropout_only_in_training_mode():
    rng = np.random.default_rng(8)
    model = M.compose(M.init_params(CFG, seed=13), None)
    tokens = random_tokens(rng)
    eval_logits = logits_of(model, tokens)
    b, s = tokens.shape
    positions = np.stack([np.arange(b), np.full(b, s // 2)], axis=1)
    train_logits, _, _, _ = M.forward_mlm(model, tokens, positions, train=True,
                                          dropout_rng=np.random.default_rng(0))
    assert not np.allclose(eval_logits, train_logits)


def test_token_out_of_range_rejected():
    model = M.compose(M.init_params(CFG, seed=0), None)
    bad = np.full((1, 4), CFG.vocab_size)
    with pytest.raises(M.ModelInputError):
        M.forward_mlm(model, bad, np.zeros((0, 2), dtype=np.int64))


def test_sequence_too_long_rejected():
    model = M.compose(M.init_params(CFG, seed=0), None)
    tokens = np.full((1, CFG.max_seq_len + 1), 3)
    with pytest.raises(M.ModelInputError):
        M.forward_mlm(model, tokens, np.zeros((0, 2), dtype=np.int64))


def test_attention_map_extraction_bounds():
    model = M.compose(M.init_params(CFG, seed=0), None)
    tokens = np.arange(2, 10)
    amap = M.attention_map(model, tokens, layer=1, head=0)
    assert amap.weights.shape == (8, 8)
    np.testing.assert_allclose(amap.weights.sum(axis=-1), 1.0, atol=1e-6)
    with pytest.raises(M.ModelInputError):
        M.attention_map(model, tokens, layer=CFG.n_layers, head=0)


# ---------------------------------------------------------------------------
# classification


def make_example(rng, s=8, mask_at=3):
    tokens = rng.integers(M.N_SPECIAL_TOKENS, CFG.vocab_size, size=s)
    tokens[mask_at] = M.MASK_TOKEN
    return tokens, mask_at


def test_classify_tie_breaks_to_lowest_label():
    rng = np.random.default_rng(9)
    theta = M.init_params(CFG, seed=14)
    # force two verbalizer tokens to be indistinguishable to the head
    theta.segments["embed.token"][5] = theta["embed.token"][4]
    theta.segments["head.bias"][5] = theta["head.bias"][4]
    model = M.compose(theta, None)
    tokens, pos = make_example(rng)
    pred, dist = M.classify(model, tokens, pos, {0: 4, 1: 5})
    assert pred == 0
    np.testing.assert_allclose(dist, [0.5, 0.5], atol=1e-12)


def test_classify_single_label_always_wins():
    rng = np.random.default_rng(10)
    model = M.compose(M.init_params(CFG, seed=15), None)
    for _ in range(3):
        tokens, pos = make_example(rng)
        pred, dist = M.classify(model, tokens, pos, {7: 9})
        assert pred == 7
        np.testing.assert_allclose(dist, [1.0])


def test_restricted_distribution_matches_renormalized_full_softmax():
    rng = np.random.default_rng(11)
    model = M.compose(M.init_params(CFG, seed=16), None)
    tokens, pos = make_example(rng)
    verb = {0: 4, 1: 9, 2: 17}
    _, dist = M.classify(model, tokens, pos, verb)

    logits, _, _, _ = M.forward_mlm(model, tokens[None, :], np.array([[0, pos]]))
    full = np.exp(logits[0] - logits[0].max())
    full /= full.sum()
    expected = full[[4, 9, 17]] / full[[4, 9, 17]].sum()
    np.testing.assert_allclose(dist, expected, atol=1e-12)


def test_classify_requires_exactly_one_mask():
    rng = np.random.default_rng(12)
    model = M.compose(M.init_params(CFG, seed=17), None)
    tokens, pos = make_example(rng)
    tokens[0] = M.MASK_TOKEN  # second mask
    with pytest.raises(M.ModelInputError):
        M.classify(model, tokens, pos, {0: 4, 1: 5})
    no_mask = np.where(tokens == M.MASK_TOKEN, 3, tokens)
    with pytest.raises(M.ModelInputError):
        M.classify(model, no_mask, pos, {0: 4, 1: 5})


def test_verbalizer_token_collision_rejected():
    with pytest.raises(M.ModelInputError):
        M.verbalizer_tokens({0: 4, 1: 4})
