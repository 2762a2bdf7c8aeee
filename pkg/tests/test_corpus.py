"""Synthetic corpus and task generation: determinism, distributional
sanity, rule consistency, and the k-shot nesting contract."""

import numpy as np
import pytest
from scipy import stats

from recyclab import corpus as C
from recyclab.model import MASK_TOKEN, N_SPECIAL_TOKENS


BASE = C.DomainSpec("d0", block_index=0, overlap=1.0, vocab_size=256, n_blocks=8, seed=0)


def domain(idx, overlap, seed=0):
    return C.DomainSpec(f"d{idx}", block_index=idx, overlap=overlap,
                        vocab_size=256, n_blocks=8, seed=seed)


# ---------------------------------------------------------------------------
# domains


def test_transition_rows_are_distributions():
    spec = domain(1, 0.3)
    t = spec.transition
    assert np.all(t >= 0)
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)


def test_corpus_deterministic():
    spec = domain(2, 0.5)
    a = C.generate_domain_corpus(spec, 5000, seed=3)
    b = C.generate_domain_corpus(spec, 5000, seed=3)
    np.testing.assert_array_equal(a, b)
    c = C.generate_domain_corpus(spec, 5000, seed=4)
    assert not np.array_equal(a, c)


def test_full_overlap_matches_base_unigram():
    spec = domain(3, 1.0)
    np.testing.assert_allclose(spec.marginal, BASE.marginal, atol=1e-15)


def test_zero_overlap_partitions_disjoint():
    spec = domain(3, 0.0)
    assert not set(spec.high_mass_tokens.tolist()) & set(BASE.high_mass_tokens.tolist())


def test_overlap_monotonically_controls_shared_mass():
    shared = [domain(4, w).marginal[BASE.own_block].sum() for w in (0.0, 0.25, 0.5, 0.75, 1.0)]
    assert all(a < b for a, b in zip(shared, shared[1:]))


def test_unigram_chi_square_at_100k_tokens():
    spec = domain(1, 0.3)
    stream = C.generate_domain_corpus(spec, 100_000, seed=7)
    counts = np.bincount(stream, minlength=spec.vocab_size)
    expected = spec.marginal * stream.size
    keep = expected >= 5
    # renormalize over kept categories for a valid test
    obs, exp = counts[keep], expected[keep]
    exp = exp * obs.sum() / exp.sum()
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_domain_separation_nearest_centroid():
    domains = [domain(i, 0.3, seed=i) for i in range(1, 5)]
    centroids = np.stack([d.marginal for d in domains])
    hits = total = 0
    for di, d in enumerate(domains):
        stream = C.generate_domain_corpus(d, 256 * 40, seed=10 + di)
        for w in stream.reshape(40, 256):
            freq = np.bincount(w, minlength=d.vocab_size) / w.size
            hits += int(np.argmin(((centroids - freq) ** 2).sum(axis=1)) == di)
            total += 1
    assert hits / total >= 0.95


def test_stream_tokens_never_special():
    stream = C.generate_domain_corpus(domain(1, 0.3), 20000, seed=1)
    assert stream.min() >= N_SPECIAL_TOKENS


# ---------------------------------------------------------------------------
# tasks


TASKS = [C.TaskSpec(f"t_{fam}", domain(2, 0.3), fam, seed=1) for fam in C.FAMILIES]


@pytest.mark.parametrize("spec", TASKS, ids=[t.family for t in TASKS])
def test_rule_oracle_scores_100_percent(spec):
    splits = C.make_task_dataset(spec, 80, seed=5)
    neutral = spec.domain.vocab_size - 1  # top-of-vocab remainder: never a marker
    assert neutral not in spec.markers
    for ds in splits.values():
        for i in range(len(ds)):
            toks = ds.tokens[i].copy()
            toks[ds.mask_pos[i]] = neutral  # restore a filler before applying the rule
            assert C.rule_label(spec, toks) == ds.labels[i]


@pytest.mark.parametrize("spec", TASKS, ids=[t.family for t in TASKS])
def test_exactly_one_mask_per_example(spec):
    splits = C.make_task_dataset(spec, 40, seed=6)
    for ds in splits.values():
        assert np.all((ds.tokens == MASK_TOKEN).sum(axis=1) == 1)
        assert np.all(ds.tokens[np.arange(len(ds)), ds.mask_pos] == MASK_TOKEN)


def test_splits_disjoint_and_balanced():
    spec = TASKS[0]
    splits = C.make_task_dataset(spec, 41, seed=7)
    seen = set()
    for ds in splits.values():
        for row in ds.tokens:
            key = row.tobytes()
            assert key not in seen
            seen.add(key)
        counts = np.bincount(ds.labels)
        assert abs(int(counts[0]) - int(counts[1])) <= 1


def test_dataset_deterministic_across_calls():
    spec = TASKS[1]
    a = C.make_task_dataset(spec, 30, seed=8)["train"]
    b = C.make_task_dataset(spec, 30, seed=8)["train"]
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.mask_pos, b.mask_pos)


def test_two_seeds_same_label_marginals():
    spec = TASKS[2]
    a = C.make_task_dataset(spec, 30, seed=1)["train"]
    b = C.make_task_dataset(spec, 30, seed=2)["train"]
    assert not np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(np.bincount(a.labels), np.bincount(b.labels))


def test_markers_live_in_domain_high_mass_partition():
    for spec in TASKS:
        assert set(spec.markers) <= set(spec.domain.high_mass_tokens.tolist())


def test_same_family_tasks_share_rule_form_not_markers():
    d = domain(2, 0.3)
    a = C.TaskSpec("task_a", d, "presence", seed=1)
    b = C.TaskSpec("task_b", d, "presence", seed=1)
    assert a.verbalizer == b.verbalizer
    assert set(a.markers) != set(b.markers)


# ---------------------------------------------------------------------------
# k-shot


def test_kshot_nested_and_exact():
    spec = TASKS[0]
    ds = C.make_task_dataset(spec, 100, seed=9)["train"]
    k32 = C.sample_kshot(ds, 32, seed=3)
    k16 = C.sample_kshot(ds, 16, seed=3)
    assert len(k32) == 64 and len(k16) == 32
    for label in (0, 1):
        assert int((k32.labels == label).sum()) == 32
        assert int((k16.labels == label).sum()) == 16
    keys32 = {r.tobytes() for r in k32.tokens}
    assert all(r.tobytes() in keys32 for r in k16.tokens)


def test_kshot_full_size_is_identity():
    spec = TASKS[1]
    ds = C.make_task_dataset(spec, 20, seed=10)["train"]
    full = C.sample_kshot(ds, 10, seed=0)
    np.testing.assert_array_equal(np.sort(full.tokens, axis=0), np.sort(ds.tokens, axis=0))


def test_kshot_too_large_rejected():
    ds = C.make_task_dataset(TASKS[1], 20, seed=11)["train"]
    with pytest.raises(C.DataError):
        C.sample_kshot(ds, 11, seed=0)


# ---------------------------------------------------------------------------
# masking


def test_mask_rate_monte_carlo():
    rng = np.random.default_rng(0)
    batch = rng.integers(N_SPECIAL_TOKENS, 256, size=(400, 250))  # 1e5 tokens
    _, positions, _ = C.mlm_mask(batch, 0.15, seed=1, vocab_size=256)
    rate = positions.shape[0] / batch.size
    assert abs(rate - 0.15) < 0.005


def test_mask_corruption_split():
    rng = np.random.default_rng(1)
    batch = rng.integers(N_SPECIAL_TOKENS, 256, size=(400, 250))
    corrupted, positions, targets = C.mlm_mask(batch, 0.15, seed=2, vocab_size=256)
    vals = corrupted[positions[:, 0], positions[:, 1]]
    frac_mask = np.mean(vals == MASK_TOKEN)
    frac_kept = np.mean(vals == targets)
    assert abs(frac_mask - 0.8) < 0.02
    # kept fraction includes random draws that happen to hit the target
    assert abs(frac_kept - 0.1) < 0.02
    untouched = np.ones(batch.shape, dtype=bool)
    untouched[positions[:, 0], positions[:, 1]] = False
    np.testing.assert_array_equal(corrupted[untouched], batch[untouched])


def test_mask_deterministic():
    batch = np.random.default_rng(2).integers(2, 256, size=(8, 32))
    a = C.mlm_mask(batch, 0.15, seed=5, vocab_size=256)
    b = C.mlm_mask(batch, 0.15, seed=5, vocab_size=256)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_mask_zero_selection_allowed():
    batch = np.full((2, 4), 0)  # all PAD: nothing selectable
    corrupted, positions, targets = C.mlm_mask(batch, 0.15, seed=0, vocab_size=256)
    assert positions.shape == (0, 2) and targets.size == 0
    np.testing.assert_array_equal(corrupted, batch)


# ---------------------------------------------------------------------------
# records


def test_record_roundtrip(tmp_path):
    ds = C.make_task_dataset(TASKS[2], 10, seed=12)["test"]
    path = tmp_path / "records.jsonl"
    C.write_records(ds, path)
    records = C.read_records(path)
    assert len(records) == len(ds)
    for i, rec in enumerate(records):
        assert rec["tokens"] == ds.tokens[i].tolist()
        assert rec["mask"] == int(ds.mask_pos[i])
        assert rec["label"] == int(ds.labels[i])
