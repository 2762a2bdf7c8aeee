"""Deterministic synthetic corpora and downstream classification tasks.

Domains are bigram Markov chains over a shared vocabulary. Each domain
concentrates most unigram mass on a signature block of tokens, mixed with
the base domain's block according to an overlap coefficient, so domain
relevance and drift are controllable knobs. Bigram structure comes from a
per-domain successor cycle: with fixed probability the next token is the
current token's successor, otherwise an independent draw from the domain
marginal. Successor cycles permute tokens only within equal-probability
classes, which keeps the chain's stationary distribution exactly equal to
the marginal.

Tasks are binary classifications decided by a latent marker rule, one rule
form per family:

  order     the two marker tokens appear side by side; label = their
            orientation (inference-style tasks)
  presence  exactly one of two marker tokens appears (sentiment-style)
  position  a doubled marker token sits in the first or second half of the
            sequence (emotion-style); the skill transfers across marker
            identity within the family

Every example carries one mask slot; labels map to verbalizer tokens that
are shared across a family. Generation is pure: (spec, seed) -> output.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import MASK_TOKEN, N_SPECIAL_TOKENS


FAMILIES = ("order", "presence", "position")

_HIGH_MASS = 0.75
_STAY_PROB = 0.5


class CorpusError(Exception):
    """Invalid corpus or task specification."""


class DataError(Exception):
    """Dataset request cannot be satisfied (e.g. k-shot too large)."""


def _block(index: int, vocab_size: int, n_blocks: int) -> np.ndarray:
    regular = vocab_size - N_SPECIAL_TOKENS
    width = regular // n_blocks
    lo = N_SPECIAL_TOKENS + index * width
    return np.arange(lo, lo + width)


@dataclass(frozen=True)
class DomainSpec:
    """Generating parameters of one synthetic domain."""

    domain_id: str
    block_index: int
    overlap: float            # shared high-mass fraction with the base domain
    vocab_size: int = 512
    n_blocks: int = 8
    seed: int = 0
    base_block_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise CorpusError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 0 <= self.block_index < self.n_blocks:
            raise CorpusError(f"block_index {self.block_index} outside [0, {self.n_blocks})")

    @cached_property
    def own_block(self) -> np.ndarray:
        return _block(self.block_index, self.vocab_size, self.n_blocks)

    @cached_property
    def base_block(self) -> np.ndarray:
        return _block(self.base_block_index, self.vocab_size, self.n_blocks)

    @cached_property
    def high_mass_tokens(self) -> np.ndarray:
        """Tokens carrying the concentrated share of unigram mass."""
        if self.overlap >= 1.0 or self.block_index == self.base_block_index:
            return self.base_block
        if self.overlap <= 0.0:
            return self.own_block
        return np.concatenate([self.own_block, self.base_block])

    @cached_property
    def marginal(self) -> np.ndarray:
        """Target unigram distribution; also the chain's stationary law."""
        v = self.vocab_size
        m = np.zeros(v)
        regular = np.arange(N_SPECIAL_TOKENS, v)
        m[regular] = (1.0 - _HIGH_MASS) / regular.size
        base_share = _HIGH_MASS * self.overlap
        own_share = _HIGH_MASS - base_share
        if self.block_index == self.base_block_index:
            m[self.own_block] += _HIGH_MASS / self.own_block.size
        else:
            m[self.own_block] += own_share / self.own_block.size
            m[self.base_block] += base_share / self.base_block.size
        return m

    @cached_property
    def successor(self) -> np.ndarray:
        """Per-token successor forming seeded cycles within equal-mass classes."""
        rng = np.random.default_rng(self.seed)
        succ = np.arange(self.vocab_size)
        values = self.marginal
        for level in np.unique(values[N_SPECIAL_TOKENS:]):
            members = np.flatnonzero(values == level)
            order = rng.permutation(members)
            succ[order] = np.roll(order, -1)
        return succ

    @cached_property
    def transition(self) -> np.ndarray:
        """Row-stochastic bigram matrix: stay-on-cycle or redraw from marginal."""
        v = self.vocab_size
        t = np.tile(self.marginal * (1.0 - _STAY_PROB), (v, 1))
        rows = np.arange(N_SPECIAL_TOKENS, v)
        t[rows, self.successor[rows]] += _STAY_PROB
        t[:N_SPECIAL_TOKENS] = self.marginal  # specials never emitted, rows kept stochastic
        return t

    def to_dict(self) -> dict:
        return {"domain_id": self.domain_id, "block_index": self.block_index,
                "overlap": self.overlap, "vocab_size": self.vocab_size,
                "n_blocks": self.n_blocks, "seed": self.seed,
                "base_block_index": self.base_block_index}

    @classmethod
    def from_dict(cls, d) -> "DomainSpec":
        return cls(**d)


def generate_domain_corpus(spec: DomainSpec, n_tokens: int, seed: int) -> np.ndarray:
    """Sample a token stream from the domain chain, started in stationarity."""
    if n_tokens <= 0:
        raise CorpusError("n_tokens must be > 0")
    rng = np.random.default_rng(seed)
    top = spec.vocab_size - 1
    marginal_cdf = np.cumsum(spec.marginal)
    cdf = np.cumsum(spec.transition, axis=1)
    u = rng.random(n_tokens)
    out = np.empty(n_tokens, dtype=np.int64)
    prev = min(int(np.searchsorted(marginal_cdf, u[0], side="right")), top)
    out[0] = prev
    for i in range(1, n_tokens):
        prev = min(int(np.searchsorted(cdf[prev], u[i], side="right")), top)
        out[i] = prev
    return out


def corpus_windows(stream: np.ndarray, window: int, n: int, rng) -> np.ndarray:
    """n random fixed-length windows from a token stream."""
    if stream.size < window:
        raise DataError(f"stream of {stream.size} tokens shorter than window {window}")
    starts = rng.integers(0, stream.size - window + 1, size=n)
    return np.stack([stream[s:s + window] for s in starts])


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class TaskSpec:
    """Binary classification task driven by a latent marker rule."""

    task_id: str
    domain: DomainSpec
    family: str
    seed: int = 0
    seq_len: int = 24

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CorpusError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.seq_len < 8:
            raise CorpusError("seq_len must be at least 8")

    @cached_property
    def verbalizer(self) -> dict[int, int]:
        """Label -> token, shared across all tasks of the same family.

        Verbalizer tokens come from the base block, which stays high-mass in
        every domain with nonzero overlap.
        """
        fam = FAMILIES.index(self.family)
        base = self.domain.base_block
        toks = base[np.array([2 * fam, 2 * fam + 1])]
        return {0: int(toks[0]), 1: int(toks[1])}

    @cached_property
    def markers(self) -> tuple[int, ...]:
        """Task markers, drawn from the domain's high-mass partition."""
        pool = [t for t in self.domain.high_mass_tokens.tolist()
                if t not in set(self.verbalizer.values())]
        rng = np.random.default_rng((zlib.crc32(self.task_id.encode()), self.seed))
        picked = rng.choice(len(pool), size=2, replace=False)
        a, b = pool[picked[0]], pool[picked[1]]
        return (a, b) if self.family != "position" else (a,)

    @cached_property
    def filler_distribution(self) -> np.ndarray:
        m = self.domain.marginal.copy()
        banned = list(self.markers) + list(self.verbalizer.values())
        m[banned] = 0.0
        m[:N_SPECIAL_TOKENS] = 0.0
        return m / m.sum()

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "domain": self.domain.to_dict(),
                "family": self.family, "seed": self.seed, "seq_len": self.seq_len}

    @classmethod
    def from_dict(cls, d) -> "TaskSpec":
        d = dict(d)
        d["domain"] = DomainSpec.from_dict(d["domain"])
        return cls(**d)


@dataclass
class TaskDataset:
    spec: TaskSpec
    split: str
    tokens: np.ndarray      # (N, seq_len) int64
    mask_pos: np.ndarray    # (N,)
    labels: np.ndarray      # (N,)
    seed: int = 0

    def __len__(self):
        return self.tokens.shape[0]

    def subset(self, indices) -> "TaskDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TaskDataset(self.spec, self.split, self.tokens[idx],
                           self.mask_pos[idx], self.labels[idx], self.seed)


def rule_label(spec: TaskSpec, tokens: np.ndarray) -> int:
    """The latent rule itself: the Bayes-optimal classifier for the task."""
    tokens = np.asarray(tokens)
    if spec.family == "order":
        a, b = spec.markers
        return int(np.flatnonzero(tokens == a)[0] < np.flatnonzero(tokens == b)[0])
    if spec.family == "presence":
        a, b = spec.markers
        return int(np.any(tokens == a))
    m = spec.markers[0]
    start = int(np.flatnonzero(tokens == m)[0])
    return int(start + 1 < spec.seq_len // 2)


def _place_order_pair(tokens, label, markers, rng):
    """Both markers adjacent at a random offset; orientation carries the label."""
    a, b = markers
    first, second = (a, b) if label == 1 else (b, a)
    start = int(rng.integers(0, tokens.size - 1))
    tokens[start] = first
    tokens[start + 1] = second
    return start


def _gen_example(spec: TaskSpec, label: int, rng) -> tuple[np.ndarray, int]:
    s = spec.seq_len
    tokens = rng.choice(spec.domain.vocab_size, size=s, p=spec.filler_distribution)
    if spec.family == "position":
        half = s // 2
        # doubled marker entirely inside one half; mask slot anywhere else,
        # so mask position itself carries no label signal
        if label == 1:
            start = int(rng.integers(0, half - 1))
        else:
            start = int(rng.integers(half, s - 1))
        tokens[start] = tokens[start + 1] = spec.markers[0]
        occupied = (start, start + 1)
    elif spec.family == "order":
        start = _place_order_pair(tokens, label, spec.markers, rng)
        occupied = (start, start + 1)
    else:
        slot = int(rng.integers(0, s))
        tokens[slot] = spec.markers[0] if label == 1 else spec.markers[1]
        occupied = (slot,)
    free = [p for p in range(s) if p not in occupied]
    mask_pos = int(free[rng.integers(0, len(free))])
    tokens[mask_pos] = MASK_TOKEN
    return tokens.astype(np.int64), mask_pos


def make_task_dataset(spec: TaskSpec, n_per_split: int, seed: int,
                      splits=("train", "dev", "test")) -> dict[str, TaskDataset]:
    """Label-balanced, rule-consistent splits with disjoint token sequences."""
    n_labels = len(spec.verbalizer)
    if n_per_split < n_labels:
        raise DataError(f"n_per_split {n_per_split} below label count {n_labels}")
    if len(set(spec.verbalizer.values())) != n_labels:
        raise CorpusError("verbalizer token collision")
    rng = np.random.default_rng((spec.seed, seed, 0xC0))
    seen: set[bytes] = set()
    out = {}
    for split in splits:
        toks = np.empty((n_per_split, spec.seq_len), dtype=np.int64)
        mask_pos = np.empty(n_per_split, dtype=np.int64)
        labels = np.empty(n_per_split, dtype=np.int64)
        for i in range(n_per_split):
            label = i % n_labels
            while True:
                t, mp = _gen_example(spec, label, rng)
                key = t.tobytes()
                if key not in seen:
                    seen.add(key)
                    break
            toks[i], mask_pos[i], labels[i] = t, mp, label
        out[split] = TaskDataset(spec, split, toks, mask_pos, labels, seed)
    return out


def sample_kshot(dataset: TaskDataset, k: int, seed: int) -> TaskDataset:
    """Exactly k examples per label; the k-shot set is nested in larger k."""
    labels = np.unique(dataset.labels)
    chosen = []
    for label in labels:
        idx = np.flatnonzero(dataset.labels == label)
        if k > idx.size:
            raise DataError(f"k={k} exceeds {idx.size} examples of label {label}")
        order = np.random.default_rng((seed, int(label))).permutation(idx.size)
        chosen.append(idx[order[:k]])
    return dataset.subset(np.sort(np.concatenate(chosen)))


# ---------------------------------------------------------------------------
# masked-LM corruption


def mlm_mask(batch: np.ndarray, mask_prob: float, seed, *, vocab_size: int):
    """RoBERTa-style corruption: chosen positions become [MASK] with p=0.8,
    a random token with p=0.1, or stay unchanged with p=0.1.

    Returns (corrupted batch, (n, 2) positions, (n,) target ids).
    """
    if not 0.0 < mask_prob < 1.0:
        raise CorpusError("mask_prob must lie strictly between 0 and 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    batch = np.asarray(batch)
    selected = (rng.random(batch.shape) < mask_prob) & (batch >= N_SPECIAL_TOKENS)
    positions = np.argwhere(selected)
    targets = batch[selected]
    corrupted = batch.copy()
    u = rng.random(targets.size)
    replacement = np.where(
        u < 0.8, MASK_TOKEN,
        np.where(u < 0.9,
                 rng.integers(N_SPECIAL_TOKENS, vocab_size, size=targets.size),
                 targets))
    corrupted[selected] = replacement
    return corrupted, positions, targets


# ---------------------------------------------------------------------------
# record export


def write_records(dataset: TaskDataset, path):
    """Line-delimited JSON: token ids, mask index, gold label."""
    with open(path, "w") as fh:
        for i in range(len(dataset)):
            fh.write(json.dumps({"tokens": dataset.tokens[i].tolist(),
                                 "mask": int(dataset.mask_pos[i]),
                                 "label": int(dataset.labels[i])}) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
