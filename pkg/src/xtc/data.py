"""Synthetic classification tasks and label-preserving synonym augmentation.

The vocabulary is partitioned into contiguous *groups*; every label rule
looks only at group ids, so swapping a token for another member of its group
(a synonym) can never change the label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GenerationError

RULES = ("pattern_presence", "token_parity", "majority_class")


@dataclass(frozen=True)
class ToyTaskSpec:
    vocab_size: int = 256
    seq_len: int = 32
    rule: str = "pattern_presence"
    num_classes: int = 2
    n_train: int = 5000
    n_val: int = 1000
    seed: int = 0
    num_groups: int = 16
    pattern: tuple = (1, 2)  # group ids that must appear in order (pattern_presence)
    max_gap: int = 1  # largest distance between consecutive pattern elements

    def __post_init__(self):
        object.__setattr__(self, "pattern", tuple(int(g) for g in self.pattern))
        if self.rule not in RULES:
            raise ConfigurationError(f"unknown rule {self.rule!r}; expected one of {RULES}", path="task.rule")
        if not 1 <= self.num_groups <= self.vocab_size:
            raise ConfigurationError("must be between 1 and vocab_size", path="task.num_groups")
        if self.num_classes < 2:
            raise ConfigurationError("must be >= 2", path="task.num_classes")
        if self.rule in ("pattern_presence", "token_parity") and self.num_classes != 2:
            raise ConfigurationError(f"{self.rule} is a binary task", path="task.num_classes")
        if self.rule == "majority_class" and self.num_classes > self.num_groups:
            raise ConfigurationError("needs at least num_classes groups", path="task.num_classes")
        if self.rule == "pattern_presence":
            if not self.pattern or any(not 0 <= g < self.num_groups for g in self.pattern):
                raise ConfigurationError("pattern groups must be valid group ids", path="task.pattern")
            if self.max_gap < 1 or len(self.pattern) > self.seq_len:
                raise ConfigurationError("pattern does not fit the sequence", path="task.max_gap")
        if self.n_train < self.num_classes or self.n_val < self.num_classes:
            raise ConfigurationError("need at least one example per class", path="task.n_train")

    def group_of(self, tokens):
        return (np.asarray(tokens) * self.num_groups) // self.vocab_size

    def group_members(self, g):
        lo = -(-g * self.vocab_size // self.num_groups)
        hi = -(-(g + 1) * self.vocab_size // self.num_groups)
        return np.arange(lo, hi)


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.tokens) != len(self.labels):
            raise ValueError("tokens and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.tokens[idx], self.labels[idx], self.num_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class TaskData:
    spec: ToyTaskSpec
    train: Dataset
    val: Dataset


def _pattern_present(groups, pattern, max_gap):
    """Vectorised check for ``pattern`` with each step at most ``max_gap`` positions later."""
    # reach[:, j]: pattern prefix ending exactly at position j
    reach = groups == pattern[0]
    for g in pattern[1:]:
        prev = np.zeros_like(reach)
        for d in range(1, max_gap + 1):
            prev[:, d:] |= reach[:, :-d]
        reach = prev & (groups == g)
    return reach.any(axis=1)


def label_rule(tokens, spec):
    """Labels as a pure function of token groups."""
    tokens = np.atleast_2d(tokens)
    groups = spec.group_of(tokens)
    if spec.rule == "pattern_presence":
        return _pattern_present(groups, spec.pattern, spec.max_gap).astype(np.int64)
    if spec.rule == "token_parity":
        return ((groups == 0).sum(axis=1) % 2).astype(np.int64)
    counts = np.stack([(groups == c).sum(axis=1) for c in range(spec.num_classes)], axis=1)
    return counts.argmax(axis=1).astype(np.int64)  # ties -> lowest class


def _candidates(spec, rng, n):
    toks = rng.integers(0, spec.vocab_size, size=(n, spec.seq_len))
    if spec.rule == "pattern_presence":
        # plant the pattern in half of the candidates so positives are not rare
        plant = rng.random(n) < 0.5
        span = 1 + sum(int(rng.integers(1, spec.max_gap + 1)) for _ in spec.pattern[1:])
        for i in np.flatnonzero(plant):
            pos = int(rng.integers(0, spec.seq_len - span + 1))
            for g in spec.pattern:
                members = spec.group_members(g)
                toks[i, pos] = members[rng.integers(len(members))]
                pos += int(rng.integers(1, spec.max_gap + 1))
                if pos >= spec.seq_len:
                    break
    return toks


def _balanced(spec, rng, size, exclude):
    quota = np.full(spec.num_classes, size // spec.num_classes)
    quota[: size % spec.num_classes] += 1
    got_t, got_l = [], []
    have = np.zeros(spec.num_classes, dtype=int)
    for _ in range(200):
        toks = _candidates(spec, rng, max(4 * size, 256))
        labels = label_rule(toks, spec)
        for t, y in zip(toks, labels):
            if have[y] >= quota[y]:
                continue
            key = t.tobytes()
            if key in exclude:
                continue
            exclude.add(key)
            got_t.append(t)
            got_l.append(y)
            have[y] += 1
        if np.all(have >= quota):
            order = rng.permutation(size)
            return Dataset(np.asarray(got_t)[order], np.asarray(got_l)[order], spec.num_classes)
    raise GenerationError(f"could not fill class quotas {quota.tolist()} (got {have.tolist()})")


def generate_dataset(spec):
    """Seeded, class-balanced train/val split with no shared sequences."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    seen = set()
    train = _balanced(spec, rng, spec.n_train, seen)
    val = _balanced(spec, rng, spec.n_val, seen)
    return TaskData(spec, train, val)


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmenterSpec:
    synonyms: dict = field(default_factory=dict)  # token -> tuple of label-equivalent tokens
    p: float = 0.3
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError("must be in [0, 1]", path="augment.p")
        if self.k < 1:
            raise ConfigurationError("must be >= 1", path="augment.k")


def synonym_table(task):
    """Every token maps to the other members of its group."""
    table = {}
    for g in range(task.num_groups):
        members = task.group_members(g)
        for t in members:
            table[int(t)] = tuple(int(m) for m in members if m != t)
    return table


def check_synonyms(synonyms, task):
    for tok, alts in synonyms.items():
        for t in (tok, *alts):
            if not 0 <= t < task.vocab_size:
                raise ConfigurationError(f"token {t} is outside the vocabulary", path="augment.synonyms")
        g = task.group_of(tok)
        if any(task.group_of(a) != g for a in alts):
            raise ConfigurationError(f"synonyms of {tok} cross an equivalence class", path="augment.synonyms")


def augment(dataset, spec, task=None, vocab_size=None):
    """Return ``k`` times as many examples: the originals followed by ``k - 1`` noisy copies.

    Each position of a copy is replaced, with probability ``p``, by a uniformly
    drawn synonym.  Labels are carried over unchanged.
    """
    if task is not None:
        check_synonyms(spec.synonyms, task)
    elif vocab_size is not None:
        bad = [t for t, alts in spec.synonyms.items() for x in (t, *alts) if not 0 <= x < vocab_size]
        if bad:
            raise ConfigurationError(f"token {bad[0]} is outside the vocabulary", path="augment.synonyms")
    if spec.k == 1:
        return Dataset(dataset.tokens.copy(), dataset.labels.copy(), dataset.num_classes)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    vocab = int(max(dataset.tokens.max(initial=0), max(spec.synonyms, default=0))) + 1
    # dense lookup: synonym j of token t, padded by repetition
    width = max((len(a) for a in spec.synonyms.values()), default=0)
    n_syn = np.zeros(vocab, dtype=np.int64)
    lut = np.tile(np.arange(vocab)[:, None], (1, max(width, 1)))
    for t, alts in spec.synonyms.items():
        if alts:
            n_syn[t] = len(alts)
            lut[t, : len(alts)] = alts
    copies = [dataset.tokens]
    for _ in range(spec.k - 1):
        toks = dataset.tokens.copy()
        swap = (rng.random(toks.shape) < spec.p) & (n_syn[toks] > 0)
        choice = (rng.random(toks.shape) * np.maximum(n_syn[toks], 1)).astype(np.int64)
        toks[swap] = lut[toks[swap], choice[swap]]
        copies.append(toks)
    labels = np.tile(dataset.labels, spec.k)
    return Dataset(np.concatenate(copies), labels, dataset.num_classes)
