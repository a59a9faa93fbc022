"""Synthetic datasets with a known transition rule, for smoke tests and overfitting checks."""

from __future__ import annotations

import numpy as np

from .data import CheckInSequence, Dataset, DatasetConfig, Vocabulary


def second_order_dataset(
    n_sequences: int = 50,
    n_pois: int = 12,
    n_cats: int = 3,
    n_users: int = 5,
    min_len: int = 10,
    max_len: int = 20,
    holdout: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Sequences whose next POI is a fixed random function of the previous two.

    A fraction ``holdout`` of the sequences is tagged ``test``; the rest ``train``.
    Every category pair is registered as a relation so nothing maps to UNK.
    """
    rng = np.random.default_rng(seed)
    table = rng.integers(0, n_pois, size=(n_pois, n_pois))
    poi_cat = [p % n_cats for p in range(n_pois)]
    seqs = []
    for i in range(n_sequences):
        length = int(rng.integers(min_len, max_len + 1))
        walk = [int(rng.integers(n_pois)), int(rng.integers(n_pois))]
        while len(walk) < length:
            walk.append(int(table[walk[-2], walk[-1]]))
        seqs.append(
            CheckInSequence(
                user=i % n_users,
                pois=tuple(walk),
                cats=tuple(poi_cat[p] for p in walk),
                timestamps=tuple(3600 * (i * max_len + t) + 1 for t in range(length)),
            )
        )
    n_test = int(round(holdout * n_sequences))
    for j in rng.permutation(n_sequences)[:n_test]:
        seqs[j].split = "test"
    relations = sorted({(poi_cat[a], poi_cat[b]) for s in seqs if s.split == "train" for a, b in zip(s.pois, s.pois[1:])})
    vocab = Vocabulary(
        users=[f"u{u}" for u in range(n_users)],
        pois=[f"p{p:02d}" for p in range(n_pois)],
        cats=[f"c{c}" for c in range(n_cats)],
        poi_cat=poi_cat,
        relations=relations,
    )
    cfg = DatasetConfig(min_seq_len=min_len, max_seq_len=max_len, seed=seed)
    return Dataset(vocab, seqs, cfg)


def next_of(dataset: Dataset) -> dict:
    """The ground-truth transition table implied by the dataset, ``(a, b) -> c``."""
    rule = {}
    for s in dataset.sequences:
        for a, b, c in zip(s.pois, s.pois[1:], s.pois[2:]):
            rule[(a, b)] = c
    return rule
