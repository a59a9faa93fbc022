"""Transition index and per-epoch sequence-to-graph augmentation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import CheckInSequence, Vocabulary

SCOPES = ("per-user", "global")


class TransitionIndex:
    """Incoming-transition neighbours of each POI, observed on training sequences.

    With ``per-user`` scope the key is ``(user, poi)``; with ``global`` scope
    it is the POI alone.  Immutable once built.
    """

    def __init__(self, scope: str, neighbors: dict, vocab: Vocabulary):
        if scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
        self.scope = scope
        self.vocab = vocab
        self._nbrs = {k: tuple(sorted(v)) for k, v in neighbors.items()}

    def key(self, user: int, poi: int):
        return (user, poi) if self.scope == "per-user" else poi

    def neighbors(self, user: int, poi: int) -> tuple:
        """Sorted ``(source_poi, relation)`` pairs for edges ``source -> poi``."""
        return self._nbrs.get(self.key(user, poi), ())

    def items(self):
        return self._nbrs.items()

    def __len__(self) -> int:
        return sum(len(v) for v in self._nbrs.values())

    def dump_csv(self, path) -> None:
        """Write ``target_poi,source_poi,relation`` rows (user column prepended for per-user scope)."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            header = ["target_poi", "source_poi", "relation"]
            w.writerow((["user"] if self.scope == "per-user" else []) + header)
            for k in sorted(self._nbrs):
                user, target = k if self.scope == "per-user" else (None, k)
                for src, rel in self._nbrs[k]:
                    w.writerow(([user] if user is not None else []) + [target, src, rel])


def build_transition_index(
    sequences: Sequence[CheckInSequence], vocab: Vocabulary, scope: str = "per-user"
) -> TransitionIndex:
    """Collect every distinct consecutive edge ``q -> p`` from training sequences."""
    nbrs = defaultdict(set)
    per_user = scope == "per-user"
    for s in sequences:
        if s.split != "train":
            continue
        for q, p in zip(s.pois[:-1], s.pois[1:]):
            key = (s.user, p) if per_user else p
            nbrs[key].add((q, vocab.relation_of_pois(q, p)))
    return TransitionIndex(scope, nbrs, vocab)


def sample_size(n: int, gamma: float) -> int:
    if gamma <= 0 or n == 0:
        return 0
    return min(n, max(1, int(math.floor(gamma * n + 0.5))))


def sample_neighbors(candidates: Sequence, gamma: float, rng: np.random.Generator) -> list:
    """Uniform sample without replacement of ``max(1, round(gamma * |N|))`` candidates."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    k = sample_size(len(candidates), gamma)
    if k == 0:
        return []
    if k == len(candidates):
        return list(candidates)
    picked = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in sorted(picked)]


@dataclass
class AugmentedSequence:
    """A sequence turned into a small directed graph.

    ``nodes`` holds one POI per graph node; the first ``n_base`` are the unique
    POIs of the input sequence in first-visit order.  ``positions`` maps each
    check-in of the input to its node.  Edges are ``(src, dst, relation)`` in
    node-index space.
    """

    user: int
    nodes: list
    n_base: int
    positions: list
    edges: list = field(default_factory=list)
    target_poi: Optional[int] = None
    target_cat: Optional[int] = None

    @property
    def last_node(self) -> int:
        return self.positions[-1]

    @property
    def sampled_edges(self) -> list:
        """Edges that did not come from the sequence itself or self-loops."""
        return [e for e in self.edges if e[3] == "sampled"]

    def edge_arrays(self):
        src = np.array([e[0] for e in self.edges], dtype=np.int64)
        dst = np.array([e[1] for e in self.edges], dtype=np.int64)
        rel = np.array([e[2] for e in self.edges], dtype=np.int64)
        return src, dst, rel


def augment_sequence(
    pois: Sequence[int],
    user: int,
    vocab: Vocabulary,
    index: Optional[TransitionIndex] = None,
    gamma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    exclude: Sequence[int] = (),
) -> AugmentedSequence:
    """Build the graph for one input sequence.

    Every node gets a self-loop, consecutive check-ins are linked, and each base
    node receives sampled incoming neighbours from ``index``.  POIs in
    ``exclude`` (the prediction target) are never sampled.
    """
    nodes: list = []
    node_of: dict = {}
    positions = []
    for p in pois:
        if p not in node_of:
            node_of[p] = len(nodes)
            nodes.append(p)
        positions.append(node_of[p])
    n_base = len(nodes)

    seen = set()
    edges = []

    def add_edge(src_poi, dst_poi, rel, kind):
        if src_poi not in node_of:
            node_of[src_poi] = len(nodes)
            nodes.append(src_poi)
        s, d = node_of[src_poi], node_of[dst_poi]
        if (s, d) in seen:
            return
        seen.add((s, d))
        edges.append((s, d, rel, kind))

    for p in nodes[:n_base]:
        add_edge(p, p, vocab.relation_of_pois(p, p), "self")
    for q, p in zip(pois[:-1], pois[1:]):
        add_edge(q, p, vocab.relation_of_pois(q, p), "path")

    if gamma > 0 and index is not None:
        if rng is None:
            raise ValueError("augmentation with gamma > 0 needs an rng")
        banned = set(exclude)
        for p in list(nodes[:n_base]):
            cands = [(q, r) for q, r in index.neighbors(user, p) if q != p and q not in banned]
            for q, r in sample_neighbors(cands, gamma, rng):
                add_edge(q, p, r, "sampled")

    # Sampled nodes outside the sequence still need a neighbourhood to be updated.
    for p in nodes[n_base:]:
        add_edge(p, p, vocab.relation_of_pois(p, p), "self")

    return AugmentedSequence(user=user, nodes=nodes, n_base=n_base, positions=positions, edges=edges)


def augment_for_training(
    seq: CheckInSequence,
    vocab: Vocabulary,
    index: Optional[TransitionIndex],
    gamma: float,
    rng: Optional[np.random.Generator],
) -> AugmentedSequence:
    """Inputs are all but the last check-in; the last one is the label."""
    inputs = list(seq.pois[:-1])
    target = seq.pois[-1]
    aug = augment_sequence(inputs, seq.user, vocab, index, gamma, rng, exclude=(target,))
    aug.target_poi = target
    aug.target_cat = seq.cats[-1]
    return aug
