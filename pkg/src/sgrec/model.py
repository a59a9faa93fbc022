"""The SGRec network.

Row-vector convention throughout: a weight ``W`` of shape ``(in, out)`` maps
``x`` to ``x @ W``.  Every function below works on a batch of rows, so the
single-vector case is simply a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import engine as E
from .config import AblationFlags, TrainConfig
from .engine import Tensor
from .errors import ShapeError
from .seq2graph import AugmentedSequence


class ModelParams:
    """Named trainable tensors, in a fixed registration order."""

    def __init__(self):
        self._tensors: dict = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"parameter {name} registered twice")
        t = Tensor(data, requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self._tensors):
            missing = set(self._tensors) - set(state)
            extra = set(state) - set(self._tensors)
            raise ShapeError(f"parameter set mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for k, arr in state.items():
            t = self._tensors[k]
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != model shape {t.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)


def init_params(
    n_users: int,
    n_pois: int,
    n_cats: int,
    n_relations: int,
    max_seq_len: int,
    dim: int,
    num_layers: int,
    rng: np.random.Generator,
    dtype=np.float64,
) -> ModelParams:
    """Create every tensor, uniform in ``[-1/sqrt(D), 1/sqrt(D)]``; biases start at zero.

    ``n_relations`` counts observed category pairs; one extra UNK row is added.
    """
    D = dim
    bound = 1.0 / np.sqrt(D)
    P = ModelParams()

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def z(*shape):
        return np.zeros(shape, dtype=dtype)

    P.add("poi_table", u(n_pois, D))
    P.add("cat_table", u(n_cats, D))
    P.add("user_table", u(n_users, D))
    P.add("relation_table", u(n_relations + 1, D))
    P.add("pos_table", u(max_seq_len, D))
    for l in range(num_layers):
        P.add(f"layer{l}.W_a", u(2 * D, 2 * D))
        P.add(f"layer{l}.mlp_W1", u(3 * D, 2 * D))
        P.add(f"layer{l}.mlp_b1", z(2 * D))
        P.add(f"layer{l}.mlp_W2", u(2 * D, 2 * D))
        P.add(f"layer{l}.W_b", u(2 * D, 2 * D))
        P.add(f"layer{l}.w_gat", u(4 * D, 1))
        P.add(f"layer{l}.b_gat", z(1))
        P.add(f"layer{l}.Phi", u(2 * D, 2 * D))
    P.add("W_h1", u(2 * D, D))
    P.add("W_h2", u(2 * D, D))
    P.add("W_q", u(D, D))
    P.add("w_pat", u(D, 1))
    P.add("W_p", u(3 * D, n_pois))
    P.add("b_p", z(n_pois))
    P.add("W_c", u(2 * D, n_cats))
    P.add("b_c", z(n_cats))
    return P


# -- building blocks ------------------------------------------------------------


def node_embed(poi_idx, cat_idx, params: ModelParams) -> Tensor:
    """Unified node embedding: POI row next to its category row, ``[n, 2D]``."""
    return E.concat([E.row_gather(params["poi_table"], poi_idx), E.row_gather(params["cat_table"], cat_idx)], axis=1)


def edge_inject(v_src: Tensor, relation: Tensor, params: ModelParams, layer: int) -> Tensor:
    """Fold the edge's relation embedding into the source node: ``(v + MLP([v; r])) @ W_a``."""
    p = f"layer{layer}."
    hidden = E.tanh(E.add(E.matmul(E.concat([v_src, relation], axis=1), params[p + "mlp_W1"]), params[p + "mlp_b1"]))
    return E.matmul(E.add(v_src, E.matmul(hidden, params[p + "mlp_W2"])), params[p + "W_a"])


def attention_score(v_dst: Tensor, v_src_injected: Tensor, params: ModelParams, layer: int) -> Tensor:
    """Unnormalised importance of each edge, shape ``[E]``."""
    p = f"layer{layer}."
    joined = E.concat([E.matmul(v_dst, params[p + "W_b"]), v_src_injected], axis=1)
    raw = E.add(E.matmul(joined, params[p + "w_gat"]), params[p + "b_gat"])
    return E.reshape(raw, (raw.shape[0],))


def aggregate(scores: Tensor, messages: Tensor, dst, num_nodes: int, params: ModelParams, layer: int, slope: float = 0.2):
    """Attention-weighted sum of ``messages @ Phi`` into each destination node.

    Returns ``(h, alpha)`` where ``alpha`` is normalised within each destination.
    """
    dst = np.asarray(dst, dtype=np.int64)
    if num_nodes and np.bincount(dst, minlength=num_nodes).min() == 0:
        raise ShapeError("every node needs at least one incoming edge (self-loops guarantee this)")
    alpha = E.segment_softmax(E.leaky_relu(scores, slope), dst, num_nodes)
    projected = E.matmul(messages, params[f"layer{layer}.Phi"])
    return E.segment_sum(E.scale_rows(projected, alpha), dst, num_nodes), alpha


def ca_gat_layer(h: Tensor, src, dst, rel, params: ModelParams, layer: int, slope: float = 0.2, aggregate_injected: bool = False):
    hs = E.row_gather(h, src)
    injected = edge_inject(hs, E.row_gather(params["relation_table"], rel), params, layer)
    scores = attention_score(E.row_gather(h, dst), injected, params, layer)
    return aggregate(scores, injected if aggregate_injected else hs, dst, h.shape[0], params, layer, slope)


def position_attention(
    h_pos: Tensor,
    h_last: Tensor,
    offsets,
    segments,
    num_segments: int,
    params: ModelParams,
    flags: AblationFlags,
):
    """Sequence preference vector from per-position node states.

    ``offsets`` are 1-based recency offsets (the last check-in is 1),
    ``h_last`` repeats each sequence's final state once per position.
    Returns ``(s, beta)``.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    seg = np.asarray(segments, dtype=np.int64)
    if offsets.size and offsets.max() > params["pos_table"].shape[0]:
        raise ShapeError(f"sequence longer than the {params['pos_table'].shape[0]} positional rows")
    if flags.use_position_attention:
        pre = E.add(E.matmul(h_last, params["W_h1"]), E.matmul(h_pos, params["W_h2"]))
        if flags.use_positional_embedding:
            q = E.row_gather(params["pos_table"], offsets - 1)
            pre = E.add(pre, E.matmul(q, params["W_q"]))
        b = E.matmul(E.tanh(pre), params["w_pat"])
        beta = E.segment_softmax(E.reshape(b, (b.shape[0],)), seg, num_segments)
    else:
        counts = np.bincount(seg, minlength=num_segments).astype(h_pos.dtype)
        beta = E.constant(1.0 / counts[seg], dtype=h_pos.dtype)
    s = E.segment_sum(E.scale_rows(h_pos, beta), seg, num_segments)
    return s, beta


def predict_poi(h_last: Tensor, s: Tensor, user: Tensor, params: ModelParams) -> Tensor:
    """Next-POI distribution from ``[h_last * s ; u]``."""
    x = E.concat([E.mul(h_last, s), user], axis=1)
    return E.softmax(E.add(E.matmul(x, params["W_p"]), params["b_p"]))


def predict_category(c_last: Tensor, user: Tensor, params: ModelParams) -> Tensor:
    x = E.concat([c_last, user], axis=1)
    return E.softmax(E.add(E.matmul(x, params["W_c"]), params["b_c"]))


def joint_loss(probs_poi, probs_cat, poi_targets, cat_targets, eta: float, l2_lambda: float, params: Optional[Sequence[Tensor]] = None):
    """Mean POI cross-entropy, plus ``eta`` times category cross-entropy, plus L2.

    ``probs_cat`` may be ``None`` (category objective switched off).
    Returns ``(total, poi_loss, cat_loss)``; ``cat_loss`` is ``None`` when unused.
    """
    poi_loss = E.cross_entropy(probs_poi, np.asarray(poi_targets))
    total = poi_loss
    cat_loss = None
    if probs_cat is not None and eta > 0:
        cat_loss = E.cross_entropy(probs_cat, np.asarray(cat_targets))
        total = E.add(total, E.scale(cat_loss, eta))
    if l2_lambda > 0 and params is not None:
        total = E.add(total, E.scale(E.l2_norm_sq(params), l2_lambda))
    return total, poi_loss, cat_loss


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    """Disjoint union of augmented sequences, in flat node/edge space."""

    node_pois: np.ndarray
    node_cats: np.ndarray
    node_seq: np.ndarray
    base_mask: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    edge_kind: list
    pos_node: np.ndarray
    pos_seq: np.ndarray
    pos_offset: np.ndarray
    last_node: np.ndarray
    users: np.ndarray
    target_poi: Optional[np.ndarray]
    target_cat: Optional[np.ndarray]

    @property
    def size(self) -> int:
        return len(self.users)

    @property
    def num_nodes(self) -> int:
        return len(self.node_pois)


def collate(augs: Sequence[AugmentedSequence], poi_cat: Sequence[int]) -> Batch:
    poi_cat = np.asarray(poi_cat, dtype=np.int64)
    node_pois, node_seq, base_mask = [], [], []
    src, dst, rel, kinds = [], [], [], []
    pos_node, pos_seq, pos_offset, last_node = [], [], [], []
    offset = 0
    for b, a in enumerate(augs):
        n = len(a.nodes)
        node_pois.extend(a.nodes)
        node_seq.extend([b] * n)
        base_mask.extend([True] * a.n_base + [False] * (n - a.n_base))
        for s, d, r, k in a.edges:
            src.append(s + offset)
            dst.append(d + offset)
            rel.append(r)
            kinds.append(k)
        L = len(a.positions)
        pos_node.extend(p + offset for p in a.positions)
        pos_seq.extend([b] * L)
        pos_offset.extend(range(L, 0, -1))
        last_node.append(a.positions[-1] + offset)
        offset += n
    node_pois = np.asarray(node_pois, dtype=np.int64)
    has_targets = all(a.target_poi is not None for a in augs)
    i64 = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return Batch(
        node_pois=node_pois,
        node_cats=poi_cat[node_pois],
        node_seq=i64(node_seq),
        base_mask=np.asarray(base_mask, dtype=bool),
        src=i64(src),
        dst=i64(dst),
        rel=i64(rel),
        edge_kind=kinds,
        pos_node=i64(pos_node),
        pos_seq=i64(pos_seq),
        pos_offset=i64(pos_offset),
        last_node=i64(last_node),
        users=i64([a.user for a in augs]),
        target_poi=i64([a.target_poi for a in augs]) if has_targets else None,
        target_cat=i64([a.target_cat for a in augs]) if has_targets else None,
    )


@dataclass
class ForwardTrace:
    layer_h: list
    alphas: list
    beta: Tensor
    s: Tensor
    probs_poi: Tensor
    probs_cat: Optional[Tensor]
    batch: Batch = field(repr=False)

    @property
    def final_h(self) -> Tensor:
        return self.layer_h[-1]


class SGRecModel:
    def __init__(self, n_users: int, n_pois: int, n_cats: int, n_relations: int, max_seq_len: int, cfg: TrainConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.n_users, self.n_pois, self.n_cats = n_users, n_pois, n_cats
        self.n_relations = n_relations
        self.max_seq_len = max_seq_len
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = init_params(
            n_users, n_pois, n_cats, n_relations, max_seq_len, cfg.dim, cfg.num_layers, rng, dtype=np.dtype(cfg.dtype)
        )

    @classmethod
    def for_vocab(cls, vocab, max_seq_len: int, cfg: TrainConfig, rng=None) -> "SGRecModel":
        return cls(vocab.n_users, vocab.n_pois, vocab.n_cats, vocab.n_relations, max_seq_len, cfg, rng)

    def parameters(self) -> list:
        return list(self.params)

    def forward(self, batch: Batch, with_category: Optional[bool] = None) -> ForwardTrace:
        cfg, flags, P = self.cfg, self.cfg.ablation, self.params
        D = cfg.dim
        if with_category is None:
            with_category = flags.use_category_loss
        h = node_embed(batch.node_pois, batch.node_cats, P)
        layer_h, alphas = [h], []
        if flags.use_cagat:
            for l in range(cfg.num_layers):
                h, alpha = ca_gat_layer(h, batch.src, batch.dst, batch.rel, P, l, cfg.leaky_slope, cfg.aggregate_edge_injected)
                layer_h.append(h)
                alphas.append(alpha)

        h_pos = E.row_gather(h, batch.pos_node)
        h_last_rep = E.row_gather(h, batch.last_node[batch.pos_seq])
        s, beta = position_attention(h_pos, h_last_rep, batch.pos_offset, batch.pos_seq, batch.size, P, flags)
        h_last = E.row_gather(h, batch.last_node)
        user = E.row_gather(P["user_table"], batch.users)
        probs_poi = predict_poi(h_last, s, user, P)

        probs_cat = None
        if with_category:
            if cfg.category_source == "layer":
                first = layer_h[1] if len(layer_h) > 1 else layer_h[0]
                c_last = E.slice_last(E.row_gather(first, batch.last_node), D, 2 * D)
            else:
                c_last = E.row_gather(P["cat_table"], batch.node_cats[batch.last_node])
            probs_cat = predict_category(c_last, user, P)
        return ForwardTrace(layer_h, alphas, beta, s, probs_poi, probs_cat, batch)

    def loss(self, trace: ForwardTrace, l2: Optional[float] = None):
        cfg = self.cfg
        lam = cfg.l2_lambda if l2 is None else l2
        b = trace.batch
        return joint_loss(trace.probs_poi, trace.probs_cat, b.target_poi, b.target_cat, cfg.effective_eta, lam, self.parameters())
