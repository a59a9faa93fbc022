"""Epoch loop, embedding write-back, early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import Dataset
from .engine import AdamState, Tape, adam_step, backward
from .errors import EmptyDataError, NumericError
from .evaluator import evaluate_split
from .model import ModelParams, SGRecModel, collate
from .seq2graph import TransitionIndex, augment_for_training, build_transition_index

logger = logging.getLogger(__name__)

SELECT_K = 20


@dataclass
class EpochStats:
    loss: float
    poi_loss: float
    cat_loss: float
    n_batches: int
    n_sampled_edges: int
    h_sum: np.ndarray = field(repr=False)
    h_count: np.ndarray = field(repr=False)


def batches(n: int, batch_size: int, order: Optional[np.ndarray] = None) -> list:
    order = np.arange(n) if order is None else order
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(
    model: SGRecModel,
    sequences: Sequence,
    vocab,
    index: Optional[TransitionIndex],
    adam: AdamState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass over the training sequences with fresh neighbour sampling."""
    cfg = model.cfg
    if not sequences:
        raise EmptyDataError("no training sequences")
    gamma = cfg.effective_gamma
    params = model.parameters()
    D = cfg.dim
    h_sum = np.zeros((model.n_pois, 2 * D), dtype=np.float64)
    h_count = np.zeros(model.n_pois, dtype=np.int64)
    tot = poi_tot = cat_tot = 0.0
    n_sampled = 0
    groups = batches(len(sequences), cfg.batch_size, rng.permutation(len(sequences)))
    for b_id, idx in enumerate(groups):
        augs = [augment_for_training(sequences[i], vocab, index, gamma, rng) for i in idx]
        batch = collate(augs, vocab.poi_cat)
        n_sampled += sum(k == "sampled" for k in batch.edge_kind)
        with Tape() as tape:
            trace = model.forward(batch)
            loss, poi_loss, cat_loss = model.loss(trace)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b_id}")
        backward(loss, tape)
        adam_step(params, adam)

        np.add.at(h_sum, batch.node_pois, trace.final_h.data)
        np.add.at(h_count, batch.node_pois, 1)
        tot += value
        poi_tot += poi_loss.item()
        cat_tot += cat_loss.item() if cat_loss is not None else 0.0
    n = len(groups)
    return EpochStats(tot / n, poi_tot / n, cat_tot / n, n, n_sampled, h_sum, h_count)


def write_back_embeddings(h_sum: np.ndarray, h_count: np.ndarray, params: ModelParams, poi_cat, cfg: TrainConfig) -> bool:
    """Overwrite POI and category rows with the epoch's mean node states.

    Skipped when neighbour sampling is off.  Returns whether anything was written.
    """
    if not cfg.write_back or cfg.effective_gamma == 0:
        return False
    seen = h_count > 0
    if not seen.any():
        return False
    D = cfg.dim
    means = h_sum[seen] / h_count[seen, None]
    poi_table, cat_table = params["poi_table"], params["cat_table"]
    poi_table.data[seen] = means[:, :D].astype(poi_table.dtype)

    cats = np.asarray(poi_cat, dtype=np.int64)[seen]
    cat_sum = np.zeros((cat_table.shape[0], D), dtype=np.float64)
    cat_n = np.zeros(cat_table.shape[0], dtype=np.int64)
    np.add.at(cat_sum, cats, means[:, D:])
    np.add.at(cat_n, cats, 1)
    hit = cat_n > 0
    cat_table.data[hit] = (cat_sum[hit] / cat_n[hit, None]).astype(cat_table.dtype)
    return True


class EarlyStopper:
    """Track the best validation score; signal stop after ``patience`` flat epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if self.best is None or score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def snapshot(model: SGRecModel, adam: AdamState, epoch: int, rng: np.random.Generator, fingerprint: str) -> Checkpoint:
    copied = AdamState(adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon, adam.step)
    copied.m = [m.copy() for m in adam.m]
    copied.v = [v.copy() for v in adam.v]
    return Checkpoint(
        config=model.cfg,
        params=model.params.state_dict(),
        adam=copied,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        vocab_fingerprint=fingerprint,
        shape={
            "n_users": model.n_users,
            "n_pois": model.n_pois,
            "n_cats": model.n_cats,
            "n_relations": model.n_relations,
            "max_seq_len": model.max_seq_len,
        },
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SGRecModel:
    s = ckpt.shape
    model = SGRecModel(s["n_users"], s["n_pois"], s["n_cats"], s["n_relations"], s["max_seq_len"], ckpt.config)
    model.params.load_state_dict(ckpt.params)
    return model


@dataclass
class FitResult:
    best: Checkpoint
    log: list
    best_epoch: int
    last_epoch: int
    model: SGRecModel


def fit(
    dataset: Dataset,
    cfg: TrainConfig,
    log_path=None,
    train_split: str = "train",
    valid_split: str = "valid",
    on_epoch: Optional[Callable[[dict, SGRecModel], None]] = None,
) -> FitResult:
    """Train from scratch and return the checkpoint with the best validation nDCG@20.

    With an empty validation split there is no early stopping and the final
    epoch is returned.  ``on_epoch(record, model)`` runs after each epoch's
    write-back.
    """
    rng = np.random.default_rng(cfg.seed)
    vocab = dataset.vocab
    train = dataset.split(train_split)
    valid = dataset.split(valid_split)
    if not train:
        raise EmptyDataError("training split is empty")
    model = SGRecModel.for_vocab(vocab, dataset.max_seq_len, cfg, rng)
    adam = AdamState.for_params(model.parameters(), learning_rate=cfg.learning_rate)
    index = build_transition_index(dataset.sequences, vocab, cfg.neighbor_scope) if cfg.effective_gamma > 0 else None
    fingerprint = vocab.fingerprint()

    stopper = EarlyStopper(cfg.patience)
    log, best = [], None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    epoch = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            stats = train_epoch(model, train, vocab, index, adam, rng, epoch)
            write_back_embeddings(stats.h_sum, stats.h_count, model.params, vocab.poi_cat, cfg)
            record = {
                "epoch": epoch,
                "loss": stats.loss,
                "poi_loss": stats.poi_loss,
                "cat_loss": stats.cat_loss,
                "val_hr20": None,
                "val_ndcg20": None,
            }
            if valid:
                report = evaluate_split(model, valid, vocab, ks=(SELECT_K,), split=valid_split)
                record["val_hr20"] = report.hr(SELECT_K)
                record["val_ndcg20"] = report.ndcg(SELECT_K)
                improved = stopper.update(epoch, record["val_ndcg20"])
            else:
                improved = True
            if improved:
                best = snapshot(model, adam, epoch, rng, fingerprint)
            record["wall_seconds"] = time.perf_counter() - t0
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(record, model)
            if valid and stopper.should_stop:
                logger.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(best=best, log=log, best_epoch=best.epoch, last_epoch=epoch, model=model)
