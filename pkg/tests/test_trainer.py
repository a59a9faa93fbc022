import copy
import json

import numpy as np
import pytest

from sgrec import trainer as T
from sgrec.config import AblationFlags, TrainConfig
from sgrec.data import Dataset, DatasetConfig
from sgrec.engine import AdamState
from sgrec.errors import NumericError
from sgrec.evaluator import EvalReport
from sgrec.model import SGRecModel, collate
from sgrec.seq2graph import augment_for_training, build_transition_index
from sgrec.synthetic import second_order_dataset
from sgrec.trainer import EarlyStopper, batches, fit, train_epoch, write_back_embeddings

from conftest import make_seq, toy_config, toy_vocab


def _setup(ds, **kw):
    cfg = TrainConfig(**{"dim": 8, "dtype": "float64", "seed": 3, **kw})
    rng = np.random.default_rng(cfg.seed)
    model = SGRecModel.for_vocab(ds.vocab, ds.max_seq_len, cfg, rng)
    adam = AdamState.for_params(model.parameters(), learning_rate=cfg.learning_rate)
    index = build_transition_index(ds.sequences, ds.vocab, cfg.neighbor_scope)
    return cfg, model, adam, index, rng


def test_batch_arithmetic():
    parts = batches(130, 64)
    assert [len(p) for p in parts] == [64, 64, 2]
    np.testing.assert_array_equal(np.concatenate(parts), np.arange(130))


@pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"ablation": AblationFlags(use_augmentation=False)}])
def test_no_sampling_when_disabled(kw):
    ds = second_order_dataset(n_sequences=20, seed=1)
    cfg, model, adam, index, rng = _setup(ds, **kw)
    stats = train_epoch(model, ds.split("train"), ds.vocab, index, adam, rng)
    assert stats.n_sampled_edges == 0


def test_sampling_happens_by_default():
    ds = second_order_dataset(n_sequences=20, seed=1)
    cfg, model, adam, index, rng = _setup(ds, gamma=0.5, neighbor_scope="global")
    assert train_epoch(model, ds.split("train"), ds.vocab, index, adam, rng).n_sampled_edges > 0


def test_augmentation_changes_between_epochs_but_not_reruns():
    ds = second_order_dataset(n_sequences=10, seed=2)
    seq = ds.sequences[0]
    index = build_transition_index(ds.sequences, ds.vocab, "global")

    def epochs(seed):
        rng = np.random.default_rng(seed)
        return [sorted(augment_for_training(seq, ds.vocab, index, 0.5, rng).sampled_edges) for _ in range(5)]

    a, b = epochs(0), epochs(0)
    assert a == b
    assert len({tuple(e) for e in a}) > 1


# -- write-back -----------------------------------------------------------------


def _wb_model(n_pois=5, n_cats=2, D=2, **kw):
    vocab = toy_vocab(n_pois=n_pois, n_cats=n_cats)
    cfg = toy_config(dim=D, **kw)
    return vocab, cfg, SGRecModel.for_vocab(vocab, 4, cfg, np.random.default_rng(0))


def test_write_back_single_occurrence():
    vocab, cfg, model = _wb_model()
    h_sum = np.zeros((5, 4))
    h_count = np.zeros(5, dtype=np.int64)
    h_sum[3] = [0.1, 0.2, 0.3, 0.4]
    h_count[3] = 1
    before = model.params["poi_table"].data.copy()
    assert write_back_embeddings(h_sum, h_count, model.params, vocab.poi_cat, cfg)
    np.testing.assert_array_equal(model.params["poi_table"].data[3], [0.1, 0.2])
    np.testing.assert_array_equal(model.params["cat_table"].data[vocab.poi_cat[3]], [0.3, 0.4])
    rest = [0, 1, 2, 4]
    np.testing.assert_array_equal(model.params["poi_table"].data[rest], before[rest])


def test_write_back_skipped_without_sampling():
    vocab, cfg, model = _wb_model(gamma=0.0)
    h_sum = np.ones((5, 4))
    h_count = np.ones(5, dtype=np.int64)
    before = model.params.state_dict()
    assert not write_back_embeddings(h_sum, h_count, model.params, vocab.poi_cat, cfg)
    for k, v in model.params.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_write_back_means():
    # POI 1 and POI 3 share category 1 (poi_cat = p % 2)
    vocab, cfg, model = _wb_model()
    hs = [np.array([1.0, 2.0, 3.0, 4.0]), np.array([3.0, 0.0, 1.0, 0.0]), np.array([2.0, 1.0, 2.0, 2.0])]
    h_sum = np.zeros((5, 4))
    h_count = np.zeros(5, dtype=np.int64)
    for h in hs:
        h_sum[1] += h
        h_count[1] += 1
    h_sum[3] = [0, 0, 10.0, 20.0]
    h_count[3] = 1
    write_back_embeddings(h_sum, h_count, model.params, vocab.poi_cat, cfg)
    np.testing.assert_allclose(model.params["poi_table"].data[1], [2.0, 1.0])
    # category 1: mean over POI means [2, 2] and [10, 20]
    np.testing.assert_allclose(model.params["cat_table"].data[1], [6.0, 11.0])


def test_epoch_collects_final_layer_states():
    """Single batch, so the collected states equal one forward pass on the pre-step parameters."""
    ds = second_order_dataset(n_sequences=12, n_pois=6, seed=4)
    cfg, model, adam, index, rng = _setup(ds, batch_size=64, gamma=0.5, neighbor_scope="global")
    train = ds.split("train")
    shadow_rng = copy.deepcopy(rng)
    shadow = copy.deepcopy(model)

    order = shadow_rng.permutation(len(train))
    augs = [augment_for_training(train[i], ds.vocab, index, cfg.gamma, shadow_rng) for i in order]
    batch = collate(augs, ds.vocab.poi_cat)
    h = shadow.forward(batch).final_h.data
    expected_sum = np.zeros((ds.vocab.n_pois, 16))
    np.add.at(expected_sum, batch.node_pois, h)

    stats = train_epoch(model, train, ds.vocab, index, adam, rng)
    np.testing.assert_allclose(stats.h_sum, expected_sum, rtol=1e-12)
    np.testing.assert_array_equal(stats.h_count, np.bincount(batch.node_pois, minlength=ds.vocab.n_pois))

    before = {k: v.shape for k, v in model.params.state_dict().items()}
    write_back_embeddings(stats.h_sum, stats.h_count, model.params, ds.vocab.poi_cat, cfg)
    for k, v in model.params.state_dict().items():
        assert v.shape == before[k] and np.all(np.isfinite(v))


# -- loss and training loop -----------------------------------------------------


def test_l2_term_matches_norm():
    ds = second_order_dataset(n_sequences=6, seed=5)
    cfg, model, _, _, _ = _setup(ds, l2_lambda=1e-5)
    augs = [augment_for_training(s, ds.vocab, None, 0.0, None) for s in ds.sequences]
    trace = model.forward(collate(augs, ds.vocab.poi_cat))
    with_l2 = model.loss(trace)[0].item()
    without = model.loss(trace, l2=0.0)[0].item()
    norm = sum(float(np.sum(p.data.astype(np.float64) ** 2)) for p in model.parameters())
    assert (with_l2 - without) == pytest.approx(1e-5 * norm, rel=1e-8)


def test_target_never_an_edge_source():
    ds = second_order_dataset(n_sequences=40, n_pois=8, seed=6)
    index = build_transition_index(ds.sequences, ds.vocab, "global")
    rng = np.random.default_rng(0)
    for _ in range(5):
        for s in ds.split("train"):
            aug = augment_for_training(s, ds.vocab, index, 1.0, rng)
            for src, _, _, kind in aug.edges:
                if kind == "sampled":
                    assert aug.nodes[src] != s.pois[-1]


def test_loss_decreases_on_single_sequence():
    vocab = toy_vocab(n_pois=8)
    seq = make_seq(0, [0, 1, 2, 3, 4, 5, 6, 7, 0, 1], vocab)
    ds = Dataset(vocab, [seq], DatasetConfig(min_seq_len=2))
    cfg = TrainConfig(dim=8, dtype="float64", seed=1, max_epochs=2)
    res = fit(ds, cfg)
    losses = [r["loss"] for r in res.log]
    assert len(losses) == 2 and losses[1] < losses[0]


def test_non_finite_loss_aborts():
    ds = second_order_dataset(n_sequences=6, seed=7)
    cfg, model, adam, index, rng = _setup(ds)
    model.params["W_p"].data[:] = np.nan
    with pytest.raises(NumericError, match="epoch 4, batch 0"):
        train_epoch(model, ds.split("train"), ds.vocab, index, adam, rng, epoch=4)


def test_early_stopper_plateau():
    stop = EarlyStopper(patience=2)
    seen = []
    for epoch, score in enumerate([0.1, 0.2, 0.3, 0.3, 0.3, 0.9], start=1):
        stop.update(epoch, score)
        seen.append(epoch)
        if stop.should_stop:
            break
    assert seen[-1] == 5
    assert stop.best_epoch == 3


def test_fit_returns_best_epoch(monkeypatch):
    scores = iter([0.1, 0.2, 0.3, 0.3, 0.3, 0.9, 0.9])

    def fake_eval(model, seqs, vocab, ks, split):
        v = next(scores)
        return EvalReport(split, {20: {"hr": v, "ndcg": v}}, len(seqs), 0.0)

    monkeypatch.setattr(T, "evaluate_split", fake_eval)
    ds = second_order_dataset(n_sequences=20, holdout=0.25, seed=8)
    res = fit(ds, TrainConfig(dim=4, max_epochs=10, patience=2, seed=0), valid_split="test")
    assert res.last_epoch == 5
    assert res.best_epoch == 3 and res.best.epoch == 3


def test_fit_is_deterministic(tmp_path):
    ds = second_order_dataset(n_sequences=20, holdout=0.2, seed=9)
    cfg = TrainConfig(dim=8, max_epochs=3, seed=4)
    a = fit(ds, cfg, log_path=tmp_path / "a.jsonl", valid_split="test")
    b = fit(ds, cfg, log_path=tmp_path / "b.jsonl", valid_split="test")

    def strip(path):
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        for r in rows:
            assert set(r) == {"epoch", "loss", "poi_loss", "cat_loss", "val_hr20", "val_ndcg20", "wall_seconds"}
            del r["wall_seconds"]
        return rows

    assert strip(tmp_path / "a.jsonl") == strip(tmp_path / "b.jsonl")
    assert len(strip(tmp_path / "a.jsonl")) == 3
    for k, v in a.best.params.items():
        assert v.tobytes() == b.best.params[k].tobytes()


def test_fit_without_validation_uses_last_epoch():
    ds = second_order_dataset(n_sequences=10, seed=10)
    res = fit(ds, TrainConfig(dim=4, max_epochs=2, seed=0))
    assert res.best_epoch == res.last_epoch == 2
    assert all(r["val_ndcg20"] is None for r in res.log)
