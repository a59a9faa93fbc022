import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgrec.config import TrainConfig
from sgrec.evaluator import (
    RankedResult,
    evaluate_split,
    hit_ratio_at_k,
    ndcg_at_k,
    rank_of,
    rank_pois,
)
from sgrec.model import SGRecModel, collate
from sgrec.seq2graph import augment_sequence
from sgrec.synthetic import second_order_dataset


def _results(ranks):
    return [RankedResult(i, 0, r) for i, r in enumerate(ranks)]


def test_rank_argmax():
    assert rank_pois([0.1, 0.7, 0.2], 1).rank == 1


def test_rank_tie_break_by_index():
    r = rank_pois(np.full(5, 0.2), 2)
    assert r.rank == 3
    assert r.top == [0, 1, 2, 3, 4]


def test_top_list_sorted_descending():
    scores = np.array([0.1, 0.4, 0.4, 0.05, 0.05])
    assert rank_pois(scores, 0, k=5).top == [1, 2, 0, 3, 4]


def test_rank_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        # coarse values so that ties actually happen
        scores = rng.integers(0, 20, size=100) / 20
        truth = int(rng.integers(100))
        order = sorted(range(100), key=lambda i: (-scores[i], i))
        assert rank_of(scores, truth) == order.index(truth) + 1


def test_hr_examples():
    assert all(hit_ratio_at_k(_results([1, 1, 1]), k) == 1.0 for k in (1, 5, 10, 20))
    assert hit_ratio_at_k(_results([1, 7, 30]), 10) == pytest.approx(2 / 3)


def test_hr_brute_force():
    rng = np.random.default_rng(1)
    ranks = rng.integers(1, 200, size=1000).tolist()
    for k in (1, 5, 10, 20):
        count = 0
        for r in ranks:
            if r <= k:
                count += 1
        assert hit_ratio_at_k(_results(ranks), k) == count / 1000


def test_ndcg_examples():
    assert ndcg_at_k(_results([1]), 1) == 1.0
    assert ndcg_at_k(_results([3]), 5) == pytest.approx(0.5)
    assert ndcg_at_k(_results([11]), 10) == 0.0


def test_bad_k():
    with pytest.raises(ValueError):
        hit_ratio_at_k(_results([1]), 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
def test_metric_properties(ranks):
    res = _results(ranks)
    prev_hr = prev_nd = 0.0
    for k in (1, 5, 10, 20):
        hr, nd = hit_ratio_at_k(res, k), ndcg_at_k(res, k)
        assert 0.0 <= nd <= hr <= 1.0
        assert hr >= prev_hr and nd >= prev_nd
        prev_hr, prev_nd = hr, nd


# -- evaluate_split -------------------------------------------------------------


@pytest.fixture(scope="module")
def fixture50():
    ds = second_order_dataset(n_sequences=50, n_pois=30, seed=3)
    cfg = TrainConfig(dim=8, dtype="float64", seed=5)
    model = SGRecModel.for_vocab(ds.vocab, ds.max_seq_len, cfg)
    return ds, model


def _reference(model, seqs, vocab, ks):
    """One sequence at a time, ranking by an explicit sort."""
    hits = {k: 0 for k in ks}
    gains = {k: 0.0 for k in ks}
    cat_hits = 0
    for s in seqs:
        aug = augment_sequence(list(s.pois[:-1]), s.user, vocab)
        trace = model.forward(collate([aug], vocab.poi_cat), with_category=True)
        scores = trace.probs_poi.data[0]
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        rank = order.index(s.pois[-1]) + 1
        for k in ks:
            if rank <= k:
                hits[k] += 1
                gains[k] += 1 / math.log2(rank + 1)
        cat_hits += int(np.argmax(trace.probs_cat.data[0]) == s.cats[-1])
    n = len(seqs)
    return {k: (hits[k] / n, gains[k] / n) for k in ks}, cat_hits / n


def test_matches_reference_evaluator(fixture50):
    ds, model = fixture50
    ks = (1, 5, 10, 20)
    report = evaluate_split(model, ds.sequences, ds.vocab, ks, batch_size=7)
    expected, cat_acc = _reference(model, ds.sequences, ds.vocab, ks)
    assert report.n_sequences == 50
    for k in ks:
        assert report.hr(k) == expected[k][0]
        assert report.ndcg(k) == pytest.approx(expected[k][1], rel=1e-12)
    assert report.cat_accuracy == cat_acc


def test_evaluation_is_pure(fixture50):
    ds, model = fixture50
    before = model.params.state_dict()
    a = evaluate_split(model, ds.sequences, ds.vocab).to_dict()
    b = evaluate_split(model, ds.sequences, ds.vocab).to_dict()
    assert a == b
    for k, v in model.params.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_single_sequence_ranked_first(fixture50):
    ds, model = fixture50
    seq = ds.sequences[0]
    aug = augment_sequence(list(seq.pois[:-1]), seq.user, ds.vocab)
    probs = model.forward(collate([aug], ds.vocab.poi_cat)).probs_poi.data[0]
    model.params["b_p"].data[seq.pois[-1]] += 100.0 + probs.max()
    try:
        report = evaluate_split(model, [seq], ds.vocab, ks=(1,))
        assert report.hr(1) == report.ndcg(1) == 1.0
    finally:
        model.params["b_p"].data[seq.pois[-1]] -= 100.0 + probs.max()


def test_short_sequences_skipped(fixture50):
    ds, model = fixture50
    from sgrec.data import CheckInSequence

    short = CheckInSequence(0, (1,), (1,), (5,), "test")
    report = evaluate_split(model, [short] + list(ds.sequences[:3]), ds.vocab)
    assert report.n_sequences == 3
    assert [r.seq_id for r in report.results] == [1, 2, 3]


def test_report_files(tmp_path, fixture50):
    ds, model = fixture50
    report = evaluate_split(model, ds.sequences[:5], ds.vocab, ks=(1, 20), split="valid")
    report.write_json(tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["split"] == "valid" and data["n_sequences"] == 5
    assert set(data["metrics"]) == {"1", "20"}
    assert set(data["metrics"]["20"]) == {"hr", "ndcg"}
    report.write_ranks_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "seq_id,truth,rank" and len(lines) == 6
