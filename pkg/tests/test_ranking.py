import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peft_forge import numerics as nx
from peft_forge.numerics import Parameter, Tensor
from peft_forge.ranking import (
    CLS_ID,
    SEP_ID,
    BiEncoder,
    CrossEncoder,
    RankingExample,
    evaluate,
    listwise_loss,
    mrr_at_k,
    ndcg_at_k,
    pad_batch,
    ranked,
    recall_at_k,
)
from peft_forge.transformer import Encoder, EncoderConfig

CFG = EncoderConfig(d_model=8, n_heads=2, n_layers=1, vocab_size=40, max_seq_len=32, init_std=0.3)


def random_instance(rng):
    run, qrels = {}, {}
    for q in range(rng.integers(1, 6)):
        docs = [f"d{j}" for j in range(rng.integers(1, 15))]
        # coarse scores so ties are common
        run[f"q{q}"] = {d: float(rng.integers(0, 4)) for d in docs}
        qrels[f"q{q}"] = {d: int(rng.integers(0, 3)) for d in rng.choice(docs + ["extra"], size=3)}
    return run, qrels


def oracle_order(scores):
    docs = np.array(sorted(scores))  # ascending id first, then stable sort by score
    vals = np.array([scores[d] for d in docs])
    return list(docs[np.argsort(-vals, kind="stable")])


def oracle_metrics(run, qrels, k):
    mrr = ndcg = rec = 0.0
    for qid, scores in run.items():
        order = oracle_order(scores)[:k]
        rel = qrels.get(qid, {})
        hits = [i for i, d in enumerate(order) if rel.get(d, 0) > 0]
        mrr += 1.0 / (hits[0] + 1) if hits else 0.0
        dcg = 0.0
        for i, d in enumerate(order):
            dcg += (2 ** rel.get(d, 0) - 1) / math.log2(i + 2)
        grades = sorted([g for g in rel.values() if g > 0], reverse=True)[:k]
        idcg = 0.0
        for i, g in enumerate(grades):
            idcg += (2 ** g - 1) / math.log2(i + 2)
        ndcg += dcg / idcg if idcg else 0.0
        relevant = {d for d, g in rel.items() if g > 0}
        rec += len(relevant & set(order)) / len(relevant) if relevant else 0.0
    n = len(run)
    return mrr / n, ndcg / n, rec / n


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    run, qrels = random_instance(rng)
    k = int(rng.integers(1, 12))
    mrr, ndcg, rec = oracle_metrics(run, qrels, k)
    assert mrr_at_k(run, qrels, k) == pytest.approx(mrr, abs=1e-12)
    assert ndcg_at_k(run, qrels, k) == pytest.approx(ndcg, abs=1e-12)
    assert recall_at_k(run, qrels, k) == pytest.approx(rec, abs=1e-12)


def test_metric_hand_cases():
    qrels = {"q": {"a": 1}}
    assert mrr_at_k({"q": {"a": 3.0, "b": 1.0}}, qrels, 10) == 1.0
    assert mrr_at_k({"q": {"a": 1.0, "b": 3.0}}, qrels, 10) == 0.5
    assert mrr_at_k({"q": {"a": 1.0, "b": 3.0}}, qrels, 1) == 0.0
    assert ndcg_at_k({"q": {"a": 1.0, "b": 3.0}}, qrels, 10) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_k({"q": {"a": 1.0}}, {"q": {"a": 0}}, 10) == 0.0


def test_ties_break_by_docid():
    assert ranked({"b": 1.0, "a": 1.0, "c": 2.0}) == ["c", "a", "b"]
    assert mrr_at_k({"q": {"b": 1.0, "a": 1.0}}, {"q": {"b": 1}}, 10) == 0.5


def test_empty_and_unjudged(caplog):
    assert mrr_at_k({}, {}, 10) == 0.0
    assert evaluate({"q": {"a": 1.0}}, {}, ["mrr@10", "ndcg@10", "recall@100"]) == \
        {"mrr@10": 0.0, "ndcg@10": 0.0, "recall@100": 0.0}
    assert "no qrels" in caplog.text


def test_loss_of_uniform_scores_is_log_list_length():
    assert listwise_loss(np.zeros((3, 8))).item() == pytest.approx(math.log(8), abs=1e-12)
    assert round(math.log(8), 4) == 2.0794


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_loss_shift_invariance(seed, c):
    s = np.random.default_rng(seed).normal(size=(4, 6))
    assert listwise_loss(s + c).item() == pytest.approx(listwise_loss(s).item(), abs=1e-9)


def test_loss_gradient_matches_finite_differences():
    p = Parameter(np.random.default_rng(0).normal(size=(3, 5)), "s")
    nx.backward(listwise_loss(p))
    numeric = nx.finite_difference_grad(lambda x: listwise_loss(x).item(), p.data)
    assert nx.relative_error(p.grad, numeric) <= 1e-7


def test_loss_decreases_with_positive_margin():
    base = listwise_loss(np.array([[0.0, 1.0, 1.0]])).item()
    assert listwise_loss(np.array([[2.0, 1.0, 1.0]])).item() < base
    with pytest.raises(ValueError):
        listwise_loss(np.zeros((2, 1)))


def test_pad_batch():
    out = pad_batch([[5, 6, 7], [8]], max_len=2)
    assert out.tolist() == [[5, 6], [8, 0]]
    assert pad_batch([]).shape == (0, 0)


def test_example_needs_negative():
    with pytest.raises(ValueError):
        RankingExample("q", (4,), (5,), [])


def test_bi_scores_are_dot_products():
    m = BiEncoder(Encoder(CFG, seed=3), query_max_len=6, doc_max_len=8)
    ex = [RankingExample("q", (4, 5), (6, 7, 8), [(9,), (10, 11)])]
    s = m.batch_scores(ex).data
    q = m.represent([(4, 5)], "query").data[0]
    for j, doc in enumerate([(6, 7, 8), (9,), (10, 11)]):
        assert s[0, j] == pytest.approx(q @ m.represent([doc], "doc").data[0], abs=1e-12)
        assert s[0, j] == pytest.approx(m.score_bi((4, 5), doc), abs=1e-12)


def test_cross_pair_layout_and_zero_head():
    m = CrossEncoder(Encoder(CFG, seed=3), max_len=8, query_max_len=3)
    assert m.pair_tokens([4, 5], [6, 7, 8, 9, 10]) == [CLS_ID, 4, 5, SEP_ID, 6, 7, 8, SEP_ID]
    assert m.pair_tokens([4, 5, 6, 7], [9]) == [CLS_ID, 4, 5, 6, SEP_ID, 9, SEP_ID]
    ex = [RankingExample("q", (4,), (6,), [(7,), (8,), (9,), (10,), (11,)])]
    assert listwise_loss(m.batch_scores(ex)).item() == pytest.approx(math.log(6), abs=1e-6)


def test_cross_batch_matches_single_scores():
    m = CrossEncoder(Encoder(CFG, seed=4), max_len=16)
    m.head_params["head.weight"].data[...] = np.random.default_rng(0).normal(size=(8, 1))
    ex = [RankingExample("q", (4, 5), (6, 7, 8), [(9,), (10, 11, 12, 13)])]
    s = m.batch_scores(ex).data[0]
    for j, doc in enumerate([(6, 7, 8), (9,), (10, 11, 12, 13)]):
        assert s[j] == pytest.approx(m.score_cross((4, 5), doc), abs=1e-12)


def test_frozen_checksums_and_count():
    m = CrossEncoder(Encoder(CFG))
    m.encoder.set_trainable(False)
    sums = m.frozen_checksums()
    assert len(sums) == len(m.encoder.parameters())
    assert m.tuned_count() == 0
