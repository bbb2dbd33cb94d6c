import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peft_forge.data import (
    CLS,
    PAD,
    SEP,
    UNK,
    ParseError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_qrels,
    read_run,
    read_run_rows,
    read_triples,
    save_dataset,
    tokenize,
    write_qrels,
    write_run,
    write_triples,
)
from peft_forge.ranking import mrr_at_k
from peft_forge.transformer import ConfigError

SMALL = SyntheticSpec(n_topics=5, n_queries=20, n_docs=40, vocab_size=64, query_len=4, doc_len=8,
                      n_dev_queries=10, k_negatives=3, seed=3)


def test_reserved_ids():
    assert (PAD, UNK, CLS, SEP) == (0, 1, 2, 3)
    vocab = generate_synthetic(SMALL).corpus.vocab
    assert vocab["[PAD]"] == 0 and vocab["[SEP]"] == 3 and len(vocab) <= SMALL.vocab_size


def test_generation_is_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    assert a.corpus.documents == b.corpus.documents and a.triples == b.triples and a.qrels == b.qrels
    c = generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, "seed": 4}))
    assert c.corpus.documents != a.corpus.documents


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 6), st.floats(0.55, 1.0))
def test_triples_respect_qrels(seed, topics, purity):
    spec = SyntheticSpec(n_topics=topics, n_queries=15, n_docs=4 * topics, vocab_size=60, query_len=3,
                         doc_len=5, n_dev_queries=3, k_negatives=2, seed=seed, topic_purity=purity)
    data = generate_synthetic(spec)
    for qid, pos, negs in data.triples:
        assert data.qrels[qid][pos] >= 1
        assert all(n not in data.qrels[qid] for n in negs)
        assert len(set(negs)) == len(negs) == 2
    assert set(data.queries).isdisjoint(data.dev_queries)


def test_purity_one_block_overlap_oracle_is_perfect():
    spec = SyntheticSpec(**{**SMALL.__dict__, "topic_purity": 1.0})
    data = generate_synthetic(spec)
    per_topic, _ = spec.blocks()
    block = lambda t: (t - 4) // per_topic
    run = {}
    for qid, q in data.dev_queries.items():
        qb = {block(t) for t in q}
        run[qid] = {d: float(sum(block(t) in qb for t in toks)) for d, toks in data.corpus.documents.items()}
    dev_qrels = {q: data.qrels[q] for q in data.dev_queries}
    assert mrr_at_k(run, dev_qrels, 10) == 1.0


def test_graded_relevance():
    data = generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, "graded_fraction": 0.5}))
    grades = {g for rel in data.qrels.values() for g in rel.values()}
    assert grades == {1, 2}


@pytest.mark.parametrize("kw", [dict(topic_purity=0.5), dict(vocab_size=8), dict(k_negatives=0),
                                dict(n_docs=6), dict(graded_fraction=2.0), dict(doc_len=0)])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, **kw}))


def test_tokenize():
    vocab = {"[PAD]": 0, "[UNK]": 1, "hello": 4}
    assert tokenize("Hello  world", vocab) == [4, 1]
    assert tokenize("", vocab) == []
    with pytest.raises(ValueError):
        tokenize("x", {})


def test_dataset_round_trip(tmp_path):
    data = generate_synthetic(SMALL)
    save_dataset(tmp_path, data)
    back = load_dataset(tmp_path)
    assert back.corpus.documents == data.corpus.documents
    assert back.queries == data.queries and back.dev_queries == data.dev_queries
    assert back.qrels == data.qrels
    assert [(q, p, list(n)) for q, p, n in back.triples] == data.triples


def test_run_file_format_and_round_trip(tmp_path):
    run = {"q2": {"b": 0.5, "a": 0.5, "c": 1.25}, "q1": {"x": -1.0}}
    path = tmp_path / "run.txt"
    write_run(path, run, tag="t")
    lines = path.read_text().splitlines()
    assert lines[0] == "q1 Q0 x 1 -1.0 t"
    assert lines[1:] == ["q2 Q0 c 1 1.25 t", "q2 Q0 a 2 0.5 t", "q2 Q0 b 3 0.5 t"]
    assert read_run(path) == run


def test_run_rejects_rank_gaps(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("q Q0 a 1 2.0 t\nq Q0 b 3 1.0 t\n")
    with pytest.raises(ParseError, match="gaps"):
        read_run_rows(path)
    path.write_text("q Q0 a one 2.0 t\n")
    with pytest.raises(ParseError, match=":1:"):
        read_run_rows(path)


def test_qrels_round_trip_and_errors(tmp_path):
    qrels = {"q1": {"d1": 1, "d2": 0}, "q2": {"d3": 2}}
    path = tmp_path / "qrels.txt"
    write_qrels(path, qrels)
    assert read_qrels(path) == qrels
    for bad in ("q 0 d\n", "q 0 d x\n", "q 0 d -1\n", "q 0 d 1\nq 0 d 1\n"):
        path.write_text(bad)
        with pytest.raises(ParseError):
            read_qrels(path)


def test_triples_round_trip(tmp_path):
    triples = [("q1", "d1", ["d2", "d3"]), ("q2", "d4", ["d5"])]
    path = tmp_path / "t.tsv"
    write_triples(path, triples)
    assert path.read_text().splitlines()[0] == "q1\td1\td2"
    assert read_triples(path) == triples
    path.write_text("q1 d1 d2\n")
    with pytest.raises(ParseError):
        read_triples(path)


def test_no_queries_gives_empty_sets():
    data = generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, "n_queries": 0, "n_dev_queries": 0}))
    assert data.queries == {} and data.qrels == {} and data.triples == []
    assert len(data.corpus.documents) == SMALL.n_docs


def test_tokenize_lowercases():
    vocab = {"[PAD]": 0, "[UNK]": 1, "a": 4}
    ids = tokenize("A a", vocab)
    assert ids == [4, 4]


def test_qrels_line_example(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("1 0 D7 2\n")
    assert read_qrels(path) == {"1": {"D7": 2}}
