"""Synthetic latent-topic retrieval data, a toy tokenizer, and TREC-style files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transformer import ConfigError

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = {"[PAD]": PAD, "[UNK]": UNK, "[CLS]": CLS, "[SEP]": SEP}


class ParseError(ValueError):
    pass


@dataclass
class Corpus:
    documents: dict  # docid -> tuple of token ids
    vocab: dict      # token string -> id

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def inverse_vocab(self) -> dict:
        return {i: w for w, i in self.vocab.items()}

    def text(self, tokens) -> str:
        inv = self.inverse_vocab()
        return " ".join(inv[t] for t in tokens)


@dataclass(frozen=True)
class SyntheticSpec:
    n_topics: int = 50
    n_queries: int = 500
    n_docs: int = 2000
    vocab_size: int = 504
    query_len: int = 6
    doc_len: int = 24
    topic_purity: float = 0.9
    seed: int = 0
    n_dev_queries: int = 100
    k_negatives: int = 7
    shared_vocab: int | None = None
    graded_fraction: float = 0.0

    def blocks(self) -> tuple[int, int]:
        """(words per topic block, shared block size)."""
        free = self.vocab_size - len(RESERVED)
        shared = self.shared_vocab if self.shared_vocab is not None else max(1, free // 5)
        return (free - shared) // max(self.n_topics, 1), shared

    def validate(self) -> None:
        if self.n_topics < 1 or self.n_docs < 1:
            raise ConfigError("need at least one topic and one document")
        if min(self.n_queries, self.n_dev_queries) < 0 or self.k_negatives < 1:
            raise ConfigError("query counts must be >= 0 and k_negatives >= 1")
        if self.query_len < 1 or self.doc_len < 1:
            raise ConfigError("sequence lengths must be >= 1")
        if not 0.5 < self.topic_purity <= 1.0:
            raise ConfigError("topic_purity must lie in (0.5, 1]")
        per_topic, shared = self.blocks()
        if per_topic < 1 or shared < 1:
            raise ConfigError(f"vocab_size={self.vocab_size} too small for {self.n_topics} topic blocks plus a shared block")
        if self.n_docs < 2 * self.n_topics and self.n_queries:
            raise ConfigError("need at least two documents per topic to form triples")
        if not 0 <= self.graded_fraction <= 1:
            raise ConfigError("graded_fraction must lie in [0, 1]")


@dataclass
class SyntheticData:
    corpus: Corpus
    queries: dict        # training qid -> tokens
    dev_queries: dict    # held-out qid -> tokens
    qrels: dict          # qid -> {docid: grade}, train and dev
    triples: list        # (qid, pos_docid, [neg_docids])
    doc_topic: dict = field(default_factory=dict)
    query_topic: dict = field(default_factory=dict)


def build_vocab(spec: SyntheticSpec) -> dict:
    per_topic, shared = spec.blocks()
    vocab = dict(RESERVED)
    for t in range(spec.n_topics):
        for j in range(per_topic):
            vocab[f"t{t}w{j}"] = len(vocab)
    for j in range(shared):
        vocab[f"s{j}"] = len(vocab)
    return vocab


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    per_topic, shared = spec.blocks()
    vocab = build_vocab(spec)
    first_shared = len(RESERVED) + spec.n_topics * per_topic

    def sample(topic: int, length: int) -> tuple:
        from_topic = rng.random(length) < spec.topic_purity
        topical = len(RESERVED) + topic * per_topic + rng.integers(0, per_topic, size=length)
        common = first_shared + rng.integers(0, shared, size=length)
        return tuple(int(t) for t in np.where(from_topic, topical, common))

    doc_topics = rng.permutation(np.arange(spec.n_docs) % spec.n_topics)
    documents, doc_topic = {}, {}
    for i, t in enumerate(doc_topics):
        documents[f"D{i}"] = sample(int(t), spec.doc_len)
        doc_topic[f"D{i}"] = int(t)
    by_topic: dict[int, list[str]] = {}
    for doc, t in doc_topic.items():
        by_topic.setdefault(t, []).append(doc)

    n_all = spec.n_queries + spec.n_dev_queries
    q_topics = rng.integers(0, spec.n_topics, size=n_all)
    queries, dev_queries, qrels, query_topic = {}, {}, {}, {}
    for i, t in enumerate(q_topics):
        qid = f"Q{i}"
        (queries if i < spec.n_queries else dev_queries)[qid] = sample(int(t), spec.query_len)
        query_topic[qid] = int(t)
        rel = {doc: 1 for doc in by_topic.get(int(t), [])}
        if spec.graded_fraction > 0:
            for doc in rel:
                if rng.random() < spec.graded_fraction:
                    rel[doc] = 2
        qrels[qid] = rel

    all_docs = list(documents)
    triples = []
    for qid in queries:
        rel = by_topic.get(query_topic[qid], [])
        if not rel:
            continue
        pos = rel[int(rng.integers(0, len(rel)))]
        negs: list[str] = []
        while len(negs) < spec.k_negatives:
            cand = all_docs[int(rng.integers(0, len(all_docs)))]
            if doc_topic[cand] != query_topic[qid] and cand not in negs:
                negs.append(cand)
        triples.append((qid, pos, negs))
    return SyntheticData(Corpus(documents, vocab), queries, dev_queries, qrels, triples, doc_topic, query_topic)


def tokenize(text: str, vocab: dict) -> list[int]:
    """Lowercased whitespace split; unknown words map to UNK."""
    if not vocab:
        raise ValueError("vocab must be non-empty")
    return [vocab.get(w, UNK) for w in text.lower().split()]


# -- files -----------------------------------------------------------------------

def _rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line.rstrip("\n")


def read_qrels(path) -> dict:
    qrels: dict = {}
    for lineno, line in _rows(path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"{path}:{lineno}: expected 'qid 0 docid rel', got {line!r}")
        qid, _, doc, rel = parts
        try:
            grade = int(rel)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: relevance {rel!r} is not an integer") from None
        if grade < 0:
            raise ParseError(f"{path}:{lineno}: negative relevance grade")
        if doc in qrels.setdefault(qid, {}):
            raise ParseError(f"{path}:{lineno}: duplicate pair ({qid}, {doc})")
        qrels[qid][doc] = grade
    return qrels


def write_qrels(path, qrels: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for doc in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc} {qrels[qid][doc]}\n")


def run_rows(run: dict) -> list[tuple]:
    """(qid, docid, rank, score) rows, ranked by score with docid tie-break."""
    rows = []
    for qid, scores in run.items():
        order = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        rows += [(qid, doc, rank, score) for rank, (doc, score) in enumerate(order, start=1)]
    return rows


def write_run(path, run, tag: str = "peft_forge") -> None:
    """Write a TREC run. ``run`` is qid -> {docid: score} or a list of (qid, docid, rank, score)."""
    rows = run_rows(run) if isinstance(run, dict) else list(run)
    rows.sort(key=lambda r: (r[0], r[2]))
    with open(path, "w", encoding="utf-8") as fh:
        for qid, doc, rank, score in rows:
            fh.write(f"{qid} Q0 {doc} {rank} {float(score)!r} {tag}\n")


def read_run_rows(path) -> list[tuple]:
    rows, ranks = [], {}
    for lineno, line in _rows(path):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag', got {line!r}")
        qid, _, doc, rank, score, _ = parts
        try:
            rank_i, score_f = int(rank), float(score)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad rank or score in {line!r}") from None
        rows.append((qid, doc, rank_i, score_f))
        ranks.setdefault(qid, []).append(rank_i)
    for qid, rs in ranks.items():
        if sorted(rs) != list(range(1, len(rs) + 1)):
            raise ParseError(f"{path}: ranks for query {qid} are not 1..{len(rs)} without gaps")
    return rows


def read_run(path) -> dict:
    run: dict = {}
    for qid, doc, _, score in read_run_rows(path):
        run.setdefault(qid, {})[doc] = score
    return run


def write_tsv(path, mapping: dict, corpus: Corpus) -> None:
    """``id<TAB>text`` lines for a corpus or query set."""
    inv = corpus.inverse_vocab()
    with open(path, "w", encoding="utf-8") as fh:
        for key, toks in mapping.items():
            fh.write(f"{key}\t{' '.join(inv[t] for t in toks)}\n")


def read_tsv(path, vocab: dict) -> dict:
    out = {}
    for lineno, line in _rows(path):
        key, sep, text = line.partition("\t")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected 'id<TAB>text'")
        out[key] = tuple(tokenize(text, vocab))
    return out


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, pos, negs in triples:
            for neg in negs:
                fh.write(f"{qid}\t{pos}\t{neg}\n")


def read_triples(path) -> list[tuple]:
    """Group consecutive ``qid pos neg`` lines back into (qid, pos, [negs])."""
    out: list = []
    for lineno, line in _rows(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 'qid<TAB>pos<TAB>neg'")
        qid, pos, neg = parts
        if out and out[-1][0] == qid and out[-1][1] == pos:
            out[-1][2].append(neg)
        else:
            out.append((qid, pos, [neg]))
    return out


def write_vocab(path, vocab: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{idx}\t{word}\n")


def read_vocab(path) -> dict:
    vocab = {}
    for lineno, line in _rows(path):
        idx, sep, word = line.partition("\t")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected 'id<TAB>word'")
        vocab[word] = int(idx)
    return vocab


def save_dataset(directory, data: SyntheticData) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_vocab(d / "vocab.tsv", data.corpus.vocab)
    write_tsv(d / "corpus.tsv", data.corpus.documents, data.corpus)
    write_tsv(d / "queries.train.tsv", data.queries, data.corpus)
    write_tsv(d / "queries.dev.tsv", data.dev_queries, data.corpus)
    write_qrels(d / "qrels.txt", data.qrels)
    write_triples(d / "triples.train.tsv", data.triples)


def load_dataset(directory) -> SyntheticData:
    d = Path(directory)
    vocab = read_vocab(d / "vocab.tsv")
    corpus = Corpus(read_tsv(d / "corpus.tsv", vocab), vocab)
    return SyntheticData(
        corpus,
        read_tsv(d / "queries.train.tsv", vocab),
        read_tsv(d / "queries.dev.tsv", vocab),
        read_qrels(d / "qrels.txt"),
        read_triples(d / "triples.train.tsv"),
    )
