"""Bi-/cross-encoder scoring, listwise softmax loss and ranking metrics."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor
from .transformer import PAD_ID, Encoder, HookSet

log = logging.getLogger(__name__)

CLS_ID, SEP_ID = 2, 3

# qid -> {docid: score} and qid -> {docid: grade}
Run = dict
Qrels = dict


@dataclass
class RankingExample:
    qid: str
    query: tuple
    positive: tuple
    negatives: list
    pos_id: str = ""
    neg_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.negatives) < 1:
            raise ValueError("a ranking example needs at least one negative")


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> np.ndarray:
    """Right-pad with PAD_ID into a (len(seqs), n) int array."""
    seqs = [list(s)[:max_len] if max_len else list(s) for s in seqs]
    n = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def checksum(p: Parameter) -> str:
    return hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()


class RankingModel:
    architecture = ""
    towers: tuple = ()

    def __init__(self, encoder: Encoder):
        self.encoder = encoder
        self.hooks: dict[str, HookSet] = {t: HookSet() for t in self.towers}
        self.pet_params: dict[str, Parameter] = {}
        self.head_params: dict[str, Parameter] = {}
        self.tuning: str | None = None

    def set_hooks(self, hooks: dict[str, HookSet]) -> None:
        self.hooks = dict(hooks)

    def named_parameters(self) -> dict[str, Parameter]:
        out = self.encoder.named_parameters()
        out.update(self.pet_params)
        out.update(self.head_params)
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.named_parameters().values() if p.trainable]

    def tuned_count(self) -> int:
        """Trainable size excluding the task head."""
        return sum(p.size for path, p in self.named_parameters().items()
                   if p.trainable and path not in self.head_params)

    def frozen_checksums(self) -> dict[str, str]:
        return {path: checksum(p) for path, p in self.named_parameters().items() if not p.trainable}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def batch_scores(self, batch: Sequence[RankingExample]) -> Tensor:
        raise NotImplementedError

    def batch_loss(self, batch: Sequence[RankingExample]) -> Tensor:
        return listwise_loss(self.batch_scores(batch))


class BiEncoder(RankingModel):
    """Weight-shared query/document towers scored by dot product of first-position states."""

    architecture = "bi"
    towers = ("query", "doc")

    def __init__(self, encoder: Encoder, query_max_len: int = 32, doc_max_len: int = 128):
        super().__init__(encoder)
        shared = HookSet()
        self.hooks = {"query": shared, "doc": shared}
        self.query_max_len = query_max_len
        self.doc_max_len = doc_max_len

    def _wrap(self, seqs, max_len):
        return pad_batch([[CLS_ID] + list(s)[: max_len - 2] + [SEP_ID] for s in seqs])

    def represent(self, seqs, tower: str) -> Tensor:
        """Pooled (len(seqs), d) representations for one tower."""
        max_len = self.query_max_len if tower == "query" else self.doc_max_len
        h = self.encoder.encode(self._wrap(seqs, max_len), self.hooks[tower])
        return h[:, 0, :]

    def score_bi(self, q, d) -> float:
        with nx.no_grad():
            a = self.represent([q], "query").data[0]
            b = self.represent([d], "doc").data[0]
        return float(a @ b)

    def batch_scores(self, batch) -> Tensor:
        docs = [doc for ex in batch for doc in [ex.positive, *ex.negatives]]
        k1 = 1 + len(batch[0].negatives)
        q = self.represent([ex.query for ex in batch], "query")
        dvec = self.represent(docs, "doc").reshape(len(batch), k1, -1)
        d = q.shape[-1]
        return (dvec @ q.reshape(len(batch), d, 1)).reshape(len(batch), k1)


class CrossEncoder(RankingModel):
    """Single encoder over [CLS] q [SEP] d [SEP] with a linear scoring head."""

    architecture = "cross"
    towers = ("pair",)

    def __init__(self, encoder: Encoder, max_len: int = 128, query_max_len: int = 32):
        super().__init__(encoder)
        d = encoder.config.d_model
        self.max_len = min(max_len, encoder.config.max_seq_len)
        self.query_max_len = query_max_len
        self.head_params = {
            "head.weight": Parameter(np.zeros((d, 1)), "head.weight", dtype=encoder.dtype),
            "head.bias": Parameter(np.zeros(1), "head.bias", dtype=encoder.dtype),
        }

    def pair_tokens(self, q, d) -> list[int]:
        q = list(q)[: min(self.query_max_len, self.max_len - 3)]
        room = self.max_len - 3 - len(q)
        return [CLS_ID] + q + [SEP_ID] + list(d)[:room] + [SEP_ID]

    def _score(self, pairs) -> Tensor:
        h = self.encoder.encode(pad_batch(pairs), self.hooks["pair"])
        out = h[:, 0, :] @ self.head_params["head.weight"] + self.head_params["head.bias"]
        return out.reshape(len(pairs))

    def score_cross(self, q, d) -> float:
        with nx.no_grad():
            return float(self._score([self.pair_tokens(q, d)]).data[0])

    def batch_scores(self, batch) -> Tensor:
        k1 = 1 + len(batch[0].negatives)
        pairs = [self.pair_tokens(ex.query, doc) for ex in batch for doc in [ex.positive, *ex.negatives]]
        return self._score(pairs).reshape(len(batch), k1)


# -- loss ----------------------------------------------------------------------

def listwise_loss(scores) -> Tensor:
    """Mean over rows of -log softmax(scores)[0]; column 0 holds the positive."""
    s = nx.as_tensor(scores)
    if s.ndim == 1:
        s = s.reshape(1, s.shape[0])
    if s.shape[-1] < 2:
        raise ValueError("listwise loss needs a positive and at least one negative")
    per_row = nx.logsumexp_rows(s) - s[:, 0]
    return nx.total(per_row) * (1.0 / s.shape[0])


# -- metrics ---------------------------------------------------------------------

def ranked(scores: dict) -> list[str]:
    """Doc ids by descending score, ties by ascending doc id."""
    return [doc for doc, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def _judged(qid, qrels) -> dict:
    if qid not in qrels:
        log.warning("query %s has no qrels; counted with zero relevant", qid)
        return {}
    return qrels[qid]


def mrr_at_k(run: Run, qrels: Qrels, k: int) -> float:
    if not run:
        return 0.0
    total = 0.0
    for qid, scores in run.items():
        rel = _judged(qid, qrels)
        for rank, doc in enumerate(ranked(scores)[:k], start=1):
            if rel.get(doc, 0) > 0:
                total += 1.0 / rank
                break
    return total / len(run)


def ndcg_at_k(run: Run, qrels: Qrels, k: int) -> float:
    if not run:
        return 0.0
    total = 0.0
    for qid, scores in run.items():
        rel = _judged(qid, qrels)
        dcg = sum((2.0 ** rel.get(doc, 0) - 1.0) / math.log2(rank + 1)
                  for rank, doc in enumerate(ranked(scores)[:k], start=1))
        ideal = sorted((g for g in rel.values() if g > 0), reverse=True)[:k]
        idcg = sum((2.0 ** g - 1.0) / math.log2(rank + 1) for rank, g in enumerate(ideal, start=1))
        total += dcg / idcg if idcg > 0 else 0.0
    return total / len(run)


def recall_at_k(run: Run, qrels: Qrels, k: int) -> float:
    if not run:
        return 0.0
    total = 0.0
    for qid, scores in run.items():
        rel = {doc for doc, g in _judged(qid, qrels).items() if g > 0}
        if rel:
            total += len(rel.intersection(ranked(scores)[:k])) / len(rel)
    return total / len(run)


METRICS = {"mrr": mrr_at_k, "ndcg": ndcg_at_k, "recall": recall_at_k}


def evaluate(run: Run, qrels: Qrels, names: Sequence[str]) -> dict[str, float]:
    """Compute metrics named like ``mrr@10`` or ``recall@100``."""
    out = {}
    for name in names:
        metric, _, k = name.partition("@")
        out[name] = METRICS[metric](run, qrels, int(k))
    return out
