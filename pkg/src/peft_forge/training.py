"""Adam with linear warm-up, the training loop, and static hard-negative mining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .iaa import discrepancy_probe
from .numerics import ContractError, Parameter
from .ranking import BiEncoder, RankingExample, RankingModel

log = logging.getLogger(__name__)

FULL_FT_LR = 2e-5
PET_LR = 1e-4


class TrainingAborted(RuntimeError):
    pass


def default_lr(tuning: str | None) -> float:
    return FULL_FT_LR if tuning in (None, "full") else PET_LR


@dataclass
class OptimizerState:
    base_lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    _seen_backward: int = 0


def adam_step(state: OptimizerState, params: Sequence[Parameter], lr: float | None = None) -> None:
    """One bias-corrected Adam update of the trainable params; all grads are then zeroed."""
    if nx.backward_calls() == state._seen_backward:
        raise ContractError("adam_step called without a preceding backward()")
    state._seen_backward = nx.backward_calls()
    lr = state.base_lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        if p.trainable:
            m = state.m.get(p.path)
            if m is None:
                m = state.m[p.path] = np.zeros_like(p.data)
                state.v[p.path] = np.zeros_like(p.data)
            v = state.v[p.path]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear ramp to ``base_lr`` over the first ceil(warmup_frac * total) steps, then flat."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warm = math.ceil(warmup_frac * total_steps)
    if warm == 0 or step >= warm:
        return base_lr
    return base_lr * step / warm


@dataclass
class TrainConfig:
    lr: float | None = None
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    probe_every: int = 0
    probe_until: int | None = None  # last step that is probed
    metric: str = "mrr@10"
    warmup_frac: float = 0.1
    restore_best: bool = True
    max_steps: int | None = None


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    delta: float | None = None


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checksums_before: dict = field(default_factory=dict)
    checksums_after: dict = field(default_factory=dict)
    best_epoch: int | None = None

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def deltas(self) -> np.ndarray:
        return np.array([s.delta for s in self.steps if s.delta is not None])

    def to_text(self) -> str:
        lines = ["# step loss lr delta"]
        for s in self.steps:
            row = f"{s.step} {s.loss!r} {s.lr!r}"
            lines.append(row if s.delta is None else f"{row} {s.delta!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_report(text: str) -> list[StepRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"report line {lineno}: expected 'step loss lr [delta]'")
        delta = float(parts[3]) if len(parts) == 4 else None
        out.append(StepRecord(int(parts[0]), float(parts[1]), float(parts[2]), delta))
    return out


def read_report(path) -> list[StepRecord]:
    return parse_report(Path(path).read_text(encoding="utf-8"))


def _snapshot(model: RankingModel) -> dict:
    return {p.path: p.data.copy() for p in model.trainable_parameters()}


def train(model: RankingModel, examples: Sequence[RankingExample], cfg: TrainConfig,
          evaluate: Callable[[RankingModel], dict] | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> TrainReport:
    """Shuffled mini-batch training with listwise loss and scheduled Adam.

    ``evaluate`` is called at each epoch end; with ``restore_best`` the
    trainable weights of the best epoch (by ``cfg.metric``) are restored.
    """
    report = TrainReport(checksums_before=model.frozen_checksums())
    if cfg.epochs == 0:
        report.checksums_after = dict(report.checksums_before)
        return report
    if not examples:
        raise ValueError("training set is empty")
    if not model.trainable_parameters():
        raise ContractError("no trainable parameters installed")
    base_lr = cfg.lr if cfg.lr is not None else default_lr(model.tuning)
    rng = np.random.default_rng(cfg.seed)
    per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    state = OptimizerState(base_lr)
    params = list(model.named_parameters().values())
    model.zero_grad()
    best, best_state, step = -math.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(examples))
        for b in range(per_epoch):
            if step >= total:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [examples[i] for i in idx]
            step += 1
            lr = lr_schedule(step, total, base_lr, cfg.warmup_frac)
            delta = None
            if cfg.probe_every and (step - 1) % cfg.probe_every == 0 and (cfg.probe_until is None or step <= cfg.probe_until):
                delta = discrepancy_probe(model, batch)
            loss = model.batch_loss(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss {value} at step {step} (lr={lr:g}, epoch {epoch}, batch {b})")
            nx.backward(loss)
            adam_step(state, params, lr)
            rec = StepRecord(step, value, lr, delta)
            report.steps.append(rec)
            if on_step:
                on_step(rec)
        if evaluate is not None:
            metrics = evaluate(model)
            report.epochs.append(metrics)
            log.info("epoch %d: %s", epoch, metrics)
            if metrics[cfg.metric] > best:
                best, best_state, report.best_epoch = metrics[cfg.metric], _snapshot(model), epoch
        if step >= total:
            break
    if cfg.restore_best and best_state is not None:
        named = model.named_parameters()
        for path, arr in best_state.items():
            named[path].data[...] = arr
    report.checksums_after = model.frozen_checksums()
    changed = [p for p, h in report.checksums_before.items() if report.checksums_after.get(p) != h]
    if changed:
        raise ContractError(f"frozen parameters changed during training: {changed[:5]}")
    return report


# -- scoring and mining ---------------------------------------------------------

def represent_all(model: BiEncoder, seqs: dict, tower: str, chunk: int = 256) -> tuple[list, np.ndarray]:
    keys = list(seqs)
    vecs = []
    with nx.no_grad():
        for i in range(0, len(keys), chunk):
            vecs.append(model.represent([seqs[k] for k in keys[i:i + chunk]], tower).data)
    d = model.encoder.config.d_model
    return keys, (np.concatenate(vecs) if vecs else np.zeros((0, d)))


def retrieve(model: BiEncoder, queries: dict, documents: dict, depth: int = 100) -> dict:
    """Exhaustive dot-product retrieval; returns qid -> {docid: score} for the top ``depth``."""
    doc_ids, dvec = represent_all(model, documents, "doc")
    q_ids, qvec = represent_all(model, queries, "query")
    run = {}
    if not q_ids:
        return run
    scores = qvec @ dvec.T
    order_ids = np.array(doc_ids)
    for qi, qid in enumerate(q_ids):
        row = scores[qi]
        # descending score, ascending doc id on ties
        order = sorted(range(len(doc_ids)), key=lambda j: (-row[j], doc_ids[j]))[:depth]
        run[qid] = {str(order_ids[j]): float(row[j]) for j in order}
    return run


def lexical_candidates(queries: dict, documents: dict, depth: int = 100) -> dict:
    """First-stage candidates by query-term occurrence counts (ties by doc id)."""
    doc_ids = sorted(documents)
    counts = [np.bincount(np.asarray(documents[d], dtype=np.int64)) for d in doc_ids]
    out = {}
    for qid, q in queries.items():
        q = np.asarray(q, dtype=np.int64)
        scores = [int(c[q[q < len(c)]].sum()) for c in counts]
        order = sorted(range(len(doc_ids)), key=lambda j: (-scores[j], doc_ids[j]))[:depth]
        out[qid] = [doc_ids[j] for j in order]
    return out


def rerank(model, queries: dict, documents: dict, candidates: dict, chunk: int = 256) -> dict:
    """Score each query's candidate documents with the model's pair scorer."""
    run = {}
    for qid, docs in candidates.items():
        if qid not in queries:
            continue
        scores = []
        with nx.no_grad():
            for i in range(0, len(docs), chunk):
                part = docs[i:i + chunk]
                if model.architecture == "cross":
                    pairs = [model.pair_tokens(queries[qid], documents[d]) for d in part]
                    scores.extend(model._score(pairs).data.tolist())
                else:
                    q = model.represent([queries[qid]], "query").data[0]
                    dv = model.represent([documents[d] for d in part], "doc").data
                    scores.extend((dv @ q).tolist())
        run[qid] = dict(zip(docs, scores))
    return run


def mine_hard_negatives(model_warmup: BiEncoder, corpus: dict, queries: dict, qrels: dict, top_n: int,
                        positives: dict | None = None, seed: int = 0) -> list[tuple]:
    """Top-scoring non-relevant documents per query under the warm-up model.

    Returns (qid, pos_docid, [neg_docids]) triples. ``positives`` fixes the
    positive per query; otherwise one relevant document is drawn with ``seed``.
    """
    rng = np.random.default_rng(seed)
    doc_ids, dvec = represent_all(model_warmup, corpus, "doc")
    triples = []
    for qid in queries:
        rel = {d for d, g in qrels.get(qid, {}).items() if g > 0}
        if not rel:
            log.warning("query %s has no relevant document; skipped", qid)
            continue
        _, qv = represent_all(model_warmup, {qid: queries[qid]}, "query")
        scores = dvec @ qv[0]
        order = sorted(range(len(doc_ids)), key=lambda j: (-scores[j], doc_ids[j]))
        negs = [doc_ids[j] for j in order if doc_ids[j] not in rel][:top_n]
        if positives and qid in positives:
            pos = positives[qid]
        else:
            pool = sorted(rel)
            pos = pool[int(rng.integers(0, len(pool)))]
        triples.append((qid, pos, negs))
    return triples


def make_examples(triples, queries: dict, documents: dict) -> list[RankingExample]:
    return [RankingExample(qid, queries[qid], documents[pos], [documents[n] for n in negs], pos, list(negs))
            for qid, pos, negs in triples if qid in queries]
