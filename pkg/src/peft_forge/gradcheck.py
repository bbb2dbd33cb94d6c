"""Finite-difference checks of every tuning configuration on tiny models."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .iaa import IaaConfig, wire_iaa
from .numerics import Tensor
from .pet import PetConfig, install_pet
from .ranking import BiEncoder, CrossEncoder, RankingExample, listwise_loss
from .transformer import Encoder, EncoderConfig

CONFIGS = {
    "bare": None,
    "full": PetConfig("full"),
    "bitfit": PetConfig("bitfit"),
    "prefix": PetConfig("prefix", l=2),
    "adapter": PetConfig("adapter", r=2),
    "mam": PetConfig("mam", r=2, l=2),
    "lora": PetConfig("lora", r=2, s=0.5),
    "ss_prefix": PetConfig("ss_prefix", l=2, ls=1),
    "ss_lora": PetConfig("ss_lora", r=2),
    "iaa-s": IaaConfig("S", r=2, ar=2),
    "iaa-l": IaaConfig("L", "lora", r=2, ar=2),
    "iaa-m": IaaConfig("M", r=2, ar=3),
}


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    coords: int
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<10} seed={self.seed:<3} coords={self.coords:<4} rel_err={self.error:.2e} {status}"


def _tokens(rng, vocab, n):
    return [tuple(int(t) for t in rng.integers(4, vocab, size=rng.integers(1, n + 1))) for _ in range(2)]


def _build(name: str, seed: int, d: int, layers: int, vocab: int):
    cfg = EncoderConfig(d_model=d, n_heads=2, n_layers=layers, vocab_size=vocab, max_seq_len=16, init_std=0.5)
    rng = np.random.default_rng(seed)
    enc = Encoder(cfg, seed=seed)
    tune = CONFIGS[name]
    if tune is None:
        toks = rng.integers(4, vocab, size=(2, 5))
        toks[1, 3:] = 0  # exercise the padding mask
        weight = rng.normal(size=(2, 5, d))
        enc.set_trainable(True)
        return list(enc.parameters()), lambda: nx.total(enc.encode(toks) * weight)
    siamese = getattr(tune, "method", "").startswith("ss_")
    if siamese or seed % 2 == 0:
        model = BiEncoder(enc, query_max_len=6, doc_max_len=8)
    else:
        model = CrossEncoder(enc, max_len=12)
    (wire_iaa if isinstance(tune, IaaConfig) else install_pet)(model, tune, seed=seed)
    params = model.trainable_parameters()
    # move off the zero init so every trainable weight carries gradient
    for p in params:
        p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
    batch = [RankingExample(f"q{i}", *_tokens(rng, vocab, 4)[:1], _tokens(rng, vocab, 6)[0], _tokens(rng, vocab, 6))
             for i in range(2)]
    return params, lambda: listwise_loss(model.batch_scores(batch))


def check_config(name: str, seed: int, d: int = 8, layers: int = 1, vocab: int = 14, tol: float = 1e-4,
                 per_param: int = 3, step: float = 1e-5, corrupt: float = 0.0) -> CheckResult:
    """Central differences on ``per_param`` random entries of each trainable weight.

    ``corrupt`` scales the analytic gradient of the first weight by
    (1 + corrupt); it exists so the harness can be shown to catch a bug.
    """
    params, loss_fn = _build(name, seed, d, layers, vocab)
    for p in params:
        p.zero_grad()
    with nx.track_all_grads():
        nx.backward(loss_fn())
    rng = np.random.default_rng(10_000 + seed)
    analytic, numeric = [], []
    for k, p in enumerate(params):
        coords = rng.choice(p.size, size=min(per_param, p.size), replace=False)
        grad = p.grad.reshape(-1) * (1.0 + corrupt if k == 0 else 1.0)

        def f(x, p=p):
            old = p.data.copy()
            p.data[...] = x
            with nx.no_grad():
                val = loss_fn().item()
            p.data[...] = old
            return val

        fd = nx.finite_difference_grad(f, p.data, step, coords).reshape(-1)
        analytic.append(grad[coords])
        numeric.append(fd[coords])
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    err = nx.relative_error(a, n)
    return CheckResult(name, seed, err, a.size, err <= tol)


def run_all(names=None, seeds=range(20), **kw) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = [check_config(n, s, **kw) for n in (names or list(CONFIGS)) for s in seeds]
    return results, time.perf_counter() - t0
