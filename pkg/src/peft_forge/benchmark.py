"""The fixed desk-scale benchmark shared by scripts, the CLI and acceptance checks.

Toy dims are d=64, L=2, m=2. At BERT-base dims a 0.5% budget is an adapter
with r=16, i.e. r/d = 1/48; scaled to d=64 that is r=1.33, rounded up to
r=2 so IAA-L can split it as r=1 inside plus ar=2 aside. Every PET config
below has 1024 trainable weights at toy dims except Bitfit (fixed at 1472)
and ss_lora (768, the closest available).
"""

from __future__ import annotations

from dataclasses import replace

from .data import SyntheticData, SyntheticSpec, generate_synthetic
from .iaa import IaaConfig, wire_iaa
from .pet import PetConfig, install_pet
from .ranking import BiEncoder, CrossEncoder, evaluate
from .training import retrieve
from .transformer import Encoder, EncoderConfig

# A random frozen backbone at std 0.02 collapses pooled vectors at d=64 and
# PET cannot move it; 0.125 keeps first-position states distinguishable.
TOY_INIT_STD = 0.125
TOY_FULL_LR = 1e-3

BI_DATA = SyntheticSpec(topic_purity=0.9, n_docs=2000, n_queries=500, n_dev_queries=100,
                        vocab_size=754, query_len=4, doc_len=16, k_negatives=7, seed=0)
CROSS_DATA = replace(BI_DATA, k_negatives=5)

MATCHED = {
    "adapter": PetConfig("adapter", r=2),
    "iaa-l": IaaConfig("L", r=1, ar=2),
}

PET_SUITE = {
    "bitfit": PetConfig("bitfit"),
    "prefix": PetConfig("prefix", l=4),
    "adapter": PetConfig("adapter", r=2),
    "mam": PetConfig("mam", r=2, l=2),
    "lora": PetConfig("lora", r=2),
    "ss_prefix": PetConfig("ss_prefix", l=2, ls=1),
    "ss_lora": PetConfig("ss_lora", r=1),
    "iaa-s": IaaConfig("S", r=1, ar=1),
    "iaa-l": IaaConfig("L", r=1, ar=2),
    "iaa-m": IaaConfig("M", r=1, ar=4),
}


def toy_encoder(vocab_size: int, **overrides) -> EncoderConfig:
    kw = dict(d_model=64, n_heads=2, n_layers=2, vocab_size=vocab_size, max_seq_len=64, init_std=TOY_INIT_STD)
    kw.update(overrides)
    return EncoderConfig(**kw)


def load(spec: SyntheticSpec = BI_DATA) -> tuple[SyntheticData, EncoderConfig]:
    data = generate_synthetic(spec)
    return data, toy_encoder(data.corpus.vocab_size)


def build(arch: str, tune, enc_cfg: EncoderConfig, seed: int = 0):
    """Fresh model (backbone seeded by ``seed``) with ``tune`` installed; ``tune=None`` leaves it bare."""
    enc = Encoder(enc_cfg, seed=seed)
    model = CrossEncoder(enc) if arch == "cross" else BiEncoder(enc)
    if tune is not None:
        (wire_iaa if isinstance(tune, IaaConfig) else install_pet)(model, tune, seed=seed)
    return model


def dev_mrr(model: BiEncoder, data: SyntheticData, k: int = 10) -> float:
    run = retrieve(model, data.dev_queries, data.corpus.documents, depth=k)
    return evaluate(run, {q: data.qrels[q] for q in data.dev_queries}, [f"mrr@{k}"])[f"mrr@{k}"]
