"""Post-LN Transformer encoder with hook sites for tuning modules."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Parameter, Tensor

PAD_ID = 0

SITES = (
    "attention-kv",
    "attention-qv-projection",
    "post-attention",
    "ffn-parallel",
    "post-ffn",
    "post-attention-rcln",
    "post-ffn-rcln",
    "post-layer",
    "post-model",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ffn: int | None = None
    vocab_size: int = 512
    max_seq_len: int = 64
    ln_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        for name in ("d_model", "n_heads", "n_layers", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def bert_base(cls) -> "EncoderConfig":
        return cls(d_model=768, n_heads=12, n_layers=12, d_ffn=3072, vocab_size=30522, max_seq_len=512)

    def to_lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]

    @classmethod
    def from_mapping(cls, kv: dict) -> "EncoderConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in kv:
                kw[f.name] = float(kv[f.name]) if f.name in ("ln_eps", "init_std") else int(kv[f.name])
        return cls(**kw)

    def layer_param_count(self) -> int:
        d, f = self.d_model, self.d_ffn
        return 4 * d * d + 4 * d + d * f + f + f * d + d + 4 * d

    def backbone_param_count(self) -> int:
        """Closed-form size of the backbone (embeddings plus all layers)."""
        d = self.d_model
        emb = self.vocab_size * d + self.max_seq_len * d + d
        return emb + self.n_layers * self.layer_param_count()


@dataclass
class LayerWeights:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter
    ln1_gamma: Parameter
    ln1_beta: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in dataclasses.fields(self)]

    def biases(self) -> list[Parameter]:
        # the 8 bias vectors a bias-only tuner trains: 11*d entries in total
        return [self.bq, self.bk, self.bv, self.bo, self.ln1_beta, self.b1, self.b2, self.ln2_beta]


@dataclass
class HookSet:
    """Callables keyed by (site, layer); ``post-model`` uses layer -1."""

    hooks: dict = field(default_factory=dict)

    def add(self, site: str, layer: int, fn: Callable) -> None:
        if site not in SITES:
            raise ConfigError(f"unknown hook site {site!r}")
        key = (site, layer)
        if key in self.hooks:
            raise ConfigError(f"hook already present at site {site!r}, layer {layer}")
        self.hooks[key] = fn

    def get(self, site: str, layer: int = -1):
        return self.hooks.get((site, layer))

    def __len__(self) -> int:
        return len(self.hooks)


def _check(out: Tensor, like_shape: tuple, site: str, layer: int) -> Tensor:
    if not isinstance(out, Tensor) or out.shape != like_shape:
        got = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"hook at layer {layer}, site {site!r} returned {got}, expected {like_shape}")
    return out


def rcln(sublayer_out: Tensor, h: Tensor, gamma: Parameter, beta: Parameter, eps: float) -> Tensor:
    return nx.layer_norm(sublayer_out + h, gamma, beta, eps)


def ffn(h: Tensor, w: LayerWeights) -> Tensor:
    return nx.relu(h @ w.w1 + w.b1) @ w.w2 + w.b2


def multi_head_attention(h: Tensor, w: LayerWeights, n_heads: int, prefix=None, key_mask=None,
                         qv_delta: Callable | None = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``h`` is (..., n, d). ``prefix`` is an optional (P_k, P_v) pair of (l, d)
    tensors prepended to keys and values. ``key_mask`` is a boolean (..., n)
    array; False entries are excluded from every softmax. ``qv_delta(h, which)``
    returns an additive correction to the query or value projection.
    """
    *lead, n, d = h.shape
    dh = d // n_heads
    q = h @ w.wq + w.bq
    k = h @ w.wk + w.bk
    v = h @ w.wv + w.bv
    if qv_delta is not None:
        q = q + qv_delta(h, "q")
        v = v + qv_delta(h, "v")

    def heads(x, length):
        x = x.reshape(*lead, length, n_heads, dh)
        return x.transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)

    q, k, v = heads(q, n), heads(k, n), heads(v, n)
    n_keys = n
    if prefix is not None:
        pk, pv = prefix
        if pk.ndim != 2 or pk.shape != pv.shape or pk.shape[1] != d:
            raise ConfigError(f"prefix tensors must both be (l, {d}); got {pk.shape} and {pv.shape}")
        plen = pk.shape[0]
        if plen:
            pk = pk.reshape(plen, n_heads, dh).transpose(1, 0, 2)
            pv = pv.reshape(plen, n_heads, dh).transpose(1, 0, 2)
            shape = tuple(lead) + (n_heads, plen, dh)
            k = nx.concat([nx.broadcast_to(pk, shape), k], axis=-2)
            v = nx.concat([nx.broadcast_to(pv, shape), v], axis=-2)
            n_keys = n + plen
            if key_mask is not None:
                key_mask = np.concatenate([np.ones(tuple(lead) + (plen,), dtype=bool), key_mask], axis=-1)
    axes = list(range(q.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = (q @ k.transpose(*axes)) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e9).astype(h.dtype)
        scores = scores + bias.reshape(tuple(lead) + (1, 1, n_keys))
    attn = nx.softmax_rows(scores)
    out = attn @ v
    out = out.transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2).reshape(*lead, n, d)
    return out @ w.wo + w.bo


class Encoder:
    """Frozen-backbone encoder. ``encode`` threads hidden states through hooks."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c, std = config, config.init_std
        d = c.d_model

        def normal(path, *shape):
            return Parameter(rng.normal(0.0, std, size=shape), path, dtype=dtype)

        def const(path, value, *shape):
            return Parameter(np.full(shape, value), path, dtype=dtype)

        self.tok_emb = normal("embeddings.token", c.vocab_size, d)
        self.pos_emb = normal("embeddings.position", c.max_seq_len, d)
        self.emb_bias = const("embeddings.bias", 0.0, d)
        self.layers: list[LayerWeights] = []
        for i in range(c.n_layers):
            p = f"layers.{i}."
            self.layers.append(LayerWeights(
                wq=normal(p + "attn.q.weight", d, d), bq=const(p + "attn.q.bias", 0.0, d),
                wk=normal(p + "attn.k.weight", d, d), bk=const(p + "attn.k.bias", 0.0, d),
                wv=normal(p + "attn.v.weight", d, d), bv=const(p + "attn.v.bias", 0.0, d),
                wo=normal(p + "attn.o.weight", d, d), bo=const(p + "attn.o.bias", 0.0, d),
                ln1_gamma=const(p + "ln1.gamma", 1.0, d), ln1_beta=const(p + "ln1.beta", 0.0, d),
                w1=normal(p + "ffn.w1", d, c.d_ffn), b1=const(p + "ffn.b1", 0.0, c.d_ffn),
                w2=normal(p + "ffn.w2", c.d_ffn, d), b2=const(p + "ffn.b2", 0.0, d),
                ln2_gamma=const(p + "ln2.gamma", 1.0, d), ln2_beta=const(p + "ln2.beta", 0.0, d),
            ))

    def parameters(self) -> list[Parameter]:
        out = [self.tok_emb, self.pos_emb, self.emb_bias]
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.path: p for p in self.parameters()}

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    # -- forward ------------------------------------------------------------
    def embed(self, tokens) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64)
        n = ids.shape[-1] if ids.ndim else 0
        if ids.size == 0:
            return Tensor(np.zeros(ids.shape + (self.config.d_model,), dtype=self.dtype))
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}")
        bad = np.argwhere((ids < 0) | (ids >= self.config.vocab_size))
        if len(bad):
            pos = tuple(int(i) for i in bad[0])
            raise ValueError(f"token id {int(ids[pos])} at position {pos} outside vocab of {self.config.vocab_size}")
        pos = nx.take_rows(self.pos_emb, np.arange(n))
        return nx.take_rows(self.tok_emb, ids) + pos + self.emb_bias

    def encode(self, tokens, hooks: HookSet | None = None) -> Tensor:
        """Hidden states (..., n, d) for token ids (..., n); id 0 is padding."""
        hooks = hooks or HookSet()
        ids = np.asarray(tokens, dtype=np.int64)
        x = self.embed(ids)
        if ids.size == 0:
            return x
        key_mask = ids != PAD_ID
        if key_mask.all():
            key_mask = None
        c = self.config
        emb_out = x
        h = x
        for i, w in enumerate(self.layers):
            layer_in = h
            kv = hooks.get("attention-kv", i)
            prefix = kv() if kv is not None else None
            mh = multi_head_attention(h, w, c.n_heads, prefix=prefix, key_mask=key_mask,
                                      qv_delta=hooks.get("attention-qv-projection", i))
            mh = self._replace(hooks, "post-attention", i, mh)
            a = rcln(mh, h, w.ln1_gamma, w.ln1_beta, c.ln_eps)
            a = self._add(hooks, "post-attention-rcln", i, a, h)
            f = ffn(a, w)
            f = self._add(hooks, "ffn-parallel", i, f, a)
            f = self._replace(hooks, "post-ffn", i, f)
            h = rcln(f, a, w.ln2_gamma, w.ln2_beta, c.ln_eps)
            h = self._add(hooks, "post-ffn-rcln", i, h, a)
            h = self._add(hooks, "post-layer", i, h, layer_in)
        return self._add(hooks, "post-model", -1, h, emb_out)

    @staticmethod
    def _replace(hooks, site, layer, x):
        fn = hooks.get(site, layer)
        return x if fn is None else _check(fn(x), x.shape, site, layer)

    @staticmethod
    def _add(hooks, site, layer, x, tap):
        fn = hooks.get(site, layer)
        return x if fn is None else x + _check(fn(tap), x.shape, site, layer)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, config: EncoderConfig, params: dict[str, Parameter] | dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Header of ``key = value`` lines, a blank line, then ``path: name`` + snapshot blocks."""
    lines = config.to_lines()
    for k, v in (meta or {}).items():
        lines.append(f"{k} = {v}")
    chunks = ["\n".join(lines) + "\n\n"]
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else params[name]
        chunks.append(f"path: {name}\n" + nx.format_snapshot(arr))
    Path(path).write_text("".join(chunks), encoding="utf-8")


def load_checkpoint(path) -> tuple[EncoderConfig, dict[str, np.ndarray], dict[str, str]]:
    text = Path(path).read_text(encoding="utf-8")
    header, _, body = text.partition("\n\n")
    kv = {}
    for line in header.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    field_names = {f.name for f in dataclasses.fields(EncoderConfig)}
    config = EncoderConfig.from_mapping({k: v for k, v in kv.items() if k in field_names})
    meta = {k: v for k, v in kv.items() if k not in field_names}
    arrays = {}
    lines = body.splitlines()
    for i in range(0, len(lines), 3):
        if not lines[i].startswith("path: "):
            raise ValueError(f"malformed checkpoint block at body line {i + 1}")
        name = lines[i][len("path: "):]
        arrays[name] = nx.parse_snapshot(lines[i + 1] + "\n" + lines[i + 2])
    return config, arrays, meta
