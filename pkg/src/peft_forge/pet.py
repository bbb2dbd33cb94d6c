"""Baseline parameter-efficient tuning methods and their parameter accounting.

Each installer attaches hooks and new Parameters to a ranking model and
flips ``trainable`` on the backbone so that only the method's own weights
are optimized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor
from .transformer import ConfigError, EncoderConfig, HookSet

METHODS = ("full", "bitfit", "prefix", "adapter", "mam", "lora", "ss_prefix", "ss_lora")
INIT_STD = 0.02


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class PetConfig:
    method: str = "adapter"
    r: int = 16
    l: int = 32
    s: float = 1.0
    # Semi-Siamese prefix: length of the query-only and document-only blocks
    ls: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown tuning method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method in ("adapter", "mam", "lora", "ss_lora") and self.r < 1:
            raise ConfigError(f"{self.method} needs r >= 1")
        if self.method in ("prefix", "mam", "ss_prefix") and self.l < 1:
            raise ConfigError(f"{self.method} needs l >= 1")
        if self.method in ("lora", "ss_lora") and self.s <= 0:
            raise ConfigError("LoRA scaling s must be positive")
        if self.ls is not None and self.ls < 0:
            raise ConfigError("ls must be >= 0")

    @property
    def specific_len(self) -> int:
        return self.l if self.ls is None else self.ls

    def label(self) -> str:
        m = self.method
        if m in ("adapter", "lora", "ss_lora"):
            return f"{m} r={self.r}"
        if m == "prefix":
            return f"prefix l={self.l}"
        if m == "ss_prefix":
            return f"ss_prefix l={self.l} ls={self.specific_len}"
        if m == "mam":
            return f"mam r={self.r} l={self.l}"
        return m


@dataclass(frozen=True)
class ParamCount:
    per_layer: int
    total: int
    fraction: float

    def percent(self) -> float:
        return 100.0 * self.fraction


# -- building blocks ---------------------------------------------------------

@dataclass
class AdapterWeights:
    down: Parameter
    up: Parameter

    @classmethod
    def create(cls, path: str, d: int, r: int, rng, dtype=np.float64) -> "AdapterWeights":
        return cls(
            Parameter(rng.normal(0.0, INIT_STD, size=(d, r)), path + ".down", dtype=dtype),
            Parameter(np.zeros((r, d)), path + ".up", dtype=dtype),
        )

    def parameters(self) -> list[Parameter]:
        return [self.down, self.up]


# LoRA deltas share the same down/up layout
LoraWeights = AdapterWeights


def bottleneck(h: Tensor, w: AdapterWeights) -> Tensor:
    return nx.relu(h @ w.down) @ w.up


def adapter_forward(h: Tensor, w: AdapterWeights) -> Tensor:
    """h + ReLU(h W_down) W_up."""
    return h + bottleneck(h, w)


def lora_delta(h: Tensor, w: LoraWeights, s: float) -> Tensor:
    return (h @ w.down) @ w.up * s


def lora_projection(h: Tensor, weight: Tensor, w: LoraWeights, s: float) -> Tensor:
    """Frozen projection plus the scaled low-rank correction."""
    return h @ weight + lora_delta(h, w, s)


def _prefix(path: str, l: int, d: int, rng, dtype) -> tuple[Parameter, Parameter]:
    return (Parameter(rng.normal(0.0, INIT_STD, size=(l, d)), path + ".key", dtype=dtype),
            Parameter(rng.normal(0.0, INIT_STD, size=(l, d)), path + ".value", dtype=dtype))


def _kv_hook(*blocks):
    blocks = [b for b in blocks if b[0].shape[0] > 0]

    def hook():
        if len(blocks) == 1:
            return blocks[0]
        return (nx.concat([b[0] for b in blocks], axis=0), nx.concat([b[1] for b in blocks], axis=0))

    return hook


def _qv_hook(q: LoraWeights | None, v: LoraWeights | None, s: float):
    def hook(h, which):
        w = q if which == "q" else v
        if w is None:
            return Tensor(np.zeros(h.shape, dtype=h.dtype))
        return lora_delta(h, w, s)

    return hook


def _replace_hook(w: AdapterWeights):
    return lambda x: adapter_forward(x, w)


def _add_hook(w: AdapterWeights):
    return lambda x: bottleneck(x, w)


# -- installation ------------------------------------------------------------

def _begin(model) -> None:
    if getattr(model, "tuning", None) is not None:
        raise StateError(f"model already has {model.tuning!r} installed")


def _register(model, params: list[Parameter]) -> None:
    for p in params:
        if p.path in model.pet_params:
            raise StateError(f"duplicate parameter path {p.path}")
        p.trainable = True
        model.pet_params[p.path] = p


def _mask(model) -> dict[str, bool]:
    return {path: p.trainable for path, p in model.named_parameters().items()}


def add_inside(hooks: HookSet, enc, method: str, cfg, rng, prefix_path: str = "pet") -> list[Parameter]:
    """Attach adapter/prefix/lora/mam inside modules to ``hooks``; returns the new weights."""
    c = enc.config
    d, dt = c.d_model, enc.dtype
    made: list[Parameter] = []
    for i in range(c.n_layers):
        base = f"{prefix_path}.layers.{i}"
        if method in ("prefix", "mam"):
            pk, pv = _prefix(base + ".prefix", cfg.l, d, rng, dt)
            hooks.add("attention-kv", i, _kv_hook((pk, pv)))
            made += [pk, pv]
        if method == "adapter":
            a1 = AdapterWeights.create(base + ".adapter_attn", d, cfg.r, rng, dt)
            a2 = AdapterWeights.create(base + ".adapter_ffn", d, cfg.r, rng, dt)
            hooks.add("post-attention", i, _replace_hook(a1))
            hooks.add("post-ffn", i, _replace_hook(a2))
            made += a1.parameters() + a2.parameters()
        if method == "mam":
            a = AdapterWeights.create(base + ".parallel_adapter", d, cfg.r, rng, dt)
            hooks.add("ffn-parallel", i, _add_hook(a))
            made += a.parameters()
        if method == "lora":
            q = AdapterWeights.create(base + ".lora_q", d, cfg.r, rng, dt)
            v = AdapterWeights.create(base + ".lora_v", d, cfg.r, rng, dt)
            hooks.add("attention-qv-projection", i, _qv_hook(q, v, cfg.s))
            made += q.parameters() + v.parameters()
    return made


def install_pet(model, cfg: PetConfig, seed: int = 0) -> tuple[HookSet, dict[str, bool]]:
    """Install a baseline tuning method on every tower of ``model``.

    Returns the hook set (shared by all towers) and the trainable mask keyed
    by parameter path.
    """
    _begin(model)
    if cfg.method in ("ss_prefix", "ss_lora"):
        hooks = install_ss(model, cfg, seed)
        return hooks["query"], _mask(model)
    enc = model.encoder
    rng = np.random.default_rng(seed)
    hooks = HookSet()
    enc.set_trainable(cfg.method == "full")
    if cfg.method == "bitfit":
        enc.emb_bias.trainable = True
        for layer in enc.layers:
            for b in layer.biases():
                b.trainable = True
    made = add_inside(hooks, enc, cfg.method, cfg, rng)
    _register(model, made)
    model.set_hooks({t: hooks for t in model.towers})
    model.tuning = cfg.label()
    return hooks, _mask(model)


def install_ss(model, cfg: PetConfig, seed: int = 0) -> dict[str, HookSet]:
    """Semi-Siamese tuning for a bi-encoder: shared plus tower-specific weights."""
    if getattr(model, "architecture", None) != "bi":
        raise ConfigError("Semi-Siamese tuning needs a bi-encoder")
    if cfg.method not in ("ss_prefix", "ss_lora"):
        raise ConfigError(f"install_ss expects ss_prefix or ss_lora, got {cfg.method!r}")
    _begin(model)
    enc = model.encoder
    rng = np.random.default_rng(seed)
    c, dt = enc.config, enc.dtype
    d = c.d_model
    enc.set_trainable(False)
    hq, hd = HookSet(), HookSet()
    made: list[Parameter] = []
    for i in range(c.n_layers):
        base = f"pet.layers.{i}"
        if cfg.method == "ss_prefix":
            shared = _prefix(base + ".prefix_shared", cfg.l, d, rng, dt)
            pq = _prefix(base + ".prefix_query", cfg.specific_len, d, rng, dt)
            pd = _prefix(base + ".prefix_doc", cfg.specific_len, d, rng, dt)
            hq.add("attention-kv", i, _kv_hook(shared, pq))
            hd.add("attention-kv", i, _kv_hook(shared, pd))
            made += [*shared, *pq, *pd]
        else:
            q = AdapterWeights.create(base + ".lora_q_shared", d, cfg.r, rng, dt)
            vq = AdapterWeights.create(base + ".lora_v_query", d, cfg.r, rng, dt)
            vd = AdapterWeights.create(base + ".lora_v_doc", d, cfg.r, rng, dt)
            hq.add("attention-qv-projection", i, _qv_hook(q, vq, cfg.s))
            hd.add("attention-qv-projection", i, _qv_hook(q, vd, cfg.s))
            made += q.parameters() + vq.parameters() + vd.parameters()
    _register(model, made)
    model.set_hooks({"query": hq, "doc": hd})
    model.tuning = cfg.label()
    return {"query": hq, "doc": hd}


# -- accounting --------------------------------------------------------------

def per_layer_count(cfg: PetConfig, d: int) -> int:
    m = cfg.method
    if m == "bitfit":
        return 11 * d
    if m == "prefix":
        return 2 * cfg.l * d
    if m in ("adapter", "lora"):
        return 4 * cfg.r * d
    if m == "mam":
        return 2 * cfg.r * d + 2 * cfg.l * d
    if m == "ss_prefix":
        return 2 * cfg.l * d + 4 * cfg.specific_len * d
    if m == "ss_lora":
        return 6 * cfg.r * d
    raise ConfigError(f"no per-layer count for method {m!r}")


def count_params(cfg, enc: EncoderConfig, total: int | float | None = None) -> ParamCount:
    """Closed-form trainable count for a tuning config.

    ``fraction`` divides by ``total`` (defaults to the enumerated backbone size).
    """
    denom = enc.backbone_param_count() if total is None else total
    if hasattr(cfg, "variant"):
        from .iaa import iaa_count

        per_layer, n = iaa_count(cfg, enc)
        return ParamCount(per_layer, n, n / denom)
    if not isinstance(cfg, PetConfig):
        raise ConfigError(f"cannot count parameters for {cfg!r}")
    if cfg.method == "full":
        n = enc.backbone_param_count()
        return ParamCount(enc.layer_param_count(), n, n / denom)
    per = per_layer_count(cfg, enc.d_model)
    n = per * enc.n_layers + (enc.d_model if cfg.method == "bitfit" else 0)
    return ParamCount(per, n, n / denom)
