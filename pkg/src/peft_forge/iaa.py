"""Inside+aside tuning: bottleneck modules alongside the frozen encoder.

An aside bottleneck has no residual of its own; its output is summed into
the trunk. Wiring it at sub-layer (S), layer (L) or whole-model (M) scope
gives the trainable modules a gradient path that skips the frozen
attention and FFN weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor
from .pet import AdapterWeights, PetConfig, _begin, _mask, _register, add_inside, bottleneck
from .transformer import ConfigError, EncoderConfig, HookSet

VARIANTS = ("S", "L", "M")
INSIDE = ("adapter", "lora")

AsideBottleneck = AdapterWeights


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class IaaConfig:
    variant: str = "L"
    inside: str = "adapter"
    r: int = 12
    ar: int = 12
    s: float = 1.0

    def __post_init__(self):
        v = self.variant.upper().removeprefix("IAA-")
        object.__setattr__(self, "variant", v)
        if v not in VARIANTS:
            raise ConfigError(f"unknown IAA variant {self.variant!r}")
        if self.inside not in INSIDE:
            raise ConfigError(f"IAA inside module must be adapter or lora, got {self.inside!r}")
        if self.r < 0 or self.ar < 0 or (self.r == 0 and self.ar == 0):
            raise ConfigError("IAA needs r >= 0, ar >= 0 and not both zero")

    def label(self) -> str:
        return f"iaa-{self.variant.lower()} inside={self.inside} r={self.r} ar={self.ar}"


def aside_forward(h: Tensor, w: AsideBottleneck) -> Tensor:
    """ReLU(h W_down) W_up; unlike an adapter there is no +h."""
    return bottleneck(h, w)


def iaa_count(cfg: IaaConfig, enc: EncoderConfig) -> tuple[int, int]:
    """(per-layer, total) trainable count."""
    d, L = enc.d_model, enc.n_layers
    inside = 4 * cfg.r * d
    if cfg.variant == "S":
        per = inside + 4 * cfg.ar * d
        return per, per * L
    if cfg.variant == "L":
        per = inside + 2 * cfg.ar * d
        return per, per * L
    return inside, inside * L + 2 * cfg.ar * d


def wire_iaa(model, cfg: IaaConfig, seed: int = 0) -> tuple[HookSet, dict[str, bool]]:
    _begin(model)
    if not isinstance(cfg, IaaConfig):
        raise ConfigError("wire_iaa expects an IaaConfig")
    enc = model.encoder
    c, dt = enc.config, enc.dtype
    rng = np.random.default_rng(seed)
    enc.set_trainable(False)
    hooks = HookSet()
    made = []
    if cfg.r > 0:
        made += add_inside(hooks, enc, cfg.inside, PetConfig(cfg.inside, r=cfg.r, s=cfg.s), rng)
    if cfg.ar > 0:
        d = c.d_model

        def aside(path, site, layer):
            w = AdapterWeights.create(path, d, cfg.ar, rng, dt)
            hooks.add(site, layer, lambda x, w=w: aside_forward(x, w))
            made.extend(w.parameters())

        if cfg.variant == "S":
            for i in range(c.n_layers):
                aside(f"pet.layers.{i}.aside_attn", "post-attention-rcln", i)
                aside(f"pet.layers.{i}.aside_ffn", "post-ffn-rcln", i)
        elif cfg.variant == "L":
            for i in range(c.n_layers):
                aside(f"pet.layers.{i}.aside", "post-layer", i)
        else:
            aside("pet.aside_model", "post-model", -1)
    _register(model, made)
    model.set_hooks({t: hooks for t in model.towers})
    model.tuning = cfg.label()
    return hooks, _mask(model)


def budget_split(variant: str, inside_method: str, target_fraction: float, split_ratio: float,
                 enc: EncoderConfig, total: float | None = None, tolerance: float = 5e-4) -> tuple[int, int]:
    """Pick (r, ar) for a parameter budget with a given aside share.

    Feasible pairs satisfy count <= (target_fraction + tolerance) * total;
    the default tolerance is half a unit of a one-decimal percent label, so
    a "0.5%" budget admits anything that prints as 0.5%. Among feasible
    pairs the aside share closest to ``split_ratio`` wins, then the larger
    count, then the larger ar.
    """
    if not 0 < target_fraction < 1:
        raise BudgetError("target_fraction must lie in (0, 1)")
    if not 0 <= split_ratio <= 1:
        raise BudgetError("split_ratio must lie in [0, 1]")
    cfg0 = IaaConfig(variant, inside_method, r=1, ar=1)
    denom = enc.backbone_param_count() if total is None else total
    budget = (target_fraction + tolerance) * denom
    cap = 4 * enc.d_model
    d, L = enc.d_model, enc.n_layers
    r = np.arange(cap + 1, dtype=np.int64)[:, None]
    ar = np.arange(cap + 1, dtype=np.int64)[None, :]
    inside = 4 * r * d * L
    if cfg0.variant == "S":
        aside = 4 * ar * d * L
    elif cfg0.variant == "L":
        aside = 2 * ar * d * L
    else:
        aside = 2 * ar * d
    count = inside + aside
    feasible = (count <= budget) & (count > 0)
    if not feasible.any():
        raise BudgetError(f"budget {budget:.0f} too small for any {variant} configuration")
    share = np.where(count > 0, aside / np.maximum(count, 1), 0.0)
    err = np.round(np.abs(share - split_ratio), 12)
    err = np.where(feasible, err, np.inf)
    best = err.min()
    cand = np.argwhere(err == best)
    counts = count[cand[:, 0], cand[:, 1]]
    cand = cand[counts == counts.max()]
    pick = cand[np.argmax(cand[:, 1])]
    return int(pick[0]), int(pick[1])


def _grad_vector(params) -> np.ndarray:
    return np.concatenate([p.grad.reshape(-1) for p in params]) if params else np.zeros(0)


def discrepancy_probe(model, batch, loss_fn=None) -> float:
    """Relative size of the gradient that the trainable mask throws away.

    Computes the gradient with respect to every parameter, zeroes the
    entries outside the trainable mask, and returns
    ||g_full - g_masked|| / ||g_full||. Parameter values and existing grads
    are left as they were.
    """
    params = list(model.named_parameters().values())
    if not any(p.trainable for p in params):
        raise ContractError("discrepancy probe needs a non-empty trainable set")
    saved = [p.grad for p in params]
    try:
        for p in params:
            p.zero_grad()
        with nx.track_all_grads():
            loss = model.batch_loss(batch) if loss_fn is None else loss_fn(model, batch)
            nx.backward(loss)
        full = _grad_vector(params)
        masked = np.concatenate([p.grad.reshape(-1) * (1.0 if p.trainable else 0.0) for p in params])
    finally:
        for p, g in zip(params, saved):
            p.grad = g
    norm = np.linalg.norm(full)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(full - masked) / norm)
