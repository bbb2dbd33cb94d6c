import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peft_forge import numerics as nx
from peft_forge.numerics import ContractError, Parameter, Tensor
from peft_forge.transformer import (
    ConfigError,
    Encoder,
    EncoderConfig,
    HookSet,
    ffn,
    load_checkpoint,
    multi_head_attention,
    rcln,
    save_checkpoint,
)


def small(**kw):
    base = dict(d_model=4, n_heads=2, n_layers=1, vocab_size=12, max_seq_len=10, ln_eps=1e-12, init_std=0.3)
    base.update(kw)
    return EncoderConfig(**base)


def np_ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_attention(h, w, m, prefix=None):
    """Per-head loop straight from the textbook formula."""
    n, d = h.shape
    dh = d // m
    q = h @ w.wq.data + w.bq.data
    k = h @ w.wk.data + w.bk.data
    v = h @ w.wv.data + w.bv.data
    if prefix is not None:
        k = np.concatenate([prefix[0], k])
        v = np.concatenate([prefix[1], v])
    heads = []
    for i in range(m):
        sl = slice(i * dh, (i + 1) * dh)
        a = np_softmax(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
        heads.append(a @ v[:, sl])
    return np.concatenate(heads, axis=1) @ w.wo.data + w.bo.data


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=6, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(ln_eps=0)
    assert EncoderConfig(d_model=8, n_heads=2).d_ffn == 32


def test_embed_empty_and_bias_only():
    enc = Encoder(small())
    assert enc.embed([]).shape == (0, 4)
    enc.tok_emb.data[...] = 0
    enc.pos_emb.data[...] = 0
    enc.emb_bias.data[...] = [1, 2, 3, 4]
    np.testing.assert_array_equal(enc.embed([5, 6, 7]).data, np.tile([1, 2, 3, 4], (3, 1)))


def test_embed_repeated_tokens_differ_only_by_position():
    enc = Encoder(small())
    out = enc.embed([5, 5]).data
    np.testing.assert_allclose(out[0] - out[1], enc.pos_emb.data[0] - enc.pos_emb.data[1], atol=1e-15)


def test_embed_rejects_out_of_range():
    enc = Encoder(small())
    with pytest.raises(ValueError, match=r"position \(1,\)"):
        enc.embed([4, 99])
    with pytest.raises(ValueError):
        enc.embed(list(range(4, 12)) * 2)


def test_attention_single_key():
    enc = Encoder(small())
    w = enc.layers[0]
    h = np.random.default_rng(0).normal(size=(1, 4))
    out = multi_head_attention(Tensor(h), w, 2).data
    np.testing.assert_allclose(out, (h @ w.wv.data + w.bv.data) @ w.wo.data + w.bo.data, atol=1e-14)


def test_attention_empty_prefix_is_noop():
    enc = Encoder(small())
    h = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    empty = (Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))
    base = multi_head_attention(h, enc.layers[0], 2).data
    np.testing.assert_array_equal(multi_head_attention(h, enc.layers[0], 2, prefix=empty).data, base)


def test_attention_hand_set_two_tokens():
    enc = Encoder(small(d_model=2, n_heads=1))
    w = enc.layers[0]
    w.wq.data[...] = [[1.0, 0.0], [0.0, 2.0]]
    w.wk.data[...] = [[0.5, 1.0], [1.0, 0.0]]
    w.wv.data[...] = [[1.0, 1.0], [0.0, 1.0]]
    w.wo.data[...] = np.eye(2)
    h = np.array([[1.0, 2.0], [-1.0, 0.5]])
    # scalar brute force
    q = [[h[i] @ w.wq.data[:, c] for c in range(2)] for i in range(2)]
    k = [[h[i] @ w.wk.data[:, c] for c in range(2)] for i in range(2)]
    v = [[h[i] @ w.wv.data[:, c] for c in range(2)] for i in range(2)]
    expect = np.zeros((2, 2))
    for i in range(2):
        s = [sum(q[i][c] * k[j][c] for c in range(2)) / np.sqrt(2) for j in range(2)]
        e = [np.exp(x) for x in s]
        a = [x / sum(e) for x in e]
        for c in range(2):
            expect[i, c] = sum(a[j] * v[j][c] for j in range(2))
    np.testing.assert_allclose(multi_head_attention(Tensor(h), w, 1).data, expect, atol=1e-14)


def test_attention_matches_per_head_loop_with_prefix():
    enc = Encoder(small(d_model=8, n_heads=4))
    rng = np.random.default_rng(2)
    h = rng.normal(size=(5, 8))
    pk, pv = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    got = multi_head_attention(Tensor(h), enc.layers[0], 4, prefix=(Tensor(pk), Tensor(pv))).data
    np.testing.assert_allclose(got, np_attention(h, enc.layers[0], 4, (pk, pv)), atol=1e-12)
    assert got.shape == (5, 8)


def test_attention_rejects_bad_prefix():
    enc = Encoder(small())
    with pytest.raises(ConfigError):
        multi_head_attention(Tensor(np.ones((2, 4))), enc.layers[0], 2, prefix=(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))))


def test_ffn_properties():
    enc = Encoder(small())
    w = enc.layers[0]
    rng = np.random.default_rng(3)
    h = rng.normal(size=(4, 4))
    expect = np.maximum(h @ w.w1.data + w.b1.data, 0) @ w.w2.data + w.b2.data
    np.testing.assert_allclose(ffn(Tensor(h), w).data, expect, atol=1e-14)
    perm = rng.permutation(4)
    np.testing.assert_array_equal(ffn(Tensor(h[perm]), w).data, ffn(Tensor(h), w).data[perm])
    for p in (w.w1, w.b1, w.w2, w.b2):
        p.data[...] = 0
    assert not ffn(Tensor(h), w).data.any()


def test_rcln_cases():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(3, 4))
    g, b = Parameter(np.ones(4), "g"), Parameter(np.zeros(4), "b")
    assert not rcln(Tensor(-h), Tensor(h), g, b, 1e-12).data.any()
    beta = Parameter([1.0, -2.0, 3.0, 0.5], "b")
    out = rcln(Tensor(rng.normal(size=(3, 4))), Tensor(h), Parameter(np.zeros(4), "g"), beta, 1e-12).data
    np.testing.assert_array_equal(out, np.tile(beta.data, (3, 1)))
    s = rng.normal(size=(3, 4))
    g.data[...] = rng.normal(size=4)
    np.testing.assert_array_equal(rcln(Tensor(s), Tensor(h), g, b, 1e-6).data,
                                  nx.layer_norm(Tensor(s) + Tensor(h), g, b, 1e-6).data)


def manual_encode(enc, tokens):
    c = enc.config
    h = enc.tok_emb.data[tokens] + enc.pos_emb.data[: len(tokens)] + enc.emb_bias.data
    for w in enc.layers:
        a = np_ln(np_attention(h, w, c.n_heads) + h, w.ln1_gamma.data, w.ln1_beta.data, c.ln_eps)
        f = np.maximum(a @ w.w1.data + w.b1.data, 0) @ w.w2.data + w.b2.data
        h = np_ln(f + a, w.ln2_gamma.data, w.ln2_beta.data, c.ln_eps)
    return h


def test_encode_matches_textbook_composition():
    enc = Encoder(small(), seed=5)
    for layer in enc.layers:
        for p in layer.parameters():
            if "gamma" not in p.path:
                p.data += np.random.default_rng(6).normal(scale=0.1, size=p.shape)
    toks = [4, 7, 9, 5]
    np.testing.assert_allclose(enc.encode(toks).data, manual_encode(enc, toks), atol=1e-12)


def test_zero_adding_hooks_are_bit_identical():
    enc = Encoder(small(n_layers=2), seed=1)
    toks = np.array([[4, 5, 6, 0], [7, 8, 0, 0]])
    base = enc.encode(toks).data
    hooks = HookSet()
    zero = lambda x: Tensor(np.zeros(x.shape))
    for i in range(2):
        for site in ("ffn-parallel", "post-attention-rcln", "post-ffn-rcln", "post-layer"):
            hooks.add(site, i, zero)
        hooks.add("post-attention", i, lambda x: x)
        hooks.add("post-ffn", i, lambda x: x)
    hooks.add("post-model", -1, zero)
    np.testing.assert_array_equal(enc.encode(toks, hooks).data, base)


def test_hook_nesting_with_linear_stand_ins():
    """Inside hooks act before their sub-layer's RCLN; aside taps add after it."""
    enc = Encoder(small(), seed=2)
    c, w = enc.config, enc.layers[0]
    toks = [4, 5, 6]
    hooks = HookSet()
    hooks.add("post-attention", 0, lambda x: x * 2.0)
    hooks.add("post-ffn", 0, lambda x: x * -0.5)
    hooks.add("post-attention-rcln", 0, lambda x: x * 0.25)
    hooks.add("post-ffn-rcln", 0, lambda x: x * 3.0)
    hooks.add("post-layer", 0, lambda x: x * 0.1)
    hooks.add("post-model", -1, lambda x: x * -1.0)
    x = enc.tok_emb.data[toks] + enc.pos_emb.data[:3] + enc.emb_bias.data
    a = np_ln(2.0 * np_attention(x, w, c.n_heads) + x, w.ln1_gamma.data, w.ln1_beta.data, c.ln_eps) + 0.25 * x
    f = np.maximum(a @ w.w1.data + w.b1.data, 0) @ w.w2.data + w.b2.data
    h = np_ln(-0.5 * f + a, w.ln2_gamma.data, w.ln2_beta.data, c.ln_eps) + 3.0 * a + 0.1 * x
    np.testing.assert_allclose(enc.encode(toks, hooks).data, h - x, atol=1e-12)


def test_wrong_shape_hook_is_reported():
    enc = Encoder(small(n_layers=2))
    hooks = HookSet()
    hooks.add("post-ffn", 1, lambda x: x[:, :2])
    with pytest.raises(ContractError, match=r"layer 1.*post-ffn"):
        enc.encode([4, 5], hooks)


def test_hookset_rejects_duplicates_and_unknown_sites():
    hooks = HookSet()
    hooks.add("post-layer", 0, lambda x: x)
    with pytest.raises(ConfigError):
        hooks.add("post-layer", 0, lambda x: x)
    with pytest.raises(ConfigError):
        hooks.add("nowhere", 0, lambda x: x)


def test_padding_is_masked():
    enc = Encoder(small(), seed=3)
    short = enc.encode(np.array([[4, 5, 6]])).data[0]
    padded = enc.encode(np.array([[4, 5, 6, 0, 0]])).data[0, :3]
    np.testing.assert_allclose(short, padded, atol=1e-12)


def test_prefix_keeps_sequence_length():
    enc = Encoder(small(n_layers=2), seed=4)
    hooks = HookSet()
    for i in range(2):
        hooks.add("attention-kv", i, lambda: (Tensor(np.ones((6, 4))), Tensor(np.ones((6, 4)))))
    assert enc.encode([4, 5, 6], hooks).shape == (3, 4)


def test_bert_base_count_near_110m():
    total = EncoderConfig.bert_base().backbone_param_count()
    assert abs(total - 110e6) / 110e6 <= 0.02


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(5, 20))
def test_closed_form_count_matches_enumeration(heads, dh, layers, vocab):
    cfg = EncoderConfig(d_model=heads * dh, n_heads=heads, n_layers=layers, vocab_size=vocab, max_seq_len=7)
    enc = Encoder(cfg)
    assert enc.param_count() == cfg.backbone_param_count()
    paths = [p.path for p in enc.parameters()]
    assert len(paths) == len(set(paths))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 3), st.lists(st.integers(4, 11), min_size=1, max_size=8))
def test_every_layer_output_shape(layers, toks):
    enc = Encoder(small(n_layers=max(layers, 1)))
    assert enc.encode(toks).shape == (len(toks), 4)


def test_checkpoint_round_trip(tmp_path):
    cfg = small()
    enc = Encoder(cfg, seed=9)
    path = tmp_path / "ckpt.txt"
    save_checkpoint(path, cfg, enc.named_parameters(), {"architecture": "bi"})
    cfg2, arrays, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"architecture": "bi"}
    for name, p in enc.named_parameters().items():
        np.testing.assert_array_equal(arrays[name], p.data)
