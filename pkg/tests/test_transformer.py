import json
import os

import numpy as np
import pytest

from dccn import oracle
from dccn import tensor as T
from dccn.config import ModelConfig
from dccn.errors import ConfigError, InputError
from dccn.rng import stream
from dccn.transformer import (PAD, DecoderPrefix, Encoder, FeedForward, MultiHeadAttention, causal_mask,
                              padding_mask, positional_encoding)

from helpers import grad_check

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures", "oracle_fixtures.json")


def records(kind):
    with open(FIXTURES, encoding="utf-8") as fh:
        return [r for r in json.load(fh)["records"] if r["kind"] == kind]


def tiny_cfg(**kw):
    base = dict(src_vocab=20, tgt_vocab=22, d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=16,
                dropout=0.0, variant="text-only")
    base.update(kw)
    return ModelConfig(**base)


# attention

@pytest.mark.parametrize("rec", records("attention"), ids=lambda r: r["name"])
def test_attention_matches_frozen_fixture(rec):
    inp = rec["inputs"]
    mha = MultiHeadAttention(4, inp["n_heads"], seed=0, name="fx")
    for key in ("WQ", "WK", "WV", "WC"):
        getattr(mha, key).data = np.array(inp[key])
    mask = None if inp["mask"] is None else np.array(inp["mask"])[None, None]
    q = T.Tensor(np.array(inp["Q"])[None])
    k = T.Tensor(np.array(inp["K"])[None])
    out = mha(q, k, k, mask)
    np.testing.assert_allclose(out.data[0], rec["expected"], atol=1e-12, rtol=0)


def test_single_position_identity_weights_returns_value_row():
    mha = MultiHeadAttention(4, 1, seed=0, name="id")
    for key in ("WQ", "WK", "WV", "WC"):
        getattr(mha, key).data = np.eye(4)
    v = stream(0, "v").normal(size=(1, 1, 4))
    out = mha(T.Tensor(v), T.Tensor(v), T.Tensor(v))
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_attention_weights_row_sum_to_one():
    mha = MultiHeadAttention(8, 2, seed=1, name="sum")
    x = T.Tensor(stream(1, "x").normal(size=(2, 5, 8)))
    ids = np.array([[4, 5, 6, PAD, PAD], [4, 5, 6, 7, 8]])
    mha(x, x, x, padding_mask(ids), keep_weights=True)
    np.testing.assert_allclose(mha.last_weights.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    assert np.all(mha.last_weights[0, :, :, 3:] == 0.0)


def test_attention_heads_must_divide_dimension():
    with pytest.raises(ConfigError):
        MultiHeadAttention(10, 3, seed=0, name="bad")


def test_attention_gradients():
    mha = MultiHeadAttention(8, 2, seed=2, name="g")
    q = T.Tensor(stream(2, "q").normal(size=(1, 3, 8)))
    k = T.Tensor(stream(2, "k").normal(size=(1, 4, 8)))
    mask = np.zeros((1, 1, 3, 4), dtype=bool)
    mask[..., 3] = True
    leaves = {"q": q, "k": k, **dict(mha.named_parameters())}
    errs = grad_check(lambda: mha(q, k, k, mask), leaves)
    assert max(errs.values()) <= 1e-4, errs


# FFN

def test_ffn_matches_fixture():
    (rec,) = records("ffn")
    ffn = FeedForward(4, 16, seed=0, name="fx")
    inp = rec["inputs"]
    ffn.lin1.W.data, ffn.lin1.b.data = np.array(inp["W1"]), np.array(inp["b1"])
    ffn.lin2.W.data, ffn.lin2.b.data = np.array(inp["W2"]), np.array(inp["b2"])
    np.testing.assert_allclose(ffn(T.Tensor(np.array(inp["X"]))).data, rec["expected"], atol=1e-12, rtol=0)


def test_ffn_zero_input_zero_bias():
    ffn = FeedForward(8, 16, seed=3, name="z")
    assert np.array_equal(ffn(T.Tensor(np.zeros((3, 8)))).data, np.zeros((3, 8)))


def test_ffn_is_position_wise():
    ffn = FeedForward(8, 16, seed=3, name="p")
    x = stream(3, "x").normal(size=(5, 8))
    perm = np.array([2, 4, 0, 1, 3])
    np.testing.assert_array_equal(ffn(T.Tensor(x[perm])).data, ffn(T.Tensor(x)).data[perm])


def test_ffn_gradients():
    ffn = FeedForward(8, 16, seed=4, name="g")
    x = T.Tensor(stream(4, "x").normal(size=(3, 8)))
    errs = grad_check(lambda: ffn(x), {"x": x, **dict(ffn.named_parameters())})
    assert max(errs.values()) <= 1e-4, errs


# layer norm fixture

def test_layer_norm_matches_fixture():
    (rec,) = records("layer_norm")
    inp = rec["inputs"]
    out = T.layer_norm(T.Tensor(np.array(inp["x"])), T.Tensor(np.array(inp["gain"])), T.Tensor(np.array(inp["bias"])))
    np.testing.assert_allclose(out.data, rec["expected"], atol=1e-12, rtol=0)


# encoder / decoder

def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(pe[1], [np.sin(1.0), np.cos(1.0), np.sin(0.01), np.cos(0.01)])


def test_encoder_single_token_and_shape():
    enc = Encoder(tiny_cfg(), seed=1)
    assert enc(np.array([[5]])).shape == (1, 1, 8)
    assert enc(np.array([[5, 6, 7]])).shape == (1, 3, 8)


def test_encoder_rejects_empty_and_out_of_range():
    enc = Encoder(tiny_cfg(), seed=1)
    with pytest.raises(InputError):
        enc(np.zeros((1, 0), dtype=np.int64))
    with pytest.raises(InputError):
        enc(np.array([[25]]))


def test_encoder_deterministic():
    ids = np.array([[4, 9, 11, 2]])
    a = Encoder(tiny_cfg(), seed=3)(ids).data
    b = Encoder(tiny_cfg(), seed=3)(ids).data
    assert np.array_equal(a, b)


def test_encoder_padding_invariance():
    enc = Encoder(tiny_cfg(), seed=2)
    short = enc(np.array([[4, 9, 11]])).data
    padded = enc(np.array([[4, 9, 11, PAD, PAD]])).data
    np.testing.assert_allclose(padded[:, :3], short, atol=1e-9, rtol=0)


def test_decoder_causality_bit_exact():
    cfg = tiny_cfg()
    enc, dec = Encoder(cfg, seed=1), DecoderPrefix(cfg, seed=1)
    src = np.array([[4, 5, 6]])
    memory = enc(src)
    a = np.array([[1, 7, 8, 9]])
    b = np.array([[1, 7, 8, 15]])
    _, _, ca = dec(a, memory, src)
    _, _, cb = dec(b, memory, src)
    assert np.array_equal(ca.data[:, :3], cb.data[:, :3])
    assert not np.array_equal(ca.data[:, 3], cb.data[:, 3])


def test_decoder_single_position_shape():
    cfg = tiny_cfg()
    memory = Encoder(cfg, seed=1)(np.array([[4, 5]]))
    _, h, c = DecoderPrefix(cfg, seed=1)(np.array([[1]]), memory, np.array([[4, 5]]))
    assert h.shape == c.shape == (1, 1, 8)


def test_decoder_padding_invariance():
    cfg = tiny_cfg()
    enc, dec = Encoder(cfg, seed=5), DecoderPrefix(cfg, seed=5)
    src = np.array([[4, 5, 6]])
    src_pad = np.array([[4, 5, 6, PAD, PAD]])
    tgt = np.array([[1, 7, 8]])
    tgt_pad = np.array([[1, 7, 8, PAD]])
    _, _, c1 = dec(tgt, enc(src), src)
    _, _, c2 = dec(tgt_pad, enc(src_pad), src_pad)
    np.testing.assert_allclose(c2.data[:, :3], c1.data, atol=1e-9, rtol=0)


def test_masks():
    ids = np.array([[5, 6, PAD]])
    assert padding_mask(ids).tolist() == [[[[False, False, True]]]]
    cm = causal_mask(ids)[0, 0]
    assert cm.tolist() == [[False, True, True], [False, False, True], [False, False, True]]


def _oracle_rows(x):
    return [list(r) for r in np.asarray(x)]


def _oracle_ln(rows, ln):
    return [oracle.oracle_layer_norm(r, ln.gain.data.tolist(), ln.bias.data.tolist(), ln.eps) for r in rows]


def _oracle_mha(mha, q, k, mask):
    return oracle.oracle_attention(q, k, k, *(getattr(mha, key).data.tolist() for key in ("WQ", "WK", "WV", "WC")),
                                   mha.n_heads, mask)


def _add(a, b):
    return [[x + y for x, y in zip(r, s)] for r, s in zip(a, b)]


def test_decode_prefix_matches_per_layer_loop_oracle():
    cfg = tiny_cfg()
    enc, dec = Encoder(cfg, seed=7), DecoderPrefix(cfg, seed=7)
    src, tgt = np.array([[4, 5, 6]]), np.array([[1, 7, 8, 9]])
    memory = enc(src)
    _, h, c = dec(tgt, memory, src)

    mem = _oracle_rows(memory.data[0])
    y = _oracle_rows(dec.embed(tgt).data[0])
    n = len(y)
    causal = [[s > t for s in range(n)] for t in range(n)]
    for k, layer in enumerate(dec.layers):
        hh = _oracle_ln(_add(y, _oracle_mha(layer.selfattn, y, y, causal)), layer.norm1)
        cc = _oracle_ln(_add(hh, _oracle_mha(layer.srcattn, hh, mem, None)), layer.norm2)
        if k == len(dec.layers) - 1:
            break
        ffn = layer.ffn
        f = oracle.oracle_ffn(cc, ffn.lin1.W.data.tolist(), ffn.lin1.b.data.tolist(),
                              ffn.lin2.W.data.tolist(), ffn.lin2.b.data.tolist())
        y = _oracle_ln(_add(cc, f), layer.norm3)
    np.testing.assert_allclose(h.data[0], hh, atol=1e-12, rtol=0)
    np.testing.assert_allclose(c.data[0], cc, atol=1e-12, rtol=0)
