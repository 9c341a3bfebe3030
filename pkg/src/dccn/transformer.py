"""Transformer encoder and decoder prefix.

Activations are row-major: a batch of sequences is ``[B, length, d_model]``.
All residual sub-layers are post-norm (sub-layer, add, normalize).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .nn import LayerNorm, Linear, Module, init_rng
from .rng import glorot_uniform

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NEG_INF = -np.inf


def positional_encoding(n_positions, d_model):
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _drop(x, rate, rng):
    return T.dropout(x, rate, rng, training=rng is not None)


def padding_mask(ids):
    """[B, 1, 1, S] boolean mask, true at padded key positions."""
    ids = np.asarray(ids)
    return (ids == PAD)[:, None, None, :]


def causal_mask(ids):
    """[B, 1, T, T] mask blocking future positions and padded keys."""
    ids = np.asarray(ids)
    n = ids.shape[1]
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    return future[None, None, :, :] | padding_mask(ids)


class EmbeddingTable(Module):
    def __init__(self, vocab, d_model, seed, name, max_positions=512):
        super().__init__()
        rng = init_rng(seed, name)
        self.d_model = d_model
        self.table = self.add_param("table", rng.normal(0.0, d_model ** -0.5, size=(vocab, d_model)))
        self.pe = positional_encoding(max_positions, d_model)

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise InputError(f"token id out of range [0, {self.table.shape[0]})")
        if ids.shape[-1] > self.pe.shape[0]:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds max_positions={self.pe.shape[0]}")
        x = T.scale(T.embedding(self.table, ids), np.sqrt(self.d_model))
        return x + self.pe[: ids.shape[-1]]


class MultiHeadAttention(Module):
    """Multi-head attention; per-head scores are divided by sqrt(d_model)."""

    def __init__(self, d_model, n_heads, seed, name):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        rng = init_rng(seed, name)
        for key in ("WQ", "WK", "WV", "WC"):
            setattr(self, key, self.add_param(key, glorot_uniform(rng, (d_model, d_model), d_model, d_model)))
        self.last_weights = None

    def __call__(self, q, k, v, mask=None, keep_weights=False):
        B, Tq, d = q.shape
        Tk = k.shape[1]
        H, dh = self.n_heads, d // self.n_heads
        Q = T.transpose(T.reshape(q @ self.WQ, (B, Tq, H, dh)), (0, 2, 1, 3))
        K = T.transpose(T.reshape(k @ self.WK, (B, Tk, H, dh)), (0, 2, 3, 1))
        V = T.transpose(T.reshape(v @ self.WV, (B, Tk, H, dh)), (0, 2, 1, 3))
        scores = T.scale(Q @ K, 1.0 / np.sqrt(self.d_model))
        if mask is not None:
            scores = T.masked_fill(scores, mask, NEG_INF)
        weights = T.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights.data
        ctx = T.reshape(T.transpose(weights @ V, (0, 2, 1, 3)), (B, Tq, d))
        return ctx @ self.WC


class FeedForward(Module):
    """Position-wise linear -> relu -> linear."""

    def __init__(self, d_model, d_ff, seed, name):
        super().__init__()
        self.lin1 = self.add_child("lin1", Linear(d_model, d_ff, seed, name + ".lin1"))
        self.lin2 = self.add_child("lin2", Linear(d_ff, d_model, seed, name + ".lin2"))

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg, seed, name):
        super().__init__()
        self.rate = cfg.dropout
        self.selfattn = self.add_child("selfattn", MultiHeadAttention(cfg.d_model, cfg.n_heads, seed, name + ".selfattn"))
        self.norm1 = self.add_child("norm1", LayerNorm(cfg.d_model))
        self.ffn = self.add_child("ffn", FeedForward(cfg.d_model, cfg.d_ff, seed, name + ".ffn"))
        self.norm2 = self.add_child("norm2", LayerNorm(cfg.d_model))

    def __call__(self, x, src_mask, rng=None):
        h = self.norm1(x + _drop(self.selfattn(x, x, x, src_mask), self.rate, rng))
        return self.norm2(h + _drop(self.ffn(h), self.rate, rng))


class DecoderLayer(Module):
    """Self-attention, source-target attention and (unless ``last``) the FFN."""

    def __init__(self, cfg, seed, name, last=False):
        super().__init__()
        self.rate = cfg.dropout
        self.last = last
        self.selfattn = self.add_child("selfattn", MultiHeadAttention(cfg.d_model, cfg.n_heads, seed, name + ".selfattn"))
        self.norm1 = self.add_child("norm1", LayerNorm(cfg.d_model))
        self.srcattn = self.add_child("srcattn", MultiHeadAttention(cfg.d_model, cfg.n_heads, seed, name + ".srcattn"))
        self.norm2 = self.add_child("norm2", LayerNorm(cfg.d_model))
        if not last:
            self.ffn = self.add_child("ffn", FeedForward(cfg.d_model, cfg.d_ff, seed, name + ".ffn"))
            self.norm3 = self.add_child("norm3", LayerNorm(cfg.d_model))

    def attend(self, y, memory, tgt_mask, src_mask, rng=None):
        h = self.norm1(y + _drop(self.selfattn(y, y, y, tgt_mask), self.rate, rng))
        c = self.norm2(h + _drop(self.srcattn(h, memory, memory, src_mask), self.rate, rng))
        return h, c

    def __call__(self, y, memory, tgt_mask, src_mask, rng=None):
        _, c = self.attend(y, memory, tgt_mask, src_mask, rng)
        return self.norm3(c + _drop(self.ffn(c), self.rate, rng))


class Encoder(Module):
    def __init__(self, cfg, seed, name="encoder"):
        super().__init__()
        self.rate = cfg.dropout
        self.embed = self.add_child("embed", EmbeddingTable(cfg.src_vocab, cfg.d_model, seed, name + ".embed", cfg.max_positions))
        self.layers = [self.add_child(f"layer{k}", EncoderLayer(cfg, seed, f"{name}.layer{k}"))
                       for k in range(cfg.n_enc_layers)]

    def __call__(self, src_ids, rng=None):
        src_ids = np.atleast_2d(np.asarray(src_ids))
        if src_ids.shape[1] == 0:
            raise InputError("cannot encode an empty source sequence")
        mask = padding_mask(src_ids)
        x = _drop(self.embed(src_ids), self.rate, rng)
        for layer in self.layers:
            x = layer(x, mask, rng)
        return x


class DecoderPrefix(Module):
    """Target embedding, the first L_d-1 decoder layers, and the attention
    sub-layers of layer L_d."""

    def __init__(self, cfg, seed, name="decoder"):
        super().__init__()
        self.rate = cfg.dropout
        self.embed = self.add_child("embed", EmbeddingTable(cfg.tgt_vocab, cfg.d_model, seed, name + ".embed", cfg.max_positions))
        n = cfg.n_dec_layers
        self.layers = [self.add_child(f"layer{k}", DecoderLayer(cfg, seed, f"{name}.layer{k}", last=(k == n - 1)))
                       for k in range(n)]

    def __call__(self, tgt_ids, memory, src_ids, rng=None):
        """Return ``(T_prev, H_last, C_last)`` for the given target prefix."""
        tgt_ids = np.atleast_2d(np.asarray(tgt_ids))
        tgt_mask = causal_mask(tgt_ids)
        src_mask = padding_mask(np.atleast_2d(np.asarray(src_ids)))
        y = _drop(self.embed(tgt_ids), self.rate, rng)
        for layer in self.layers[:-1]:
            y = layer(y, memory, tgt_mask, src_mask, rng)
        h, c = self.layers[-1].attend(y, memory, tgt_mask, src_mask, rng)
        return y, h, c
