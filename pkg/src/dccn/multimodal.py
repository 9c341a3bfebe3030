"""Last decoder layer with dual-granularity visual context, and the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import VARIANT_BRANCHES, ModelConfig
from .errors import InputError
from .nn import LayerNorm, Module, init_rng
from .rng import glorot_uniform
from .routing import DCCN, VisualAttention, route, route_conventional
from .transformer import BOS, EOS, PAD, DecoderPrefix, Encoder, FeedForward, _drop


@dataclass
class FeatureBatch:
    """Visual features for a batch: global [B,196,d_c], regional [B,10,d_c]."""

    global_: np.ndarray
    regional: np.ndarray
    regional_mask: np.ndarray

    def take(self, index):
        return FeatureBatch(self.global_[index], self.regional[index], self.regional_mask[index])


class Gate(Module):
    """alpha = sigmoid(W_g m_g + W_r m_r), elementwise over d_w."""

    def __init__(self, d_model, seed, name):
        super().__init__()
        rng = init_rng(seed, name)
        self.W_g = self.add_param("W_g", glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.W_r = self.add_param("W_r", glorot_uniform(rng, (d_model, d_model), d_model, d_model))

    def __call__(self, m_g, m_r, force_alpha=None):
        return fuse_gate(m_g, m_r, self, force_alpha)


def _apply(W, x):
    if x.ndim == 1:
        return T.reshape(T.reshape(x, (1, -1)) @ T.transpose(W), (-1,))
    return x @ T.transpose(W)


def fuse_gate(m_g, m_r, params, force_alpha=None):
    """Return ``(alpha * m_g + (1 - alpha) * m_r, alpha)``."""
    m_g, m_r = T.as_tensor(m_g), T.as_tensor(m_r)
    if force_alpha is None:
        alpha = T.sigmoid(_apply(params.W_g, m_g) + _apply(params.W_r, m_r))
    else:
        alpha = T.Tensor(np.full(np.broadcast_shapes(m_g.shape, m_r.shape), float(force_alpha)))
    return alpha * m_g + (1.0 - alpha) * m_r, alpha


class MultimodalLastLayer(Module):
    """Visual-context sub-layer plus the FFN of the last decoder layer.

    Given ``C`` ([B, T, d_w], output of the last source-target attention),
    each present branch extracts a context vector per target step from its
    feature granularity; two branches are merged by the gate.  The result
    goes through residual + norm, then FFN with residual + norm.  In
    ``text-only`` mode the visual sub-layer is skipped entirely.
    """

    def __init__(self, cfg: ModelConfig, seed, name="decoder.last"):
        super().__init__()
        self.cfg = cfg
        self.rate = cfg.dropout
        self.kinds = VARIANT_BRANCHES[cfg.variant]
        self.extractors = {}
        for granularity, kind in zip(("global", "regional"), self.kinds):
            if kind in ("route", "conventional"):
                net = DCCN(cfg.d_model, cfg.d_caps, cfg.n_v, cfg.n_itr, seed, f"{name}.dccn_{granularity}")
                self.extractors[granularity] = self.add_child(f"dccn_{granularity}", net)
            elif kind == "attention":
                net = VisualAttention(cfg.d_model, cfg.d_caps, seed, f"{name}.att_{granularity}")
                self.extractors[granularity] = self.add_child(f"att_{granularity}", net)
        self.gate = self.add_child("gate", Gate(cfg.d_model, seed, name + ".gate")) if len(self.extractors) == 2 else None
        if self.extractors:
            self.norm_fuse = self.add_child("norm_fuse", LayerNorm(cfg.d_model))
        self.ffn = self.add_child("ffn", FeedForward(cfg.d_model, cfg.d_ff, seed, name + ".ffn"))
        self.norm_ffn = self.add_child("norm_ffn", LayerNorm(cfg.d_model))

    def extract(self, granularity, C, feats, trace=None):
        kind = self.kinds[0 if granularity == "global" else 1]
        net = self.extractors[granularity]
        if feats is None:
            raise InputError(f"{granularity} visual features are required by variant {self.cfg.variant!r}")
        if granularity == "global":
            I, mask = feats.global_, None
        else:
            I, mask = feats.regional, np.asarray(feats.regional_mask, dtype=bool)
        if kind == "conventional":
            out = route_conventional(I, net, mask=mask, trace=trace)
            return T.reshape(out, (out.shape[0], 1, out.shape[1]))
        return net(C, I, mask=mask, trace=trace)

    def routed(self):
        """The context-guided routing networks, keyed by granularity."""
        return {g: net for g, net in self.extractors.items()
                if self.kinds[0 if g == "global" else 1] == "route"}

    def calibrate(self, C, feats):
        """Set each routing network's ``v_scale`` so that, on this batch, the
        final multimodal context capsules have the root-mean-square size of
        the context vectors that seeded them.  Returns the factors applied.

        Coupling coefficients, correlations and high-level capsules do not
        depend on the scale of ``W_v`` (correlations are scale-free), so
        multiplying ``W_v`` by ``s`` multiplies the final ``m`` by exactly
        ``s ** n_itr``.  Without this, ``m * (W_v v)`` compounds over the
        iterations: ``v`` sums up to 196 rows weighted by ``c + rho``, so
        its size, and ``m``'s after three products, swings with ``rho``.
        The factor lives in an untrained buffer rather than in ``W_v``:
        Adam's step size does not shrink with the parameter, so a tiny
        ``W_v`` would be overwritten within a few updates.
        """
        factors = {}
        with T.no_grad():
            for granularity, net in self.routed().items():
                I = feats.global_ if granularity == "global" else feats.regional
                mask = None if granularity == "global" else np.asarray(feats.regional_mask, dtype=bool)
                stats = {}
                route(C, I, net, mask=mask, stats=stats)
                factor = net.rescale(stats)
                if factor is not None:
                    factors[granularity] = factor
        return factors

    def recalibrate(self):
        """Correct ``v_scale`` from the statistics of the last training
        forward pass; called by the trainer after every update."""
        return {g: f for g, net in self.routed().items() if (f := net.rescale()) is not None}

    def visual_context(self, C, feats, force_alpha=None, traces=None):
        """The fused visual context M ([B, T or 1, d_w]) and the gate values."""
        traces = traces if traces is not None else {}
        parts = {g: self.extract(g, C, feats, traces.get(g)) for g in self.extractors}
        if self.gate is None:
            (only,) = parts.values()
            return only, None
        return fuse_gate(parts["global"], parts["regional"], self.gate, force_alpha)

    def __call__(self, C, feats, rng=None, force_alpha=None, traces=None, keep=None):
        if self.extractors:
            M, alpha = self.visual_context(C, feats, force_alpha, traces)
            if keep is not None:
                keep["alpha"] = None if alpha is None else alpha.data
            C = self.norm_fuse(C + _drop(M, self.rate, rng))
        return self.norm_ffn(C + _drop(self.ffn(C), self.rate, rng))


class DCCNModel(Module):
    """Encoder, decoder prefix, multimodal last layer and output projection."""

    def __init__(self, cfg: ModelConfig, seed=1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.encoder = self.add_child("encoder", Encoder(cfg, seed))
        self.decoder = self.add_child("decoder", DecoderPrefix(cfg, seed))
        self.last = self.add_child("last", MultimodalLastLayer(cfg, seed))
        rng = init_rng(seed, "generator")
        self.W_out = self.add_param("W_out", glorot_uniform(rng, (cfg.tgt_vocab, cfg.d_model), cfg.d_model, cfg.tgt_vocab))

    @property
    def multimodal(self):
        return self.cfg.variant != "text-only"

    def encode(self, src_ids, rng=None):
        return self.encoder(src_ids, rng)

    def decode(self, tgt_in, memory, src_ids, feats, rng=None, **kwargs):
        """Hidden states of the last decoder layer, ``[B, T, d_w]``."""
        _, _, C = self.decoder(tgt_in, memory, src_ids, rng)
        return self.last(C, feats if self.multimodal else None, rng, **kwargs)

    def logits(self, hidden):
        return hidden @ T.transpose(self.W_out)

    def calibrate(self, src_ids, tgt_in, feats):
        """Data-dependent rescaling of the routing networks (see
        ``MultimodalLastLayer.calibrate``); a no-op for text-only models."""
        if not self.multimodal:
            return {}
        with T.no_grad():
            memory = self.encode(src_ids)
            _, _, C = self.decoder(tgt_in, memory, src_ids)
        return self.last.calibrate(C, feats)

    def recalibrate(self):
        return self.last.recalibrate() if self.multimodal else {}

    def predict(self, hidden):
        """Distribution over the target vocabulary per position."""
        return T.softmax(self.logits(hidden), axis=-1)

    def forward(self, src_ids, tgt_in, feats, rng=None):
        memory = self.encode(src_ids, rng)
        return self.logits(self.decode(tgt_in, memory, src_ids, feats, rng))

    def loss(self, src_ids, tgt_in, tgt_out, feats, rng=None):
        """Summed negative log-likelihood over non-pad target positions."""
        logp = T.log_softmax(self.forward(src_ids, tgt_in, feats, rng), axis=-1)
        picked = T.gather_last(logp, tgt_out)
        keep = (np.asarray(tgt_out) != PAD).astype(np.float64)
        return T.neg(T.sum_(picked * keep)), float(keep.sum())

    def greedy_decode(self, src_ids, feats, max_len=None):
        """Greedy argmax decoding for a batch; returns lists of token ids."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        B = src_ids.shape[0]
        src_len = (src_ids != PAD).sum(axis=1)
        limits = 2 * src_len + 10 if max_len is None else np.full(B, max_len)
        with T.no_grad():
            memory = self.encode(src_ids)
            ys = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for step in range(int(limits.max())):
                hidden = self.decode(ys, memory, src_ids, feats)
                nxt = hidden.data[:, -1, :] @ self.W_out.data.T
                token = nxt.argmax(axis=-1)
                token = np.where(done, PAD, token)
                ys = np.concatenate([ys, token[:, None]], axis=1)
                done |= (token == EOS) | (step + 1 >= limits)
                if done.all():
                    break
        out = []
        for row in ys[:, 1:]:
            seq = []
            for tok in row:
                if tok in (EOS, PAD):
                    break
                seq.append(int(tok))
            out.append(seq)
        return out
