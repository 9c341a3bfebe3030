"""Parameter containers.

A :class:`Module` owns named parameters, buffers and child modules.  Names
are hierarchical and stable (``decoder.layer0.selfattn.WQ``) because the
checkpoint format keys on them.  Buffers are saved with the state but are
never trained.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import glorot_uniform, stream


class Module:
    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}

    def add_param(self, name, data):
        p = T.parameter(np.array(data, dtype=np.float64), name=name)
        self._params[name] = p
        return p

    def add_buffer(self, name, data):
        self._buffers[name] = np.array(data, dtype=np.float64)
        return self._buffers[name]

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, self, name
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: owner._buffers[key] for name, owner, key in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        own = {name: p.data for name, p in self.named_parameters()}
        buffers = {name: (owner, key) for name, owner, key in self.named_buffers()}
        own.update({name: owner._buffers[key] for name, (owner, key) in buffers.items()})
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} != {own[name].shape}")
            value = np.array(value, dtype=np.float64)
            if name in params:
                params[name].data = value
            else:
                owner, key = buffers[name]
                owner._buffers[key][...] = value

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def init_rng(seed, name):
    return stream(seed, "init/" + name)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored [in x out]."""

    def __init__(self, d_in, d_out, seed, name, bias=True):
        super().__init__()
        rng = init_rng(seed, name)
        self.W = self.add_param("W", glorot_uniform(rng, (d_in, d_out), d_in, d_out))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.W)
        return y if self.b is None else y + self.b


class LayerNorm(Module):
    def __init__(self, d, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(d))
        self.bias = self.add_param("bias", np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)
