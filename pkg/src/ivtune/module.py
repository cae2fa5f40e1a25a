"""Minimal parameter container in the usual ``Module`` style."""

import numpy as np

from .autograd import BatchNormState, Parameter, layer_norm, linear


def trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def uniform_fan_in(rng, shape, fan_in, dtype=np.float64):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Module, Parameter, BatchNormState)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter, BatchNormState)):
                        yield f"{key}.{i}", item

    def _walk(self, prefix, seen):
        for key, val in self._children():
            if id(val) in seen:
                continue
            seen.add(id(val))
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val._walk(name + ".", seen)
            else:
                yield name, val

    def named_parameters(self):
        """``(name, Parameter)`` pairs; shared parameters are listed once."""
        return [(n, v) for n, v in self._walk("", set()) if isinstance(v, Parameter)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        """Batch-norm running statistics as ``(name, BatchNormState)`` pairs."""
        return [(n, v) for n, v in self._walk("", set()) if isinstance(v, BatchNormState)]

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng, cin, cout, std=0.02, zero=False, dtype=np.float64):
        if zero:
            w = np.zeros((cout, cin), dtype=dtype)
        else:
            w = trunc_normal(rng, (cout, cin), std, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float64):
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)
