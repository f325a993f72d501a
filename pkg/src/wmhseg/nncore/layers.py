"""Layers with explicit forward caches and hand-written backward passes.

Every layer keeps the cache of its most recent ``forward`` call and consumes
it in ``backward``.  Parameter gradients accumulate (``+=``) until
``zero_grad`` so one layer can be driven several times per optimiser step.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops


class StateError(RuntimeError):
    """backward() called without a matching forward()."""


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(())

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a forward cache")
        cache, self._cache = self._cache, None
        return cache

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, g in self.grads.items():
            yield prefix + name, g
        for cname, child in self.children():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by dotted name."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)
        for _, child in self.children():
            child.zero_grad()

    def _init_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return ((str(i), layer) for i, layer in enumerate(self.layers))

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k=4, stride=2, padding=1, bias=True,
                 rng=None, dtype=np.float32, init_std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.params["weight"] = (rng.standard_normal((out_ch, in_ch, k, k)) * init_std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self._init_grads()
        self.need_input_grad = True

    def forward(self, x, train=False):
        out, cols = ops.conv2d(x, self.params["weight"], self.params.get("bias"),
                               self.stride, self.padding)
        self._cache = (cols, x.shape)
        return out

    def backward(self, grad):
        cols, x_shape = self._pop_cache()
        dx, dw, db = ops.conv2d_backward(grad, cols, x_shape, self.params["weight"],
                                         self.stride, self.padding, self.need_input_grad)
        self.grads["weight"] += dw
        if "bias" in self.params:
            self.grads["bias"] += db
        return dx


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, k=4, stride=2, padding=1, bias=True,
                 rng=None, dtype=np.float32, init_std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.params["weight"] = (rng.standard_normal((in_ch, out_ch, k, k)) * init_std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self._init_grads()

    def forward(self, x, train=False):
        out = ops.conv2d_transpose(x, self.params["weight"], self.params.get("bias"),
                                   self.stride, self.padding)
        self._cache = x
        return out

    def backward(self, grad):
        x = self._pop_cache()
        dx, dw, db = ops.conv2d_transpose_backward(grad, x, self.params["weight"],
                                                   self.stride, self.padding)
        self.grads["weight"] += dw
        if "bias" in self.params:
            self.grads["bias"] += db
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._init_grads()

    def forward(self, x, train=False):
        out, self._cache = ops.batch_norm(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps)
        return out

    def backward(self, grad):
        dx, dgamma, dbeta = ops.batch_norm_backward(grad, self._pop_cache(), self.params["gamma"])
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        return dx


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        self._cache = x
        return ops.leaky_relu(x, self.slope)

    def backward(self, grad):
        return ops.leaky_relu_backward(grad, self._pop_cache(), self.slope)


class ReLU(Module):
    def forward(self, x, train=False):
        self._cache = x
        return ops.relu(x)

    def backward(self, grad):
        return ops.relu_backward(grad, self._pop_cache())


class Tanh01(Module):
    """tanh rescaled onto (0, 1)."""

    def forward(self, x, train=False):
        y = ops.tanh01(x)
        self._cache = y
        return y

    def backward(self, grad):
        return ops.tanh01_backward(grad, self._pop_cache())


class Sigmoid(Module):
    def forward(self, x, train=False):
        y = ops.sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad):
        return ops.sigmoid_backward(grad, self._pop_cache())


class Dropout(Module):
    def __init__(self, rate=0.5, rng=None):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        if train and self.rate > 0 and self.rng is None:
            raise StateError("Dropout in train mode needs an rng")
        out, mask = ops.dropout(x, self.rate, self.rng, train)
        self._cache = ("mask", mask)
        return out

    def backward(self, grad):
        _, mask = self._pop_cache()
        return grad if mask is None else grad * mask
