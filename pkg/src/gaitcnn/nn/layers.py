"""Layer objects: shape inference, parameters, forward/backward.

A layer is built against an input shape (batch axis excluded) before it owns
any parameters, so a whole graph can be audited without allocating weights.
Composite layers (``Sequential``, ``Parallel``, residual blocks) prefix the
names of their children, e.g. ``xflow.conv1.W``.
"""
from __future__ import annotations

import math

import numpy as np

from . import ops


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class Layer:
    kind = "Layer"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}
        self.state = {}
        self.in_shape = None
        self.out_shape = None
        self._cache = None

    # shape inference -----------------------------------------------------
    def build(self, in_shape):
        self.in_shape = in_shape
        self.out_shape = self.infer(in_shape)
        return self.out_shape

    def infer(self, in_shape):
        return in_shape

    def param_shapes(self):
        return {}

    def hyper(self):
        return {}

    def spec(self):
        return dict(kind=self.kind, name=self.name, **self.hyper())

    # parameters ----------------------------------------------------------
    def init_params(self, rng, dtype=np.float32):
        self.params = {k: np.zeros(s, dtype) for k, s in self.param_shapes().items()}

    def children(self):
        return []

    def named_leaves(self, prefix=""):
        """Yield ``(qualified_name, layer)`` for every parameterised leaf."""
        full = prefix + self.name
        kids = self.children()
        if not kids:
            yield full, self
            return
        for child in kids:
            yield from child.named_leaves(full + "." if full else "")

    def astype(self, dtype):
        for _, leaf in self.named_leaves():
            for d in (leaf.params, leaf.state):
                for k in d:
                    d[k] = d[k].astype(dtype)

    # compute -------------------------------------------------------------
    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


def he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv(Layer):
    """2-d or 3-d convolution; ``ndim`` is taken from the kernel tuple."""

    def __init__(self, name, filters, kernel, stride=1, padding=0, bias=True):
        super().__init__(name)
        self.bias = bias
        self.input_grad = True
        self.kernel = tuple(kernel)
        nd = len(self.kernel)
        self.stride = ops._tuple(stride, nd)
        self.padding = ops._tuple(padding, nd)
        self.filters = int(filters)
        if self.filters < 1 or min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"{name}: filters, kernel and stride must be >= 1")
        if min(self.padding) < 0:
            raise ValueError(f"{name}: padding must be >= 0")

    @property
    def kind(self):
        return f"Conv{len(self.kernel)}D"

    def infer(self, in_shape):
        nd = len(self.kernel)
        if len(in_shape) != nd + 1:
            raise ValueError(
                f"{self.name}: {nd}-d conv got input shape {in_shape}")
        sp = ops.conv_output_shape(in_shape[:-1], self.kernel, self.stride,
                                   self.padding)
        return sp + (self.filters,)

    def param_shapes(self):
        cin = self.in_shape[-1]
        shapes = {"W": self.kernel + (cin, self.filters)}
        if self.bias:
            shapes["b"] = (self.filters,)
        return shapes

    def hyper(self):
        return dict(filters=self.filters, kernel=self.kernel,
                    stride=self.stride, padding=self.padding, bias=self.bias)

    def init_params(self, rng, dtype=np.float32):
        shapes = self.param_shapes()
        fan_in = int(np.prod(shapes["W"][:-1]))
        self.params = {"W": he_uniform(rng, shapes["W"], fan_in, dtype)}
        if self.bias:
            self.params["b"] = np.zeros(shapes["b"], dtype)

    def forward(self, x, train=False, rng=None):
        w = self.params["W"]
        b = self.params["b"] if self.bias else np.zeros(w.shape[-1], w.dtype)
        out, self._cache = ops.conv_forward(x, w, b, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = ops.conv_backward(dout, self._cache, self.input_grad)
        self.grads = {"W": dw, "b": db} if self.bias else {"W": dw}
        return dx


class FullyConnected(Layer):
    kind = "FullyConnected"

    def __init__(self, name, units):
        super().__init__(name)
        self.units = int(units)
        if self.units < 1:
            raise ValueError(f"{name}: units must be >= 1")

    def infer(self, in_shape):
        return (self.units,)

    def param_shapes(self):
        return {"W": (int(np.prod(self.in_shape)), self.units),
                "b": (self.units,)}

    def hyper(self):
        return dict(units=self.units)

    def init_params(self, rng, dtype=np.float32):
        shapes = self.param_shapes()
        self.params = {"W": he_uniform(rng, shapes["W"], shapes["W"][0], dtype),
                       "b": np.zeros(shapes["b"], dtype)}

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.fc_forward(x, self.params["W"], self.params["b"])
        return out

    def backward(self, dout):
        dx, dw, db = ops.fc_backward(dout, self._cache)
        self.grads = {"W": dw, "b": db}
        return dx


class _Pool(Layer):
    def __init__(self, name, window, stride=None):
        super().__init__(name)
        self.window = tuple(window)
        self.stride = self.window if stride is None else ops._tuple(stride, len(self.window))

    def infer(self, in_shape):
        if len(in_shape) != len(self.window) + 1:
            raise ValueError(f"{self.name}: window {self.window} vs input {in_shape}")
        if any(w > n for w, n in zip(self.window, in_shape)):
            raise ValueError(
                f"{self.name}: window {self.window} larger than input {in_shape}")
        return ops.pool_output_shape(in_shape[:-1], self.window, self.stride) + in_shape[-1:]

    def hyper(self):
        return dict(window=self.window, stride=self.stride)


class MaxPool(_Pool):
    @property
    def kind(self):
        return f"MaxPool{len(self.window)}D"

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.max_pool_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return ops.max_pool_backward(dout, self._cache)


class AvgPool(_Pool):
    kind = "AvgPool"

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.avg_pool_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return ops.avg_pool_backward(dout, self._cache)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._cache)


class LRN(Layer):
    kind = "LRN"

    def __init__(self, name, k=2.0, n=5, alpha=1e-4, beta=0.75):
        super().__init__(name)
        self.k, self.n, self.alpha, self.beta = k, n, alpha, beta

    def hyper(self):
        return dict(k=self.k, n=self.n, alpha=self.alpha, beta=self.beta)

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.lrn_forward(x, self.k, self.n, self.alpha, self.beta)
        return out

    def backward(self, dout):
        return ops.lrn_backward(dout, self._cache)


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, name, momentum=0.9, eps=1e-5):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps

    def param_shapes(self):
        c = self.in_shape[-1]
        return {"gamma": (c,), "beta": (c,)}

    def init_params(self, rng, dtype=np.float32):
        c = self.in_shape[-1]
        self.params = {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype)}
        self.state = {"mean": np.zeros(c, dtype), "var": np.ones(c, dtype)}

    def forward(self, x, train=False, rng=None):
        out, self._cache, mean, var = ops.batch_norm_forward(
            x, self.params["gamma"], self.params["beta"], self.state["mean"],
            self.state["var"], train, self.momentum, self.eps)
        self.state = {"mean": mean.astype(x.dtype), "var": var.astype(x.dtype)}
        return out.astype(x.dtype, copy=False)

    def backward(self, dout):
        dx, dg, db = ops.batch_norm_backward(dout, self._cache)
        self.grads = {"gamma": dg, "beta": db}
        return dx


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def hyper(self):
        return dict(rate=self.rate)

    def forward(self, x, train=False, rng=None):
        if train and self.rate > 0 and rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs an rng")
        out, self._cache = ops.dropout_forward(x, self.rate, train, rng)
        return out

    def backward(self, dout):
        return ops.dropout_backward(dout, self._cache)


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, train=False, rng=None):
        self._cache = ops.softmax(x)
        return self._cache

    def backward(self, dout):
        return ops.softmax_backward(dout, self._cache)


class Reshape(Layer):
    """Append a unit channel axis: ``(H, W, T) -> (H, W, T, 1)``."""
    kind = "Reshape"

    def infer(self, in_shape):
        return tuple(in_shape) + (1,)

    def forward(self, x, train=False, rng=None):
        return x[..., None]

    def backward(self, dout):
        return None if dout is None else dout[..., 0]


def input_convs(layer):
    """Convolutions that read the raw graph input (through shape-only layers)."""
    if isinstance(layer, Conv):
        return [layer]
    if isinstance(layer, Sequential):
        for child in layer.layers:
            if isinstance(child, Reshape):
                continue
            return input_convs(child)
    if isinstance(layer, Parallel):
        return [c for b in layer.branches for c in input_convs(b)]
    return []


def _check_finite(arr, where):
    items = arr if isinstance(arr, (list, tuple)) else [arr]
    for a in items:
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values produced by {where}")


class Sequential(Layer):
    kind = "Sequential"

    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"{name}: duplicate layer names {names}")

    def children(self):
        return self.layers

    def infer(self, in_shape):
        shape = in_shape
        for layer in self.layers:
            shape = layer.build(shape)
        return shape

    def init_params(self, rng, dtype=np.float32):
        for layer in self.layers:
            layer.init_params(rng, dtype)

    def spec(self):
        return dict(kind=self.kind, name=self.name,
                    layers=[l.spec() for l in self.layers])

    def index(self, name):
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(name)

    def forward(self, x, train=False, rng=None, upto=None, skip_last=0):
        stop = len(self.layers) - skip_last if upto is None else self.index(upto) + 1
        self._ran = stop
        for layer in self.layers[:stop]:
            x = layer.forward(x, train, rng)
            _check_finite(x, f"{layer.name} forward")
        return x

    def backward(self, dout):
        for layer in reversed(self.layers[:self._ran]):
            dout = layer.backward(dout)
            if dout is not None:
                _check_finite(dout, f"{layer.name} backward")
        return dout


class Parallel(Layer):
    """Fan out into branches; outputs a list consumed by ``Concat``.

    ``mode="interleave"``: branch ``i`` of ``n`` gets channels ``i::n`` of a
    single channels-last input, with a unit channel axis appended.
    ``mode="tuple"``: branch ``i`` gets ``x[i]`` of a tuple input.
    """
    kind = "Parallel"

    def __init__(self, name, branches, mode="tuple"):
        super().__init__(name)
        if mode not in ("tuple", "interleave"):
            raise ValueError(f"unknown mode {mode!r}")
        self.branches = list(branches)
        self.mode = mode

    def children(self):
        return self.branches

    def _split_shapes(self, in_shape):
        n = len(self.branches)
        if self.mode == "tuple":
            if len(in_shape) != n or not all(isinstance(s, tuple) for s in in_shape):
                raise ValueError(f"{self.name}: expected {n} input shapes, got {in_shape}")
            return list(in_shape)
        c = in_shape[-1]
        if c % n:
            raise ValueError(f"{self.name}: {c} channels do not split into {n}")
        return [tuple(in_shape[:-1]) + (c // n, 1)] * n

    def infer(self, in_shape):
        return [b.build(s) for b, s in zip(self.branches, self._split_shapes(in_shape))]

    def init_params(self, rng, dtype=np.float32):
        for b in self.branches:
            b.init_params(rng, dtype)

    def spec(self):
        return dict(kind=self.kind, name=self.name, mode=self.mode,
                    branches=[b.spec() for b in self.branches])

    def forward(self, x, train=False, rng=None):
        n = len(self.branches)
        if self.mode == "tuple":
            parts = list(x)
        else:
            parts = [x[..., i::n][..., None] for i in range(n)]
            self._xshape = x.shape
        return [b.forward(p, train, rng) for b, p in zip(self.branches, parts)]

    def backward(self, douts):
        grads = [b.backward(d) for b, d in zip(self.branches, douts)]
        if self.mode == "tuple" or any(g is None for g in grads):
            return tuple(grads)
        n = len(self.branches)
        dx = np.empty(self._xshape, dtype=grads[0].dtype)
        for i, g in enumerate(grads):
            dx[..., i::n] = g[..., 0]
        return dx


class Concat(Layer):
    """Concatenate a list of activations along the channel/feature axis."""
    kind = "Concat"

    def infer(self, in_shape):
        if not isinstance(in_shape, list):
            raise ValueError(f"{self.name}: expects a list of branch outputs")
        lead = {tuple(s[:-1]) for s in in_shape}
        if len(lead) != 1:
            raise ValueError(
                f"{self.name}: incompatible branch activation shapes {in_shape}")
        return tuple(in_shape[0][:-1]) + (sum(s[-1] for s in in_shape),)

    def forward(self, xs, train=False, rng=None):
        self._sizes = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1)

    def backward(self, dout):
        cuts = np.cumsum(self._sizes)[:-1]
        return np.split(dout, cuts, axis=-1)


class _Residual(Layer):
    """``relu(body(x) + shortcut(x))``; shortcut is identity or a 1x1 projection."""

    def __init__(self, name, body, projection=None):
        super().__init__(name)
        self.body = body
        self.projection = projection

    def children(self):
        return [self.body] + ([self.projection] if self.projection else [])

    def infer(self, in_shape):
        out = self.body.build(in_shape)
        short = self.projection.build(in_shape) if self.projection else in_shape
        if tuple(out) != tuple(short):
            raise ValueError(f"{self.name}: body {out} vs shortcut {short}")
        return out

    def init_params(self, rng, dtype=np.float32):
        for c in self.children():
            c.init_params(rng, dtype)

    def spec(self):
        d = dict(kind=self.kind, name=self.name, body=self.body.spec())
        if self.projection:
            d["projection"] = self.projection.spec()
        return d

    def forward(self, x, train=False, rng=None):
        s = self.projection.forward(x, train, rng) if self.projection else x
        out, self._mask = ops.relu_forward(self.body.forward(x, train, rng) + s)
        return out

    def backward(self, dout):
        d = ops.relu_backward(dout, self._mask)
        dx = self.body.backward(d)
        return dx + (self.projection.backward(d) if self.projection else d)


def _needs_projection(cin, width, stride):
    return cin != width or stride != 1


class Residual2Block(_Residual):
    """Two 3x3 convolutions, each with batch norm (CIFAR-style basic block)."""
    kind = "Residual2Block"

    def __init__(self, name, width, stride=1):
        self.width, self.stride = width, stride
        body = Sequential("body", [
            Conv("conv_a", width, (3, 3), stride, 1, bias=False), BatchNorm("bn_a"), ReLU("relu_a"),
            Conv("conv_b", width, (3, 3), 1, 1, bias=False), BatchNorm("bn_b"),
        ])
        super().__init__(name, body)

    def build(self, in_shape):
        if _needs_projection(in_shape[-1], self.width, self.stride):
            self.projection = Conv("proj", self.width, (1, 1), self.stride, 0)
        return super().build(in_shape)


class Residual3Block(_Residual):
    """Bottleneck block: 1x1, 3x3, 1x1 convolutions with batch norm."""
    kind = "Residual3Block"

    def __init__(self, name, width, stride=1, expansion=1):
        self.width, self.stride = width, stride
        self.out_width = width * expansion
        body = Sequential("body", [
            Conv("conv_a", width, (1, 1), 1, 0, bias=False), BatchNorm("bn_a"), ReLU("relu_a"),
            Conv("conv_b", width, (3, 3), stride, 1, bias=False), BatchNorm("bn_b"), ReLU("relu_b"),
            Conv("conv_c", self.out_width, (1, 1), 1, 0, bias=False), BatchNorm("bn_c"),
        ])
        super().__init__(name, body)

    def build(self, in_shape):
        if _needs_projection(in_shape[-1], self.out_width, self.stride):
            self.projection = Conv("proj", self.out_width, (1, 1), self.stride, 0)
        return super().build(in_shape)
