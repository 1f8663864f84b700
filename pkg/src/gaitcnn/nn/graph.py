"""ModelGraph: a built layer tree plus metadata, and a gradient checker."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import Sequential, Softmax, input_convs


@dataclass
class ModelGraph:
    root: Sequential
    input_shape: tuple
    arch: str = "custom"
    classes: int = 0
    modality: str = ""
    width: float = 1.0
    signature_layer: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.output_shape = self.root.build(self.input_shape)

    # parameters ------------------------------------------------------------
    def init_params(self, rng, dtype=np.float32):
        self.root.init_params(rng, dtype)
        return self

    def leaves(self):
        return list(self.root.named_leaves())

    def param_shapes(self):
        return {f"{n}.{k}": s for n, leaf in self.leaves()
                for k, s in leaf.param_shapes().items()}

    def param_count(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def params(self):
        """Flat name -> array view of every trainable parameter."""
        return {f"{n}.{k}": v for n, leaf in self.leaves()
                for k, v in leaf.params.items()}

    def grads(self):
        return {f"{n}.{k}": v for n, leaf in self.leaves()
                for k, v in leaf.grads.items()}

    def state(self):
        return {f"{n}.{k}": v for n, leaf in self.leaves()
                for k, v in leaf.state.items()}

    def decayed(self):
        """Parameters subject to weight decay: conv and FC kernels only."""
        return {f"{n}.W" for n, leaf in self.leaves() if "W" in leaf.params}

    def load(self, params=None, state=None):
        by_name = dict(self.leaves())
        for src, attr in ((params, "params"), (state, "state")):
            for full, v in (src or {}).items():
                lname, key = full.rsplit(".", 1)
                getattr(by_name[lname], attr)[key] = np.array(v, copy=True)

    def astype(self, dtype):
        self.root.astype(dtype)
        return self

    def clone(self):
        return copy.deepcopy(self)

    def layer_specs(self):
        return self.root.spec()

    # compute -----------------------------------------------------------------
    @property
    def _has_softmax(self):
        return isinstance(self.root.layers[-1], Softmax)

    def forward(self, x, train=False, rng=None):
        """Class probabilities (or raw output when there is no softmax)."""
        return self.root.forward(x, train, rng)

    def logits(self, x, train=False, rng=None):
        return self.root.forward(x, train, rng, skip_last=int(self._has_softmax))

    def backward_logits(self, dlogits):
        return self.root.backward(dlogits)

    def signature(self, x):
        if self.signature_layer is None:
            raise ValueError(f"{self.arch}: no signature layer declared")
        out = self.root.forward(x, False, None, upto=self.signature_layer)
        return out.reshape(out.shape[0], -1)

    def loss_and_grads(self, x, labels, train=True, rng=None):
        """Softmax cross-entropy; populates ``grads()`` (no input gradient)."""
        loss, d = ops.softmax_cross_entropy(self.logits(x, train, rng), labels)
        first = input_convs(self.root)
        for conv in first:
            conv.input_grad = False
        try:
            self.backward_logits(d)
        finally:
            for conv in first:
                conv.input_grad = True
        return loss

    def predict(self, x, batch=32):
        n = _batch_len(x)
        out = [self.forward(_take(x, np.arange(i, min(i + batch, n))))
               for i in range(0, n, batch)]
        return np.concatenate(out)

    def signatures(self, x, batch=32):
        n = _batch_len(x)
        return np.concatenate([self.signature(_take(x, np.arange(i, min(i + batch, n))))
                               for i in range(0, n, batch)])


def _batch_len(x):
    return len(x[0]) if isinstance(x, (list, tuple)) else len(x)


def _take(x, idx):
    if isinstance(x, (list, tuple)):
        return tuple(a[idx] for a in x)
    return x[idx]


@dataclass
class GradCheckReport:
    errors: dict  # block name -> max relative error
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(graph, x, tolerance=1e-4, h=1e-5, labels=None, rng=None,
               max_checks=64, include_input=False, dropout_seed=0):
    """Compare analytic gradients with central differences.

    The scalar objective is softmax cross-entropy when ``labels`` is given,
    else ``sum(out * g)`` for a fixed random ``g``. Runs in float64 on a
    copy of ``graph``; at most ``max_checks`` entries per block are probed.
    Batch norm is evaluated in train mode so its batch coupling is checked;
    dropout masks are frozen by reseeding with ``dropout_seed`` per pass.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    g = graph.clone().astype(np.float64)
    x = x.astype(np.float64)

    def fwd():
        return g.logits(x, train=True, rng=np.random.default_rng(dropout_seed))

    if labels is None:
        proj = rng.standard_normal(fwd().shape)

        def objective():
            return float(np.sum(fwd() * proj))

        def analytic():
            fwd()
            return g.backward_logits(proj)
    else:
        def objective():
            return ops.softmax_cross_entropy(fwd(), labels)[0]

        def analytic():
            _, d = ops.softmax_cross_entropy(fwd(), labels)
            return g.backward_logits(d)

    # running stats drift on every train forward; restore them each time
    saved_state = {k: v.copy() for k, v in g.state().items()}

    def run(fn):
        out = fn()
        g.load(state=saved_state)
        return out

    dx = run(analytic)
    grads = {k: v.copy() for k, v in g.grads().items()}
    blocks = dict(g.params())
    if include_input:
        blocks["input"] = x
        grads["input"] = dx

    errors = {}
    for name, arr in blocks.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_checks:
            idx = rng.choice(flat.size, max_checks, replace=False)
        worst = 0.0
        an = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = run(objective)
            flat[i] = old - h
            fm = run(objective)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, float(rel_error(an[i], num)))
        errors[name] = worst
    return GradCheckReport(errors, tolerance)
