"""Finite-difference gradient checks for every layer kind on small random graphs."""
from __future__ import annotations

import numpy as np

from .nn import (BatchNorm, Conv, Dropout, FullyConnected, LRN, MaxPool, ModelGraph, ReLU,
                 Sequential, Softmax, grad_check)


def _cases(rng):
    """``kind -> (layers, input_shape, use_labels)``; shapes vary per call."""
    c = int(rng.integers(2, 4))
    s = int(rng.integers(5, 8))
    return {
        "conv2d": ([Conv("c", int(rng.integers(2, 4)), (3, 3), int(rng.integers(1, 3)), 1)],
                   (s, s, c), False),
        "conv3d": ([Conv("c", 2, (2, 3, 2), 1, (1, 0, 1))], (4, 5, 4, c), False),
        "maxpool2d": ([MaxPool("p", (2, 2))], (2 * (s // 2), s, c), False),
        "maxpool3d": ([MaxPool("p", (2, 2, 2))], (4, 4, 4, c), False),
        "lrn": ([LRN("n", k=2.0, n=5, alpha=0.1, beta=0.75)], (3, 3, 7), False),
        "batchnorm": ([BatchNorm("bn")], (3, 3, c), False),
        "fc": ([FullyConnected("fc", int(rng.integers(3, 7)))], (s,), False),
        "relu": ([ReLU("r")], (s, c), False),
        "dropout-off": ([Dropout("d", 0.0)], (s, c), False),
        "softmax": ([Softmax("sm"), FullyConnected("fc", 3)], (s,), False),
        "softmax+cross-entropy": ([FullyConnected("fc", 4), Softmax("prob")], (s,), True),
    }


def layer_suite(seed=0, instances=5, tolerance=1e-4, kinds=None):
    """Yield ``(kind, GradCheckReport)`` for ``instances`` random cases per kind.

    Each case checks parameter and input gradients in float64. The LRN case
    uses a large ``alpha`` so the normalisation term is not negligible.
    """
    rng = np.random.default_rng(seed)
    for i in range(instances):
        for kind, (layers, shape, use_labels) in _cases(rng).items():
            if kinds and kind not in kinds:
                continue
            graph = ModelGraph(Sequential("", layers), shape, arch=kind)
            graph.init_params(rng, np.float64)
            for _, leaf in graph.leaves():
                for k, v in leaf.params.items():  # move BN/bias off their trivial init
                    leaf.params[k] = v + 0.3 * rng.standard_normal(v.shape)
            batch = 3
            x = rng.standard_normal((batch,) + tuple(shape))
            labels = rng.integers(0, graph.output_shape[-1], batch) if use_labels else None
            yield kind, grad_check(graph, x, tolerance, labels=labels,
                                   rng=np.random.default_rng([seed, i]), include_input=True)
