"""Architecture builders: 2D-CNN, 3D-CNN, ResNet-A, ResNet-B and early fusion.

Every builder works in "stages" so the fusion builder can cut a network at
position P1..P5 and keep the remainder as a shared trunk. Graphs are built
(shape-inferred) but not initialised; call ``graph.init_params(rng)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from .nn import (
    AvgPool, BatchNorm, Concat, Conv, Dropout, FullyConnected, LRN, MaxPool,
    ModelGraph, Parallel, ReLU, Reshape, Residual2Block, Residual3Block,
    Sequential, Softmax,
)

WIDTHS = (0.25, 0.5, 0.75, 1.0)
ARCHS = ("2dcnn", "3dcnn", "resnet_a", "resnet_b")
POSITIONS = ("P1", "P2", "P3", "P4", "P5")

N_PIXELS = 60
L_FRAMES = 25


def input_shape_for(modality, n=N_PIXELS, length=L_FRAMES):
    """Cuboid shape per modality: N x N x L, or N x N x 2L for optical flow."""
    modality = modality.lower()
    if modality == "of":
        return (n, n, 2 * length)
    if modality in ("gray", "depth"):
        return (n, n, length)
    raise ValueError(f"unknown modality {modality!r}")


def scaled(count, width):
    exact = count * width
    out = math.ceil(exact - 1e-9)
    if abs(out - exact) > 1e-9:
        warnings.warn(f"{count} x width {width} is not an integer; rounded up to {out}")
    return max(out, 1)


def _check_common(classes, width):
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if width <= 0 or width > 1:
        raise ValueError(f"width multiplier must be in (0, 1], got {width}")


def _fit_padding(spatial, kernel):
    """Smallest symmetric padding letting ``kernel`` fit on every axis."""
    return tuple(max(0, math.ceil((k - n) / 2)) for n, k in zip(spatial, kernel))


def _fc_stage(width, dropout, tag="", sizes=((5, 4096), (6, 2048))):
    layers = []
    for idx, units in sizes:
        layers += [FullyConnected(f"{tag}full{idx}", scaled(units, width)),
                   ReLU(f"{tag}relu{idx}"), Dropout(f"{tag}drop{idx}", dropout)]
    return layers


def _classifier(classes):
    return [FullyConnected("softmax", classes), Softmax("prob")]


# ---------------------------------------------------------------- 2D-CNN
def _stages_2d(width, dropout, tag="", conv_filters=(96, 192, 512, 4096)):
    f = [scaled(c, width) for c in conv_filters]
    return [
        [Conv(f"{tag}conv1", f[0], (7, 7), 1, 3), ReLU(f"{tag}relu1"),
         LRN(f"{tag}norm1"), MaxPool(f"{tag}pool1", (2, 2))],
        [Conv(f"{tag}conv2", f[1], (5, 5), 2, 2), ReLU(f"{tag}relu2"),
         MaxPool(f"{tag}pool2", (2, 2))],
        [Conv(f"{tag}conv3", f[2], (3, 3), 1, 1), ReLU(f"{tag}relu3"),
         MaxPool(f"{tag}pool3", (2, 2))],
        [Conv(f"{tag}conv4", f[3], (2, 2), 1, 0), ReLU(f"{tag}relu4")],
        _fc_stage(width, dropout, tag),
    ]


def build_2dcnn(classes, width=1.0, modality="gray", dropout=0.4, input_shape=None):
    """AlexNet-style linear CNN; gait signature is the full6 activation."""
    _check_common(classes, width)
    shape = input_shape or input_shape_for(modality)
    layers = [l for st in _stages_2d(width, dropout) for l in st] + _classifier(classes)
    return ModelGraph(Sequential("", layers), shape, arch="2dcnn", classes=classes,
                      modality=modality, width=width, signature_layer="drop6",
                      meta=dict(dropout=dropout))


# ---------------------------------------------------------------- 3D-CNN
class _Conv4Fit(Conv):
    """2x2x2 conv whose padding is chosen at build time to fit the input."""

    def build(self, in_shape):
        self.padding = _fit_padding(in_shape[:-1], self.kernel)
        return super().build(in_shape)


def _stages_3d(width, dropout, tag="", halve=False, conv_filters=(96, 192, 512, 4096)):
    counts = [c // 2 if halve else c for c in conv_filters]
    f = [scaled(c, width) for c in counts]
    return [
        [Conv(f"{tag}conv1", f[0], (3, 3, 3), 1, 1), ReLU(f"{tag}relu1"),
         MaxPool(f"{tag}pool1", (2, 2, 2))],
        [Conv(f"{tag}conv2", f[1], (3, 3, 3), 2, 1), ReLU(f"{tag}relu2"),
         MaxPool(f"{tag}pool2", (2, 2, 2))],
        [Conv(f"{tag}conv3", f[2], (3, 3, 3), 1, 1), ReLU(f"{tag}relu3"),
         MaxPool(f"{tag}pool3", (2, 2, 2))],
        [_Conv4Fit(f"{tag}conv4", f[3], (2, 2, 2), 1, 0), ReLU(f"{tag}relu4")],
    ]


def _branches_3d(width, dropout, modality, upto=4):
    """Front of the 3D-CNN through stage ``upto`` (1..4), ending in one tensor."""
    if modality.lower() == "of":
        subs = [Sequential(tag, [l for st in _stages_3d(width, dropout, halve=True)[:upto]
                                 for l in st])
                for tag in ("xflow", "yflow")]
        return [Parallel("flows", subs, mode="interleave"), Concat("concat")]
    return [Reshape("expand")] + [l for st in _stages_3d(width, dropout)[:upto] for l in st]


def build_3dcnn(classes, width=1.0, modality="of", dropout=0.4, input_shape=None):
    """3D-conv CNN; OF input is split into x-flow and y-flow branches."""
    _check_common(classes, width)
    shape = input_shape or input_shape_for(modality)
    layers = _branches_3d(width, dropout, modality) + _fc_stage(width, dropout) \
        + _classifier(classes)
    return ModelGraph(Sequential("", layers), shape, arch="3dcnn", classes=classes,
                      modality=modality, width=width, signature_layer="drop6",
                      meta=dict(dropout=dropout))


# ---------------------------------------------------------------- ResNets
RESNET_A = dict(stem=(16, 3, (2, 2), 2), widths=(16, 32, 64), blocks=(5, 5, 5),
                block=Residual2Block, avgpool=8)
RESNET_B = dict(stem=(64, 7, (3, 3), 2), widths=(64, 128, 256, 256), blocks=(4, 6, 8, 3),
                block=Residual3Block, avgpool=2)


def _resnet_stem(cfg, tag=""):
    filters, k, pool, pool_stride = cfg["stem"]
    return [Conv(f"{tag}conv1", filters, (k, k), 1, k // 2, bias=False),
            BatchNorm(f"{tag}bn1"), ReLU(f"{tag}relu1"),
            MaxPool(f"{tag}pool1", pool, pool_stride)]


def _resnet_stages(cfg, tag=""):
    stages = []
    for s, (w, n) in enumerate(zip(cfg["widths"], cfg["blocks"]), start=1):
        blocks = [cfg["block"](f"{tag}stage{s}_block{b + 1}", w,
                               2 if (s > 1 and b == 0) else 1)
                  for b in range(n)]
        stages.append(blocks)
    return stages


def _resnet_tail(cfg, tag=""):
    a = cfg["avgpool"]
    return [AvgPool(f"{tag}avgpool", (a, a), 1)]


def _build_resnet(arch, cfg, classes, modality, dropout, input_shape):
    _check_common(classes, 1.0)
    shape = input_shape or input_shape_for(modality)
    layers = (_resnet_stem(cfg) + [b for st in _resnet_stages(cfg) for b in st]
              + _resnet_tail(cfg) + _classifier(classes))
    try:
        return ModelGraph(Sequential("", layers), shape, arch=arch, classes=classes,
                          modality=modality, width=1.0, signature_layer="avgpool",
                          meta=dict(dropout=dropout))
    except ValueError as exc:
        raise ValueError(f"{arch}: input {shape} too small: {exc}") from exc


def build_resnet_a(classes, modality="gray", input_shape=None):
    """CIFAR-style ResNet: 3 stages of 5 basic blocks (16/32/64 filters)."""
    return _build_resnet("resnet_a", RESNET_A, classes, modality, 0.0, input_shape)


def build_resnet_b(classes, modality="gray", input_shape=None):
    """Bottleneck ResNet: stages of 4/6/8/3 blocks (64/128/256/256 filters)."""
    return _build_resnet("resnet_b", RESNET_B, classes, modality, 0.0, input_shape)


def build(arch, classes, modality, width=1.0, dropout=0.4, input_shape=None):
    arch = arch.lower().replace("-", "_")
    if arch == "2dcnn":
        return build_2dcnn(classes, width, modality, dropout, input_shape)
    if arch == "3dcnn":
        return build_3dcnn(classes, width, modality, dropout, input_shape)
    if arch == "resnet_a":
        return build_resnet_a(classes, modality, input_shape)
    if arch == "resnet_b":
        return build_resnet_b(classes, modality, input_shape)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------- fusion
@dataclass
class FusionSpec:
    """Early fusion: one branch per modality, joined at ``position``."""
    branches: list  # of (arch, modality)
    position: str = "P5"
    head: str = "fc"  # "fc" (full7/8/9) or "softmax"
    width: float = 1.0
    dropout: float = 0.4
    input_shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise ValueError(f"fusion position must be one of {POSITIONS}")
        if self.head not in ("fc", "softmax"):
            raise ValueError(f"unknown fusion head {self.head!r}")
        if not self.branches:
            raise ValueError("fusion needs at least one branch")


def _pos_index(arch, position):
    k = int(position[1])
    if arch == "resnet_a" and k == 4:
        warnings.warn("ResNet-A has 3 residual stages; P4 is taken after stage 3")
        k = 3
    return k


def _front(arch, modality, k, width, dropout, tag):
    """Layers of one branch up to and including fusion point ``k``."""
    if arch == "2dcnn":
        return [l for st in _stages_2d(width, dropout, tag)[:k] for l in st]
    if arch == "3dcnn":
        front = _branches_3d(width, dropout, modality, upto=min(k, 4))
        if k == 5:
            front += _fc_stage(width, dropout, tag)
        return front
    cfg = RESNET_A if arch == "resnet_a" else RESNET_B
    layers = _resnet_stem(cfg, tag)
    stages = _resnet_stages(cfg, tag)
    if k == 5:
        return layers + [b for st in stages for b in st] + _resnet_tail(cfg, tag)
    return layers + [b for st in stages[:k] for b in st]


def _trunk(arch, k, width, dropout):
    """Shared layers following fusion point ``k`` (empty at P5)."""
    if k == 5:
        return []
    if arch == "2dcnn":
        return [l for st in _stages_2d(width, dropout, "trunk_")[k:] for l in st]
    if arch == "3dcnn":
        return ([l for st in _stages_3d(width, dropout, "trunk_")[k:] for l in st]
                + _fc_stage(width, dropout, "trunk_"))
    cfg = RESNET_A if arch == "resnet_a" else RESNET_B
    return ([b for st in _resnet_stages(cfg, "trunk_")[k:] for b in st]
            + _resnet_tail(cfg, "trunk_"))


def build_fusion_net(spec: FusionSpec, classes):
    """Concatenate per-modality activations at the fusion point and add a head.

    For P1..P4 the branches must share an architecture; the layers after the
    fusion point run once on the concatenated activations.
    """
    _check_common(classes, spec.width)
    archs = [a.lower().replace("-", "_") for a, _ in spec.branches]
    ks = [_pos_index(a, spec.position) for a in archs]
    if ks[0] < 5 and len(set(archs)) > 1:
        raise ValueError(
            f"fusion at {spec.position} needs a common architecture, got {archs}")
    branches, shapes = [], []
    for i, (arch, (_, modality)) in enumerate(zip(archs, spec.branches)):
        branches.append(Sequential(f"b{i}_{modality.lower()}",
                                   _front(arch, modality, ks[i], spec.width,
                                          spec.dropout, "")))
        shapes.append(tuple(spec.input_shapes.get(modality) or input_shape_for(modality)))
    layers = [Parallel("branches", branches, mode="tuple"), Concat("fuse")]
    layers += _trunk(archs[0], ks[0], spec.width, spec.dropout)
    if spec.head == "fc":
        layers += _fc_stage(spec.width, spec.dropout,
                            sizes=((7, 4096), (8, 2048), (9, 1024)))
        sig = "drop9"
    else:
        layers += [Dropout("drop_head", spec.dropout)]
        sig = "drop_head"
    layers += _classifier(classes)
    try:
        return ModelGraph(Sequential("", layers), tuple(shapes),
                          arch=f"fusion[{'+'.join(archs)}]@{spec.position}",
                          classes=classes, modality="+".join(m for _, m in spec.branches),
                          width=spec.width, signature_layer=sig,
                          meta=dict(dropout=spec.dropout, head=spec.head))
    except ValueError as exc:
        raise ValueError(f"incompatible branch activations at {spec.position}: {exc}") from exc


def signature_width(graph):
    """Length of the gait-signature vector of a built graph."""
    root = graph.root
    layer = root.layers[root.index(graph.signature_layer)]
    shape = layer.out_shape
    return int(math.prod(shape))
