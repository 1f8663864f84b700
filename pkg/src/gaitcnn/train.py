"""Minibatch SGD with momentum, curriculum staging and checkpoints.

Update rule per parameter ``theta`` (``g`` is the mean batch gradient)::

    v     <- momentum * v + lr * (g + weight_decay * theta)   # decay on kernels only
    theta <- theta - v
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import zoo
from .ingest.frames import _atomic_write
from .nn import Concat, ModelGraph, NonFiniteError

log = logging.getLogger(__name__)

DEFAULT_CURRICULUM = ((0.25, 0.0, 0.9), (0.5, 0.1, 0.9), (0.75, 0.1, 0.9), (1.0, 0.4, 0.95))


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.4
    batch: int = 150
    max_epochs: int = 20
    lr_decay_factor: float = 10.0
    plateau_window: int = 3
    plateau_eps: float = 1e-3
    seed: int = 0
    width: float = 1.0
    stages: tuple = ((1.0, 0.4, 0.9),)  # (width fraction, dropout, momentum)
    joint_epochs: int = 5
    strict: bool = False
    eval_batch: int = 64

    def __post_init__(self):
        self.stages = tuple(tuple(s) for s in self.stages)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1 or any(not 0 <= s[2] < 1 for s in self.stages):
            raise ValueError("momentum must be in [0, 1)")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr decay factor must be > 1")
        if not self.stages:
            raise ValueError("at least one training stage is required")

    @classmethod
    def profile(cls, name="default", **overrides):
        """Hyperparameter presets: ``default`` (2D/3D curriculum), ``resnet``, ``multiview``."""
        base = dict(
            default=dict(stages=DEFAULT_CURRICULUM),
            resnet=dict(lr=0.1, batch=64, stages=((1.0, 0.0, 0.9),)),
            multiview=dict(lr=1e-3, max_epochs=30, lr_decay_factor=2.0,
                           stages=DEFAULT_CURRICULUM),
        )[name]
        return cls(**{**base, **overrides})


@dataclass
class TrainState:
    params: dict
    velocity: dict
    bn_state: dict = field(default_factory=dict)
    lr: float = 1e-2
    stage: int = 0
    epoch: int = 0
    phase: str = "stage"  # "stage" or "joint"
    best_val: float = math.inf
    val_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    last_decay: int = 0
    transfers: int = 0

    @classmethod
    def fresh(cls, graph: ModelGraph, lr):
        params = graph.params()
        return cls(params=params, velocity={k: np.zeros_like(v) for k, v in params.items()},
                   bn_state=graph.state(), lr=lr, lr_history=[lr])

    def meta(self):
        d = {k: v for k, v in asdict(self).items()
             if k not in ("params", "velocity", "bn_state")}
        d["best_val"] = None if math.isinf(self.best_val) else self.best_val
        return d


# --------------------------------------------------------------- update rule
def sgd_step(params, velocity, grads, lr, momentum, weight_decay=0.0, decayed=None):
    """One in-place momentum-SGD update; ``decayed`` names the parameters that
    receive weight decay (all when None). Returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}; step aborted")
    for name, g in grads.items():
        p, v = params[name], velocity[name]
        step = g + weight_decay * p if (decayed is None or name in decayed) else g
        v *= momentum
        v += lr * step
        p -= v
    return params


# --------------------------------------------------------------- sampling
def balanced_sampler(labels, batch, rng):
    """Index batches for one epoch, each sample exactly once.

    Per-class queues are shuffled, then drained round-robin in a fixed
    (shuffled) class order, so consecutive runs of the stream are balanced.
    A trailing batch of one sample is merged into the previous batch.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    queues = [list(rng.permutation(np.flatnonzero(labels == c))) for c in classes]
    order = rng.permutation(len(classes))
    stream = []
    depth = max(len(q) for q in queues)
    for i in range(depth):
        stream += [queues[c][i] for c in order if i < len(queues[c])]
    stream = np.array(stream, dtype=np.int64)
    batches = [stream[i:i + batch] for i in range(0, len(stream), batch)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def check_classes(labels, classes):
    missing = sorted(set(range(classes)) - set(np.asarray(labels).tolist()))
    if missing:
        raise ValueError(f"classes without training samples: {missing}")


# --------------------------------------------------------------- scheduler
class PlateauScheduler:
    """Divide the LR by ``factor`` when the best validation error has not
    improved by more than ``eps`` over the last ``window`` evaluations."""

    def __init__(self, factor=10.0, window=3, eps=1e-3):
        self.factor, self.window, self.eps = factor, window, eps

    def step(self, history, lr, last_decay=0):
        """Returns ``(lr, decayed)``; ``last_decay`` is the history length at
        the previous decay, so at most one decay happens per window."""
        if not history:
            raise ValueError("plateau check needs at least one validation error")
        n = len(history)
        if n - last_decay < self.window or n <= self.window:
            return lr, False
        best_before = min(history[:n - self.window])
        if best_before - min(history[n - self.window:]) <= self.eps:
            return lr / self.factor, True
        return lr, False


# --------------------------------------------------------------- curriculum transfer
def _channel_segments(graph):
    """Input-channel segment sizes of top-level leaves fed by a ``Concat``."""
    segs, prev = {}, None
    for layer in graph.root.layers:
        if isinstance(prev, Concat):
            segs[layer.name] = [s[-1] for s in prev.in_shape]
        prev = layer
    return segs


def _segment_index(sizes_src, sizes_dst):
    """Positions of the source channels inside the grown, segmented axis."""
    dst, off = [], 0
    for a, b in zip(sizes_src, sizes_dst):
        if a > b:
            raise ValueError("curriculum stages must not shrink")
        dst.append(off + np.arange(a))
        off += b
    return np.concatenate(dst)


def transfer_params(src: ModelGraph, dst: ModelGraph):
    """Copy every parameter of ``src`` into the leading slice of the matching
    parameter of ``dst``; grown entries keep their fresh initialisation.

    FC kernels are viewed as ``(*in_shape, out)`` so a wider input feature map
    maps channel-wise. Inputs fed by a concat are sliced per branch.
    Returns the number of copied arrays.
    """
    s_leaves = dict(src.leaves())
    s_segs, d_segs = _channel_segments(src), _channel_segments(dst)
    copied = 0
    for lname, d_leaf in dst.leaves():
        s_leaf = s_leaves.get(lname)
        if s_leaf is None:
            continue
        for store in ("params", "state"):
            for key, d_val in getattr(d_leaf, store).items():
                s_val = getattr(s_leaf, store).get(key)
                if s_val is None:
                    continue
                if key == "W" and hasattr(d_leaf, "units"):
                    s_val = s_val.reshape(tuple(s_leaf.in_shape) + (s_val.shape[-1],))
                    view = d_val.reshape(tuple(d_leaf.in_shape) + (d_val.shape[-1],))
                else:
                    view = d_val
                if view.ndim != s_val.ndim or any(
                        a > b for a, b in zip(s_val.shape, view.shape)):
                    raise ValueError(f"cannot transfer {lname}.{key}: "
                                     f"{s_val.shape} -> {view.shape}")
                idx = [np.arange(n) for n in s_val.shape]
                if key == "W" and lname in d_segs:
                    idx[-2] = _segment_index(s_segs[lname], d_segs[lname])
                view[np.ix_(*idx)] = s_val
                copied += 1
    return copied


# --------------------------------------------------------------- data
@dataclass
class Dataset:
    """In-memory samples; ``x`` is an array or a tuple of arrays (multi-branch)."""
    x: object
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self._len(self.x) != len(self.y):
            raise ValueError("sample and label counts differ")

    @staticmethod
    def _len(x):
        return len(x[0]) if isinstance(x, (tuple, list)) else len(x)

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        if isinstance(self.x, (tuple, list)):
            return tuple(a[idx] for a in self.x)
        return self.x[idx]

    def join(self, other):
        if isinstance(self.x, (tuple, list)):
            x = tuple(np.concatenate([a, b]) for a, b in zip(self.x, other.x))
        else:
            x = np.concatenate([self.x, other.x])
        return Dataset(x, np.concatenate([self.y, other.y]))


def error_rate(graph, data: Dataset, batch=64):
    probs = graph.predict(data.x, batch)
    return float(np.mean(probs.argmax(axis=1) != data.y))


@contextlib.contextmanager
def strict_mode(enabled=True):
    """Single-threaded BLAS so floating-point reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _epoch_rng(seed, phase, stage, epoch):
    return np.random.default_rng([seed, 0 if phase == "stage" else 1, stage, epoch])


def run_epoch(graph, data: Dataset, state: TrainState, cfg: TrainConfig, momentum, rng):
    decayed = graph.decayed()
    losses = []
    for idx in balanced_sampler(data.y, cfg.batch, rng):
        loss = graph.loss_and_grads(data.take(idx), data.y[idx], train=True, rng=rng)
        sgd_step(state.params, state.velocity, graph.grads(), state.lr, momentum,
                 cfg.weight_decay, decayed)
        losses.append(loss)
    state.bn_state = graph.state()
    return float(np.mean(losses))


def train_stage(graph, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                state: TrainState, momentum, until_epoch=None, on_epoch=None):
    """Epochs ``state.epoch .. until_epoch`` (default ``cfg.max_epochs``) of one stage."""
    sched = PlateauScheduler(cfg.lr_decay_factor, cfg.plateau_window, cfg.plateau_eps)
    stop = cfg.max_epochs if until_epoch is None else min(until_epoch, cfg.max_epochs)
    with strict_mode(cfg.strict):
        while state.epoch < stop:
            rng = _epoch_rng(cfg.seed, "stage", state.stage, state.epoch)
            loss = run_epoch(graph, train, state, cfg, momentum, rng)
            state.epoch += 1
            if val is not None and len(val):
                err = error_rate(graph, val, cfg.eval_batch)
                state.val_history.append(err)
                state.best_val = min(state.best_val, err)
                state.lr, decayed = sched.step(state.val_history, state.lr, state.last_decay)
                if decayed:
                    state.last_decay = len(state.val_history)
                state.lr_history.append(state.lr)
            else:
                err = None
            log.info("stage %d epoch %d loss %.4f val_err %s lr %.3g", state.stage,
                     state.epoch, loss, "n/a" if err is None else f"{err:.4f}", state.lr)
            if on_epoch:
                on_epoch(graph, state, loss, err)
    return state


def run_joint(graph, train, val, cfg, state, momentum, on_epoch=None):
    """Extra epochs on train+val at the final learning rate."""
    data = train.join(val) if val is not None and len(val) else train
    state.phase, state.epoch = "joint", 0
    with strict_mode(cfg.strict):
        while state.epoch < cfg.joint_epochs:
            rng = _epoch_rng(cfg.seed, "joint", state.stage, state.epoch)
            loss = run_epoch(graph, data, state, cfg, momentum, rng)
            state.epoch += 1
            if on_epoch:
                on_epoch(graph, state, loss, None)
    return state


def build_stage_graph(arch, classes, modality, width, dropout, input_shape=None):
    return zoo.build(arch, classes, modality, width, dropout, input_shape)


def curriculum_train(arch, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                     classes, modality="gray", input_shape=None, builder=None,
                     on_epoch=None, on_transfer=None):
    """Train ``arch`` through ``cfg.stages``, warm-starting each stage from the
    previous one, then run ``cfg.joint_epochs`` on train+val.

    ``builder(width, dropout)`` overrides graph construction (e.g. fusion
    nets); ``on_transfer(prev, new)`` is called after each warm start, before
    the first update. Returns ``(graph, state)``.
    """
    widths = [s[0] for s in cfg.stages]
    if any(b < a for a, b in zip(widths, widths[1:])):
        raise ValueError(f"curriculum stage widths must be non-decreasing, got {widths}")
    if arch in ("resnet_a", "resnet_b") and len(cfg.stages) > 1:
        raise ValueError("ResNets train in a single stage")
    check_classes(train.y, classes)
    if builder is None:
        def builder(width, dropout):
            return build_stage_graph(arch, classes, modality, width, dropout, input_shape)
    prev, state = None, None
    for k, (frac, dropout, momentum) in enumerate(cfg.stages):
        width = frac * cfg.width
        graph = builder(width, dropout)
        graph.init_params(np.random.default_rng([cfg.seed, 2, k]))
        transfers = state.transfers if state else 0
        if prev is not None:
            transfer_params(prev, graph)
            transfers += 1
            if on_transfer:
                on_transfer(prev, graph)
        lr = state.lr if state else cfg.lr
        state = TrainState.fresh(graph, lr)
        state.stage, state.transfers = k, transfers
        graph.meta.update(stage=k, momentum=momentum)
        train_stage(graph, train, val, cfg, state, momentum, on_epoch=on_epoch)
        prev = graph
    if cfg.joint_epochs:
        run_joint(prev, train, val, cfg, state, cfg.stages[-1][2], on_epoch)
    return prev, state


# --------------------------------------------------------------- checkpoints
MAGIC = b"GAITCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(obj):
    """Stable short hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _blocks(state: TrainState):
    for prefix, d in (("param", state.params), ("velocity", state.velocity),
                      ("state", state.bn_state)):
        for name in sorted(d):
            yield f"{prefix}/{name}", d[name]


def checkpoint_bytes(state: TrainState, cfg_hash="", graph_meta=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    h = cfg_hash.encode()
    buf.write(struct.pack("<I", len(h)) + h)
    meta = json.dumps({"train": state.meta(), "graph": graph_meta or {}},
                      sort_keys=True, default=str).encode()
    buf.write(struct.pack("<I", len(meta)) + meta)
    blocks = list(_blocks(state))
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        nb = name.encode()
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_checkpoint(path, state: TrainState, cfg_hash="", graph_meta=None):
    payload = checkpoint_bytes(state, cfg_hash, graph_meta)
    _atomic_write(path, payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path, expect_hash=None):
    """Returns ``(state, cfg_hash, graph_meta)``."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, tail = data[:-8], data[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != tail:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (n,) = struct.unpack("<I", take(4))
    cfg_hash = take(n).decode()
    if expect_hash is not None and cfg_hash != expect_hash:
        raise CheckpointError(f"{path}: config hash {cfg_hash} != {expect_hash}")
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n))
    (count,) = struct.unpack("<I", take(4))
    stores = {"param": {}, "velocity": {}, "state": {}}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * size), "<f4").reshape(shape).astype(np.float32)
        prefix, key = name.split("/", 1)
        stores[prefix][key] = arr
    tm = meta["train"]
    state = TrainState(params=stores["param"], velocity=stores["velocity"],
                       bn_state=stores["state"],
                       **{k: v for k, v in tm.items() if k != "best_val"})
    state.best_val = math.inf if tm["best_val"] is None else tm["best_val"]
    return state, cfg_hash, meta["graph"]


def attach(graph: ModelGraph, state: TrainState):
    """Load a (checkpointed) state into ``graph`` and re-point the state's
    arrays at the graph's live parameters so training can continue."""
    graph.load(state.params, state.bn_state)
    state.params = graph.params()
    state.bn_state = graph.state()
    return state
