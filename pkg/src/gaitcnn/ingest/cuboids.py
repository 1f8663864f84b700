"""Fixed-size modality cuboids: localisation, cropping, windowing, normalisation
and augmentation.

Cuboid data is ``(N, N, L)`` for gray/depth with frame ``k`` in channel ``k``,
and ``(N, N, 2L)`` for flow with ``u_k`` in channel ``2k`` and ``v_k`` in
channel ``2k + 1`` (0-based).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .frames import FrameSequence

TRAIN_SPLITS = frozenset({"train", "val"})
SHIFTS = ((-5, -5), (-5, 5), (5, -5), (5, 5))


@dataclass
class PipelineConfig:
    n: int = 60
    length: int = 25
    overlap: float = 80.0
    gray_range: float = 255.0  # 255 keeps raw values, 1 rescales to [0, 1]
    depth_range: float = 255.0
    mean_mode: str = "volume"  # "volume" (per element) or "scalar"
    augment: bool = True
    shift: int = 5
    fg_threshold: float = 25.0

    def __post_init__(self):
        if not 0 <= self.overlap < 100:
            raise ValueError(f"overlap must be in [0, 100), got {self.overlap}")
        if self.mean_mode not in ("volume", "scalar"):
            raise ValueError(f"unknown mean mode {self.mean_mode!r}")
        _ = self.stride

    @property
    def stride(self):
        s = self.length * (1 - self.overlap / 100)
        if s < 1 or abs(s - round(s)) > 1e-9:
            raise ValueError(
                f"L={self.length}, O={self.overlap}% gives non-integer stride {s}")
        return int(round(s))


@dataclass
class ModalityCuboid:
    modality: str
    data: np.ndarray
    seq_id: str = ""
    start: int = 0
    subject: str = ""
    scenario: str = ""
    split: str = "train"
    viewpoint: str = ""

    def with_data(self, data):
        return replace(self, data=data)


# --------------------------------------------------------------- flow layout
def stack_flow(maps):
    """``(L, H, W, 2)`` flow maps -> ``(H, W, 2L)`` interleaved cuboid."""
    maps = np.asarray(maps)
    L, h, w, _ = maps.shape
    return maps.transpose(1, 2, 0, 3).reshape(h, w, 2 * L)


def unstack_flow(data):
    h, w, c = data.shape
    return data.reshape(h, w, c // 2, 2).transpose(2, 0, 1, 3)


# --------------------------------------------------------------- localisation
def localize(frames, threshold=25.0):
    """Rough x-centre of the subject per frame.

    Frames are compared with the per-pixel median over the sequence; the
    column centroid of pixels above ``threshold`` is the subject's x. Frames
    without foreground inherit the nearest detected value.
    """
    frames = np.asarray(frames, np.float32)
    if frames.ndim == 4:  # flow: use magnitude as the foreground signal
        mag = np.linalg.norm(frames, axis=-1)
        fg = mag > max(0.5, 0.2 * float(mag.max(initial=0)))
    else:
        bg = np.median(frames, axis=0)
        fg = np.abs(frames - bg) > threshold
    cols = np.arange(frames.shape[2], dtype=np.float64)
    counts = fg.sum(axis=(1, 2))
    xs = np.full(len(frames), np.nan)
    hit = counts > 0
    xs[hit] = (fg.sum(axis=1) @ cols)[hit] / counts[hit]
    if not hit.any():
        return np.full(len(frames), (frames.shape[2] - 1) / 2)
    idx = np.arange(len(frames))
    return np.interp(idx, idx[hit], xs[hit])


def crop_and_align(seq: FrameSequence, track, center=None, n=60):
    """Crop to ``n`` columns centred on the subject in frame ``center``.

    Full height is kept; the window is clamped to the image bounds.
    """
    if track is None:
        raise ValueError(f"{seq.seq_id}: subject track missing")
    h, w = seq.size
    if h != n:
        raise ValueError(f"expected frame height {n}, got {h} (resize first)")
    if w < n:
        raise ValueError(f"frame width {w} is smaller than crop width {n}")
    center = len(seq) // 2 if center is None else center
    x0 = int(np.clip(np.rint(track[center] - (n - 1) / 2), 0, w - n))
    return seq.with_frames(seq.frames[:, :, x0:x0 + n], meta={**seq.meta, "x0": x0})


def window_starts(T, cfg: PipelineConfig):
    if T < cfg.length:
        return []
    return list(range(0, T - cfg.length + 1, cfg.stride))


def build_cuboids(seq: FrameSequence, cfg: PipelineConfig = PipelineConfig(), track=None):
    """Overlapping ``L``-frame windows of ``seq``, each cropped and aligned on
    its central frame. Sequences shorter than ``L`` yield nothing."""
    starts = window_starts(len(seq), cfg)
    if not starts:
        warnings.warn(f"{seq.seq_id}: {len(seq)} frames < L={cfg.length}; skipped")
        return []
    if track is None:
        track = localize(seq.frames, cfg.fg_threshold)
    out = []
    for s in starts:
        win = seq.with_frames(seq.frames[s:s + cfg.length])
        crop = crop_and_align(win, track[s:s + cfg.length], cfg.length // 2, cfg.n)
        if seq.modality == "of":
            data = stack_flow(crop.frames)
        else:
            data = crop.frames.transpose(1, 2, 0)
        out.append(ModalityCuboid(seq.modality, np.ascontiguousarray(data, np.float32),
                                  seq.seq_id, s, seq.subject, seq.scenario, seq.split,
                                  seq.viewpoint))
    return out


# --------------------------------------------------------------- normalisation
def scale_values(data, modality, cfg: PipelineConfig):
    if modality == "gray":
        return data * (cfg.gray_range / 255.0)
    if modality == "depth":
        return data * (cfg.depth_range / 255.0)
    return data


@dataclass
class MeanVolume:
    modality: str
    mean: np.ndarray
    splits: frozenset
    count: int


def compute_mean(cuboids, cfg: PipelineConfig = PipelineConfig()):
    """Training-set mean of one modality (per element or a single scalar)."""
    if not cuboids:
        raise ValueError("cannot compute a mean from zero cuboids")
    splits = frozenset(c.split for c in cuboids)
    if not splits <= TRAIN_SPLITS:
        raise ValueError(f"mean must come from training data, got splits {sorted(splits)}")
    modality = cuboids[0].modality
    acc = np.zeros(cuboids[0].data.shape, np.float64)
    for c in cuboids:
        acc += scale_values(c.data, modality, cfg)
    mean = acc / len(cuboids)
    if cfg.mean_mode == "scalar":
        mean = np.full_like(mean, mean.mean())
    return MeanVolume(modality, mean.astype(np.float32), splits, len(cuboids))


def normalize(cuboid: ModalityCuboid, mean: MeanVolume, cfg: PipelineConfig = PipelineConfig()):
    if not mean.splits <= TRAIN_SPLITS:
        raise ValueError(f"mean was computed from {sorted(mean.splits)}, not training data")
    if mean.modality != cuboid.modality:
        raise ValueError(f"{mean.modality} mean applied to a {cuboid.modality} cuboid")
    data = scale_values(cuboid.data, cuboid.modality, cfg) - mean.mean
    return cuboid.with_data(data.astype(np.float32))


# --------------------------------------------------------------- augmentation
def mirror(cuboid: ModalityCuboid):
    data = cuboid.data[:, ::-1].copy()
    if cuboid.modality == "of":
        data[..., 0::2] *= -1
    return cuboid.with_data(data)


def shift(cuboid: ModalityCuboid, dx, dy):
    """Translate content by ``dx`` columns right and ``dy`` rows down.

    Uncovered pixels are edge-replicated for gray/depth and zero for flow.
    """
    data = cuboid.data
    h, w = data.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"shift ({dx}, {dy}) exceeds frame {w}x{h}")
    if cuboid.modality == "of":
        out = ndimage.shift(data, (dy, dx, 0), order=0, mode="constant", cval=0.0)
    else:
        rows = np.clip(np.arange(h) - dy, 0, h - 1)
        cols = np.clip(np.arange(w) - dx, 0, w - 1)
        out = data[rows][:, cols]
    return cuboid.with_data(np.ascontiguousarray(out, np.float32))


def augment(cuboid: ModalityCuboid, amount=5):
    """Eight new samples: {as-is, mirrored} x four diagonal ``amount``-pixel shifts."""
    base = [cuboid, mirror(cuboid)]
    return [shift(b, dx * amount // 5, dy * amount // 5) for b in base for dx, dy in SHIFTS]
