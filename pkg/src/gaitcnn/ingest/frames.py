"""Frame sequences and their on-disk formats.

Layout of one sequence directory::

    <seq_dir>/gray/000.pgm ...    8-bit binary PGM
    <seq_dir>/depth/000.pgm ...   8-bit binary PGM, 0 = invalid reading
    <seq_dir>/flow/000.flo ...    "FLO1", int32 width, int32 height, then
                                  row-major float32 (u, v) pairs; all little-endian

A manifest lists one sequence per line::

    <seq_id> <subject_id> <scenario> <viewpoint> <seq_dir> <split>
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

SPLITS = ("train", "val", "test", "test-gallery")
MODALITIES = ("gray", "of", "depth")
FRAME_SIZE = (60, 80)  # rows, cols
FLO_MAGIC = b"FLO1"


@dataclass
class FrameSequence:
    """An ordered stack of frames of one modality.

    ``frames`` is ``(T, H, W)`` for gray/depth and ``(T, H, W, 2)`` for flow.
    """
    frames: np.ndarray
    modality: str = "gray"
    seq_id: str = ""
    subject: str = ""
    scenario: str = "N"
    viewpoint: str = "0"
    split: str = "train"
    fps: float = 25.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        want = 4 if self.modality == "of" else 3
        if self.frames.ndim != want:
            raise ValueError(
                f"{self.modality} frames must have rank {want}, got {self.frames.shape}")
        if len(self.frames) < 1:
            raise ValueError("a frame sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self):
        return self.frames.shape[1:3]

    def with_frames(self, frames, **kw):
        return replace(self, frames=frames, **kw)


# --------------------------------------------------------------- PGM / FLO
def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-d")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(data, np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w)


def write_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be H x W x 2")
    h, w = flow.shape[:2]
    _atomic_write(path, FLO_MAGIC + np.array([w, h], "<i4").tobytes() + flow.tobytes())


def read_flo(path):
    data = Path(path).read_bytes()
    if data[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: bad flow magic {data[:4]!r}")
    w, h = np.frombuffer(data, "<i4", count=2, offset=4)
    flow = np.frombuffer(data, "<f4", count=int(w) * int(h) * 2, offset=12)
    return flow.reshape(int(h), int(w), 2).astype(np.float32)


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# --------------------------------------------------------------- preprocessing
def resize_frames(frames, size=FRAME_SIZE, flow=False):
    """Bilinear resize of ``(T, H, W[, 2])`` frames; flow vectors are rescaled."""
    frames = np.asarray(frames, np.float32)
    h, w = frames.shape[1:3]
    if (h, w) == tuple(size):
        return frames
    zy, zx = size[0] / h, size[1] / w
    zoom = (1, zy, zx) + ((1,) if flow else ())
    out = ndimage.zoom(frames, zoom, order=1, mode="nearest", grid_mode=True)
    if flow:
        out[..., 0] *= zx
        out[..., 1] *= zy
    return out


def fill_depth_holes(frame):
    """Replace zero (invalid) depth by the nearest valid value on the same row."""
    frame = np.array(frame, dtype=np.float32)
    cols = np.arange(frame.shape[1])
    for row in frame:
        valid = np.flatnonzero(row > 0)
        if valid.size == 0 or valid.size == row.size:
            continue
        pos = np.minimum(np.searchsorted(valid, cols), valid.size - 1)
        left, right = valid[np.maximum(pos - 1, 0)], valid[pos]
        nearest = np.where(np.abs(cols - left) <= np.abs(right - cols), left, right)
        row[:] = row[nearest]
    return frame


# --------------------------------------------------------------- manifest
@dataclass
class ManifestEntry:
    seq_id: str
    subject: str
    scenario: str
    viewpoint: str
    path: Path
    split: str


def read_manifest(path):
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        seq, subj, scen, view, where, split = parts
        if split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
        where = Path(where)
        entries.append(ManifestEntry(seq, subj, scen, view,
                                     where if where.is_absolute() else path.parent / where,
                                     split))
    return entries


def write_manifest(path, entries):
    lines = ["# seq_id subject_id scenario viewpoint modality_dir split"]
    root = Path(path).parent
    for e in entries:
        where = os.path.relpath(e.path, root)
        lines.append(f"{e.seq_id} {e.subject} {e.scenario} {e.viewpoint} {where} {e.split}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_sequence(entry: ManifestEntry, modality, size=FRAME_SIZE):
    """Read, resize and clean one modality of a manifest entry."""
    sub = entry.path / ("flow" if modality == "of" else modality)
    if modality == "of":
        files = sorted(sub.glob("*.flo"))
        frames = [read_flo(f) for f in files]
    else:
        files = sorted(sub.glob("*.pgm"))
        frames = [read_pgm(f).astype(np.float32) for f in files]
    if not files:
        raise FileNotFoundError(f"no {modality} frames under {sub}")
    frames = resize_frames(np.stack(frames), size, flow=modality == "of")
    if modality == "depth":
        frames = np.stack([fill_depth_holes(f) for f in frames])
    return FrameSequence(frames, modality, entry.seq_id, entry.subject, entry.scenario,
                         entry.viewpoint, entry.split)
