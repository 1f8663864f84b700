"""Synthetic walking sequences with analytically known optical flow.

Each subject is a set of textured ellipses (head, torso, two arms, two
legs, optionally a bag) moving rigidly: the body translates with a small
vertical bounce while limbs swing about hip and shoulder pivots. Because
every part has an explicit transform per frame, the forward flow of every
pixel is known exactly.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest.frames import ManifestEntry, write_flo, write_manifest, write_pgm

H, W = 60, 80
BACKGROUND_DEPTH = 40.0


@dataclass
class SyntheticSpec:
    subjects: int = 10
    sequences: int = 6
    frames: int = 40
    seed: int = 7
    scenarios: tuple = ("nm",)  # sequence j gets scenarios[j % len]
    protocol: str = "classification"  # or "transfer"
    depth_holes: float = 0.002

    def __post_init__(self):
        if self.subjects < 1 or self.sequences < 1 or self.frames < 2:
            raise ValueError("synthetic spec needs >= 1 subject, >= 1 sequence, >= 2 frames")
        if self.protocol not in ("classification", "transfer"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        bad = set(self.scenarios) - {"nm", "bg", "cl"}
        if bad:
            raise ValueError(f"unknown scenario toggles {sorted(bad)}")
        if self.protocol == "classification" and self.sequences < 3:
            raise ValueError("classification protocol needs >= 3 sequences per subject")
        if self.protocol == "transfer" and (self.subjects < 2 or self.sequences < 2):
            raise ValueError("transfer protocol needs >= 2 subjects and >= 2 sequences")


@dataclass
class GaitParams:
    height: float
    torso_w: float
    period: float
    swing: float
    bounce: float
    speed: float
    intensity: float
    texture: float
    arm_ratio: float


def _levels(rng, n, lo, hi):
    """``n`` evenly spread values in [lo, hi], shuffled (Latin-hypercube style)."""
    if n == 1:
        return np.array([(lo + hi) / 2])
    return rng.permutation(np.linspace(lo, hi, n))


def subject_params(n, rng):
    cols = dict(height=_levels(rng, n, 36, 50), torso_w=_levels(rng, n, 7, 12),
                period=_levels(rng, n, 10, 18), swing=_levels(rng, n, 0.25, 0.6),
                bounce=_levels(rng, n, 0.3, 1.8), speed=_levels(rng, n, 0.9, 1.5),
                intensity=_levels(rng, n, 110, 230), texture=_levels(rng, n, 0.15, 0.5),
                arm_ratio=_levels(rng, n, 0.6, 0.95))
    return [GaitParams(**{k: float(v[i]) for k, v in cols.items()}) for i in range(n)]


@dataclass
class _Part:
    name: str
    a: float  # semi-axis along local x
    b: float  # semi-axis along local y
    level: float
    depth: float
    freq: tuple = (0.7, 0.4)
    phase: float = 0.0
    pose: list = field(default_factory=list)  # per frame (cx, cy, angle)


def _rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _walker(p: GaitParams, n_frames, direction, x_start, phase0, scenario, rng):
    """Per-frame poses of every body part, back to front."""
    leg = 0.5 * p.height
    torso_h = 0.32 * p.height
    head_r = 0.09 * p.height
    arm = p.arm_ratio * torso_h
    torso_w = p.torso_w * (1.5 if scenario == "cl" else 1.0)
    ground = H - 4
    base = p.intensity
    jitter = rng.uniform(-0.5, 0.5)
    parts = {
        "arm_b": _Part("arm_b", 1.8, arm / 2, base - 25, 185),
        "leg_b": _Part("leg_b", 2.4, leg / 2, base - 20, 185),
        "torso": _Part("torso", torso_w / 2, torso_h / 2, base, 195, (0.5, 0.8)),
        "bag": _Part("bag", 3.5, 4.5, 255 - base * 0.6, 205, (1.1, 0.9)),
        "head": _Part("head", head_r, head_r * 1.15, base + 15, 195, (1.0, 1.0)),
        "leg_f": _Part("leg_f", 2.4, leg / 2, base - 10, 205),
        "arm_f": _Part("arm_f", 1.8, arm / 2, base - 15, 205),
    }
    if scenario != "bg":
        del parts["bag"]
    for t in range(n_frames + 1):  # one extra pose for the forward flow of the last frame
        ph = 2 * math.pi * t / p.period + phase0
        hx = x_start + direction * p.speed * t
        hy = ground - leg - p.bounce * math.cos(2 * ph) + jitter
        swing = p.swing * math.sin(ph)
        sx, sy = hx, hy - torso_h

        def limb(px, py, ang, length):
            cx, cy = np.array([px, py]) + _rot(ang) @ np.array([0.0, length / 2])
            return (cx, cy, ang)

        parts["leg_f"].pose.append(limb(hx, hy, swing, leg))
        parts["leg_b"].pose.append(limb(hx, hy, -swing, leg))
        parts["arm_f"].pose.append(limb(sx, sy, -0.8 * swing, arm))
        parts["arm_b"].pose.append(limb(sx, sy, 0.8 * swing, arm))
        parts["torso"].pose.append((hx, hy - torso_h / 2, 0.0))
        parts["head"].pose.append((sx, sy - head_r * 1.1, 0.0))
        if "bag" in parts:
            parts["bag"].pose.append((hx + direction * (torso_w / 2 + 2.5), hy - 0.3 * torso_h, 0.0))
    return list(parts.values())


def _background(rng):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    f1, f2 = rng.uniform(0.05, 0.12, 2)
    return 45 + 10 * np.sin(f1 * xx + rng.uniform(0, 6)) * np.cos(f2 * yy)


def render(parts, t, background, texture):
    """Gray frame, depth frame, forward flow and alpha coverage at frame ``t``."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    gray = background.copy()
    depth = np.full((H, W), BACKGROUND_DEPTH)
    flow = np.zeros((H, W, 2))
    cover = np.zeros((H, W))
    for part in parts:
        cx, cy, ang = part.pose[t]
        r = _rot(-ang)
        u = r[0, 0] * (xx - cx) + r[0, 1] * (yy - cy)
        v = r[1, 0] * (xx - cx) + r[1, 1] * (yy - cy)
        rad = np.sqrt((u / part.a) ** 2 + (v / part.b) ** 2)
        alpha = np.clip(0.5 + (1 - rad) * min(part.a, part.b), 0, 1)
        if not alpha.any():
            continue
        tex = part.level * (1 + texture * np.sin(part.freq[0] * u + part.freq[1] * v + part.phase))
        gray = gray * (1 - alpha) + np.clip(tex, 0, 255) * alpha
        inside = alpha > 0.5
        depth[inside] = part.depth
        nx, ny, nang = part.pose[t + 1]
        fwd = _rot(nang)
        px = nx + fwd[0, 0] * u + fwd[0, 1] * v
        py = ny + fwd[1, 0] * u + fwd[1, 1] * v
        flow[inside, 0] = (px - xx)[inside]
        flow[inside, 1] = (py - yy)[inside]
        cover = np.maximum(cover, alpha)
    return gray, depth, flow, cover


def generate_sequence(params: GaitParams, n_frames, rng, scenario="nm", holes=0.0):
    """Returns ``(gray, depth, flow)`` as float arrays of shape
    ``(T, H, W)``, ``(T, H, W)``, ``(T, H, W, 2)``; flow[t] maps frame t to t+1."""
    direction = 1 if rng.random() < 0.5 else -1
    travel = params.speed * n_frames
    margin = 10
    span = max(W - 2 * margin - travel, 0)
    x0 = margin + rng.uniform(0, span) if span else (W - travel) / 2
    x_start = x0 if direction > 0 else W - x0
    parts = _walker(params, n_frames, direction, x_start, rng.uniform(0, 2 * math.pi),
                    scenario, rng)
    for p in parts:
        p.phase = rng.uniform(0, 2 * math.pi)
    bg = _background(rng)
    out = [render(parts, t, bg, params.texture) for t in range(n_frames)]
    gray = np.stack([o[0] for o in out])
    depth = np.stack([o[1] for o in out])
    flow = np.stack([o[2] for o in out]).astype(np.float32)
    if holes:
        depth[rng.random(depth.shape) < holes] = 0
    return np.clip(gray, 0, 255), depth, flow


def _split(spec: SyntheticSpec, subject, j):
    if spec.protocol == "classification":
        n = spec.sequences
        n_test = max(1, n // 3)
        n_val = 1 if n - n_test > 1 else 0
        if j >= n - n_test:
            return "test"
        return "val" if j >= n - n_test - n_val else "train"
    n_train_subj = max(1, spec.subjects // 2)
    if subject < n_train_subj:
        return "val" if j == spec.sequences - 1 and spec.sequences > 2 else "train"
    return "test-gallery" if j < spec.sequences // 2 else "test"


def generate_synthetic(spec: SyntheticSpec, out_dir):
    """Write the corpus under ``out_dir`` and return the manifest path.

    Layout: ``<out_dir>/seqs/<seq_id>/{gray,depth,flow}/NNN.{pgm,flo}`` and
    ``<out_dir>/manifest.txt``. Same spec, same bytes.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    params = subject_params(spec.subjects, rng)
    entries = []
    for s, p in enumerate(params):
        for j in range(spec.sequences):
            scenario = spec.scenarios[j % len(spec.scenarios)]
            seq_rng = np.random.default_rng([spec.seed, s, j])
            gray, depth, flow = generate_sequence(p, spec.frames, seq_rng, scenario,
                                                  spec.depth_holes)
            seq_id = f"s{s:03d}_{j:02d}"
            root = out_dir / "seqs" / seq_id
            for t in range(spec.frames):
                write_pgm(root / "gray" / f"{t:03d}.pgm", gray[t])
                write_pgm(root / "depth" / f"{t:03d}.pgm", depth[t])
                write_flo(root / "flow" / f"{t:03d}.flo", flow[t])
            entries.append(ManifestEntry(seq_id, f"p{s:03d}", scenario, "090", root,
                                         _split(spec, s, j)))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def directory_hash(path):
    """SHA-256 over relative paths and contents of every file under ``path``."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(os.fsencode(f.relative_to(root).as_posix()) + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
