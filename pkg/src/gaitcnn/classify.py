"""Video-level decisions from subsequence scores, late fusion and 7-NN."""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest.frames import _atomic_write

CLAMP = 1e-12


@dataclass
class ScoreVector:
    probs: np.ndarray
    source: str = ""
    modality: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)

    @property
    def label(self):
        return int(np.argmax(self.probs))


def _stack(vectors):
    arr = np.stack([np.asarray(getattr(v, "probs", v), dtype=np.float64) for v in vectors])
    if arr.ndim != 2:
        raise ValueError("score vectors must all be 1-d and of equal length")
    return arr


def log_product(scores):
    """Normalised elementwise product of the rows of ``scores`` (log space).

    Entries are clamped to ``1e-12`` first so saturated zeros do not
    annihilate the product.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(scores) == 0:
        raise ValueError("need at least one score vector")
    if np.any(scores < 0):
        raise ValueError("scores must be non-negative")
    if np.any(np.all(scores == 0, axis=1)):
        raise ValueError("a score vector is zero for every class")
    logp = np.log(np.maximum(scores, CLAMP)).sum(axis=0)
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def sm_prod(subsequence_scores):
    """Video-level distribution as the normalised product of subsequence softmaxes."""
    return log_product(_stack(subsequence_scores))


def sm_vote(subsequence_scores):
    """Majority vote over subsequence argmaxes; ties go to the larger
    SM-Prod score, then the lowest class index."""
    scores = _stack(subsequence_scores)
    votes = np.bincount(scores.argmax(axis=1), minlength=scores.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if tied.size == 1:
        return int(tied[0])
    prod = sm_prod(scores)
    return int(tied[np.argmax(prod[tied])])


def fuse_product(modality_scores):
    """Product fusion of per-modality video score vectors."""
    if len(modality_scores) == 0:
        raise ValueError("fusion needs at least one modality")
    return log_product(_stack(modality_scores))


def check_beta(beta, n):
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (n,):
        raise ValueError(f"need {n} fusion weights, got {beta.shape}")
    if np.any(beta <= 0) or abs(beta.sum() - 1) > 1e-9:
        raise ValueError(f"fusion weights must be positive and sum to 1, got {beta}")
    return beta


def fuse_weighted_sum(modality_scores, beta):
    scores = _stack(modality_scores)
    return check_beta(beta, len(scores)) @ scores


def beta_grid(n, step=0.1):
    """All weight vectors with components in {step, 2*step, ...} summing to 1,
    in lexicographic order."""
    units = int(round(1 / step))
    out = []
    for combo in itertools.product(range(1, units), repeat=n):
        if sum(combo) == units:
            out.append(tuple(c / units for c in combo))
    if n == 1:
        out = [(1.0,)]
    return out


def grid_search_beta(val_scores, labels, step=0.1):
    """Weights maximising validation R1 of the weighted-sum fusion.

    ``val_scores`` is ``(modalities, videos, classes)``. Ties keep the earliest
    candidate in lexicographic order. Returns ``(beta, r1)``.
    """
    val_scores = np.asarray(val_scores, dtype=np.float64)
    labels = np.asarray(labels)
    if val_scores.ndim != 3 or val_scores.shape[1] == 0:
        raise ValueError("empty validation set")
    if len(labels) != val_scores.shape[1]:
        raise ValueError("label count does not match validation videos")
    best, best_r1 = None, -1.0
    for beta in beta_grid(val_scores.shape[0], step):
        fused = np.tensordot(np.asarray(beta), val_scores, axes=1)
        r1 = float(np.mean(fused.argmax(axis=1) == labels) * 100)
        if r1 > best_r1:
            best, best_r1 = beta, r1
    return best, best_r1


# --------------------------------------------------------------- k-NN
def knn_scores(probe, gallery, gallery_labels, k=7, classes=None):
    """Per-class neighbour fractions among the ``k`` nearest gallery points
    (Euclidean), plus the summed inverse distance used for tie-breaks."""
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    gallery_labels = np.asarray(gallery_labels)
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if gallery.ndim != 2 or probe.shape != gallery.shape[1:]:
        raise ValueError(f"probe dim {probe.shape} does not match gallery {gallery.shape[1:]}")
    if not 1 <= k <= len(gallery):
        raise ValueError(f"k={k} must be in [1, {len(gallery)}]")
    classes = int(gallery_labels.max()) + 1 if classes is None else classes
    d = np.linalg.norm(gallery - probe, axis=1)
    nn = np.argsort(d, kind="stable")[:k]
    counts = np.bincount(gallery_labels[nn], minlength=classes).astype(np.float64)
    inv = np.bincount(gallery_labels[nn], weights=1.0 / (d[nn] + 1e-12), minlength=classes)
    return counts / k, inv


def knn_classify(probe, gallery, gallery_labels, k=7, classes=None):
    """Majority class among the ``k`` nearest neighbours; ties go to the
    largest summed inverse distance. Returns ``(class_id, per_class_score)``."""
    frac, inv = knn_scores(probe, gallery, gallery_labels, k, classes)
    tied = np.flatnonzero(frac == frac.max())
    return int(tied[np.argmax(inv[tied])]), frac


# --------------------------------------------------------------- aggregation helpers
def aggregate_videos(scores, video_ids, method="prod"):
    """Group subsequence rows by video; returns ``(ids, video_scores)``.

    ``method`` is ``prod`` (SM-Prod distribution) or ``vote`` (one-hot of
    the SM-Vote winner).
    """
    groups = defaultdict(list)
    for i, v in enumerate(video_ids):
        groups[v].append(i)
    ids = sorted(groups)
    scores = np.asarray(scores)
    out = []
    for v in ids:
        rows = scores[groups[v]]
        if method == "prod":
            out.append(sm_prod(rows))
        elif method == "vote":
            onehot = np.zeros(scores.shape[1])
            onehot[sm_vote(rows)] = 1.0
            out.append(onehot)
        else:
            raise ValueError(f"unknown aggregation {method!r}")
    return ids, np.array(out)


# --------------------------------------------------------------- score files
def write_scores(path, rows):
    """``rows``: iterable of ``(video_id, modality, probs)``."""
    lines = []
    for vid, modality, probs in rows:
        if " " in vid or " " in modality:
            raise ValueError("ids may not contain spaces")
        lines.append(" ".join([vid, modality] + [repr(float(p)) for p in probs]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode() if lines else b"")


def read_scores(path):
    """Returns ``{modality: {video_id: probs}}``."""
    out = defaultdict(dict)
    width = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vid, modality, *vals = line.split()
        probs = np.array([float(v) for v in vals])
        if width is not None and len(probs) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} scores, got {len(probs)}")
        width = len(probs)
        out[modality][vid] = probs
    return dict(out)
