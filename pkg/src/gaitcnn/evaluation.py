"""Rank-k accuracy, weighted averages and report files."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .ingest.frames import _atomic_write

CSV_HEADER = ("scenario", "metric", "accuracy", "n")


def rank_k_accuracy(scores_or_rankings, truth, k=1):
    """Percentage of samples whose true class is among the top ``k``.

    Accepts a score matrix ``(n, C)`` (higher is better) or precomputed
    rankings (each row a class ordering, best first). ``k`` is clamped to
    the class count.
    """
    truth = np.asarray(truth)
    arr = np.asarray(scores_or_rankings)
    if arr.ndim != 2 or len(arr) == 0:
        raise ValueError("empty test set")
    if len(arr) != len(truth):
        raise ValueError("prediction and truth counts differ")
    k = min(k, arr.shape[1])
    if np.issubdtype(arr.dtype, np.integer):
        top = arr[:, :k]
    else:
        top = np.argsort(-arr, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == truth[:, None], axis=1)) * 100)


def accuracy_from_counts(correct, total):
    if total <= 0:
        raise ValueError("empty test set")
    return 100.0 * correct / total


def weighted_average(accuracies, weights=None):
    acc = np.asarray(accuracies, dtype=np.float64)
    w = np.ones_like(acc) if weights is None else np.asarray(weights, dtype=np.float64)
    if acc.shape != w.shape:
        raise ValueError(f"{len(acc)} accuracies vs {len(w)} weights")
    if acc.size == 0:
        raise ValueError("nothing to average")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return float((w * acc).sum() / w.sum())


@dataclass
class EvalReport:
    """Accuracy cells keyed by ``(scenario, metric)`` with sample counts."""
    cells: dict = field(default_factory=dict)  # (scenario, metric) -> (accuracy, n)
    meta: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def add(self, scenario, metric, accuracy, n):
        if not 0 <= accuracy <= 100:
            raise ValueError(f"accuracy {accuracy} outside [0, 100]")
        self.cells[(scenario, metric)] = (float(accuracy), int(n))

    def get(self, scenario, metric):
        return self.cells[(scenario, metric)][0]

    @property
    def scenarios(self):
        return list(dict.fromkeys(s for s, _ in self.cells))

    @property
    def metrics(self):
        return list(dict.fromkeys(m for _, m in self.cells))

    def add_average(self, name="AVG", scenarios=None, weights=None):
        """Weighted average per metric over ``scenarios`` (default: all).
        Weights default to each cell's sample count."""
        scenarios = [s for s in (scenarios or self.scenarios) if s != name]
        for metric in self.metrics:
            rows = [(self.cells[(s, metric)]) for s in scenarios if (s, metric) in self.cells]
            if not rows:
                continue
            w = [n for _, n in rows] if weights is None else weights
            self.add(name, metric, weighted_average([a for a, _ in rows], w),
                     sum(n for _, n in rows))

    def check_monotone(self):
        """R5 must never be below R1 in any scenario."""
        for s in self.scenarios:
            if (s, "R1") in self.cells and (s, "R5") in self.cells:
                if self.get(s, "R5") + 1e-9 < self.get(s, "R1"):
                    raise AssertionError(f"{s}: R5 < R1")
        return True

    # ---------------------------------------------------------------- output
    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for (s, m), (acc, n) in self.cells.items():
            w.writerow([s, m, f"{acc:.4f}", n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError("not a report CSV (bad header)")
        rep = cls()
        for s, m, acc, n in rows[1:]:
            rep.add(s, m, float(acc), int(n))
        return rep

    def to_text(self):
        metrics = self.metrics
        scen = self.scenarios
        widths = [max(8, len(s) + 2) for s in scen]
        lines = ["".ljust(8) + "".join(s.rjust(w) for s, w in zip(scen, widths))]
        for m in metrics:
            cells = [f"{self.get(s, m):.1f}" if (s, m) in self.cells else "-" for s in scen]
            lines.append(m.ljust(8) + "".join(c.rjust(w) for c, w in zip(cells, widths)))
        lines += [f"* {n}" for n in dict.fromkeys(self.notes)]
        return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path, fmt="csv"):
    if fmt not in ("csv", "text"):
        raise ValueError(f"unknown report format {fmt!r}")
    text = report.to_csv() if fmt == "csv" else report.to_text()
    _atomic_write(path, text.encode())
    return path


def evaluate_scores(video_scores, truth, scenarios, report=None, ks=(1, 5), prefix=""):
    """Fill ``report`` with R1/R5 per scenario from video-level score rows."""
    report = report or EvalReport()
    truth = np.asarray(truth)
    scenarios = np.asarray(scenarios)
    video_scores = np.asarray(video_scores)
    classes = video_scores.shape[1]
    for scen in dict.fromkeys(scenarios.tolist()):
        sel = scenarios == scen
        for k in ks:
            report.add(f"{prefix}{scen}", f"R{k}",
                       rank_k_accuracy(video_scores[sel], truth[sel], k), int(sel.sum()))
    if max(ks) > classes:
        report.notes.append(f"R{max(ks)} computed with k={classes} (only {classes} classes)")
    return report
