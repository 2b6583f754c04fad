"""Rank correlation and segment-level average precision."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class UndefinedMetric(ValueError):
    """A correlation is undefined (constant input)."""


def _pair_signs(x: np.ndarray, chunk: int = 512):
    n = len(x)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        yield start, np.sign(x[start:stop, None] - x[None, :])


def kendall_tau(pred, gt) -> float:
    """Tie-corrected Kendall tau-b."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("kendall_tau needs two 1-D arrays of equal length")
    if len(x) < 2:
        raise ValueError("kendall_tau needs at least two items")
    s = 0.0
    nx = 0
    ny = 0
    for (start, sx), (_, sy) in zip(_pair_signs(x), _pair_signs(y)):
        # each unordered pair appears twice across the full sign matrix
        s += float((sx * sy).sum())
        nx += int(np.count_nonzero(sx))
        ny += int(np.count_nonzero(sy))
    if nx == 0 or ny == 0:
        raise UndefinedMetric("kendall_tau is undefined for constant input")
    return (s / 2.0) / math.sqrt((nx / 2.0) * (ny / 2.0))


def rankdata(x) -> np.ndarray:
    """1-based ranks, ties receive the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    bounds = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], bounds))
    stops = np.concatenate((bounds, [len(x)]))
    for a, b in zip(starts, stops):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    return ranks


def spearman_rho(pred, gt) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman_rho needs two 1-D arrays of equal length")
    if len(x) < 2:
        raise ValueError("spearman_rho needs at least two items")
    rx = rankdata(x)
    ry = rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        raise UndefinedMetric("spearman_rho is undefined for constant input")
    return float(rx @ ry) / den


def segment_means(x, seg_len: int = 5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n_seg = -(-len(x) // seg_len)
    return np.array([x[i * seg_len:(i + 1) * seg_len].mean() for i in range(n_seg)])


def _rank_desc(values: np.ndarray) -> np.ndarray:
    # stable sort on the negated values keeps earlier segments first on ties
    return np.argsort(-values, kind="stable")


def segment_map(pred, gt, fraction: float = 0.5, seg_len: int = 5) -> float:
    """Average precision of the predicted segment ranking against the top-``fraction`` gt segments."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have equal length")
    if len(pred) < seg_len:
        raise ValueError(f"need at least {seg_len} frames for one full segment")
    ps = segment_means(pred, seg_len)
    gs = segment_means(gt, seg_len)
    n_pos = math.ceil(fraction * len(gs))
    positive = np.zeros(len(gs), dtype=bool)
    positive[_rank_desc(gs)[:n_pos]] = True

    hits = positive[_rank_desc(ps)]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, len(ranks) + 1) / ranks
    return float(precisions.mean())


@dataclass
class VideoMetrics:
    id: str
    kendall_tau: float | None
    spearman_rho: float | None
    map50: float
    map15: float


@dataclass
class EvalReport:
    videos: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return sum(1 for v in self.videos if v.kendall_tau is not None)

    def _mean(self, attr: str) -> float | None:
        vals = [getattr(v, attr) for v in self.videos if getattr(v, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def kendall_tau(self):
        return self._mean("kendall_tau")

    @property
    def spearman_rho(self):
        return self._mean("spearman_rho")

    @property
    def map50(self):
        return self._mean("map50")

    @property
    def map15(self):
        return self._mean("map15")

    def summary(self) -> dict:
        return {
            "kendall_tau": self.kendall_tau,
            "spearman_rho": self.spearman_rho,
            "map50": self.map50,
            "map15": self.map15,
            "video_count": self.count,
            "skipped": list(self.skipped),
        }

    def to_json(self) -> dict:
        return {"mean": self.summary(), "videos": [vars(v) for v in self.videos]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "kendall_tau", "spearman_rho", "map50", "map15"])
            for v in self.videos:
                w.writerow([v.id, _fmt(v.kendall_tau), _fmt(v.spearman_rho), _fmt(v.map50), _fmt(v.map15)])


def _fmt(x):
    return "" if x is None else repr(float(x))


def video_metrics(vid: str, pred, gt, seg_len: int = 5) -> VideoMetrics:
    try:
        tau = kendall_tau(pred, gt)
        rho = spearman_rho(pred, gt)
    except UndefinedMetric:
        tau = rho = None
    return VideoMetrics(vid, tau, rho, segment_map(pred, gt, 0.50, seg_len), segment_map(pred, gt, 0.15, seg_len))


def evaluate_scores(predictions: dict, records) -> EvalReport:
    """Score per-video predictions ``{id: scores}`` against the records' gt.

    Videos with constant gt have undefined correlations; they are listed in
    ``skipped`` and left out of every mean.
    """
    report = EvalReport()
    for r in records:
        if r.gt is None:
            raise ValueError(f"record {r.id} has no ground truth")
        if r.id not in predictions:
            raise KeyError(f"no prediction for record {r.id}")
        m = video_metrics(r.id, predictions[r.id], r.gt)
        if m.kendall_tau is None:
            report.skipped.append(r.id)
            continue
        report.videos.append(m)
    if not records:
        raise ValueError("cannot evaluate an empty split")
    return report


def evaluate(config, params, records, keep_ranks=None) -> EvalReport:
    from .model import masked_forward, predict

    if keep_ranks is None:
        preds = {r.id: predict(config, params, r) for r in records}
    else:
        preds = {r.id: masked_forward(config, params, r, keep_ranks) for r in records}
    return evaluate_scores(preds, records)
