"""Shot segmentation, shot scoring and knapsack selection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ShotPartition:
    n_frames: int
    boundaries: list = field(default_factory=list)

    def __post_init__(self):
        self.boundaries = [int(b) for b in self.boundaries]
        prev = 0
        for b in self.boundaries:
            if not prev < b < self.n_frames:
                raise ValueError(f"boundaries must be strictly increasing inside (0, {self.n_frames}): {self.boundaries}")
            prev = b

    @property
    def shots(self) -> list:
        edges = [0] + self.boundaries + [self.n_frames]
        return list(zip(edges[:-1], edges[1:]))

    @property
    def lengths(self) -> list:
        return [b - a for a, b in self.shots]


@dataclass
class SummarySelection:
    partition: ShotPartition
    selected: list
    frame_mask: np.ndarray
    budget_frames: int
    shot_scores: list

    def to_json(self) -> dict:
        return {
            "n_frames": self.partition.n_frames,
            "boundaries": self.partition.boundaries,
            "shots": [list(s) for s in self.partition.shots],
            "shot_scores": [float(s) for s in self.shot_scores],
            "selected_shots": list(self.selected),
            "budget_frames": self.budget_frames,
            "selected_frames": int(self.frame_mask.sum()),
            "frame_mask": [int(x) for x in self.frame_mask],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# kernel temporal segmentation


def segment_scatter(features) -> np.ndarray:
    """scatter[a, b] = within-segment scatter of frames [a, b) under the linear kernel.

    Entries with b <= a are left at 0.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    gram = x @ x.T
    diag = np.concatenate(([0.0], np.cumsum(np.diag(gram))))
    # 2-D prefix sums of the Gram matrix
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = gram.cumsum(0).cumsum(1)
    a = np.arange(n + 1)[:, None]
    b = np.arange(n + 1)[None, :]
    block = c[b, b] - c[a, b] - c[b, a] + c[a, a]
    length = np.maximum(b - a, 1)
    scatter = (diag[b] - diag[a]) - block / length
    scatter[b <= a] = 0.0
    return scatter


def kts_segment(features, max_shots: int | None = None, penalty: float = 1.0) -> ShotPartition:
    """Exact change-point search minimizing scatter + penalty * k * log(N).

    ``k`` counts change points, so at most ``max_shots - 1`` boundaries are
    placed. Defaults to ``ceil(N / 10)`` shots.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 1:
        raise ValueError("cannot segment an empty sequence")
    if max_shots is None:
        max_shots = math.ceil(n / 10)
    max_shots = max(1, min(int(max_shots), n))
    scatter = segment_scatter(x)

    # cost[s, j]: best scatter splitting frames [0, j) into s + 1 segments
    inf = np.inf
    cost = np.full((max_shots, n + 1), inf)
    back = np.zeros((max_shots, n + 1), dtype=np.int64)
    cost[0, 1:] = scatter[0, 1:]
    for s in range(1, max_shots):
        for j in range(s + 1, n + 1):
            cand = cost[s - 1, s:j] + scatter[s:j, j]
            i = int(np.argmin(cand))
            cost[s, j] = cand[i]
            back[s, j] = i + s

    log_n = math.log(n) if n > 1 else 0.0
    totals = [cost[s, n] + penalty * s * log_n for s in range(max_shots)]
    best = int(np.argmin(totals))
    bounds = []
    j = n
    for s in range(best, 0, -1):
        j = int(back[s, j])
        bounds.append(j)
    return ShotPartition(n, sorted(bounds))


def partition_objective(features, partition: ShotPartition, penalty: float) -> float:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    total = 0.0
    for a, b in partition.shots:
        seg = x[a:b]
        total += float(((seg - seg.mean(axis=0)) ** 2).sum())
    n = partition.n_frames
    return total + penalty * len(partition.boundaries) * (math.log(n) if n > 1 else 0.0)


# ---------------------------------------------------------------------------
# selection


def shot_scores(scores, partition: ShotPartition) -> list:
    s = np.asarray(scores, dtype=np.float64)
    if len(s) != partition.n_frames:
        raise ValueError("scores do not match the partition length")
    return [float(s[a:b].mean()) for a, b in partition.shots]


def knapsack_select(lengths, values, budget: int) -> list:
    """Exact 0/1 knapsack over integer lengths.

    Among optimal selections the lexicographically smallest sorted index
    list wins (so earlier shots are preferred on ties).
    """
    lengths = [int(x) for x in lengths]
    values = [float(x) for x in values]
    if len(lengths) != len(values):
        raise ValueError("lengths and values differ in size")
    if any(x <= 0 for x in lengths):
        raise ValueError("shot lengths must be positive")
    budget = int(budget)
    if budget <= 0 or not lengths:
        return []
    k = len(lengths)
    # best[i][c]: optimal value from items i.. with capacity c
    best = np.zeros((k + 1, budget + 1))
    for i in range(k - 1, -1, -1):
        best[i] = best[i + 1]
        w = lengths[i]
        if w <= budget:
            take = values[i] + best[i + 1, : budget + 1 - w]
            best[i, w:] = np.maximum(best[i + 1, w:], take)

    chosen = []
    c = budget
    for i in range(k):
        if best[i, c] == 0.0:
            break
        w = lengths[i]
        if w <= c and values[i] + best[i + 1, c - w] == best[i, c]:
            chosen.append(i)
            c -= w
    return chosen


def generate_summary(scores, features, budget_fraction: float = 0.15, max_shots: int | None = None,
                     penalty: float = 1.0) -> SummarySelection:
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if len(features) != n:
        raise ValueError("scores and features must be aligned")
    partition = kts_segment(features, max_shots=max_shots, penalty=penalty)
    per_shot = shot_scores(scores, partition)
    budget = int(math.floor(budget_fraction * n))
    selected = knapsack_select(partition.lengths, per_shot, budget)
    mask = np.zeros(n, dtype=bool)
    for i in selected:
        a, b = partition.shots[i]
        mask[a:b] = True
    return SummarySelection(partition, selected, mask, budget, per_shot)
