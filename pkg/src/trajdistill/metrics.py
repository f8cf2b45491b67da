"""Evaluation metrics over top-k-by-confidence mode predictions.

Conventions fixed here (the common benchmark ones where a choice is needed):
miss threshold 2.0 m on final displacement; mAP buckets agents by a maneuver
inferred from groundtruth geometry (heading change beyond +-pi/6 -> left/right,
total displacement under 2 m -> stationary) with a fixed hit threshold and
trapezoid-integrated precision-recall per bucket.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .gmm import Trajectory, TrajectoryGMM

MISS_THRESHOLD_M = 2.0
MANEUVER_BUCKETS = ("straight", "left", "right", "stationary")


def top_k(gmm: TrajectoryGMM, k: int) -> list[tuple[float, np.ndarray]]:
    """The k most confident modes as (weight, means) pairs, weights unrenormalized.

    Ties in confidence break toward the lower mode index.
    """
    if k > gmm.num_modes:
        raise ValueError(f"k={k} exceeds K={gmm.num_modes}")
    w = gmm.weights()
    order = np.lexsort((np.arange(len(w)), -w))[:k]
    means = gmm.means if isinstance(gmm.means, np.ndarray) else gmm.means.data
    return [(float(w[i]), means[i]) for i in order]


def _displacements(means: np.ndarray, gt: Trajectory) -> np.ndarray:
    return np.linalg.norm(means[gt.validity] - gt.states[gt.validity], axis=-1)


def min_ade(pred: TrajectoryGMM, gt: Trajectory, k: int) -> float:
    """Min over top-k modes of mean per-valid-step displacement."""
    if not gt.validity.any():
        raise ValueError("groundtruth has no valid steps")
    return min(float(_displacements(m, gt).mean()) for _, m in top_k(pred, k))


def _final_valid_index(gt: Trajectory) -> int:
    idx = np.flatnonzero(gt.validity)
    if idx.size == 0:
        raise ValueError("groundtruth has no valid steps")
    return int(idx[-1])


def min_fde(pred: TrajectoryGMM, gt: Trajectory, k: int) -> float:
    """Min over top-k modes of displacement at the final valid step."""
    t = _final_valid_index(gt)
    return min(float(np.linalg.norm(m[t] - gt.states[t])) for _, m in top_k(pred, k))


def miss_rate(preds: list[TrajectoryGMM], gts: list[Trajectory], k: int, threshold: float = MISS_THRESHOLD_M) -> float:
    """Fraction of agents whose best top-k final displacement exceeds threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    misses = sum(1 for p, g in zip(preds, gts) if min_fde(p, g, k) > threshold)
    return misses / len(preds)


def w_ade(pred: TrajectoryGMM, gt: Trajectory) -> float:
    """Confidence-weighted ADE over all K modes."""
    w = pred.weights()
    means = pred.means if isinstance(pred.means, np.ndarray) else pred.means.data
    return float(sum(w[i] * _displacements(means[i], gt).mean() for i in range(pred.num_modes)))


def brier_min_fde(pred: TrajectoryGMM, gt: Trajectory, k: int) -> float:
    """minFDE plus (1 - confidence)^2 of the mode achieving it."""
    t = _final_valid_index(gt)
    best = None
    for w, m in top_k(pred, k):
        fde = float(np.linalg.norm(m[t] - gt.states[t]))
        if best is None or fde < best[0]:
            best = (fde, w)
    return best[0] + (1.0 - best[1]) ** 2


def maneuver_bucket(gt: Trajectory) -> str:
    """Classify the groundtruth geometry into a coarse maneuver bucket."""
    states = gt.states[gt.validity]
    if np.linalg.norm(states[-1] - states[0]) < 2.0:
        return "stationary"
    deltas = np.diff(states, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    moving = norms > 1e-6
    if moving.sum() < 2:
        return "straight"
    dirs = deltas[moving]
    h0 = math.atan2(dirs[0][1], dirs[0][0])
    h1 = math.atan2(dirs[-1][1], dirs[-1][0])
    change = math.remainder(h1 - h0, 2 * math.pi)
    if change > math.pi / 6:
        return "left"
    if change < -math.pi / 6:
        return "right"
    return "straight"


def _average_precision(entries: list[tuple[float, bool, int]], num_agents: int) -> float:
    """AP from (confidence, hit, agent_index) mode entries for one bucket.

    A mode is a true positive when it hits and its agent has no earlier match
    in confidence order. Precision-recall is integrated by trapezoid over
    recall, anchored at recall 0 with the first precision value.
    """
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][0], i))
    matched: set[int] = set()
    tp = 0
    precisions, recalls = [], []
    for rank, i in enumerate(order, start=1):
        conf, hit, agent = entries[i]
        if hit and agent not in matched:
            matched.add(agent)
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / num_agents)
    if not precisions:
        return 0.0
    ap = 0.0
    prev_r, prev_p = 0.0, precisions[0]
    for p, r in zip(precisions, recalls):
        ap += 0.5 * (p + prev_p) * (r - prev_r)
        prev_r, prev_p = r, p
    return ap


def mean_ap(
    preds: list[TrajectoryGMM], gts: list[Trajectory], k: int, threshold: float = MISS_THRESHOLD_M
) -> float:
    """Mean over maneuver buckets of confidence-ranked average precision."""
    buckets: dict[str, list[tuple[float, bool, int]]] = {b: [] for b in MANEUVER_BUCKETS}
    bucket_agents: dict[str, int] = {b: 0 for b in MANEUVER_BUCKETS}
    for idx, (pred, gt) in enumerate(zip(preds, gts)):
        b = maneuver_bucket(gt)
        bucket_agents[b] += 1
        t = _final_valid_index(gt)
        for w, m in top_k(pred, k):
            hit = bool(np.linalg.norm(m[t] - gt.states[t]) <= threshold)
            buckets[b].append((w, hit, idx))
    aps = [
        _average_precision(buckets[b], bucket_agents[b]) for b in MANEUVER_BUCKETS if bucket_agents[b] > 0
    ]
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class MetricsReport:
    run_id: str
    dataset: str
    model: str
    method: str
    k: int
    min_ade: float
    min_fde: float
    miss_rate: float
    w_ade: float
    brier_min_fde: float
    mean_ap: float
    n_agents: int
    seed: int | None = None

    def row(self) -> list:
        return [
            self.run_id,
            self.dataset,
            self.model,
            self.method,
            self.k,
            f"{self.min_ade:.6f}",
            f"{self.min_fde:.6f}",
            f"{self.miss_rate:.6f}",
            f"{self.w_ade:.6f}",
            f"{self.brier_min_fde:.6f}",
            f"{self.mean_ap:.6f}",
            self.n_agents,
        ]


CSV_COLUMNS = [
    "run_id",
    "dataset",
    "model",
    "method",
    "k",
    "minADE",
    "minFDE",
    "MR",
    "wADE",
    "brier_minFDE",
    "mAP",
    "n_agents",
]


def evaluate(
    preds: list[TrajectoryGMM],
    gts: list[Trajectory],
    k: int = 6,
    run_id: str = "",
    dataset: str = "",
    model: str = "",
    method: str = "",
) -> MetricsReport:
    """Aggregate all metrics over agent (prediction, groundtruth) pairs."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal, nonempty prediction/groundtruth lists")
    return MetricsReport(
        run_id=run_id,
        dataset=dataset,
        model=model,
        method=method,
        k=k,
        min_ade=float(np.mean([min_ade(p, g, k) for p, g in zip(preds, gts)])),
        min_fde=float(np.mean([min_fde(p, g, k) for p, g in zip(preds, gts)])),
        miss_rate=miss_rate(preds, gts, k),
        w_ade=float(np.mean([w_ade(p, g) for p, g in zip(preds, gts)])),
        brier_min_fde=float(np.mean([brier_min_fde(p, g, k) for p, g in zip(preds, gts)])),
        mean_ap=mean_ap(preds, gts, k),
        n_agents=len(preds),
    )


def write_csv(path: str, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(r.row())
