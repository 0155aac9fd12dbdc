"""Phase-recognition metrics.

Two phase-level averaging regimes are supported:

* ``concat``: all videos are concatenated into one stream, confusion counts are
  global, and per-phase scores are averaged over phases present in the ground
  truth.
* ``per_video``: per-phase scores are computed inside each video over the phases
  present in that video, averaged over those phases, then over videos.

Phase-level functions return fractions in [0, 1]; video accuracy is a
percentage. ``EvalReport`` stores everything in percent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class VideoPrediction:
    video_id: str
    labels: np.ndarray
    predicted: np.ndarray
    probs: np.ndarray | None = None  # (T, s)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        if self.labels.shape != self.predicted.shape or self.labels.ndim != 1:
            raise ValueError(f"{self.video_id}: labels {self.labels.shape} vs predictions {self.predicted.shape}")
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.ndim != 2 or len(self.probs) != len(self.labels):
                raise ValueError(f"{self.video_id}: probability matrix {self.probs.shape} does not match labels")

    def __len__(self) -> int:
        return len(self.labels)


def _ordered(predictions: Sequence[VideoPrediction]) -> list[VideoPrediction]:
    return sorted(predictions, key=lambda v: v.video_id)


def video_accuracy(predictions: Sequence[VideoPrediction]) -> tuple[float, float]:
    """Mean and population std of per-video frame accuracy, in percent."""
    if not predictions:
        raise ValueError("video_accuracy needs at least one video")
    accs = []
    for v in _ordered(predictions):
        if len(v) == 0:
            raise ValueError(f"video {v.video_id} has no frames")
        accs.append(100.0 * float(np.mean(v.labels == v.predicted)))
    return float(np.mean(accs)), float(np.std(accs))


@dataclass
class PhaseScores:
    phases: list[int]
    precision: list[float]
    recall: list[float]
    jaccard: list[float]
    f1: list[float]

    @property
    def macro(self) -> dict[str, float]:
        if not self.phases:
            return {"precision": 0.0, "recall": 0.0, "jaccard": 0.0, "f1": 0.0}
        return {
            "precision": float(np.mean(self.precision)),
            "recall": float(np.mean(self.recall)),
            "jaccard": float(np.mean(self.jaccard)),
            "f1": float(np.mean(self.f1)),
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _phase_scores(labels: np.ndarray, predicted: np.ndarray) -> PhaseScores:
    phases = sorted(set(labels.tolist()))
    out = PhaseScores(phases, [], [], [], [])
    for k in phases:
        gt, pr = labels == k, predicted == k
        tp = float(np.sum(gt & pr))
        fp = float(np.sum(~gt & pr))
        fn = float(np.sum(gt & ~pr))
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        out.precision.append(p)
        out.recall.append(r)
        out.jaccard.append(_ratio(tp, tp + fp + fn))
        out.f1.append(f1_score(p, r))
    return out


def phase_metrics_concat(predictions: Sequence[VideoPrediction]) -> PhaseScores:
    ordered = _ordered(predictions)
    if not ordered:
        return PhaseScores([], [], [], [], [])
    labels = np.concatenate([v.labels for v in ordered])
    predicted = np.concatenate([v.predicted for v in ordered])
    return _phase_scores(labels, predicted)


@dataclass
class PerVideoScores(PhaseScores):
    video_macros: list[dict] = field(default_factory=list)

    @property
    def macro(self) -> dict[str, float]:
        return {name: float(np.mean([vm[name] for vm in self.video_macros]))
                for name in ("precision", "recall", "jaccard", "f1")}


def phase_metrics_per_video(predictions: Sequence[VideoPrediction]) -> PhaseScores:
    """Per-video phase averaging; per-phase lists average each phase over the
    videos that contain it, while ``macro`` averages video-level means."""
    ordered = _ordered(predictions)
    if not ordered:
        raise ValueError("phase_metrics_per_video needs at least one video")
    per_video = [_phase_scores(v.labels, v.predicted) for v in ordered]
    phases = sorted({k for sc in per_video for k in sc.phases})
    table: dict[str, list[float]] = {"precision": [], "recall": [], "jaccard": [], "f1": []}
    for k in phases:
        for name in table:
            vals = [getattr(sc, name)[sc.phases.index(k)] for sc in per_video if k in sc.phases]
            table[name].append(float(np.mean(vals)))
    scores = PerVideoScores(phases, table["precision"], table["recall"], table["jaccard"], table["f1"])
    scores.video_macros = [sc.macro for sc in per_video]
    return scores


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean of precision at each positive, ranking by descending score (stable)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(predictions: Sequence[VideoPrediction]) -> float:
    ordered = _ordered(predictions)
    if not ordered or any(v.probs is None for v in ordered):
        raise ValueError("mean_average_precision needs confidence vectors for every video")
    probs = np.concatenate([v.probs for v in ordered])
    labels = np.concatenate([v.labels for v in ordered])
    present = sorted(set(labels.tolist()))
    if not present:
        return 0.0
    return float(np.mean([average_precision(probs[:, k], labels == k) for k in present]))


def count_runs(seq) -> int:
    seq = np.asarray(seq)
    return int(len(seq) > 0) + int(np.count_nonzero(seq[1:] != seq[:-1]))


def fragmentation(predictions: Sequence[VideoPrediction]) -> float:
    """Predicted segment count over ground-truth segment count, summed over videos."""
    if not predictions:
        raise ValueError("fragmentation needs at least one video")
    pred = sum(count_runs(v.predicted) for v in predictions)
    gt = sum(count_runs(v.labels) for v in predictions)
    return pred / gt


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    """All rates in percent; ``fragmentation_ratio`` is a plain ratio."""

    regime: str
    video_accuracy_mean: float
    video_accuracy_std: float
    phases: list[int]
    precision: list[float]
    recall: list[float]
    jaccard: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_jaccard: float
    macro_f1: float
    mAP: float
    fragmentation_ratio: float
    num_videos: int
    num_frames: int

    def to_json(self) -> str:
        return json.dumps(_rounded(asdict(self)), sort_keys=True, indent=1) + "\n"

    def to_text(self) -> str:
        lines = [
            f"regime: {self.regime}",
            f"videos: {self.num_videos}  frames: {self.num_frames}",
            f"video accuracy: {self.video_accuracy_mean:.2f} +/- {self.video_accuracy_std:.2f}",
            f"macro precision: {self.macro_precision:.2f}",
            f"macro recall: {self.macro_recall:.2f}",
            f"macro jaccard: {self.macro_jaccard:.2f}",
            f"macro f1: {self.macro_f1:.2f}",
            f"mAP: {self.mAP:.2f}",
            f"fragmentation ratio: {self.fragmentation_ratio:.4f}",
            "",
            "phase  precision  recall  jaccard      f1",
        ]
        for k, p, r, j, f in zip(self.phases, self.precision, self.recall, self.jaccard, self.f1):
            lines.append(f"{k:5d}  {p:9.2f}  {r:6.2f}  {j:7.2f}  {f:6.2f}")
        return "\n".join(lines) + "\n"


def _rounded(obj):
    if isinstance(obj, float):
        return round(obj, 10)
    if isinstance(obj, list):
        return [_rounded(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    return obj


REGIMES = ("concat", "per_video")


def evaluate(predictions: Sequence[VideoPrediction], regime: str = "concat") -> EvalReport:
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    acc_mean, acc_std = video_accuracy(predictions)
    scores = phase_metrics_concat(predictions) if regime == "concat" else phase_metrics_per_video(predictions)
    macro = scores.macro
    pct = lambda xs: [100.0 * x for x in xs]  # noqa: E731
    return EvalReport(
        regime=regime,
        video_accuracy_mean=acc_mean,
        video_accuracy_std=acc_std,
        phases=list(scores.phases),
        precision=pct(scores.precision),
        recall=pct(scores.recall),
        jaccard=pct(scores.jaccard),
        f1=pct(scores.f1),
        macro_precision=100.0 * macro["precision"],
        macro_recall=100.0 * macro["recall"],
        macro_jaccard=100.0 * macro["jaccard"],
        macro_f1=100.0 * macro["f1"],
        mAP=100.0 * mean_average_precision(predictions),
        fragmentation_ratio=fragmentation(predictions),
        num_videos=len(predictions),
        num_frames=sum(len(v) for v in predictions),
    )
