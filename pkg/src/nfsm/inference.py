"""Transition-aware inference.

Online, each frame's window yields the current-frame distribution and, through
the transition tables, forecasts for the next ``m`` frames. Forecasts wait in a
:class:`TransitionBuffer` until their target frame arrives; the current frame's
distribution is then multiplied element-wise with the mean of the forecasts
aimed at it and renormalized.

Prediction sources: ``A`` is the stage-1 baseline output, ``B`` the NFSM
model's current-frame distribution, ``C`` the merged distribution.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backbone, fsm
from .backbone import ModelConfig, Params
from .errors import ConfigError, FormatError, ShapeError
from .metrics import VideoPrediction
from .tensor import no_grad
from .training import Checkpoint, window_indices
from .workflow import VideoSequence

SOURCES = ("A", "B", "C")
MODES = ("online", "offline")
MERGE_FLOOR = 1e-12
PREDICTION_HEADER = "# nfsm-predictions v1"


class TransitionBuffer:
    """Forecast distributions keyed by absolute target frame."""

    def __init__(self, m: int):
        self.m = m
        self._store: dict[int, list[np.ndarray]] = defaultdict(list)
        self.consumed_through = -1

    def push(self, target: int, probs: np.ndarray) -> None:
        if target <= self.consumed_through:
            raise ValueError(f"target frame {target} has already been consumed")
        slot = self._store[target]
        if len(slot) >= self.m:
            raise OverflowError(f"target frame {target} already holds {self.m} contributions")
        slot.append(np.asarray(probs, dtype=np.float64))

    def pop(self, target: int) -> list[np.ndarray]:
        """Contributions for ``target``; it and every earlier target are dropped."""
        out = self._store.pop(target, [])
        for stale in [k for k in self._store if k < target]:
            del self._store[stale]
        self.consumed_through = max(self.consumed_through, target)
        return out

    def contributions(self, target: int) -> int:
        return len(self._store.get(target, ()))

    def pending(self) -> int:
        return sum(len(v) for v in self._store.values())

    def reset(self) -> None:
        self._store.clear()
        self.consumed_through = -1


def aggregate(contributions: Sequence[np.ndarray]) -> np.ndarray | None:
    """Mean of the available forecasts; ``None`` on cold start."""
    if len(contributions) == 0:
        return None
    total = np.zeros_like(np.asarray(contributions[0], dtype=np.float64))
    for c in contributions:
        total = total + c
    return total / len(contributions)


def merge(p_hat: np.ndarray, p_tilde: np.ndarray | None) -> np.ndarray:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_tilde is None:
        return p_hat.copy()
    prod = p_hat * np.asarray(p_tilde, dtype=np.float64)
    z = prod.sum()
    if z < MERGE_FLOOR:
        return p_hat.copy()
    return prod / z


@dataclass
class FramePrediction:
    frame_index: int
    p_hat: np.ndarray
    p_tilde: np.ndarray | None
    p: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.p))

    @property
    def confidence(self) -> float:
        return float(np.max(self.p))


def _check_source(params: Params, source: str) -> None:
    if source not in SOURCES:
        raise ConfigError(f"prediction source must be one of {SOURCES}, got {source!r}")
    if source in ("B", "C") and not backbone.has_nfsm(params):
        raise ConfigError(f"source {source} needs a checkpoint with NFSM heads (stage 2)")


def _window_outputs(params: Params, cfg: ModelConfig, window: np.ndarray, source: str, real_future: bool):
    """(p_hat, future forecasts (m, s) or None, tables) for one window."""
    with no_grad():
        if source == "A":
            p = backbone.baseline_probs(params, cfg, window[None, : cfg.n]).data[0]
            return p, None, None
        out = fsm.forward(params, cfg, window[None], real_future=real_future)
    return out.p_hat.data[0], out.trans_probs.data[0, cfg.n:], out.tables.data[0]


def _finish(t: int, p_hat, future, buffer: TransitionBuffer, source: str) -> FramePrediction:
    if future is not None:
        for j, probs in enumerate(future, start=1):
            buffer.push(t + j, probs)
    p_tilde = aggregate(buffer.pop(t))
    p = merge(p_hat, p_tilde) if source == "C" else p_hat.copy()
    return FramePrediction(t, p_hat, p_tilde, p)


def stream_step(params: Params, cfg: ModelConfig, buffer: TransitionBuffer, frame_features,
                history: list, frame_index: int, source: str = "C") -> FramePrediction:
    """Process one incoming frame.

    ``history`` holds earlier frames of the stream (the first frame of the video
    is kept while fewer than n-1 frames are available, for left-padding); it is
    updated in place.
    """
    _check_source(params, source)
    frame = np.asarray(frame_features, dtype=np.float64)
    if frame.shape != (cfg.feat_dim,):
        raise ShapeError(f"stream_step: frame has shape {frame.shape}, expected ({cfg.feat_dim},)")
    past = history[-(cfg.n - 1):] if cfg.n > 1 else []
    first = history[0] if history else frame
    pad = [first] * (cfg.n - 1 - len(past))
    window = np.stack(pad + list(past) + [frame])
    p_hat, future, _ = _window_outputs(params, cfg, window, source, real_future=False)
    history.append(frame)
    if cfg.n > 1 and len(history) > cfg.n - 1:
        del history[: len(history) - (cfg.n - 1)]
    return _finish(frame_index, p_hat, future, buffer, source)


def run_online(params: Params, cfg: ModelConfig, video: VideoSequence, source: str = "C") -> list[FramePrediction]:
    buffer, history = TransitionBuffer(cfg.m), []
    return [stream_step(params, cfg, buffer, f, history, t, source) for t, f in enumerate(video.features)]


def run_offline(params: Params, cfg: ModelConfig, video: VideoSequence, source: str = "C") -> list[FramePrediction]:
    """Same pipeline with the real next ``m`` frames in place of the duplicated current frame."""
    _check_source(params, source)
    idx = window_indices(len(video), cfg.n, cfg.m)
    buffer = TransitionBuffer(cfg.m)
    out = []
    for t, row in enumerate(idx):
        p_hat, future, _ = _window_outputs(params, cfg, video.features[row], source, real_future=True)
        out.append(_finish(t, p_hat, future, buffer, source))
    return out


def video_transition_table(params: Params, cfg: ModelConfig, video: VideoSequence) -> np.ndarray:
    """Mean dynamic transition table over history positions and every frame of a video."""
    idx = window_indices(len(video), cfg.n, cfg.m)
    with no_grad():
        out = fsm.forward(params, cfg, video.features[idx[:, : cfg.n]])
    return fsm.history_table_mean(out.tables.data, cfg.n)


# ---------------------------------------------------------------- prediction files


def to_video_prediction(video: VideoSequence, frames: Sequence[FramePrediction]) -> VideoPrediction:
    probs = np.stack([f.p for f in frames])
    return VideoPrediction(video.video_id, video.labels, probs.argmax(axis=1), probs)


def predict_videos(ckpt: Checkpoint, videos: Sequence[VideoSequence], mode: str = "online",
                   source: str = "C") -> list[VideoPrediction]:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    _check_source(ckpt.params, source)
    run = run_online if mode == "online" else run_offline
    return [to_video_prediction(v, run(ckpt.params, ckpt.model_config, v, source)) for v in videos]


def format_predictions(predictions: Sequence[VideoPrediction], header: dict, num_phases: int) -> str:
    lines = [PREDICTION_HEADER]
    for key in sorted(header):
        lines.append(f"# {key}: {json.dumps(header[key], sort_keys=True)}")
    lines.append("# num_phases: " + str(num_phases))
    cols = ["video_id", "frame_index", "label", "predicted"] + [f"p_{k}" for k in range(num_phases)]
    lines.append("\t".join(cols))
    for v in predictions:
        for t in range(len(v)):
            probs = "\t".join(f"{x:.9f}" for x in v.probs[t])
            lines.append(f"{v.video_id}\t{t}\t{v.labels[t]}\t{v.predicted[t]}\t{probs}")
    return "\n".join(lines) + "\n"


def predict_dataset(ckpt: Checkpoint, videos: Sequence[VideoSequence], mode: str, path: str | Path,
                    source: str = "C") -> list[VideoPrediction]:
    """Run inference per video and write the prediction file; returns what was written."""
    predictions = predict_videos(ckpt, videos, mode, source)
    header = {
        "mode": mode,
        "source": source,
        "checkpoint_sha256": hashlib.sha256(ckpt.to_bytes()).hexdigest(),
        "model_config": ckpt.model_config.to_mapping(),
    }
    Path(path).write_text(format_predictions(predictions, header, ckpt.model_config.s), encoding="utf-8")
    return predictions


def read_predictions(path: str | Path) -> tuple[dict, list[VideoPrediction]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != PREDICTION_HEADER:
        raise FormatError(f"{path}: missing '{PREDICTION_HEADER}' header")
    header: dict = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(": ")
        try:
            header[key] = json.loads(value)
        except ValueError:
            raise FormatError(f"{path}:{i + 1}: bad header value for '{key}'") from None
        i += 1
    if i >= len(lines) or not lines[i].startswith("video_id\t"):
        raise FormatError(f"{path}:{i + 1}: missing column header")
    s = int(header.get("num_phases", 0))
    rows: dict[str, list] = {}
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        parts = line.split("\t")
        if len(parts) != 4 + s:
            raise FormatError(f"{path}:{lineno}: expected {4 + s} fields, got {len(parts)}")
        vid = parts[0]
        try:
            rec = (int(parts[1]), int(parts[2]), int(parts[3]), [float(x) for x in parts[4:]])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed record") from None
        rows.setdefault(vid, []).append(rec)
    out = []
    for vid, recs in rows.items():
        if [r[0] for r in recs] != list(range(len(recs))):
            raise FormatError(f"{path}: frames of {vid} are not contiguous from 0")
        out.append(VideoPrediction(vid, [r[1] for r in recs], [r[2] for r in recs], np.array([r[3] for r in recs])))
    return header, out
