"""Dual-supervision losses, Adam, the two-stage training protocol and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import backbone, fsm
from . import tensor as T
from .backbone import ModelConfig, Params
from .errors import FormatError, NumericError, ShapeError
from .tensor import Tensor
from .workflow import VideoSequence

CHECKPOINT_MAGIC = b"NFSMCK1\0"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


@dataclass
class TrainConfig:
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    epochs_stage1: int = 10
    epochs_stage2: int = 6
    alpha: float = 1.0
    batch_size: int = 64
    freeze_backbone: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("learning rates must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1 or self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")


# ---------------------------------------------------------------- windows


@dataclass
class WindowSample:
    features: np.ndarray  # (n, feat_dim), left-padded with the first frame
    current_label: int
    context_labels: np.ndarray  # (n + m,), frames t-n+1 .. t+m, clamped at both ends


def window_indices(num_frames: int, n: int, m: int) -> np.ndarray:
    """Clamped frame indices ``t-n+1 .. t+m`` for every frame ``t`` -> ``(T, n+m)``."""
    t = np.arange(num_frames)[:, None]
    return np.clip(t + np.arange(-n + 1, m + 1)[None, :], 0, num_frames - 1)


def window_samples(video: VideoSequence, n: int, m: int) -> list[WindowSample]:
    idx = window_indices(len(video), n, m)
    return [WindowSample(video.features[row[:n]], int(video.labels[t]), video.labels[row])
            for t, row in enumerate(idx)]


@dataclass
class WindowBatch:
    features: np.ndarray  # (B, n, F)
    future_features: np.ndarray | None  # (B, n+m, F) for real-future runs
    current: np.ndarray  # (B,)
    context: np.ndarray  # (B, n+m)

    def __len__(self) -> int:
        return len(self.current)

    def subset(self, rows) -> WindowBatch:
        return WindowBatch(
            self.features[rows],
            None if self.future_features is None else self.future_features[rows],
            self.current[rows],
            self.context[rows],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample]) -> WindowBatch:
        return cls(
            np.stack([s.features for s in samples]),
            None,
            np.array([s.current_label for s in samples]),
            np.stack([s.context_labels for s in samples]),
        )


def build_windows(videos: Iterable[VideoSequence], n: int, m: int, real_future: bool = False) -> WindowBatch:
    feats, futures, current, context = [], [], [], []
    for video in videos:
        idx = window_indices(len(video), n, m)
        feats.append(video.features[idx[:, :n]])
        if real_future:
            futures.append(video.features[idx])
        current.append(video.labels)
        context.append(video.labels[idx])
    if not feats:
        raise ValueError("no videos to build windows from")
    return WindowBatch(
        np.concatenate(feats),
        np.concatenate(futures) if real_future else None,
        np.concatenate(current),
        np.concatenate(context),
    )


# ---------------------------------------------------------------- losses


def one_hot(labels, s: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= s):
        raise ValueError(f"labels must lie in [0, {s})")
    return np.eye(s)[labels]


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("targets must be one-hot vectors")


def loss_current(p_hat: Tensor, y) -> Tensor:
    """Cross-entropy of the current-frame distribution; averaged over a batch."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    _check_one_hot(y)
    return T.mean_all(T.cross_entropy(p_hat, Tensor(y)))


def loss_trans(trans_probs: Tensor, labels) -> Tensor:
    """Mean over the n+m positions (and the batch) of per-position cross-entropy."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != trans_probs.shape:
        raise ShapeError(f"loss_trans: labels {y.shape} vs probabilities {trans_probs.shape}")
    _check_one_hot(y)
    return T.mean_all(T.cross_entropy(trans_probs, Tensor(y)))


def total_loss(lc, lt, alpha: float):
    if alpha == 0:
        return lc
    if isinstance(lt, Tensor):
        return T.add(lc, T.scale(lt, alpha)) if isinstance(lc, Tensor) else T.add_scalar(T.scale(lt, alpha), lc)
    return lc + alpha * lt


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: Params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, names: Iterable[str]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in names:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            if self.lr:
                p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def trainable_names(params: Params, stage: int, freeze_backbone: bool) -> list[str]:
    if stage == 1:
        return [k for k in params if k.startswith(backbone.BASELINE_PREFIXES)]
    if freeze_backbone:
        return [k for k in params if k.startswith(backbone.FROZEN_REGIME_TRAINABLE)]
    return list(params)


class StepLosses(NamedTuple):
    total: float
    current: float
    transition: float | None


def compute_losses(params: Params, cfg: ModelConfig, batch: WindowBatch, alpha: float, stage: int):
    """Forward pass returning (total, L_c, L_trans) tensors; L_trans is None in stage 1."""
    y_now = one_hot(batch.current, cfg.s)
    if stage == 1:
        lc = loss_current(backbone.baseline_probs(params, cfg, batch.features), y_now)
        return lc, lc, None
    out = fsm.forward(params, cfg, batch.features)
    lc = loss_current(out.p_hat, y_now)
    lt = loss_trans(out.trans_probs, one_hot(batch.context, cfg.s))
    return total_loss(lc, lt, alpha), lc, lt


def train_step(params: Params, batch: WindowBatch, cfg: ModelConfig, tcfg: TrainConfig,
               optimizer: Adam, stage: int = 2) -> StepLosses:
    names = trainable_names(params, stage, tcfg.freeze_backbone)
    for p in params.values():
        p.zero_grad()
    total, lc, lt = compute_losses(params, cfg, batch, tcfg.alpha, stage)
    value = total.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {optimizer.t + 1}")
    total.backward()
    optimizer.step(names)
    return StepLosses(value, lc.item(), None if lt is None else lt.item())


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Params
    step: int = 0
    stage: int = 1
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def has_nfsm(self) -> bool:
        return backbone.has_nfsm(self.params)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def expected_shapes(cfg: ModelConfig, with_nfsm: bool) -> dict[str, tuple[int, ...]]:
    params = backbone.init_params(cfg, seed=0)
    return {k: v.shape for k, v in params.items() if with_nfsm or k.startswith(backbone.BASELINE_PREFIXES)}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    directory, payload, offset = [], [], 0
    for name, tensor in ckpt.params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(blob)})
        payload.append(blob)
        offset += len(blob)
    header = {
        "model_config": ckpt.model_config.to_mapping(),
        "step": ckpt.step,
        "stage": ckpt.stage,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": directory,
    }
    text = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)) + text + b"".join(payload)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write the checkpoint; returns its sha256 hex digest."""
    blob = checkpoint_bytes(ckpt)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PREAMBLE.size:
        raise FormatError(f"{path}: truncated preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _PREAMBLE.size + header_len
    if len(blob) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREAMBLE.size:start].decode("utf-8"))
        cfg = ModelConfig(**header["model_config"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    payload = blob[start:]
    total = sum(entry["nbytes"] for entry in directory)
    if len(payload) != total:
        raise FormatError(f"{path}: tensor payload is {len(payload)} bytes, directory declares {total}")
    params: Params = {}
    for entry in directory:
        name, shape = entry["name"], tuple(entry["shape"])
        if name in params:
            raise FormatError(f"{path}: tensor '{name}' appears twice")
        count = int(np.prod(shape))
        if entry["nbytes"] != 8 * count:
            raise FormatError(f"{path}: tensor '{name}' byte count {entry['nbytes']} does not match shape {shape}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
    with_nfsm = backbone.has_nfsm(params)
    want = expected_shapes(expected or cfg, with_nfsm)
    found = {k: v.shape for k, v in params.items()}
    if want != found:
        diff = sorted(
            f"{k}: expected {want.get(k, 'absent')}, found {found.get(k, 'absent')}"
            for k in set(want) | set(found)
            if want.get(k) != found.get(k)
        )
        raise ShapeError(f"{path}: checkpoint does not match model config: " + "; ".join(diff))
    return Checkpoint(cfg, params, header["step"], header["stage"], header["rng_state"], header.get("meta", {}))


# ---------------------------------------------------------------- protocol


LogFn = Callable[[dict], None]


def _run_epochs(params, cfg, tcfg, windows, stage, epochs, lr, rng, log: LogFn | None, step0: int) -> int:
    optimizer = Adam(params, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    step = step0
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        for start in range(0, len(order), tcfg.batch_size):
            batch = windows.subset(order[start:start + tcfg.batch_size])
            losses = train_step(params, batch, cfg, tcfg, optimizer, stage)
            step += 1
            if log is not None:
                log({"stage": stage, "epoch": epoch, "step": step, "L_c": losses.current,
                     "L_trans": losses.transition, "total": losses.total})
    return step


def train_stage1(videos: Sequence[VideoSequence], cfg: ModelConfig, tcfg: TrainConfig,
                 log: LogFn | None = None) -> Checkpoint:
    """Backbone plus classifier trained with the current-frame loss only."""
    if not videos:
        raise ValueError("training needs at least one video")
    params = backbone.init_baseline(cfg, np.random.default_rng([cfg.seed, 1]))
    rng = np.random.default_rng([tcfg.seed, 1])
    windows = build_windows(videos, cfg.n, cfg.m)
    step = _run_epochs(params, cfg, tcfg, windows, 1, tcfg.epochs_stage1, tcfg.lr_stage1, rng, log, 0)
    return Checkpoint(cfg, params, step, 1, rng.bit_generator.state, {"train": asdict(tcfg)})


def train_stage2(base: Checkpoint, videos: Sequence[VideoSequence], tcfg: TrainConfig,
                 log: LogFn | None = None) -> Checkpoint:
    """Attach fresh NFSM modules to a stage-1 model and train with the total loss."""
    if not videos:
        raise ValueError("training needs at least one video")
    cfg = base.model_config
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in base.params.items()
              if k.startswith(backbone.BASELINE_PREFIXES)}
    params.update(backbone.init_nfsm(cfg, np.random.default_rng([cfg.seed, 2])))
    rng = np.random.default_rng([tcfg.seed, 2])
    windows = build_windows(videos, cfg.n, cfg.m)
    step = _run_epochs(params, cfg, tcfg, windows, 2, tcfg.epochs_stage2, tcfg.lr_stage2, rng, log, base.step)
    return Checkpoint(cfg, params, step, 2, rng.bit_generator.state,
                      {"train": asdict(tcfg), "freeze_backbone": tcfg.freeze_backbone})


def train(videos: Sequence[VideoSequence], cfg: ModelConfig, tcfg: TrainConfig,
          log: LogFn | None = None) -> Checkpoint:
    """Two-stage protocol; with ``epochs_stage2 == 0`` the stage-1 baseline is returned."""
    base = train_stage1(videos, cfg, tcfg, log)
    if tcfg.epochs_stage2 == 0:
        return base
    return train_stage2(base, videos, tcfg, log)
