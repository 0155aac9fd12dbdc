"""scikit-learn style wrapper around the two-stage training and streaming inference.

Samples are whole videos: ``X`` is a sequence of ``(frames, features)`` arrays
and ``y`` a sequence of per-frame label arrays of matching lengths. Labels may
be arbitrary hashables; they are encoded to ``0..s-1`` internally.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from . import inference, training
from .backbone import ModelConfig
from .workflow import VideoSequence


def _check_videos(X, n_features=None) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of (frames, features) arrays, one per video; "
                         "wrap a single video in a list")
    videos = [check_array(x, dtype=np.float64, ensure_min_samples=1) for x in X]
    if not videos:
        raise ValueError("X contains no videos")
    widths = {v.shape[1] for v in videos}
    if len(widths) != 1:
        raise ValueError(f"videos have different feature widths {sorted(widths)}")
    width = widths.pop()
    if n_features is not None and width != n_features:
        raise ValueError(f"X has {width} features per frame, but the model was fitted with {n_features}")
    return videos


class NFSMPhaseRecognizer(ClassifierMixin, BaseEstimator):
    """Per-frame phase recogniser with learned transition tables.

    ``source`` picks the prediction used by ``predict``: ``"A"`` the stage-1
    baseline, ``"B"`` the stage-2 current-frame head, ``"C"`` the merged
    transition-aware output.
    """

    def __init__(self, n=16, m=8, d=16, alpha=1.0, lr_stage1=1e-3, lr_stage2=1e-3, epochs_stage1=10,
                 epochs_stage2=6, batch_size=64, freeze_backbone=False, source="C", mode="online",
                 random_state=0):
        self.n = n
        self.m = m
        self.d = d
        self.alpha = alpha
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.batch_size = batch_size
        self.freeze_backbone = freeze_backbone
        self.source = source
        self.mode = mode
        self.random_state = random_state

    def _validate_params(self):
        if self.source not in inference.SOURCES:
            raise ValueError(f"source must be one of {inference.SOURCES}, got {self.source!r}")
        if self.mode not in inference.MODES:
            raise ValueError(f"mode must be one of {inference.MODES}, got {self.mode!r}")
        if self.source != "A" and self.epochs_stage2 == 0:
            raise ValueError(f"source {self.source} needs epochs_stage2 > 0")

    def fit(self, X, y):
        self._validate_params()
        videos = _check_videos(X)
        labels = [np.asarray(lab).ravel() for lab in y]
        if len(labels) != len(videos):
            raise ValueError(f"X has {len(videos)} videos but y has {len(labels)} label sequences")
        for i, (v, lab) in enumerate(zip(videos, labels)):
            if len(lab) != len(v):
                raise ValueError(f"video {i}: {len(v)} frames but {len(lab)} labels")
        self._encoder = LabelEncoder().fit(np.concatenate(labels))
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two distinct phases in y")
        self.n_features_in_ = videos[0].shape[1]
        seqs = [VideoSequence(f"v{i:06d}", v, self._encoder.transform(lab)) for i, (v, lab) in enumerate(zip(videos, labels))]
        cfg = ModelConfig(n=self.n, m=self.m, d=self.d, s=len(self.classes_), feat_dim=self.n_features_in_,
                          seed=int(self.random_state))
        tcfg = training.TrainConfig(lr_stage1=self.lr_stage1, lr_stage2=self.lr_stage2, epochs_stage1=self.epochs_stage1,
                                    epochs_stage2=self.epochs_stage2, alpha=self.alpha, batch_size=self.batch_size,
                                    freeze_backbone=self.freeze_backbone, seed=int(self.random_state))
        self.history_ = []
        self.baseline_ = training.train_stage1(seqs, cfg, tcfg, self.history_.append)
        self.checkpoint_ = (training.train_stage2(self.baseline_, seqs, tcfg, self.history_.append)
                            if tcfg.epochs_stage2 > 0 else self.baseline_)
        return self

    def _run(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "checkpoint_")
        self._validate_params()
        videos = _check_videos(X, self.n_features_in_)
        ckpt = self.baseline_ if self.source == "A" else self.checkpoint_
        run = inference.run_online if self.mode == "online" else inference.run_offline
        out = []
        for i, v in enumerate(videos):
            # labels are unused by inference; zeros keep VideoSequence valid
            frames = run(ckpt.params, ckpt.model_config, VideoSequence(f"x{i}", v, np.zeros(len(v), np.int64)), self.source)
            out.append(np.stack([f.p for f in frames]))
        return out

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per-video ``(frames, n_classes)`` probability arrays, columns ordered as ``classes_``."""
        return self._run(X)

    def predict(self, X) -> list[np.ndarray]:
        return [self.classes_[p.argmax(axis=1)] for p in self._run(X)]

    def score(self, X, y, sample_weight=None) -> float:
        """Frame accuracy over all frames of all videos."""
        pred = np.concatenate(self.predict(X))
        truth = np.concatenate([np.asarray(lab).ravel() for lab in y])
        if len(pred) != len(truth):
            raise ValueError(f"{len(truth)} labels for {len(pred)} predicted frames")
        if sample_weight is None:
            return float(np.mean(pred == truth))
        return float(np.average(pred == truth, weights=np.asarray(sample_weight, dtype=np.float64)))
