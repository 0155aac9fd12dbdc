"""Synthetic procedural videos: a Markov chain over phases with dwell times,
phase-conditioned AR(1) Gaussian features, and single-frame ambiguity events."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import config
from .errors import ConfigError, FormatError

DATASET_MAGIC = b"NFSMDS1\0"
MANIFEST_NAME = "manifest.yaml"
_HEADER = struct.Struct("<8sII")


@dataclass
class WorkflowSpec:
    num_phases: int
    transition: np.ndarray
    dwell_min: int
    dwell_max: int
    feat_dim: int
    phase_means: np.ndarray
    emission_noise_sigma: float = 0.0
    smoothing_rho: float = 0.0
    ambiguity_rate: float = 0.0
    terminal_phase: int = -1
    initial_phase: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.phase_means = np.asarray(self.phase_means, dtype=np.float64)
        if self.terminal_phase < 0:
            self.terminal_phase += self.num_phases
        self.validate()

    def validate(self) -> None:
        s = self.num_phases
        if s < 1:
            raise ValueError("num_phases must be >= 1")
        if self.transition.shape != (s, s):
            raise ValueError(f"transition must be {s}x{s}, got {self.transition.shape}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition rows must be non-negative and sum to 1")
        if not 0 <= self.terminal_phase < s or self.transition[self.terminal_phase, self.terminal_phase] != 1.0:
            raise ValueError("terminal_phase must be an absorbing phase index")
        if not 0 <= self.initial_phase < s:
            raise ValueError("initial_phase out of range")
        if not 1 <= self.dwell_min <= self.dwell_max:
            raise ValueError("need 1 <= dwell_min <= dwell_max")
        if self.phase_means.shape != (s, self.feat_dim):
            raise ValueError(f"phase_means must be {s}x{self.feat_dim}, got {self.phase_means.shape}")
        if self.emission_noise_sigma < 0:
            raise ValueError("emission_noise_sigma must be >= 0")
        if not 0 <= self.smoothing_rho < 1:
            raise ValueError("smoothing_rho must lie in [0, 1)")
        if not 0 <= self.ambiguity_rate <= 1:
            raise ValueError("ambiguity_rate must lie in [0, 1]")

    def to_mapping(self) -> dict:
        return {
            "num_phases": self.num_phases,
            "feat_dim": self.feat_dim,
            "dwell_min": self.dwell_min,
            "dwell_max": self.dwell_max,
            "emission_noise_sigma": float(self.emission_noise_sigma),
            "smoothing_rho": float(self.smoothing_rho),
            "ambiguity_rate": float(self.ambiguity_rate),
            "initial_phase": self.initial_phase,
            "terminal_phase": self.terminal_phase,
            "transition": self.transition.tolist(),
            "phase_means": self.phase_means.tolist(),
        }

    @classmethod
    def from_mapping(cls, mapping: dict, doc: config.Document | None = None, path: tuple = ()) -> WorkflowSpec:
        doc = doc or config.Document(mapping, {}, "<spec>")
        allowed = cls.__dataclass_fields__.keys()
        config.check_keys(doc, mapping, allowed, path)
        missing = [k for k in ("num_phases", "transition", "dwell_min", "dwell_max", "feat_dim", "phase_means")
                   if k not in mapping]
        if missing:
            raise ConfigError(f"{doc.where(*path)}: missing key(s) {', '.join(missing)}")
        try:
            return cls(**mapping)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{doc.where(*path)}: invalid workflow spec: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> WorkflowSpec:
        doc = config.read(path)
        return cls.from_mapping(doc.data, doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(config.dump(self.to_mapping()), encoding="utf-8")


def synth7(feat_dim: int = 16, mean_scale: float = 0.35, seed: int = 7) -> WorkflowSpec:
    """Default benchmark: 7 phases, left-to-right chain (0.9 advance, 0.1 skip one)."""
    s = 7
    transition = np.zeros((s, s))
    for a in range(s - 1):
        if a + 2 < s:
            transition[a, a + 1] = 0.9
            transition[a, a + 2] = 0.1
        else:
            transition[a, a + 1] = 1.0
    transition[s - 1, s - 1] = 1.0
    means = np.random.default_rng(seed).standard_normal((s, feat_dim)) * mean_scale
    return WorkflowSpec(
        num_phases=s,
        transition=transition,
        dwell_min=20,
        dwell_max=60,
        feat_dim=feat_dim,
        phase_means=np.round(means, 6),
        emission_noise_sigma=0.6,
        smoothing_rho=0.5,
        ambiguity_rate=0.08,
        terminal_phase=s - 1,
    )


@dataclass
class FrameRecord:
    features: np.ndarray
    label: int


@dataclass
class VideoSequence:
    video_id: str
    features: np.ndarray  # (T, feat_dim)
    labels: np.ndarray  # (T,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features) or len(self.labels) == 0:
            raise ValueError(f"video {self.video_id}: features {self.features.shape} vs labels {self.labels.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"video {self.video_id}: non-finite features")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def frames(self) -> list[FrameRecord]:
        return [FrameRecord(f, int(y)) for f, y in zip(self.features, self.labels)]


@dataclass
class Dataset:
    spec: WorkflowSpec | None
    videos: list[VideoSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    @property
    def num_frames(self) -> int:
        return sum(len(v) for v in self.videos)


def sample_labels(spec: WorkflowSpec, rng: np.random.Generator, max_frames: int) -> np.ndarray:
    labels: list[int] = []
    phase = spec.initial_phase
    while len(labels) < max_frames:
        dwell = int(rng.integers(spec.dwell_min, spec.dwell_max + 1))
        labels.extend([phase] * dwell)
        if phase == spec.terminal_phase:
            break
        phase = int(rng.choice(spec.num_phases, p=spec.transition[phase]))
    return np.asarray(labels[:max_frames], dtype=np.int64)


def sample_video(spec: WorkflowSpec, seed: int, max_frames: int = 2000, video_id: str | None = None) -> VideoSequence:
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    rng = np.random.default_rng(seed)
    labels = sample_labels(spec, rng, max_frames)
    s, rho, sigma = spec.num_phases, spec.smoothing_rho, spec.emission_noise_sigma
    features = np.empty((len(labels), spec.feat_dim))
    prev = spec.phase_means[labels[0]]
    for t, label in enumerate(labels):
        emit = label
        if s > 1 and rng.random() < spec.ambiguity_rate:
            emit = int(rng.integers(s - 1))
            emit += emit >= label
        noise = rng.standard_normal(spec.feat_dim)
        prev = rho * prev + (1.0 - rho) * spec.phase_means[emit] + sigma * noise
        features[t] = prev
    return VideoSequence(video_id or f"v{seed:06d}", features, labels)


# ---------------------------------------------------------------- binary files


def write_video(video: VideoSequence, path: str | Path) -> None:
    if video.labels.max() > 0xFFFF or video.labels.min() < 0:
        raise ValueError("labels must fit in u16")
    t, f = video.features.shape
    blob = (
        _HEADER.pack(DATASET_MAGIC, t, f)
        + video.features.astype("<f4").tobytes()
        + video.labels.astype("<u2").tobytes()
    )
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise OSError(f"{path}: cannot write dataset file: {exc.strerror}") from None


def read_video(path: str | Path, video_id: str | None = None) -> VideoSequence:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read dataset file: {exc.strerror}") from None
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, t, f = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if t < 1 or f < 1:
        raise FormatError(f"{path}: num_frames={t}, feat_dim={f} must be positive")
    expected = _HEADER.size + 4 * t * f + 2 * t
    if len(blob) != expected:
        raise FormatError(f"{path}: payload length {len(blob)} != expected {expected} for num_frames={t}, feat_dim={f}")
    off = _HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=t * f, offset=off).reshape(t, f)
    labels = np.frombuffer(blob, dtype="<u2", count=t, offset=off + 4 * t * f)
    return VideoSequence(video_id or path.stem, feats.astype(np.float64), labels.astype(np.int64))


def generate_dataset(spec: WorkflowSpec, n_videos: int, base_seed: int, out_path: str | Path,
                     max_frames: int = 2000) -> Path:
    """Write ``n_videos`` sampled videos plus a manifest into ``out_path``; return the manifest path."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create dataset directory: {exc.strerror}") from None
    entries = []
    for i in range(n_videos):
        seed = base_seed + i
        video = sample_video(spec, seed, max_frames)
        fname = f"{video.video_id}.nfsmds"
        write_video(video, out / fname)
        entries.append({"id": video.video_id, "file": fname, "frames": len(video), "seed": seed})
    manifest = {
        "format": "nfsm-manifest",
        "version": 1,
        "base_seed": base_seed,
        "max_frames": max_frames,
        "videos": entries,
        "spec": spec.to_mapping(),
    }
    path = out / MANIFEST_NAME
    try:
        path.write_text(config.dump(manifest), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write manifest: {exc.strerror}") from None
    return path


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    doc = config.read(manifest_path)
    data = doc.data
    config.check_keys(doc, data, {"format", "version", "base_seed", "max_frames", "videos", "spec"})
    if data.get("format") != "nfsm-manifest" or data.get("version") != 1:
        raise FormatError(f"{manifest_path}: not an nfsm-manifest v1 file")
    spec = WorkflowSpec.from_mapping(data["spec"], doc, ("spec",)) if data.get("spec") else None
    videos = []
    for entry in data.get("videos") or []:
        video = read_video(manifest_path.parent / entry["file"], entry["id"])
        if len(video) != entry["frames"]:
            raise FormatError(f"{manifest_path}: {entry['id']} has {len(video)} frames, manifest says {entry['frames']}")
        videos.append(video)
    return Dataset(spec, videos)


def empirical_transition(videos: Iterable[VideoSequence | Sequence[int]], num_phases: int) -> np.ndarray:
    """Row-normalized counts of consecutive label pairs; empty rows become uniform."""
    counts = np.zeros((num_phases, num_phases))
    seen = False
    for video in videos:
        labels = np.asarray(video.labels if isinstance(video, VideoSequence) else video, dtype=np.int64)
        seen = True
        np.add.at(counts, (labels[:-1], labels[1:]), 1.0)
    if not seen:
        raise ValueError("empirical_transition needs at least one video")
    totals = counts.sum(axis=1, keepdims=True)
    uniform = np.full((num_phases, num_phases), 1.0 / num_phases)
    return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), uniform)
