"""Run configuration and the A/B/C ablation ladder shared by the CLI and the
acceptance suite."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config, inference, metrics, training, workflow
from .backbone import ModelConfig
from .errors import ConfigError
from .training import Checkpoint, TrainConfig
from .workflow import VideoSequence

DATA_KEYS = {"manifest", "num_test"}
INFERENCE_KEYS = {"mode", "source", "regime"}
TOP_KEYS = {"data", "model", "train", "inference", "output_dir"}


@dataclass
class DataConfig:
    manifest: str = ""
    num_test: int = 10  # last videos of the manifest are held out


@dataclass
class InferenceConfig:
    mode: str = "online"
    source: str = "C"
    regime: str = "concat"

    def __post_init__(self):
        if self.mode not in inference.MODES:
            raise ValueError(f"mode must be one of {inference.MODES}")
        if self.source not in inference.SOURCES:
            raise ValueError(f"source must be one of {inference.SOURCES}")
        if self.regime not in metrics.REGIMES:
            raise ValueError(f"regime must be one of {metrics.REGIMES}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    output_dir: str = "runs/default"
    source: str = "<defaults>"

    def to_mapping(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_mapping(),
            "train": dataclasses.asdict(self.train),
            "inference": dataclasses.asdict(self.inference),
            "output_dir": self.output_dir,
        }


def _set_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: '{part}' is not a section")
    node[parts[-1]] = value


def parse_run_config(doc: config.Document, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a parsed document; ``overrides`` maps dotted keys to values."""
    data = dict(doc.data)
    for dotted, value in (overrides or {}).items():
        _set_path(data, dotted, value)
    config.check_keys(doc, data, TOP_KEYS)
    output_dir = data.get("output_dir", RunConfig.output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError(f"{doc.where('output_dir')}: 'output_dir' must be a non-empty string")
    return RunConfig(
        data=config.build_dataclass(DataConfig, doc, data.get("data"), ("data",)),
        model=config.build_dataclass(ModelConfig, doc, data.get("model"), ("model",)),
        train=config.build_dataclass(TrainConfig, doc, data.get("train"), ("train",)),
        inference=config.build_dataclass(InferenceConfig, doc, data.get("inference"), ("inference",)),
        output_dir=output_dir,
        source=doc.source,
    )


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    doc = config.read(path) if path is not None else config.Document({}, {}, "<defaults>")
    return parse_run_config(doc, overrides)


def split(videos: Sequence[VideoSequence], num_test: int) -> tuple[list[VideoSequence], list[VideoSequence]]:
    """First ``len - num_test`` videos train, the last ``num_test`` test."""
    if num_test < 0 or num_test >= len(videos):
        raise ConfigError(f"num_test={num_test} leaves no training videos out of {len(videos)}")
    cut = len(videos) - num_test
    return list(videos[:cut]), list(videos[cut:])


def model_for_dataset(cfg: ModelConfig, spec: workflow.WorkflowSpec | None) -> ModelConfig:
    """Check that phase count and feature width agree with the dataset."""
    if spec is not None and (cfg.s, cfg.feat_dim) != (spec.num_phases, spec.feat_dim):
        raise ConfigError(f"model expects s={cfg.s}, feat_dim={cfg.feat_dim} but the dataset has "
                          f"s={spec.num_phases}, feat_dim={spec.feat_dim}")
    return cfg


# ---------------------------------------------------------------- ablation ladder

LADDER = (("A", "finetune", "A"), ("B", "finetune", "B"), ("C", "finetune", "C"),
          ("freeze-B", "freeze", "B"), ("freeze-C", "freeze", "C"))
METRIC_COLUMNS = ("video_accuracy_mean", "video_accuracy_std", "macro_precision", "macro_recall",
                  "macro_jaccard", "macro_f1", "mAP", "fragmentation_ratio")


@dataclass
class AblationResult:
    reports: dict[str, metrics.EvalReport]
    checkpoints: dict[str, Checkpoint]
    transition_table: np.ndarray  # mean over test videos, finetune model
    empirical: np.ndarray  # from training labels

    def rows(self) -> list[dict]:
        base = self.reports["A"]
        out = []
        for name, _, _ in LADDER:
            rep = self.reports[name]
            row = {"row": name}
            for col in METRIC_COLUMNS:
                row[col] = getattr(rep, col)
                row["delta_" + col] = getattr(rep, col) - getattr(base, col)
            out.append(row)
        return out

    def to_text(self) -> str:
        head = f"{'row':<9}" + "".join(f"{c:>10}" for c in ("acc", "std", "prec", "rec", "jacc", "f1", "mAP", "frag"))
        lines = [head + f"{'dmAP':>9}{'dfrag':>9}"]
        for r in self.rows():
            vals = "".join(f"{r[c]:10.2f}" if c != "fragmentation_ratio" else f"{r[c]:10.3f}" for c in METRIC_COLUMNS)
            lines.append(f"{r['row']:<9}{vals}{r['delta_mAP']:+9.2f}{r['delta_fragmentation_ratio']:+9.3f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(metrics._rounded({"rows": self.rows(),
                                            "transition_table": self.transition_table.tolist(),
                                            "empirical_transition": self.empirical.tolist()}),
                          sort_keys=True, indent=1) + "\n"


def mean_transition_table(ckpt: Checkpoint, videos: Sequence[VideoSequence]) -> np.ndarray:
    return np.mean([inference.video_transition_table(ckpt.params, ckpt.model_config, v) for v in videos], axis=0)


def format_table(table: np.ndarray) -> str:
    return "\n".join(" ".join(f"{x:.6f}" for x in row) for row in np.asarray(table)) + "\n"


def run_ablation(train_videos: Sequence[VideoSequence], test_videos: Sequence[VideoSequence], cfg: ModelConfig,
                 tcfg: TrainConfig, mode: str = "online", regime: str = "concat",
                 log: Callable[[dict], None] | None = None) -> AblationResult:
    """Stage 1 once, then stage 2 fine-tuned and frozen from the same baseline."""
    base = training.train_stage1(train_videos, cfg, tcfg, log)
    tuned = training.train_stage2(base, train_videos, dataclasses.replace(tcfg, freeze_backbone=False), log)
    frozen = training.train_stage2(base, train_videos, dataclasses.replace(tcfg, freeze_backbone=True), log)
    ckpts = {"baseline": base, "finetune": tuned, "freeze": frozen}
    reports = {}
    for name, regime_name, source in LADDER:
        ckpt = base if source == "A" else ckpts[regime_name]
        reports[name] = metrics.evaluate(inference.predict_videos(ckpt, test_videos, mode, source), regime)
    return AblationResult(reports, ckpts, mean_transition_table(tuned, test_videos),
                          workflow.empirical_transition(train_videos, cfg.s))
