"""Command-line entry point: ``nfsm <subcommand>``.

Failures print one line ``nfsm-error: <Kind>: <message>`` on stderr and exit
with status 1; usage errors exit with status 2. Relative output paths resolve
against ``$NFSM_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from . import config, experiment, inference, metrics, plotting, training, workflow
from .errors import ConfigError, NFSMError
from .workflow import WorkflowSpec

OUTPUT_ROOT_ENV = "NFSM_OUTPUT_ROOT"


def out_path(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{path}: cannot create directory: {exc.strerror}") from None
    return path


def _overrides(args) -> dict:
    pairs = {}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs[key] = yaml.safe_load(raw)
    for flag, dotted in (("alpha", "train.alpha"), ("seed", "train.seed"), ("data", "data.manifest"),
                         ("output_dir", "output_dir"), ("epochs_stage1", "train.epochs_stage1"),
                         ("epochs_stage2", "train.epochs_stage2")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs[dotted] = value
    if getattr(args, "freeze_backbone", False):
        pairs["train.freeze_backbone"] = True
    return pairs


def _load_run(args) -> tuple[experiment.RunConfig, workflow.Dataset]:
    run = experiment.load_run_config(args.config, _overrides(args))
    if not run.data.manifest:
        raise ConfigError(f"{run.source}: data.manifest is required (or pass --data)")
    dataset = workflow.load_dataset(run.data.manifest)
    experiment.model_for_dataset(run.model, dataset.spec)
    return run, dataset


def _videos(path: str, split: str, num_test: int):
    dataset = workflow.load_dataset(path)
    if split == "all":
        return dataset.videos
    train, test = experiment.split(dataset.videos, num_test)
    return train if split == "train" else test


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = WorkflowSpec.load(args.spec) if args.spec else workflow.synth7()
    manifest = workflow.generate_dataset(spec, args.videos, args.seed, out_path(args.out), args.max_frames)
    print(manifest)
    return 0


def cmd_write_spec(args) -> int:
    path = out_path(args.out)
    workflow.synth7(mean_scale=args.mean_scale).save(path)
    print(path)
    return 0


def cmd_train(args) -> int:
    run, dataset = _load_run(args)
    train_videos, _ = experiment.split(dataset.videos, run.data.num_test)
    out = _ensure_dir(out_path(run.output_dir))
    rows = []
    base = training.train_stage1(train_videos, run.model, run.train, rows.append)
    training.save_checkpoint(base, out / "stage1.ckpt")
    final = base if run.train.epochs_stage2 == 0 else training.train_stage2(base, train_videos, run.train, rows.append)
    digest = training.save_checkpoint(final, out / "model.ckpt")
    lines = ["stage\tepoch\tstep\tL_c\tL_trans\ttotal"]
    for r in rows:
        lt = "" if r["L_trans"] is None else repr(r["L_trans"])
        lines.append(f"{r['stage']}\t{r['epoch']}\t{r['step']}\t{r['L_c']!r}\t{lt}\t{r['total']!r}")
    (out / "train_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "run_config.yaml").write_text(config.dump(run.to_mapping()), encoding="utf-8")
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"sha256: {digest}")
    return 0


def _evaluate(args, write_report: bool) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    videos = _videos(args.data, args.split, args.num_test)
    out = _ensure_dir(out_path(args.out))
    stem = f"{args.source}_{args.mode}"
    preds = inference.predict_dataset(ckpt, videos, args.mode, out / f"predictions_{stem}.tsv", args.source)
    print(out / f"predictions_{stem}.tsv")
    if not write_report:
        return 0
    if not preds:
        raise ConfigError(f"{args.data}: no videos in split '{args.split}' to evaluate")
    report = metrics.evaluate(preds, args.regime)
    (out / f"report_{stem}_{args.regime}.txt").write_text(report.to_text(), encoding="utf-8")
    (out / f"report_{stem}_{args.regime}.json").write_text(report.to_json(), encoding="utf-8")
    if args.source != "A":
        table = experiment.mean_transition_table(ckpt, videos)
        (out / "transition_table.txt").write_text(experiment.format_table(table), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    return _evaluate(args, write_report=True)


def cmd_infer(args) -> int:
    return _evaluate(args, write_report=False)


def cmd_plot(args) -> int:
    sources = []
    for path in args.predictions:
        header, preds = inference.read_predictions(path)
        name = f"{header.get('source', '?')}/{header.get('mode', '?')}"
        sources.append((args.labels[len(sources)] if args.labels else name, preds))
    if args.labels and len(args.labels) != len(sources):
        raise ValueError(f"{len(args.labels)} labels for {len(sources)} prediction files")
    path = plotting.plot_predictions(sources, out_path(args.out), args.video, include_gt=not args.no_gt,
                                     gt_only=args.gt_only)
    print(path)
    return 0


def cmd_ablate(args) -> int:
    run, dataset = _load_run(args)
    train_videos, test_videos = experiment.split(dataset.videos, run.data.num_test)
    out = _ensure_dir(out_path(run.output_dir))
    result = experiment.run_ablation(train_videos, test_videos, run.model, run.train, run.inference.mode,
                                     run.inference.regime)
    for name, ckpt in result.checkpoints.items():
        training.save_checkpoint(ckpt, out / f"{name}.ckpt")
    (out / "ablation.txt").write_text(result.to_text(), encoding="utf-8")
    (out / "ablation.json").write_text(result.to_json(), encoding="utf-8")
    (out / "transition_table.txt").write_text(experiment.format_table(result.transition_table), encoding="utf-8")
    sys.stdout.write(result.to_text())
    return 0


# ---------------------------------------------------------------- parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="run config (YAML); defaults are used when omitted")
    p.add_argument("--data", help="dataset manifest or directory (data.manifest)")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--alpha", type=float, help="transition-loss weight (train.alpha)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
    p.add_argument("--epochs-stage2", dest="epochs_stage2", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field, e.g. model.d=32")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset manifest or directory")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--num-test", dest="num_test", type=int, default=experiment.DataConfig.num_test)
    p.add_argument("--mode", choices=inference.MODES, default="online")
    p.add_argument("--source", choices=inference.SOURCES, default="C",
                   help="A: baseline (pass the stage-1 checkpoint), B: current-frame head, C: merged")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfsm", description="Phase recognition with neural finite-state machines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", help="workflow spec (YAML); synth-7 when omitted")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--seed", type=int, default=1000, help="video i uses seed + i")
    p.add_argument("--max-frames", dest="max_frames", type=int, default=2000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("write-spec", help="write the synth-7 workflow spec as a starting point")
    p.add_argument("--out", required=True)
    p.add_argument("--mean-scale", dest="mean_scale", type=float, default=0.35)
    p.set_defaults(func=cmd_write_spec)

    p = sub.add_parser("train", help="two-stage training")
    _run_flags(p)
    p.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predict and score a dataset split")
    _eval_flags(p)
    p.add_argument("--regime", choices=metrics.REGIMES, default="concat")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write per-frame predictions only")
    _eval_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="SVG timeline ribbons from prediction files")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--video", help="video id (first common id by default)")
    p.add_argument("--labels", nargs="+", help="row names, one per prediction file")
    p.add_argument("--no-gt", dest="no_gt", action="store_true")
    p.add_argument("--gt-only", dest="gt_only", action="store_true")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="A / B / C ladder, fine-tuned and frozen")
    _run_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NFSMError, OSError, ValueError) as exc:
        kind = type(exc).__name__
        message = " ".join(str(exc).split())
        print(f"nfsm-error: {kind}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
