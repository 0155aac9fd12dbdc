"""Timeline ribbons: one horizontal bar per prediction source, coloured by phase."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .metrics import VideoPrediction

# Okabe-Ito, colour-blind safe; phases beyond 8 wrap around
PALETTE = ("#E69F00", "#56B4E9", "#009E73", "#F0E442", "#0072B2", "#D55E00", "#CC79A7", "#000000")

ROW_HEIGHT = 24
ROW_GAP = 10
LABEL_WIDTH = 140
PLOT_WIDTH = 800
AXIS_HEIGHT = 30


def runs(seq) -> list[tuple[int, int, int]]:
    """Maximal constant runs as ``(start, length, value)``."""
    seq = np.asarray(seq)
    if len(seq) == 0:
        return []
    cuts = np.concatenate([[0], np.flatnonzero(seq[1:] != seq[:-1]) + 1, [len(seq)]])
    return [(int(a), int(b - a), int(seq[a])) for a, b in zip(cuts[:-1], cuts[1:])]


def _ribbon(seq, scale: float) -> str:
    rects = []
    for start, length, phase in runs(seq):
        rects.append(
            f'<rect x="{start * scale:.3f}" y="0" width="{length * scale:.3f}" height="{ROW_HEIGHT}" '
            f'fill="{PALETTE[phase % len(PALETTE)]}" data-phase="{phase}"/>'
        )
    return "".join(rects)


def _ticks(num_frames: int) -> list[int]:
    if num_frames <= 1:
        return [0]
    raw = max(num_frames / 8, 1.0)
    base = 10 ** int(np.floor(np.log10(raw)))
    step = next(mult * base for mult in (1, 2, 5, 10) if raw <= mult * base)
    return list(range(0, num_frames + 1, int(step)))


def render_timeline(rows: Sequence[tuple[str, Sequence[int]]], title: str = "") -> str:
    """Standalone SVG for ``rows`` of ``(name, label sequence)`` sharing one frame axis."""
    if not rows:
        raise ValueError("render_timeline needs at least one row")
    lengths = {len(seq) for _, seq in rows}
    if len(lengths) != 1:
        raise ValueError(f"rows have different lengths {sorted(lengths)}")
    num_frames = lengths.pop()
    scale = PLOT_WIDTH / max(num_frames, 1)
    top = 30 if title else 10
    height = top + len(rows) * (ROW_HEIGHT + ROW_GAP) + AXIS_HEIGHT
    width = LABEL_WIDTH + PLOT_WIDTH + 20
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
    ]
    if title:
        out.append(f'<text x="{LABEL_WIDTH}" y="18" font-weight="bold">{escape(title)}</text>')
    for i, (name, seq) in enumerate(rows):
        y = top + i * (ROW_HEIGHT + ROW_GAP)
        out.append(f'<text x="{LABEL_WIDTH - 8}" y="{y + ROW_HEIGHT * 0.7:.1f}" text-anchor="end">{escape(name)}</text>')
        out.append(f'<g class="ribbon" data-name={quoteattr(name)} transform="translate({LABEL_WIDTH},{y})">'
                   f"{_ribbon(seq, scale)}</g>")
    axis_y = top + len(rows) * (ROW_HEIGHT + ROW_GAP)
    out.append(f'<g class="axis" transform="translate({LABEL_WIDTH},{axis_y})">')
    out.append(f'<line x1="0" y1="0" x2="{PLOT_WIDTH}" y2="0" stroke="#444"/>')
    for tick in _ticks(num_frames):
        x = tick * scale
        out.append(f'<line x1="{x:.3f}" y1="0" x2="{x:.3f}" y2="4" stroke="#444"/>'
                   f'<text x="{x:.3f}" y="16" text-anchor="middle">{tick}</text>')
    out.append(f'<text x="{PLOT_WIDTH}" y="28" text-anchor="end">frame</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_predictions(sources: Sequence[tuple[str, Sequence[VideoPrediction]]], out_path: str | Path,
                     video_id: str | None = None, include_gt: bool = True, gt_only: bool = False) -> Path:
    """Write one SVG comparing several prediction sets on a single video.

    ``sources`` are ``(name, predictions)`` pairs, typically one per prediction
    file. All must cover the same video ids; the ground-truth row is taken from
    the first source.
    """
    if not sources:
        raise ValueError("plot needs at least one prediction set")
    id_sets = [sorted(v.video_id for v in preds) for _, preds in sources]
    if any(ids != id_sets[0] for ids in id_sets[1:]):
        raise ValueError("prediction files cover different video ids: "
                         + " vs ".join(",".join(ids) for ids in id_sets))
    if not id_sets[0]:
        raise ValueError("prediction files contain no videos")
    vid = video_id if video_id is not None else id_sets[0][0]
    if vid not in id_sets[0]:
        raise ValueError(f"video {vid!r} not found; available: {', '.join(id_sets[0])}")
    picked = [(name, next(v for v in preds if v.video_id == vid)) for name, preds in sources]
    rows = [("GT", picked[0][1].labels)] if include_gt or gt_only else []
    if not gt_only:
        rows += [(name, v.predicted) for name, v in picked]
    out_path = Path(out_path)
    out_path.write_text(render_timeline(rows, title=vid), encoding="utf-8")
    return out_path
