"""Neural finite-state machine: global state embeddings, per-frame dynamic
transition tables, and propagation of the current-frame distribution through them.

Row convention: ``table[a, b]`` is the probability of moving from phase ``a``
(hypothesis for the current frame) to phase ``b`` at the target frame, so the
propagated distribution is ``p_hat @ table``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backbone
from . import tensor as T
from .backbone import ModelConfig, Params
from .errors import ShapeError
from .tensor import Tensor


def transition_table(e_dt_i: Tensor, e_g: Tensor, d: int | None = None) -> Tensor:
    """Row-wise softmax of ``e_dt_i · e_gᵀ / √d``; works on any leading batch axes."""
    if e_g.ndim != 2 or e_dt_i.shape[-2:] != e_g.shape:
        raise ShapeError(f"transition_table: e_dt {e_dt_i.shape} and e_g {e_g.shape} must end in the same (s, d)")
    d = e_g.shape[1] if d is None else d
    logits = T.linear(e_dt_i, T.transpose_last(e_g))
    return T.softmax_last(T.scale(logits, 1.0 / math.sqrt(d)))


def transition_probs(table: Tensor, p_hat: Tensor) -> Tensor:
    """Push a distribution ``(..., s)`` through tables ``(..., s, s)``."""
    s = p_hat.shape[-1]
    if table.shape[-2:] != (s, s) or table.shape[:-2] != p_hat.shape[:-1]:
        raise ShapeError(f"transition_probs: table {table.shape} incompatible with distribution {p_hat.shape}")
    lead = p_hat.shape[:-1]
    row = T.reshape(p_hat, lead + (1, s))
    return T.reshape(T.matmul(row, table), lead + (s,))


def transition_prob_set(e_dt: Tensor, e_g: Tensor, p_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Tables and propagated distributions for every window position.

    ``e_dt`` is ``(B, L, s, d)`` (or unbatched ``(L, s, d)``) and ``p_hat`` is
    ``(B, s)`` (or ``(s,)``). Returns ``(probs (B, L, s), tables (B, L, s, s))``.
    """
    squeeze = e_dt.ndim == 3
    if squeeze:
        e_dt = T.reshape(e_dt, (1,) + e_dt.shape)
        p_hat = T.reshape(p_hat, (1,) + p_hat.shape)
    if e_dt.ndim != 4 or p_hat.shape != (e_dt.shape[0], e_dt.shape[2]):
        raise ShapeError(f"transition_prob_set: e_dt {e_dt.shape} incompatible with p_hat {p_hat.shape}")
    b, length, s, _ = e_dt.shape
    tables = transition_table(e_dt, e_g)
    spread = T.take(T.reshape(p_hat, (b, 1, s)), [0] * length, axis=1)
    probs = transition_probs(tables, spread)
    if squeeze:
        return T.reshape(probs, (length, s)), T.reshape(tables, (length, s, s))
    return probs, tables


@dataclass
class ForwardResult:
    p_hat: Tensor  # (B, s)
    trans_probs: Tensor  # (B, n+m, s)
    tables: Tensor  # (B, n+m, s, s)


def forward(params: Params, cfg: ModelConfig, windows, real_future: bool = False) -> ForwardResult:
    """Full NFSM forward over a batch of windows.

    ``windows`` holds ``n`` frames per sample for online use (pseudo-future
    padding) or ``n + m`` frames with ``real_future=True``.
    """
    x = T.as_tensor(windows)
    if x.ndim != 3:
        raise ShapeError(f"forward expects (B, frames, feat_dim) windows, got {x.shape}")
    expected = cfg.n + cfg.m if real_future else cfg.n
    if x.shape[1] != expected:
        raise ShapeError(f"forward: windows have {x.shape[1]} frames, expected {expected}")
    encoded = backbone.encode_history(params, cfg, x)
    combined = encoded if real_future else backbone.pad_pseudo_future(encoded, cfg.m, cfg.spatial_tokens)
    out = backbone.forecast(params, cfg, combined, pseudo_future=not real_future)
    p_hat = backbone.head_current_probs(params, cfg, out)
    e_dt = backbone.head_dynamic_embeddings(params, cfg, out)
    probs, tables = transition_prob_set(e_dt, params["nfsm.e_g"], p_hat)
    return ForwardResult(p_hat, probs, tables)


def history_table_mean(tables: np.ndarray, n: int) -> np.ndarray:
    """Average of the tables over the n history positions and all windows."""
    arr = np.asarray(tables)
    return arr[:, :n].reshape(-1, arr.shape[-2], arr.shape[-1]).mean(axis=0)
