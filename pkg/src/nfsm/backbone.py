"""Windowed attention backbone: history encoder, pseudo-future padding,
two forecasting blocks, and the two prediction heads.

All forward functions take batched input ``(B, L, ...)``; a single unbatched
window is accepted too and returned without the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

BLOCK_KEYS = ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b")
BASELINE_PREFIXES = ("input.", "encoder.", "classifier.")
NFSM_PREFIXES = ("forecast1.", "forecast2.", "dynamic.", "nfsm.")
# parameters that still train when the baseline model is frozen
FROZEN_REGIME_TRAINABLE = NFSM_PREFIXES


@dataclass
class ModelConfig:
    n: int = 16
    m: int = 8
    d: int = 16
    s: int = 7
    feat_dim: int = 16
    spatial_tokens: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if self.d < 2 or self.s < 2:
            raise ValueError("d and s must be >= 2")
        if self.spatial_tokens < 1 or self.feat_dim < 1:
            raise ValueError("spatial_tokens and feat_dim must be >= 1")

    def to_mapping(self) -> dict:
        return asdict(self)


Params = dict[str, Tensor]


def _gaussian(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def _block_params(rng, prefix: str, d: int, zero_residual: bool) -> Params:
    w = 1.0 / math.sqrt(d)
    out_std = 0.0 if zero_residual else w
    return {
        prefix + "ln1.g": Tensor(np.ones(d), requires_grad=True),
        prefix + "ln1.b": Tensor(np.zeros(d), requires_grad=True),
        prefix + "wq": _gaussian(rng, (d, d), w),
        prefix + "wk": _gaussian(rng, (d, d), w),
        prefix + "wv": _gaussian(rng, (d, d), w),
        prefix + "wo": _gaussian(rng, (d, d), out_std),
        prefix + "ln2.g": Tensor(np.ones(d), requires_grad=True),
        prefix + "ln2.b": Tensor(np.zeros(d), requires_grad=True),
        prefix + "ff1.w": _gaussian(rng, (d, 2 * d), w),
        prefix + "ff1.b": Tensor(np.zeros(2 * d), requires_grad=True),
        prefix + "ff2.w": _gaussian(rng, (2 * d, d), 0.0 if zero_residual else 1.0 / math.sqrt(2 * d)),
        prefix + "ff2.b": Tensor(np.zeros(d), requires_grad=True),
    }


def init_baseline(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    d, hw = cfg.d, cfg.spatial_tokens
    params = {
        "input.w": _gaussian(rng, (cfg.feat_dim, hw * d), 1.0 / math.sqrt(cfg.feat_dim)),
        "input.b": Tensor(np.zeros(hw * d), requires_grad=True),
    }
    params.update(_block_params(rng, "encoder.", d, zero_residual=False))
    params["classifier.w"] = _gaussian(rng, (d, cfg.s), 1.0 / math.sqrt(d))
    params["classifier.b"] = Tensor(np.zeros(cfg.s), requires_grad=True)
    return params


def init_nfsm(cfg: ModelConfig, rng: np.random.Generator, zero_residual: bool = True) -> Params:
    """Fresh forecasting blocks, dynamic-embedding head and global state embeddings.

    With ``zero_residual`` the blocks start as the identity, so the attached model
    initially reproduces the baseline's current-frame prediction.
    """
    d, s = cfg.d, cfg.s
    params = {}
    params.update(_block_params(rng, "forecast1.", d, zero_residual))
    params.update(_block_params(rng, "forecast2.", d, zero_residual))
    params["dynamic.w"] = _gaussian(rng, (d, s * d), 1.0 / math.sqrt(d))
    params["dynamic.b"] = Tensor(np.zeros(s * d), requires_grad=True)
    params["nfsm.e_g"] = _gaussian(rng, (s, d), 1.0 / math.sqrt(d))
    return params


def init_params(cfg: ModelConfig, seed: int | None = None, zero_residual: bool = True) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = init_baseline(cfg, rng)
    params.update(init_nfsm(cfg, rng, zero_residual))
    return params


def has_nfsm(params: Params) -> bool:
    return "nfsm.e_g" in params


# ---------------------------------------------------------------- helpers


def position_codes(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.power(10000.0, -(2 * (np.arange(d) // 2)) / d)[None, :]
    angles = pos * rate
    return np.where(np.arange(d) % 2 == 0, np.sin(angles), np.cos(angles))


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != rank + 1:
        raise ShapeError(f"expected a rank-{rank} window or rank-{rank + 1} batch, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


def _constant_like_tokens(codes: np.ndarray, batch: int, hw: int) -> Tensor:
    per_token = np.repeat(codes, hw, axis=0)
    return Tensor(np.broadcast_to(per_token, (batch,) + per_token.shape).copy())


def attention_block(params: Params, prefix: str, x: Tensor) -> Tensor:
    """Pre-norm single-head self-attention plus a ReLU feed-forward, both residual."""
    p = {k: params[prefix + k] for k in BLOCK_KEYS}
    h = T.layer_norm(x, p["ln1.g"], p["ln1.b"])
    attended = T.scaled_dot_attention(T.linear(h, p["wq"]), T.linear(h, p["wk"]), T.linear(h, p["wv"]))
    x = T.add(x, T.linear(attended, p["wo"]))
    h = T.layer_norm(x, p["ln2.g"], p["ln2.b"])
    ff = T.linear(T.relu(T.linear(h, p["ff1.w"], p["ff1.b"])), p["ff2.w"], p["ff2.b"])
    return T.add(x, ff)


# ---------------------------------------------------------------- forward pieces


def encode_history(params: Params, cfg: ModelConfig, features, position_encoding: bool = True) -> Tensor:
    """Frames ``(B, L, feat_dim)`` -> token embeddings ``(B, L*hw, d)``."""
    x, squeeze = _batched(T.as_tensor(features), 2)
    b, length, f = x.shape
    if f != cfg.feat_dim:
        raise ShapeError(f"encode_history: feature width {f} != feat_dim {cfg.feat_dim}")
    hw, d = cfg.spatial_tokens, cfg.d
    h = T.reshape(T.linear(x, params["input.w"], params["input.b"]), (b, length * hw, d))
    if position_encoding:
        h = T.add(h, _constant_like_tokens(position_codes(length, d), b, hw))
    return _unbatch(attention_block(params, "encoder.", h), squeeze)


def pad_pseudo_future(history: Tensor, m: int, spatial_tokens: int = 1) -> Tensor:
    """Append ``m`` copies of the last frame's tokens."""
    if m < 1:
        raise ValueError("m must be >= 1")
    axis = history.ndim - 2
    tokens = history.shape[axis]
    hw = spatial_tokens
    if tokens % hw:
        raise ShapeError(f"pad_pseudo_future: {tokens} tokens not divisible by spatial_tokens={hw}")
    last = list(range(tokens - hw, tokens))
    return T.take(history, list(range(tokens)) + last * m, axis=axis)


def _future_shift(n: int, m: int, d: int) -> np.ndarray:
    # moves each duplicated row from the current frame's position code to its own
    codes = position_codes(n + m, d)
    shift = np.zeros((n + m, d))
    shift[n:] = codes[n:] - codes[n - 1]
    return shift


def forecast(params: Params, cfg: ModelConfig, combined: Tensor, pseudo_future: bool = True) -> Tensor:
    """Two attention blocks over ``(n+m)`` frames, then spatial pooling -> ``(B, n+m, d)``."""
    x, squeeze = _batched(combined, 2)
    b, tokens, d = x.shape
    hw, length = cfg.spatial_tokens, cfg.n + cfg.m
    if tokens != length * hw or d != cfg.d:
        raise ShapeError(f"forecast: expected ({length * hw}, {cfg.d}) tokens, got {x.shape[1:]}")
    if pseudo_future:
        x = T.add(x, _constant_like_tokens(_future_shift(cfg.n, cfg.m, d), b, hw))
    x = attention_block(params, "forecast1.", x)
    x = attention_block(params, "forecast2.", x)
    if hw > 1:
        x = T.mean_over_axis(T.reshape(x, (b, length, hw, d)), 2)
    return _unbatch(x, squeeze)


def _classify(params: Params, pooled: Tensor) -> Tensor:
    return T.softmax_last(T.linear(pooled, params["classifier.w"], params["classifier.b"]))


def head_current_probs(params: Params, cfg: ModelConfig, forecast_out: Tensor) -> Tensor:
    """Mean over the n history positions, linear to s logits, softmax."""
    x, squeeze = _batched(forecast_out, 2)
    if x.shape[1:] != (cfg.n + cfg.m, cfg.d):
        raise ShapeError(f"head_current_probs: expected ({cfg.n + cfg.m}, {cfg.d}), got {x.shape[1:]}")
    pooled = T.mean_over_axis(T.take(x, range(cfg.n), axis=1), 1)
    return _unbatch(_classify(params, pooled), squeeze)


def head_dynamic_embeddings(params: Params, cfg: ModelConfig, forecast_out: Tensor) -> Tensor:
    x, squeeze = _batched(forecast_out, 2)
    b = x.shape[0]
    if x.shape[1:] != (cfg.n + cfg.m, cfg.d):
        raise ShapeError(f"head_dynamic_embeddings: expected ({cfg.n + cfg.m}, {cfg.d}), got {x.shape[1:]}")
    e = T.linear(x, params["dynamic.w"], params["dynamic.b"])
    return _unbatch(T.reshape(e, (b, cfg.n + cfg.m, cfg.s, cfg.d)), squeeze)


def baseline_probs(params: Params, cfg: ModelConfig, features) -> Tensor:
    """Stage-1 prediction: encoder, mean over all history tokens, classifier."""
    history, squeeze = _batched(encode_history(params, cfg, features), 2)
    return _unbatch(_classify(params, T.mean_over_axis(history, 1)), squeeze)
