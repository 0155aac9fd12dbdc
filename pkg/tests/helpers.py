"""Shared builders for the micro-config tests."""

import numpy as np

from nfsm import backbone, training


MICRO = backbone.ModelConfig(n=3, m=2, d=4, s=2, feat_dim=3, seed=0)


def micro_problem(seed, cfg=MICRO, batch=2):
    """Random-init micro model, a window batch, and a closure for the total loss."""
    rng = np.random.default_rng(seed)
    params = backbone.init_params(cfg, seed=seed, zero_residual=False)
    feats = rng.standard_normal((batch, cfg.n, cfg.feat_dim))
    current = rng.integers(0, cfg.s, batch)
    context = rng.integers(0, cfg.s, (batch, cfg.n + cfg.m))
    windows = training.WindowBatch(feats, None, current, context)

    def loss(alpha=1.0):
        return training.compute_losses(params, cfg, windows, alpha, stage=2)[0]

    return params, windows, loss


def parameter_groups(params):
    groups = {}
    for name in params:
        groups.setdefault(name.split(".")[0], []).append(params[name])
    return groups

