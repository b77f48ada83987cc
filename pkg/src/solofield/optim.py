"""Adam with bias correction over named parameter tensors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One in-place Adam update.

    params/grads: iterables of (name, array) with matching names. Tensors with
    non-finite gradients are skipped (with a warning) rather than poisoning
    the parameters.
    """
    params = list(params)
    grads = dict(grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            log.warning("skipping Adam update for %s: non-finite gradient", name)
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


def global_grad_norm(grads) -> float:
    total = 0.0
    for _, g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grads_(grads, max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm."""
    grads = list(grads)
    norm = global_grad_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, g in grads:
            g *= scale
    return norm
