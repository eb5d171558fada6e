"""Adam with bias correction, linear warmup and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractViolation


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def warmup_lr(lr: float, t: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, t / warmup_steps)


def decays(name: str, value: np.ndarray) -> bool:
    # biases and 1-d vectors are exempt from weight decay
    return value.ndim >= 2


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, *, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0,
              warmup_steps: int = 0) -> tuple[dict[str, np.ndarray], AdamState]:
    """One update; returns new parameter arrays and the advanced state.

    ``params`` is not modified.  Moments are kept in float64, parameters keep
    their own dtype.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ContractViolation(f"non-finite gradient for {name}")
    t = state.step + 1
    lr_t = warmup_lr(lr, t, warmup_steps)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        p64 = p.astype(np.float64)
        if weight_decay and decays(name, p):
            p64 = p64 - lr_t * weight_decay * p64
        denom = np.sqrt(v) / np.sqrt(bc2) + eps
        p64 = p64 - lr_t * (m / bc1) / denom
        new_params[name] = p64.astype(p.dtype)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, np.ndarray],
                   max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise ContractViolation("non-finite gradient norm")
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
