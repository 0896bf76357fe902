"""AdamW with decoupled weight decay, and the warmup/decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icdkit.errors import ConfigError, NumericError

__all__ = ["AdamWState", "adamw_step", "lr_schedule"]

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def lr_schedule(step: int, total_steps: int, warmup_updates: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over the first ``warmup_updates`` steps,
    then linear decay to zero at ``total_steps``. Never negative."""
    if total_steps <= warmup_updates:
        raise ConfigError(
            f"total_steps ({total_steps}) must exceed warmup_updates ({warmup_updates})"
        )
    if not (0 <= step <= total_steps):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_updates:
        return base_lr * step / warmup_updates
    return max(0.0, base_lr * (total_steps - step) / (total_steps - warmup_updates))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
            step=0,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> None:
    """One bias-corrected moment update plus decoupled decay p -= lr*wd*p.

    Mutates ``params`` and ``state`` in place.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
        if weight_decay:
            p -= lr * weight_decay * p
