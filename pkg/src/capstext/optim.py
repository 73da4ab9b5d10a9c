"""Adam, exponential learning-rate decay, grouped L2, and dropout masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError

LR_DECAY_PER_EPOCH = 0.99


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            u={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place.

    A non-finite gradient aborts the step before touching any parameter.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        u = state.u[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        u *= state.beta2
        u += (1.0 - state.beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(u / bc2) + state.eps)


def lr_schedule(lr0: float, epoch: int) -> float:
    """Initial rate decayed by a constant factor once per epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return lr0 * LR_DECAY_PER_EPOCH ** epoch


def l2_penalty(groups: Mapping[str, Sequence], constants: Mapping[str, float]):
    """Sum of per-group squared-weight penalties.

    ``groups`` maps a group name to its weight tensors (biases stay out);
    ``constants`` maps the same names to their multipliers.  Group sets
    must match exactly so no weight rides along unregularized by accident.
    """
    if set(groups) != set(constants):
        raise ConfigError(
            f"l2 group mismatch: groups {sorted(groups)} vs constants {sorted(constants)}"
        )
    if not any(len(list(ts)) for ts in groups.values()):
        raise ConfigError("l2_penalty needs at least one group with tensors")
    total = None
    for name, tensors in groups.items():
        lam = constants[name]
        if lam == 0.0:
            continue  # exact zero contribution; skip the full pass
        for w in tensors:
            term = ad.mul(ad.sum(ad.square(w)), lam)
            total = term if total is None else ad.add(total, term)
    return total if total is not None else 0.0


def dropout_mask(shape, p: float, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: zero with probability ``p``, else 1/(1-p)."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype(1.0 - p)
