from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


class Parameter(NamedTuple):
    name: str
    value: Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(
            m=[np.zeros(p.shape, dtype=np.float64) for p in params],
            v=[np.zeros(p.shape, dtype=np.float64) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Moments are kept in float64. A ``None`` gradient counts as zero.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.shape or state.v[i].shape != p.shape:
            raise DimensionError(f"adam_step: moment buffer {i} has shape {state.m[i].shape}, parameter {p.shape}")
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {i} has shape {g.shape}, parameter {p.shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g64 = np.zeros(p.shape) if g is None else g.astype(np.float64)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g64
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g64 * g64
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
