"""Adam with bias correction and an exponential moving average of parameters.

Both operate on flat ``{name: array}`` dictionaries so they are independent of
any module system: the trainer extracts parameter tensors, hands their
gradients over, and the update mutates parameter data in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update; mutates parameter data and state.

    A non-finite gradient aborts the whole update (no parameter is touched)
    and raises, naming the offending parameter.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter "
                                     f"'{name}'; update aborted")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter '{name}' shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return state


@dataclass
class EmaState:
    decay: float = 0.995
    update_every: int = 10
    shadow: dict = field(default_factory=dict)


def ema_update(ema: EmaState, params: dict[str, Tensor]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * param, for every parameter.

    The caller is responsible for invoking this only on steps where
    ``step % update_every == 0``.  A parameter without a shadow starts from
    an all-zeros shadow; trainers that want shadows to start at the raw
    weights call ``ema_init`` once before the loop.
    """
    for name, p in params.items():
        if name not in ema.shadow:
            ema.shadow[name] = np.zeros_like(p.data)
        s = ema.shadow[name]
        if s.shape != p.data.shape:
            raise ValueError(f"EMA shadow shape {s.shape} does not match "
                             f"parameter '{name}' shape {p.data.shape}")
        s *= ema.decay
        s += (1.0 - ema.decay) * p.data
    return ema


def ema_init(ema: EmaState, params: dict[str, Tensor]) -> EmaState:
    """Seed shadows with copies of the current parameter values."""
    for name, p in params.items():
        ema.shadow[name] = p.data.copy()
    return ema


def swap_in_ema(params: dict[str, Tensor], ema: EmaState) -> dict[str, np.ndarray]:
    """Replace parameter data with EMA shadows; returns the originals."""
    saved = {}
    for name, p in params.items():
        if name in ema.shadow:
            saved[name] = p.data
            p.data = ema.shadow[name].copy()
    return saved
