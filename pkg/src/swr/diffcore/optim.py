"""Adam / SGD updates and the cosine schedule shared by lr and temperature."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def cosine_schedule(start: float, end: float, t: int, total: int) -> float:
    """Cosine interpolation from ``start`` at t=0 to ``end`` at t=total.

    Steps past ``total`` clamp to ``end``.
    """
    if total < 1:
        raise ValueError(f"cosine_schedule: total must be >= 1, got {total}")
    if t < 0:
        raise ValueError(f"cosine_schedule: negative step {t}")
    if t >= total:
        return float(end)
    return float(end + (start - end) * (1 + math.cos(math.pi * t / total)) / 2)


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    params = list(params)
    if params and isinstance(params[0], tuple):
        return params
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def _check_finite(name: str, g: np.ndarray):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient in parameter '{name}'")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, lr: float, state: AdamState, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """One in-place Adam update of ``params`` using their ``.grad``.

    All gradients are validated before any parameter is touched, so a NaN
    leaves the whole set unchanged.
    """
    if not lr > 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    named = _named(params)
    for name, p in named:
        if p.grad is not None:
            if p.grad.shape != p.shape:
                raise ValueError(f"adam_step: grad shape {p.grad.shape} != param shape {p.shape} for '{name}'")
            _check_finite(name, p.grad)
    state.step += 1
    b1, b2 = betas
    t = state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in named:
        if p.grad is None:
            continue
        dt = p.data.dtype.type
        g = p.grad
        if weight_decay:
            g = g + dt(weight_decay) * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        denom = np.sqrt(v / dt(c2)) + dt(eps)
        p.data = p.data - dt(lr) * (m / dt(c1)) / denom
    return state


def sgd_step(params, lr: float, momentum: float = 0.0, state: dict | None = None,
             weight_decay: float = 0.0) -> dict:
    if not lr > 0:
        raise ValueError(f"sgd_step: lr must be positive, got {lr}")
    state = {} if state is None else state
    named = _named(params)
    for name, p in named:
        if p.grad is not None:
            _check_finite(name, p.grad)
    for name, p in named:
        if p.grad is None:
            continue
        dt = p.data.dtype.type
        g = p.grad + dt(weight_decay) * p.data if weight_decay else p.grad
        if momentum:
            buf = state.get(name)
            buf = g.copy() if buf is None else dt(momentum) * buf + g
            state[name] = buf
            g = buf
        p.data = p.data - dt(lr) * g
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a fixed parameter set."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = _named(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        adam_step(self.params, self.lr if lr is None else lr, self.state, self.betas, self.eps,
                  self.weight_decay)


class SGD:
    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = _named(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        sgd_step(self.params, self.lr if lr is None else lr, self.momentum, self.state,
                 self.weight_decay)
