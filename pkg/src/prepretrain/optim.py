"""Optimizers, learning-rate schedules and weight averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)
    t: int = 0

    def arrays(self) -> dict:
        out = {}
        for prefix, table in (("m", self.m), ("v", self.v), ("velocity", self.velocity), ("ema", self.ema)):
            for name, arr in table.items():
                out[f"{prefix}/{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, t: int) -> "OptState":
        state = cls(t=t)
        for key, arr in arrays.items():
            prefix, name = key.split("/", 1)
            getattr(state, prefix)[name] = arr
        return state


def _grad(p, grads, name):
    g = grads[name] if grads is not None else p.grad
    if g is None:
        return np.zeros_like(p.data)
    if g.shape != p.data.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
    return g


def adamw_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
               grads=None, lr_scale=None, decay_mask=None):
    """One decoupled-weight-decay Adam step, in place on ``params``.

    ``lr_scale`` maps parameter names to multipliers (layerwise decay);
    ``decay_mask`` names the parameters that receive weight decay (default all).
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = _grad(p, grads, name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape or v.shape != p.data.shape:
            raise ValueError(f"optimizer state for {name} has the wrong shape")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step_lr = lr * (lr_scale[name] if lr_scale else 1.0)
        data = p.data
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            data = data - (step_lr * weight_decay) * data
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (data - step_lr * update).astype(p.data.dtype, copy=False)


def sgd_momentum_step(params, state, lr, momentum=0.9, weight_decay=0.0, grads=None,
                      lr_scale=None, decay_mask=None):
    """v <- momentum * v + g; p <- p - lr * v (coupled L2 decay folded into g)."""
    state.t += 1
    for name, p in params.items():
        g = _grad(p, grads, name)
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            g = g + weight_decay * p.data
        vel = state.velocity.get(name)
        if vel is None:
            vel = np.zeros_like(p.data)
        elif vel.shape != p.data.shape:
            raise ValueError(f"velocity for {name} has the wrong shape")
        vel = momentum * vel + g
        state.velocity[name] = vel
        step_lr = lr * (lr_scale[name] if lr_scale else 1.0)
        p.data = (p.data - step_lr * vel).astype(p.data.dtype, copy=False)


def global_norm(arrays) -> float:
    total = 0.0
    for g in arrays:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm, grads=None) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the scale factor applied (1.0 when already within bounds).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    names = list(params)
    arrays = [grads[n] if grads is not None else params[n].grad for n in names]
    arrays = [a for a in arrays if a is not None]
    norm = global_norm(arrays)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for n in names:
        if grads is not None:
            grads[n] = (grads[n] * scale).astype(grads[n].dtype, copy=False)
        elif params[n].grad is not None:
            params[n].grad = (params[n].grad * scale).astype(params[n].grad.dtype, copy=False)
    return scale


def ema_update(shadow: dict, params: dict, rate: float) -> dict:
    """shadow <- (1 - rate) * shadow + rate * params, elementwise."""
    if not 0.0 < rate < 1.0:
        raise ValueError("EMA rate must lie in (0, 1)")
    for name, p in params.items():
        value = p if isinstance(p, np.ndarray) else p.data
        s = shadow.get(name)
        if s is None:
            shadow[name] = np.array(value, copy=True)
            continue
        if s.shape != value.shape:
            raise ValueError(f"EMA shadow for {name} has the wrong shape")
        shadow[name] = ((1.0 - rate) * s + rate * value).astype(s.dtype, copy=False)
    return shadow


SCHEDULE_KINDS = ("cosine", "linear", "constant", "step")


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    peak: float
    warmup_fraction: float
    total_steps: int
    decay_points: tuple = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup fraction must lie in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        if self.warmup_fraction <= 0:
            return 0
        return max(1, math.ceil(self.warmup_fraction * self.total_steps - 1e-9))


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    peak = schedule.peak
    warm = schedule.warmup_steps
    if step < warm:
        return peak * step / warm
    span = schedule.total_steps - warm
    u = 1.0 if span <= 0 else (step - warm) / span
    if schedule.kind == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * u))
    if schedule.kind == "linear":
        return peak * (1.0 - u)
    if schedule.kind == "constant":
        return peak
    passed = sum(1 for point in schedule.decay_points if u >= point)
    return peak * schedule.decay_factor ** passed
