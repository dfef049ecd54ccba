"""The optimizer loop shared by every training stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .optim import OptState, adamw_step, clip_grad_norm, ema_update, lr_at, sgd_momentum_step


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.9
    clip: float | None = None

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def decay_mask(params: dict) -> dict:
    """Weight decay applies to matrices only; biases, norms and tokens are exempt."""
    return {name: name.endswith(".w") for name in params}


def optimizer_step(params, state, opt: OptimizerSpec, lr, lr_scale=None, mask=None):
    if opt.kind == "adamw":
        adamw_step(params, state, lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay,
                   lr_scale=lr_scale, decay_mask=mask)
    else:
        sgd_momentum_step(params, state, lr, opt.momentum, opt.weight_decay,
                          lr_scale=lr_scale, decay_mask=mask)


def train_loop(params, loss_fn, schedule, opt: OptimizerSpec, state: OptState, start: int, stop: int,
               lr_scale=None, ema_rate=None, log=None):
    """Run optimizer steps ``start .. stop-1``; step s uses lr_at(schedule, s)."""
    mask = decay_mask(params)
    for step in range(start, stop):
        T.zero_grad(params)
        loss = loss_fn(step)
        T.backward(loss)
        if opt.clip:
            clip_grad_norm(params, opt.clip)
        lr = lr_at(schedule, step)
        optimizer_step(params, state, opt, lr, lr_scale, mask)
        if ema_rate:
            ema_update(state.ema, params, ema_rate)
        T.zero_grad(params)
        if log is not None:
            log(step + 1, loss=float(loss.data), lr=lr)
    return state


def snapshot(params: dict, prefix: str) -> dict:
    return {prefix + k: np.array(v.data, copy=True) for k, v in params.items()}


def restore(params: dict, tensors: dict, prefix: str, strict: bool = True):
    for name, p in params.items():
        key = prefix + name
        if key not in tensors:
            if strict:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            continue
        arr = tensors[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {p.data.shape}")
        p.data = np.array(arr, dtype=p.data.dtype, copy=True)


def resume_state(resume: Checkpoint | None, kind: str, digest: str):
    if resume is None:
        return OptState(), 0
    if resume.kind != kind:
        raise CheckpointError(f"cannot resume a {kind} stage from a {resume.kind} checkpoint")
    if resume.config_digest != digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint {resume.config_digest}, expected {digest}")
    return OptState.from_arrays(resume.opt_state, resume.opt_t), resume.step


def params_checksum(params: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        v = params[name]
        arr = v if isinstance(v, np.ndarray) else v.data
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
