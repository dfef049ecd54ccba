"""Analytic training cost of ViT encoders, decoders and text towers.

Convention: one multiply-accumulate counts as one FLOP (the accounting under
which ViT-B/16 at 224px comes out near 17.6G). Only matmuls are counted;
softmax, LayerNorm and GELU are ignored. A training step costs 3x a forward.
All arithmetic is on Python ints.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .rng import steps_for

HEADER = "# flops: 1 MAC = 1 FLOP; matmuls only; train step = 3 x forward"
CSV_COLUMNS = ("stage", "config", "tokens", "flops_forward", "flops_step", "total")


@dataclass(frozen=True)
class FlopsReport:
    attention: int = 0
    mlp: int = 0
    embed: int = 0
    head: int = 0

    @property
    def forward(self) -> int:
        return self.attention + self.mlp + self.embed + self.head

    @property
    def step(self) -> int:
        return 3 * self.forward

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        return FlopsReport(self.attention + other.attention, self.mlp + other.mlp,
                           self.embed + other.embed, self.head + other.head)


def attention_flops(tokens: int, embed: int) -> int:
    return 4 * tokens * embed * embed + 2 * tokens * tokens * embed


def mlp_flops(tokens: int, embed: int, mlp: int) -> int:
    return 2 * tokens * embed * mlp


def forward_flops(config, tokens: int, patches: int | None = None, head: int = 0) -> FlopsReport:
    """Per-sample forward cost of a pre-norm transformer over ``tokens`` tokens.

    ``patches`` defaults to tokens - 1 (everything but the class token) for
    configs with a patch embedding; text towers have none.
    """
    if tokens < 1:
        raise ValueError("tokens must be at least 1")
    L, E, M = int(config.layers), int(config.embed), int(config.mlp)
    embed = 0
    patch_dim = getattr(config, "patch_dim", None)
    if patch_dim:
        embed = (tokens - 1 if patches is None else patches) * int(patch_dim) * E
    return FlopsReport(L * attention_flops(tokens, E), L * mlp_flops(tokens, E, M), embed, int(head))


def decoder_flops(enc, dec, visible: int) -> FlopsReport:
    """MAE decoder: embed the visible+1 encoder tokens, run N+1 tokens, predict N patches."""
    if dec is None or dec.layers == 0 or dec.embed == 0:
        return FlopsReport()
    n = enc.num_patches
    T = n + 1
    L, Ed, Md = dec.layers, dec.embed, dec.mlp
    return FlopsReport(L * attention_flops(T, Ed), L * mlp_flops(T, Ed, Md),
                       (visible + 1) * enc.embed * Ed, n * Ed * enc.patch_dim)


def mae_step_report(enc, dec, ratio: float) -> FlopsReport:
    """Per-sample forward of an MAE step; masking enters only through token counts."""
    from .mae import num_visible_for

    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    visible = num_visible_for(enc.num_patches, ratio) if ratio > 0 else enc.num_patches
    return forward_flops(enc, visible + 1, patches=visible) + decoder_flops(enc, dec, visible)


def wsp_step_report(enc, classes: int, with_head: bool = True) -> FlopsReport:
    head = enc.embed * enc.embed + enc.embed * classes if with_head else 0
    return forward_flops(enc, enc.num_patches + 1, head=head)


@dataclass(frozen=True)
class StageFlops:
    stage: str
    config: str
    tokens: int
    flops_forward: int
    flops_step: int
    steps: int
    batch: int

    @property
    def total(self) -> int:
        return self.steps * self.batch * self.flops_step

    def row(self) -> dict:
        return {"stage": self.stage, "config": self.config, "tokens": self.tokens,
                "flops_forward": self.flops_forward, "flops_step": self.flops_step, "total": self.total}


def stage_flops(stage: str, config, dataset_size: int, epochs: float, batch: int, *, mask_ratio=0.75,
                decoder=None, classes: int = 16, text=None, embed_dim: int = 64) -> StageFlops:
    """Total = steps * batch * per-sample training-step cost."""
    steps = steps_for(epochs, dataset_size, batch)
    name = getattr(config, "name", "") or "custom"
    if stage == "mae":
        if decoder is None:
            from .mae import DESK_DECODER
            decoder = DESK_DECODER
        rep = mae_step_report(config, decoder, mask_ratio)
        from .mae import num_visible_for
        tokens = num_visible_for(config.num_patches, mask_ratio) + 1 if mask_ratio > 0 else config.num_patches + 1
        fwd, step = rep.forward, rep.step
    elif stage == "wsp":
        rep = wsp_step_report(config, classes)
        tokens, fwd, step = config.num_patches + 1, rep.forward, rep.step
    elif stage == "lit":
        if text is None:
            raise ValueError("lit accounting needs the text tower config")
        image = forward_flops(config, config.num_patches + 1)
        txt = forward_flops(text, text.context, head=text.embed * embed_dim)
        proj = config.embed * embed_dim
        tokens = config.num_patches + 1
        fwd = image.forward + txt.forward + proj
        # frozen image tower at inference cost; text tower and projection trained
        step = image.forward + 3 * (txt.forward + proj)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return StageFlops(stage, name, tokens, fwd, step, steps, batch)


def flops_csv(rows, with_header: bool = True) -> str:
    buf = io.StringIO()
    if with_header:
        buf.write(HEADER + "\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.row() if isinstance(r, StageFlops) else {k: r[k] for k in CSV_COLUMNS})
    return buf.getvalue()
