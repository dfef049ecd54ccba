"""Masked-autoencoder pre-pretraining."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, config_digest
from .data import AugmentConfig, augment_batch, augment_preset
from .optim import LrSchedule
from .rng import Stream, batch_indices, steps_for
from .tensor import Tensor
from .train import OptimizerSpec, resume_state, snapshot, restore, train_loop
from .vit import ViTConfig, ViTEncoder, block, block_shapes, init_params, patchify_batch, sincos_2d


@dataclass(frozen=True)
class MaskPlan:
    permutation: np.ndarray   # [N]; first num_visible entries are visible
    num_visible: int
    ratio: float

    @property
    def visible(self) -> np.ndarray:
        return self.permutation[:self.num_visible]

    @property
    def masked(self) -> np.ndarray:
        return self.permutation[self.num_visible:]


def num_visible_for(n: int, ratio: float) -> int:
    return int(np.floor(n * (1.0 - ratio) + 0.5))


def sample_mask(rng: np.random.Generator, n: int, ratio: float) -> MaskPlan:
    if n < 2:
        raise ValueError("masking needs at least two patches")
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must lie in (0, 1)")
    keep = num_visible_for(n, ratio)
    if keep < 1 or keep >= n:
        raise ValueError(f"ratio {ratio} leaves {keep} of {n} patches visible")
    return MaskPlan(rng.permutation(n), keep, ratio)


def batch_masks(stream: Stream, keys, n: int, ratio: float) -> list:
    """One plan per sample, keyed by sample id so batch order is irrelevant."""
    return [sample_mask(stream.child(int(k)).generator(), n, ratio) for k in keys]


def normalize_targets(patches, eps: float = 1e-6):
    """Per-patch standardization with population variance."""
    p = np.asarray(patches)
    if p.shape[-1] < 2:
        raise ValueError("patch width must be at least 2")
    mean = p.mean(axis=-1, keepdims=True)
    var = p.var(axis=-1, keepdims=True)
    return (p - mean) / np.sqrt(var + eps)


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    embed: int = 32
    heads: int = 4
    mlp_ratio: int = 4

    @property
    def mlp(self) -> int:
        return self.embed * self.mlp_ratio


PAPER_DECODER = DecoderConfig(8, 512, 16)
DESK_DECODER = DecoderConfig(2, 32, 4)


def decoder_shapes(enc: ViTConfig, dec: DecoderConfig) -> dict:
    shapes = {
        "embed.w": (enc.embed, dec.embed), "embed.b": (dec.embed,),
        "mask_token": (1, dec.embed),
    }
    for i in range(dec.layers):
        shapes.update(block_shapes(f"blocks.{i}", dec.embed, dec.mlp))
    shapes.update({"norm.g": (dec.embed,), "norm.b": (dec.embed,),
                   "pred.w": (dec.embed, enc.patch_dim), "pred.b": (enc.patch_dim,)})
    return shapes


class MaeDecoder:
    def __init__(self, enc: ViTConfig, dec: DecoderConfig, params=None, stream: Stream | None = None):
        self.enc, self.config = enc, dec
        if params is None:
            params = init_params(decoder_shapes(enc, dec), (stream or Stream(0)).child("decoder"))
        self.params = params
        self.pos_embed = sincos_2d(dec.embed, enc.grid)

    def __call__(self, tokens: Tensor, plans: list) -> Tensor:
        """Encoder tokens [B, 1+visible, E] -> pixel predictions [B, N, patch_dim]."""
        p, dec = self.params, self.config
        b = tokens.shape[0]
        n = self.enc.num_patches
        y = T.linear(tokens, p["embed.w"], p["embed.b"])
        nv = plans[0].num_visible
        vis = T.slice_axis(y, 1, 1, 1 + nv)
        mask_tok = T.add(np.zeros((b, n - nv, dec.embed), dtype=y.data.dtype), p["mask_token"])
        seq = T.concat([vis, mask_tok], axis=1)
        restore_idx = np.stack([np.argsort(plan.permutation) for plan in plans])
        seq = T.gather_rows(seq, restore_idx)
        seq = seq + self.pos_embed.astype(seq.data.dtype)
        x = T.concat([T.slice_axis(y, 1, 0, 1), seq], axis=1)
        for i in range(dec.layers):
            x = block(x, p, f"blocks.{i}", dec.heads)
        x = T.layer_norm(x, p["norm.g"], p["norm.b"])
        pred = T.linear(x, p["pred.w"], p["pred.b"])
        return T.slice_axis(pred, 1, 1, 1 + n)


def masked_positions(plans: list, n: int) -> np.ndarray:
    mask = np.zeros((len(plans), n))
    for i, plan in enumerate(plans):
        mask[i, plan.masked] = 1.0
    return mask


def reconstruction_loss(pred, target, mask) -> Tensor:
    """Mean over masked patches of the per-patch mean squared error."""
    diff = T.sub(pred, target)
    per_patch = T.mean(T.mul(diff, diff), axis=-1)
    mask = np.asarray(mask, dtype=per_patch.data.dtype)
    return T.mul(T.sum_(T.mul(per_patch, mask)), 1.0 / float(mask.sum()))


def mae_forward_loss(images, encoder: ViTEncoder, decoder: MaeDecoder, plans: list) -> Tensor:
    n = encoder.config.num_patches
    for plan in plans:
        if plan.permutation.shape[0] != n:
            raise ValueError(f"mask plan covers {plan.permutation.shape[0]} patches, grid has {n}")
    if len({plan.num_visible for plan in plans}) != 1:
        raise ValueError("all plans in a batch must keep the same number of patches")
    visible = np.stack([plan.visible for plan in plans])
    _, tokens = encoder(images, visible=visible)
    pred = decoder(tokens.tokens, plans)
    raw = images.data if isinstance(images, Tensor) else np.asarray(images)
    target = normalize_targets(patchify_batch(raw, encoder.config.patch).data)
    return reconstruction_loss(pred, target.astype(pred.data.dtype), masked_positions(plans, n))


@dataclass(frozen=True)
class MaeRecipe:
    epochs: float = 1.0
    batch: int = 4096
    mask_ratio: float = 0.75
    lr: float = 2.4e-3
    schedule: str = "cosine"
    warmup: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    crop_scale: tuple = (0.2, 1.0)
    flip_p: float = 0.5

    def optimizer(self) -> OptimizerSpec:
        return OptimizerSpec("adamw", self.beta1, self.beta2, weight_decay=self.weight_decay)

    def augment(self, size: int) -> AugmentConfig:
        return AugmentConfig(scale=tuple(self.crop_scale), size=size, flip_p=self.flip_p)


def mae_digest(config: ViTConfig, decoder: DecoderConfig, recipe: MaeRecipe, n: int) -> str:
    return config_digest({"stage": "mae", "encoder": config.digest_fields(),
                          "decoder": asdict(decoder), "recipe": asdict(recipe), "n": n})


def mae_pretrain(images: np.ndarray, config: ViTConfig, recipe: MaeRecipe, stream: Stream,
                 decoder_config: DecoderConfig = DESK_DECODER, log=None, resume: Checkpoint | None = None,
                 stop_step: int | None = None):
    """Train encoder + decoder on uint8 images; returns (checkpoint, encoder, decoder)."""
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    total = steps_for(recipe.epochs, n, recipe.batch)
    digest = mae_digest(config, decoder_config, recipe, n)
    encoder = ViTEncoder(config, stream=stream.child("encoder"))
    decoder = MaeDecoder(config, decoder_config, stream=stream)
    state, start = resume_state(resume, "mae", digest)
    if resume is not None:
        restore(encoder.params, resume.tensors, "encoder/")
        restore(decoder.params, resume.tensors, "decoder/")
    params = {**{"encoder/" + k: v for k, v in encoder.params.items()},
              **{"decoder/" + k: v for k, v in decoder.params.items()}}
    schedule = LrSchedule(recipe.schedule, recipe.lr, recipe.warmup, total)
    aug = recipe.augment(config.image_size)
    data_stream = stream.child("batches")

    def loss_fn(step):
        idx = batch_indices(data_stream, n, recipe.batch, step)
        x = augment_batch(images[idx], aug, stream.child("augment", step), idx)
        plans = batch_masks(stream.child("mask", step), idx, config.num_patches, recipe.mask_ratio)
        return mae_forward_loss(x, encoder, decoder, plans)

    stop = total if stop_step is None else min(stop_step, total)
    train_loop(params, loss_fn, schedule, recipe.optimizer(), state, start, stop, log=log)
    ckpt = Checkpoint("mae", digest, {**snapshot(encoder.params, "encoder/"),
                                      **snapshot(decoder.params, "decoder/")},
                      step=stop, opt_state=state.arrays(), opt_t=state.t, rng_state=stream.state(),
                      meta={"total_steps": total, "encoder": config.digest_fields(),
                            "decoder": asdict(decoder_config)})
    return ckpt, encoder, decoder
