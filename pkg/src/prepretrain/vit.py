"""Vision Transformer encoder with token subsets (MAE) and deep prompts (VPT)."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .rng import Stream
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    layers: int
    embed: int
    mlp: int
    heads: int
    patch: int
    image_size: int
    channels: int = 3
    droppath_rate: float = 0.0
    pooling: str = "cls"
    name: str = ""

    def __post_init__(self):
        if self.embed % self.heads:
            raise ValueError("embed must be divisible by heads")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.embed % 4:
            raise ValueError("sin-cos position embeddings need embed divisible by 4")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ValueError("droppath_rate must lie in [0, 1)")
        if self.pooling != "cls":
            raise ValueError("only class-token pooling is supported")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def digest_fields(self) -> dict:
        return {k: getattr(self, k) for k in
                ("layers", "embed", "mlp", "heads", "patch", "image_size", "channels")}


NAMED_CONFIGS = {
    "ViT-B": ViTConfig(12, 768, 3072, 12, 16, 224, name="ViT-B"),
    "ViT-L": ViTConfig(24, 1024, 4096, 16, 16, 224, name="ViT-L"),
    "ViT-H": ViTConfig(32, 1280, 5120, 16, 14, 224, name="ViT-H"),
    "ViT-2B": ViTConfig(24, 2560, 10240, 32, 14, 224, name="ViT-2B"),
    "ViT-6.5B": ViTConfig(32, 4096, 16384, 32, 14, 224, name="ViT-6.5B"),
    "ViT-Tiny-Desk": ViTConfig(4, 64, 256, 4, 4, 32, name="ViT-Tiny-Desk"),
    "ViT-Small-Desk": ViTConfig(6, 96, 384, 4, 4, 32, name="ViT-Small-Desk"),
}

PAPER_CONFIGS = ("ViT-B", "ViT-L", "ViT-H", "ViT-2B", "ViT-6.5B")
DESK_CONFIGS = ("ViT-Tiny-Desk", "ViT-Small-Desk")


def get_config(name: str, **overrides) -> ViTConfig:
    try:
        cfg = NAMED_CONFIGS[name]
    except KeyError:
        raise KeyError(f"unknown ViT config {name!r}; known: {sorted(NAMED_CONFIGS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------- patches

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[C, H, W] -> [N, patch*patch*C], patches in row-major grid order."""
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 2, 4, 0)
    return np.ascontiguousarray(x.reshape(gh * gw, patch * patch * c))


def unpatchify(patches: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    gh, gw = height // patch, width // patch
    x = patches.reshape(gh, gw, patch, patch, channels).transpose(4, 0, 2, 1, 3)
    return np.ascontiguousarray(x.reshape(channels, height, width))


def patchify_batch(images, patch: int) -> Tensor:
    x = T.as_tensor(images)
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


# ---------------------------------------------------------------- position embeddings

def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed [grid*grid, dim] table; half the channels encode rows, half columns."""
    gh, gw = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, gh), _sincos_1d(dim // 2, gw)], axis=1)
    return emb


def sincos_1d(dim: int, length: int) -> np.ndarray:
    return _sincos_1d(dim, np.arange(length))


# ---------------------------------------------------------------- parameters

def block_shapes(prefix: str, embed: int, mlp: int) -> dict:
    return {
        f"{prefix}.ln1.g": (embed,), f"{prefix}.ln1.b": (embed,),
        f"{prefix}.attn.qkv.w": (embed, 3 * embed), f"{prefix}.attn.qkv.b": (3 * embed,),
        f"{prefix}.attn.proj.w": (embed, embed), f"{prefix}.attn.proj.b": (embed,),
        f"{prefix}.ln2.g": (embed,), f"{prefix}.ln2.b": (embed,),
        f"{prefix}.mlp.fc1.w": (embed, mlp), f"{prefix}.mlp.fc1.b": (mlp,),
        f"{prefix}.mlp.fc2.w": (mlp, embed), f"{prefix}.mlp.fc2.b": (embed,),
    }


def param_shapes(config: ViTConfig) -> dict:
    shapes = {
        "patch_embed.w": (config.patch_dim, config.embed),
        "patch_embed.b": (config.embed,),
        "cls_token": (1, config.embed),
    }
    for i in range(config.layers):
        shapes.update(block_shapes(f"blocks.{i}", config.embed, config.mlp))
    shapes["norm.g"] = (config.embed,)
    shapes["norm.b"] = (config.embed,)
    return shapes


def param_count(config: ViTConfig) -> int:
    """Trainable encoder parameters; position embeddings are fixed and excluded."""
    e, m, l = config.embed, config.mlp, config.layers
    per_block = 4 * e * e + 2 * e * m + 9 * e + m
    return config.patch_dim * e + e + e + l * per_block + 2 * e


def init_tensor(name: str, shape: tuple, stream: Stream) -> np.ndarray:
    rng = stream.child("init", name).generator()
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("cls_token") or name.endswith("mask_token") or name.endswith("prompts"):
        return rng.normal(0.0, 0.02, size=shape)
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b":
        return np.zeros(shape)
    if leaf == "w":
        fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)
    raise ValueError(f"no initializer for {name}")


def init_params(shapes: dict, stream: Stream) -> dict:
    return {name: T.parameter(init_tensor(name, shape, stream)) for name, shape in shapes.items()}


def group_index(name: str, layers: int) -> int:
    """0 = patch embed / class token, 1..L = blocks, L+1 = everything after the trunk."""
    if name.startswith("patch_embed") or name == "cls_token" or name.startswith("pos"):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return layers + 1


def layerwise_lr_multipliers(layers: int, decay: float, min_cap: float | None = None) -> list:
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must lie in (0, 1]")
    out = []
    for g in range(layers + 2):
        mult = decay ** (layers + 1 - g)
        if min_cap is not None:
            mult = max(mult, min_cap)
        out.append(mult)
    return out


# ---------------------------------------------------------------- blocks

def attention(x: Tensor, params: dict, prefix: str, heads: int, key_mask=None) -> Tensor:
    b, n, e = x.shape
    d = e // heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])

    def split(i):
        part = T.slice_axis(qkv, 2, i * e, (i + 1) * e)
        return part.reshape(b, n, heads, d).transpose(0, 2, 1, 3)

    q, k, v = split(0), split(1), split(2)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(d)))
    if key_mask is not None:
        scores = scores + key_mask
    att = T.softmax(scores)
    out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, e)
    return T.linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def droppath_rate_at(rate: float, depth_index: int, layers: int) -> float:
    if layers <= 1:
        return 0.0
    return rate * depth_index / (layers - 1)


def droppath(x, residual, rate, depth_index, layers, training, rng=None):
    """x + residual, with the residual dropped per sample at the depth-scaled rate."""
    if rate >= 1.0:
        raise ValueError("droppath rate must be < 1")
    rate_l = droppath_rate_at(rate, depth_index, layers)
    if not training or rate_l == 0.0:
        return T.add(x, residual)
    batch = residual.shape[0]
    keep = (rng.random(batch) >= rate_l).astype(residual.data.dtype) / (1.0 - rate_l)
    keep = keep.reshape((batch,) + (1,) * (residual.ndim - 1))
    return T.add(x, T.mul(residual, keep))


def block(x, params, prefix, heads, depth_index=0, layers=1, droppath_rate=0.0,
          training=False, stream=None, key_mask=None):
    rng = stream.generator() if (training and droppath_rate > 0 and stream is not None) else None
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = droppath(x, attention(h, params, f"{prefix}.attn", heads, key_mask),
                 droppath_rate, depth_index, layers, training, rng)
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return droppath(x, mlp(h, params, f"{prefix}.mlp"),
                    droppath_rate, depth_index, layers, training, rng)


@dataclass
class TokenSequence:
    tokens: Tensor          # [B, 1 + visible, E]; slot 0 is the class token
    positions: np.ndarray   # [B, visible] grid indices of the patch tokens


class ViTEncoder:
    def __init__(self, config: ViTConfig, params: dict | None = None, stream: Stream | None = None):
        self.config = config
        if params is None:
            params = init_params(param_shapes(config), stream or Stream(0))
        self.params = params
        self.pos_embed = sincos_2d(config.embed, config.grid)

    def parameters(self) -> dict:
        return self.params

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    def __call__(self, images, visible=None, prompts=None, training=False, stream=None):
        return self.forward(images, visible, prompts, training, stream)

    def forward(self, images, visible=None, prompts=None, training=False, stream=None):
        cfg, p = self.config, self.params
        patches = patchify_batch(images, cfg.patch)
        batch, n = patches.shape[0], patches.shape[1]
        dtype = patches.data.dtype
        if visible is None:
            positions = np.broadcast_to(np.arange(n), (batch, n))
        else:
            positions = np.asarray(visible, dtype=np.int64)
            if positions.ndim == 1:
                positions = np.broadcast_to(positions, (batch, positions.shape[0]))
            if positions.shape[0] != batch:
                raise ValueError("visible index rows must match the batch")
            if positions.size and (positions.min() < 0 or positions.max() >= n):
                raise IndexError("visible index out of range")
            for row in positions:
                if len(np.unique(row)) != len(row):
                    raise ValueError("visible indices must be unique")
            patches = T.gather_rows(patches, positions)
        x = T.linear(patches, p["patch_embed.w"], p["patch_embed.b"])
        x = x + self.pos_embed[positions].astype(dtype)
        cls = T.broadcast_rows(p["cls_token"], batch)
        x = T.concat([cls, x], axis=1)

        if prompts is not None:
            if len(prompts) != cfg.layers:
                raise ValueError(f"expected {cfg.layers} prompt sets, got {len(prompts)}")
            widths = {pr.shape for pr in prompts}
            if len(widths) != 1 or next(iter(widths))[1] != cfg.embed or len(next(iter(widths))) != 2:
                raise ValueError("prompt tensors must share shape [tokens, embed]")
        n_prompt = 0
        for i in range(cfg.layers):
            if prompts is not None:
                pr = T.broadcast_rows(prompts[i], batch)
                rest = T.slice_axis(x, 1, 1 + n_prompt, x.shape[1])
                x = T.concat([T.slice_axis(x, 1, 0, 1), pr, rest], axis=1)
                n_prompt = prompts[i].shape[0]
            sub = stream.child("droppath", i) if stream is not None else None
            x = block(x, p, f"blocks.{i}", cfg.heads, i, cfg.layers, cfg.droppath_rate, training, sub)
        if n_prompt:
            x = T.concat([T.slice_axis(x, 1, 0, 1), T.slice_axis(x, 1, 1 + n_prompt, x.shape[1])], axis=1)
        x = T.layer_norm(x, p["norm.g"], p["norm.b"])
        pooled = T.slice_axis(x, 1, 0, 1).reshape(batch, cfg.embed)
        return pooled, TokenSequence(x, np.asarray(positions))

    def features(self, images, batch_size=256) -> np.ndarray:
        """Pooled features without recording a graph."""
        frozen = {k: v.requires_grad for k, v in self.params.items()}
        for v in self.params.values():
            v.requires_grad = False
        try:
            out = []
            for i in range(0, len(images), batch_size):
                pooled, _ = self.forward(images[i:i + batch_size])
                out.append(pooled.data)
            return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.embed), np.float32)
        finally:
            for k, v in self.params.items():
                v.requires_grad = frozen[k]
