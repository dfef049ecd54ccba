"""Locked-image text tuning and zero-shot classification."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, config_digest
from .data import FILLS, BACKGROUNDS, JUNK_TAGS, PROSE, SHAPES, SYNONYMS, AugmentConfig, augment_batch, eval_batch
from .optim import LrSchedule
from .rng import Stream, batch_indices, steps_for
from .train import OptimizerSpec, params_checksum, restore, resume_state, snapshot, train_loop
from .vit import ViTEncoder, block, block_shapes, init_params, sincos_1d

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
_WORD = re.compile(r"[a-z0-9]+")

# prompt templates for zero-shot; words come from the synthetic caption world
DEFAULT_TEMPLATES = (
    "a {}",
    "look at this {}",
    "a {} on a wall",
    "my new {} painting",
)


def words(text: str) -> list:
    """Lowercase word split; '#' and punctuation are dropped."""
    return _WORD.findall(text.lower())


class TextTokenizer:
    def __init__(self, vocabulary, context: int = 16):
        if context < 3:
            raise ValueError("context must fit bos, one word and eos")
        vocab = [w for w in dict.fromkeys(vocabulary) if w not in SPECIALS]
        self.itos = list(SPECIALS) + vocab
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.context = context

    @classmethod
    def synthetic(cls, context: int = 16, extra=()) -> "TextTokenizer":
        corpus = list(SHAPES) + list(FILLS) + list(BACKGROUNDS) + list(JUNK_TAGS)
        corpus += [t for syn in SYNONYMS.values() for t in syn]
        for line in PROSE:
            corpus += words(re.sub(r"\{\w+\}", " ", line))
        for line in extra:
            corpus += words(line.replace("{}", " "))
        return cls(sorted(set(corpus)), context)

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> np.ndarray:
        ids = [self.stoi.get(w, UNK) for w in words(text)][:self.context - 2]
        ids = [BOS] + ids + [EOS]
        return np.asarray(ids + [PAD] * (self.context - len(ids)), dtype=np.int64)

    def encode_batch(self, texts) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.context), dtype=np.int64)
        return np.stack([self.encode(t) for t in texts])

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))


@dataclass(frozen=True)
class TextConfig:
    layers: int = 2
    embed: int = 64
    heads: int = 4
    mlp: int = 256
    context: int = 16
    vocab_size: int = 128

    def digest_fields(self) -> dict:
        return asdict(self)


def text_shapes(cfg: TextConfig) -> dict:
    shapes = {"tok_embed.w": (cfg.vocab_size, cfg.embed)}
    for i in range(cfg.layers):
        shapes.update(block_shapes(f"blocks.{i}", cfg.embed, cfg.mlp))
    shapes.update({"norm.g": (cfg.embed,), "norm.b": (cfg.embed,)})
    return shapes


class TextEncoder:
    """Pre-norm transformer over token ids; masked mean pooling after the final norm."""

    def __init__(self, config: TextConfig, params=None, stream: Stream | None = None):
        self.config = config
        if params is None:
            params = init_params(text_shapes(config), (stream or Stream(0)).child("text"))
            params["tok_embed.w"].data[:] = ((stream or Stream(0)).child("text", "embed").generator()
                                             .normal(0, 0.02, params["tok_embed.w"].shape))
        self.params = params
        self.pos_embed = sincos_1d(config.embed, config.context)

    def __call__(self, ids):
        cfg, p = self.config, self.params
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] > cfg.context:
            raise ValueError("ids must be [B, <=context]")
        if ids.size and ids.max() >= cfg.vocab_size:
            raise IndexError("token id outside the vocabulary")
        b, n = ids.shape
        x = T.embedding(p["tok_embed.w"], ids)
        x = x + self.pos_embed[:n].astype(x.data.dtype)
        keep = (ids != PAD).astype(x.data.dtype)
        key_mask = ((1.0 - keep) * -1e9).reshape(b, 1, 1, n).astype(x.data.dtype)
        for i in range(cfg.layers):
            x = block(x, p, f"blocks.{i}", cfg.heads, key_mask=key_mask)
        x = T.layer_norm(x, p["norm.g"], p["norm.b"])
        weights = keep / np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        return T.sum_(T.mul(x, weights[:, :, None]), axis=1)


def alignment_shapes(image_embed: int, text_embed: int, shared_dim: int) -> dict:
    return {"img.w": (image_embed, shared_dim), "txt.w": (text_embed, shared_dim), "logit_scale": (1,)}


class AlignmentHeads:
    """Linear projections into the shared space plus a learnable temperature."""

    max_scale = 100.0

    def __init__(self, image_embed: int, text_embed: int, shared_dim: int = 32, params=None,
                 stream: Stream | None = None):
        self.shared_dim = shared_dim
        if params is None:
            params = {
                "img.w": T.parameter((stream or Stream(0)).child("heads", "img").generator()
                                     .normal(0, image_embed ** -0.5, (image_embed, shared_dim))),
                "txt.w": T.parameter((stream or Stream(0)).child("heads", "txt").generator()
                                     .normal(0, text_embed ** -0.5, (text_embed, shared_dim))),
                "logit_scale": T.parameter(np.full((1,), math.log(1 / 0.07))),
            }
        self.params = params

    def scale(self):
        return T.clamp_max(T.exp(self.params["logit_scale"]), self.max_scale)

    def image(self, pooled):
        return T.l2_normalize(T.matmul(pooled, self.params["img.w"]))

    def text(self, pooled):
        return T.l2_normalize(T.matmul(pooled, self.params["txt.w"]))


def smoothed_targets(batch: int, smoothing: float) -> np.ndarray:
    return (1.0 - smoothing) * np.eye(batch) + smoothing / batch


def clip_loss(img, txt, scale, smoothing: float = 0.0):
    """Symmetric contrastive loss over the in-batch similarity matrix."""
    img, txt = T.as_tensor(img), T.as_tensor(txt)
    for emb in (img, txt):
        norms = np.sqrt((emb.data.astype(np.float64) ** 2).sum(axis=-1))
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("embeddings must be L2-normalized")
    b = img.shape[0]
    logits = T.mul(T.matmul(img, T.transpose(txt, (1, 0))), scale)
    targets = smoothed_targets(b, smoothing)
    return T.mul(T.add(T.softmax_cross_entropy_soft(logits, targets),
                       T.softmax_cross_entropy_soft(T.transpose(logits, (1, 0)), targets)), 0.5)


@dataclass(frozen=True)
class LitRecipe:
    epochs: float = 1.0
    batch: int = 32768
    lr: float = 1e-3
    schedule: str = "cosine"
    warmup: float = 0.04
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    smoothing: float = 0.1
    shared_dim: int = 32
    crop_scale: tuple = (0.9, 1.0)
    flip_p: float = 0.0

    def optimizer(self) -> OptimizerSpec:
        return OptimizerSpec("adamw", self.beta1, self.beta2, weight_decay=self.weight_decay)


@dataclass
class LitResult:
    checkpoint: Checkpoint
    text_encoder: TextEncoder
    heads: AlignmentHeads
    image_checksum_before: str
    image_checksum_after: str


def lit_train(images: np.ndarray, captions: list, image_encoder: ViTEncoder, tokenizer: TextTokenizer,
              text_config: TextConfig, recipe: LitRecipe, stream: Stream, log=None,
              resume: Checkpoint | None = None, stop_step: int | None = None) -> LitResult:
    """Train the text tower and both projections against a frozen image tower."""
    n = len(images)
    if n != len(captions) or n == 0:
        raise ValueError("need one caption per image")
    if text_config.vocab_size != len(tokenizer) or text_config.context != tokenizer.context:
        raise ValueError("text config does not match the tokenizer")
    before = params_checksum(image_encoder.params)
    image_encoder.freeze()
    total = steps_for(recipe.epochs, n, recipe.batch)
    digest = config_digest({"stage": "lit", "image": image_encoder.config.digest_fields(),
                            "text": text_config.digest_fields(), "recipe": asdict(recipe), "n": n,
                            "image_checksum": before})
    text = TextEncoder(text_config, stream=stream)
    heads = AlignmentHeads(image_encoder.config.embed, text_config.embed, recipe.shared_dim, stream=stream)
    params = {**{"text/" + k: v for k, v in text.params.items()},
              **{"heads/" + k: v for k, v in heads.params.items()}}
    state, start = resume_state(resume, "lit", digest)
    if resume is not None:
        restore(params, resume.tensors, "")
    token_ids = tokenizer.encode_batch(captions)
    schedule = LrSchedule(recipe.schedule, recipe.lr, recipe.warmup, total)
    aug = AugmentConfig(scale=tuple(recipe.crop_scale), size=image_encoder.config.image_size,
                        flip_p=recipe.flip_p)
    data_stream = stream.child("batches")

    def loss_fn(step):
        idx = batch_indices(data_stream, n, recipe.batch, step)
        x = augment_batch(images[idx], aug, stream.child("augment", step), idx)
        pooled, _ = image_encoder(x)
        return clip_loss(heads.image(pooled), heads.text(text(token_ids[idx])), heads.scale(),
                         recipe.smoothing)

    stop = total if stop_step is None else min(stop_step, total)
    train_loop(params, loss_fn, schedule, recipe.optimizer(), state, start, stop, log=log)
    after = params_checksum(image_encoder.params)
    ckpt = Checkpoint("lit", digest, snapshot(params, ""), step=stop, opt_state=state.arrays(),
                      opt_t=state.t, rng_state=stream.state(),
                      meta={"total_steps": total, "text": text_config.digest_fields(),
                            "image_checksum": after, "shared_dim": recipe.shared_dim})
    return LitResult(ckpt, text, heads, before, after)


# ---------------------------------------------------------------- zero-shot

def load_templates(path) -> list:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    for ln in lines:
        if "{}" not in ln:
            raise ValueError(f"template without placeholder: {ln!r}")
    if not lines:
        raise ValueError("empty template set")
    return lines


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def class_embeddings(class_names, templates, tokenizer: TextTokenizer, text: TextEncoder,
                     heads: AlignmentHeads) -> np.ndarray:
    """Prompt ensemble per class: normalize each prompt, average, re-normalize."""
    templates = list(templates)
    if not templates:
        raise ValueError("empty template set")
    out = []
    for name in class_names:
        ids = tokenizer.encode_batch([t.replace("{}", name) for t in templates])
        emb = normalize_rows(heads.text(text(ids)).data)
        out.append(emb.mean(axis=0))
    return normalize_rows(np.stack(out))


def zero_shot_scores(image_emb, class_emb) -> tuple:
    """Cosine scores and argmax predictions (ties go to the lowest class index)."""
    scores = normalize_rows(image_emb) @ np.asarray(class_emb, dtype=np.float64).T
    return np.argmax(scores, axis=1), scores


def image_embeddings(images, image_encoder: ViTEncoder, heads: AlignmentHeads, batch=256) -> np.ndarray:
    feats = image_encoder.features(eval_batch(images), batch)
    return feats.astype(np.float64) @ heads.params["img.w"].data.astype(np.float64)


def zero_shot_classify(images, class_emb, image_encoder: ViTEncoder, heads: AlignmentHeads) -> tuple:
    return zero_shot_scores(image_embeddings(images, image_encoder, heads), class_emb)


def zero_shot_accuracy(dataset, templates, tokenizer, text, image_encoder, heads) -> float:
    emb = class_embeddings(dataset.class_names, templates, tokenizer, text, heads)
    pred, _ = zero_shot_classify(dataset.images, emb, image_encoder, heads)
    return float(np.mean(pred == dataset.labels))
