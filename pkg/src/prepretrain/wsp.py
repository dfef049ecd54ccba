"""Weakly supervised multi-label pretraining on hashtag labels."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, config_digest
from .data import AugmentConfig, LabelVocabulary, WeakRecord, augment_batch, dedup_merge, render_all
from .optim import LrSchedule
from .rng import Stream, batch_indices, steps_for
from .train import OptimizerSpec, restore, resume_state, snapshot, train_loop
from .vit import ViTConfig, ViTEncoder, init_params

_TAG = re.compile(r"#(\w+)")


def extract_hashtags(caption: str) -> list:
    """Tags in order of first appearance, lowercased, without the '#'."""
    out = []
    for word in caption.split():
        if not word.startswith("#"):
            continue
        m = _TAG.match(word)
        if m:
            tag = m.group(1).lower()
            if tag not in out:
                out.append(tag)
    return out


def labels_from_tags(tags, vocab: LabelVocabulary) -> list:
    """Union of mapped classes in vocabulary order; unmapped tags are dropped."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    hit = {vocab.hashtag_map[t] for t in tags if t in vocab.hashtag_map}
    return [c for c in vocab.classes if c in hit]


def multi_hot(labels, vocab: LabelVocabulary) -> np.ndarray:
    out = np.zeros(len(vocab))
    idx = vocab.index
    for lab in labels:
        out[idx[lab]] = 1.0
    return out


def normalize_label(label) -> np.ndarray:
    """Multi-hot row(s) -> probability distribution(s): L / sum_c L_c."""
    L = np.asarray(label, dtype=np.float64)
    total = L.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("cannot normalize an all-zero label")
    return L / total


def resample_dataset(manifest: list, target_size: int, seed: int) -> list:
    """Uniform sampling with replacement up to ``target_size`` records."""
    if target_size < len(manifest):
        raise ValueError("target size must be at least the number of unique records")
    rng = Stream(seed).child("resample").generator()
    picks = rng.integers(0, len(manifest), size=target_size)
    return [manifest[i] for i in picks]


@dataclass
class WeakImageSet:
    images: np.ndarray     # uint8 [N, 3, H, W]
    targets: np.ndarray    # float32 [N, C], rows sum to 1
    captions: list
    ids: np.ndarray


def build_weak_image_set(manifest: list, vocab: LabelVocabulary, image_size: int = 32,
                         dedup: bool = True) -> WeakImageSet:
    """Dedup by content hash, drop untrainable (label-free) records, render pixels."""
    from .data import render

    records = dedup_merge(manifest) if dedup else list(manifest)
    records = [r for r in records if r.labels]
    cache: dict = {}
    images = np.empty((len(records), 3, image_size, image_size), dtype=np.uint8)
    for i, r in enumerate(records):
        if r.hash not in cache:
            cache[r.hash] = render(r.spec, image_size)
        images[i] = cache[r.hash]
    targets = np.stack([normalize_label(multi_hot(r.labels, vocab)) for r in records]) if records else \
        np.zeros((0, len(vocab)))
    return WeakImageSet(images, targets.astype(np.float32), [r.caption for r in records],
                        np.asarray([r.id for r in records], np.int64))


HEAD_STRUCTURE = ("Linear(embed, embed)", "Tanh()", "Linear(embed, classes)")


def head_shapes(embed: int, classes: int) -> dict:
    return {"fc1.w": (embed, embed), "fc1.b": (embed,), "fc2.w": (embed, classes), "fc2.b": (classes,)}


class WspHead:
    """Linear(embed, embed) -> Tanh -> Linear(embed, classes)."""

    structure = HEAD_STRUCTURE

    def __init__(self, embed: int, classes: int, stream: Stream | None = None, params=None):
        self.embed, self.classes = embed, classes
        self.params = params or init_params(head_shapes(embed, classes), (stream or Stream(0)).child("head"))

    def layers(self) -> list:
        p = self.params
        return [("Linear", p["fc1.w"].shape), ("Tanh", None), ("Linear", p["fc2.w"].shape)]

    def __call__(self, pooled):
        p = self.params
        h = T.tanh(T.linear(pooled, p["fc1.w"], p["fc1.b"]))
        return T.linear(h, p["fc2.w"], p["fc2.b"])


def per_example_loss(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(targets * logp).sum(axis=-1)


@dataclass(frozen=True)
class WspRecipe:
    epochs: float = 1.0
    batch: int = 8192
    lr: float = 4e-4
    schedule: str = "linear"
    warmup: float = 0.05
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    clip: float | None = None
    crop_scale: tuple = (0.08, 1.0)
    flip_p: float = 0.5

    def optimizer(self) -> OptimizerSpec:
        return OptimizerSpec("adamw", self.beta1, self.beta2, weight_decay=self.weight_decay, clip=self.clip)

    def augment(self, size: int) -> AugmentConfig:
        return AugmentConfig(scale=tuple(self.crop_scale), size=size, flip_p=self.flip_p)


def wsp_digest(config: ViTConfig, recipe: WspRecipe, classes: int, n: int, init: str) -> str:
    return config_digest({"stage": "wsp", "encoder": config.digest_fields(), "recipe": asdict(recipe),
                          "classes": classes, "n": n, "init": init})


def wsp_train(dataset: WeakImageSet, config: ViTConfig, recipe: WspRecipe, stream: Stream,
              encoder_init: dict | None = None, log=None, resume: Checkpoint | None = None,
              stop_step: int | None = None):
    """Returns (checkpoint, encoder, head).

    ``encoder_init`` is a name -> array table (e.g. an MAE checkpoint's encoder);
    the head is always freshly initialized.
    """
    n, classes = dataset.targets.shape
    if n == 0:
        raise ValueError("no trainable records")
    total = steps_for(recipe.epochs, n, recipe.batch)
    digest = wsp_digest(config, recipe, classes, n, "checkpoint" if encoder_init is not None else "random")
    encoder = ViTEncoder(config, stream=stream.child("encoder"))
    if encoder_init is not None:
        try:
            restore(encoder.params, encoder_init, "")
        except CheckpointError as err:
            raise CheckpointError(f"encoder init does not match config: {err}") from None
    head = WspHead(config.embed, classes, stream)
    state, start = resume_state(resume, "wsp", digest)
    if resume is not None:
        restore(encoder.params, resume.tensors, "encoder/")
        restore(head.params, resume.tensors, "head/")
    params = {**{"encoder/" + k: v for k, v in encoder.params.items()},
              **{"head/" + k: v for k, v in head.params.items()}}
    schedule = LrSchedule(recipe.schedule, recipe.lr, recipe.warmup, total)
    aug = recipe.augment(config.image_size)
    data_stream = stream.child("batches")

    def loss_fn(step):
        idx = batch_indices(data_stream, n, recipe.batch, step)
        x = augment_batch(dataset.images[idx], aug, stream.child("augment", step), idx)
        pooled, _ = encoder(x, training=True, stream=stream.child("droppath", step))
        return T.softmax_cross_entropy_soft(head(pooled), dataset.targets[idx])

    stop = total if stop_step is None else min(stop_step, total)
    train_loop(params, loss_fn, schedule, recipe.optimizer(), state, start, stop, log=log)
    ckpt = Checkpoint("wsp", digest, {**snapshot(encoder.params, "encoder/"), **snapshot(head.params, "head/")},
                      step=stop, opt_state=state.arrays(), opt_t=state.t, rng_state=stream.state(),
                      meta={"total_steps": total, "encoder": config.digest_fields(), "classes": classes})
    return ckpt, encoder, head
