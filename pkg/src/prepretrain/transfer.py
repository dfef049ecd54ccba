"""Transfer protocols: linear probe, K-shot VPT, full finetuning."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, config_digest
from .data import AugmentConfig, LabeledDataset, augment_batch, eval_batch
from .optim import LrSchedule
from .rng import Stream, batch_indices, steps_for
from .train import (OptimizerSpec, params_checksum, restore, resume_state, snapshot,
                    train_loop)
from .vit import ViTEncoder, group_index, init_params, layerwise_lr_multipliers

CANONICAL_SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------- small pieces

def topk_accuracy(logits, labels, k: int = 1) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if k > logits.shape[1]:
        raise ValueError("k exceeds the number of classes")
    if len(labels) == 0:
        return 0.0
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def one_hot(labels, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def label_smooth(targets, eps: float) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    t = np.asarray(targets, dtype=np.float64)
    return (1.0 - eps) * t + eps / t.shape[-1]


def mixup_batch(images, targets, alpha: float, rng: np.random.Generator, lam: float | None = None):
    """Convex pairs under a seeded permutation; returns (images, targets, lam)."""
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    x = lam * images + (1.0 - lam) * images[perm]
    t = lam * targets + (1.0 - lam) * targets[perm]
    return x.astype(images.dtype, copy=False), t, lam


def _linear_logits(features, w, b):
    return T.linear(features, w, b)


# ---------------------------------------------------------------- linear probe

@dataclass(frozen=True)
class ProbeRecipe:
    epochs: float = 20
    batch: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"
    warmup: float = 0.0
    weight_decay: float = 0.0


@dataclass
class ProbeResult:
    accuracy: float
    encoder_checksum_before: str
    encoder_checksum_after: str
    checkpoint: Checkpoint | None = None


def standardize(train_feats, *others):
    mu = train_feats.mean(axis=0)
    sd = train_feats.std(axis=0) + 1e-6
    return [((f - mu) / sd).astype(np.float32) for f in (train_feats,) + others]


def train_linear_classifier(feats, labels, classes, recipe: ProbeRecipe, stream: Stream, log=None,
                            resume: Checkpoint | None = None, stop_step: int | None = None):
    n, d = feats.shape
    total = steps_for(recipe.epochs, n, recipe.batch)
    digest = config_digest({"stage": "probe", "recipe": asdict(recipe), "n": n, "d": d, "classes": classes})
    params = {"w": T.parameter(np.zeros((d, classes))), "b": T.parameter(np.zeros(classes))}
    state, start = resume_state(resume, "probe", digest)
    if resume is not None:
        restore(params, resume.tensors, "probe/")
    schedule = LrSchedule(recipe.schedule, recipe.lr, recipe.warmup, total)
    targets = one_hot(labels, classes)
    data_stream = stream.child("batches")

    def loss_fn(step):
        idx = batch_indices(data_stream, n, recipe.batch, step)
        return T.softmax_cross_entropy_soft(_linear_logits(feats[idx], params["w"], params["b"]), targets[idx])

    opt = OptimizerSpec("sgd", momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    stop = total if stop_step is None else min(stop_step, total)
    train_loop(params, loss_fn, schedule, opt, state, start, stop, log=log)
    ckpt = Checkpoint("probe", digest, snapshot(params, "probe/"), step=stop, opt_state=state.arrays(),
                      opt_t=state.t, rng_state=stream.state(), meta={"total_steps": total})
    return params, ckpt


def linear_probe(encoder: ViTEncoder, train: LabeledDataset, val: LabeledDataset,
                 recipe: ProbeRecipe = ProbeRecipe(), stream: Stream = Stream(0), log=None,
                 resume: Checkpoint | None = None, stop_step: int | None = None) -> ProbeResult:
    """Train a linear classifier on frozen, standardized class-token features."""
    before = params_checksum(encoder.params)
    ftr = encoder.features(eval_batch(train.images))
    fva = encoder.features(eval_batch(val.images))
    ftr, fva = standardize(ftr, fva)
    classes = len(train.class_names)
    params, ckpt = train_linear_classifier(ftr, train.labels, classes, recipe, stream, log, resume, stop_step)
    logits = ftr[:0] if len(fva) == 0 else fva @ params["w"].data + params["b"].data
    acc = topk_accuracy(logits, val.labels, 1) if len(fva) else 0.0
    return ProbeResult(acc, before, params_checksum(encoder.params), ckpt)


# ---------------------------------------------------------------- K-shot splits

@dataclass(frozen=True)
class KShotSplit:
    k: int
    seed: int
    ids: dict   # class index -> tuple of dataset positions

    def indices(self) -> np.ndarray:
        return np.asarray(sorted(i for ids in self.ids.values() for i in ids), dtype=np.int64)


def make_kshot_splits(labels, k: int, seeds=CANONICAL_SEEDS) -> list:
    """At most ``k`` samples per class, without replacement, one split per seed."""
    if k < 1:
        raise ValueError("K must be at least 1")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    splits = []
    for seed in seeds:
        chosen = {}
        for c in classes:
            members = np.flatnonzero(labels == c)
            rng = Stream(int(seed)).child("kshot", k, int(c)).generator()
            take = min(k, len(members))
            chosen[int(c)] = tuple(sorted(rng.choice(members, size=take, replace=False).tolist()))
        splits.append(KShotSplit(k, int(seed), chosen))
    return splits


# ---------------------------------------------------------------- VPT

@dataclass(frozen=True)
class VptConfig:
    tokens_per_layer: int = 8
    token_dim: int = 192
    token_dropout: float = 0.0


@dataclass(frozen=True)
class LowShotRecipe:
    epochs: float = 28
    batch: int = 128
    lr: float = 6e-3
    schedule: str = "cosine"
    warmup: float = 0.0
    weight_decay: float = 0.0
    momentum: float = 0.9
    mixup: float = 0.1
    crop_scale: tuple = (0.08, 1.0)
    flip_p: float = 0.5

    @classmethod
    def for_shots(cls, k: int, **overrides) -> "LowShotRecipe":
        return cls(epochs=56 if k == 1 else 28, **overrides)


def vpt_shapes(layers: int, embed: int, classes: int, cfg: VptConfig) -> dict:
    return {
        "prompts": (layers, cfg.tokens_per_layer, cfg.token_dim),
        "proj.w": (cfg.token_dim, embed),
        "head.w": (embed, classes), "head.b": (classes,),
    }


def vpt_param_count(layers: int, embed: int, classes: int, cfg: VptConfig) -> int:
    return (layers * cfg.tokens_per_layer * cfg.token_dim + cfg.token_dim * embed
            + embed * classes + classes)


def vpt_prompts(params: dict, layers: int, cfg: VptConfig, training=False, rng=None) -> list:
    out = []
    for l in range(layers):
        tok = T.slice_axis(params["prompts"], 0, l, l + 1).reshape(cfg.tokens_per_layer, cfg.token_dim)
        if training and cfg.token_dropout > 0:
            keep = (rng.random(tok.shape) >= cfg.token_dropout) / (1.0 - cfg.token_dropout)
            tok = T.mul(tok, keep.astype(tok.data.dtype))
        out.append(T.matmul(tok, params["proj.w"]))
    return out


def _vpt_logits(encoder, params, x, cfg, training=False, rng=None):
    prompts = vpt_prompts(params, encoder.config.layers, cfg, training, rng)
    pooled, _ = encoder(x, prompts=prompts)
    return T.linear(pooled, params["head.w"], params["head.b"])


def vpt_eval(encoder, params, cfg, val: LabeledDataset, batch=256) -> float:
    logits = []
    for i in range(0, len(val), batch):
        logits.append(_vpt_logits(encoder, params, eval_batch(val.images[i:i + batch]), cfg).data)
    return topk_accuracy(np.concatenate(logits), val.labels, 1)


@dataclass
class VptResult:
    mean_accuracy: float
    split_accuracies: list
    trainable_params: int
    backbone_checksum_before: str
    backbone_checksum_after: str
    checkpoint: Checkpoint | None = None


def vpt_adapt(encoder: ViTEncoder, cfg: VptConfig, train: LabeledDataset, val: LabeledDataset,
              splits: list, recipe: LowShotRecipe, stream: Stream, log=None,
              resume: Checkpoint | None = None, stop_step: int | None = None) -> VptResult:
    """Deep prompt tuning per split; reports the mean top-1 over all splits.

    ``stop_step`` counts optimizer steps across splits so any point is resumable.
    """
    enc_cfg = encoder.config
    classes = len(train.class_names)
    before = params_checksum(encoder.params)
    encoder.freeze()
    shapes = vpt_shapes(enc_cfg.layers, enc_cfg.embed, classes, cfg)
    if shapes["proj.w"][1] != enc_cfg.embed:
        raise ValueError("VPT projection does not match the encoder width")
    digest = config_digest({"stage": "lowshot", "vpt": asdict(cfg), "recipe": asdict(recipe),
                            "encoder": enc_cfg.digest_fields(), "splits": [(s.k, s.seed) for s in splits]})
    resume_state(resume, "lowshot", digest)
    accs = list(resume.meta.get("split_accuracies", [])) if resume is not None else []
    global_step = resume.step if resume is not None else 0
    aug = AugmentConfig(scale=tuple(recipe.crop_scale), size=enc_cfg.image_size, flip_p=recipe.flip_p)
    opt = OptimizerSpec("sgd", momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    params = None
    state = None
    for si in range(len(accs), len(splits)):
        split = splits[si]
        sub = train.subset(split.indices())
        n = len(sub)
        total = steps_for(recipe.epochs, n, recipe.batch)
        sstream = stream.child("split", split.seed)
        params = init_params(shapes, sstream.child("vpt"))
        params["head.w"].data[:] = (sstream.child("head").generator().normal(0, 0.02, shapes["head.w"])
                                    .astype(params["head.w"].data.dtype))
        start = 0
        from .optim import OptState
        state = OptState()
        if resume is not None and resume.meta.get("split") == si:
            restore(params, resume.tensors, "vpt/")
            state, start = OptState.from_arrays(resume.opt_state, resume.opt_t), resume.meta["split_step"]
        schedule = LrSchedule(recipe.schedule, recipe.lr, recipe.warmup, total)
        targets = one_hot(sub.labels, classes)
        data_stream = sstream.child("batches")

        def loss_fn(step, sub=sub, targets=targets, data_stream=data_stream, sstream=sstream, n=n):
            idx = batch_indices(data_stream, n, recipe.batch, step)
            x = augment_batch(sub.images[idx], aug, sstream.child("augment", step), idx)
            t = targets[idx]
            if recipe.mixup > 0:
                x, t, _ = mixup_batch(x, t, recipe.mixup, sstream.child("mixup", step).generator())
            rng = sstream.child("tokdrop", step).generator()
            return T.softmax_cross_entropy_soft(_vpt_logits(encoder, params, x, cfg, True, rng), t)

        stop = total
        if stop_step is not None:
            stop = min(total, start + max(0, stop_step - global_step))
        split_log = (lambda s, **kw: log(global_step - start + s, split=si, **kw)) if log else None
        train_loop(params, loss_fn, schedule, opt, state, start, stop, log=split_log)
        global_step += stop - start
        if stop < total:
            ckpt = Checkpoint("lowshot", digest, snapshot(params, "vpt/"), step=global_step,
                              opt_state=state.arrays(), opt_t=state.t, rng_state=stream.state(),
                              meta={"split": si, "split_step": stop, "split_accuracies": accs})
            return VptResult(float("nan"), accs, vpt_param_count(enc_cfg.layers, enc_cfg.embed, classes, cfg),
                             before, params_checksum(encoder.params), ckpt)
        accs.append(vpt_eval(encoder, params, cfg, val))
    ckpt = Checkpoint("lowshot", digest, snapshot(params, "vpt/") if params else {}, step=global_step,
                      opt_state=state.arrays() if state else {}, opt_t=state.t if state else 0,
                      rng_state=stream.state(), meta={"split": len(splits), "split_step": 0,
                                                      "split_accuracies": accs})
    return VptResult(float(np.mean(accs)), accs, vpt_param_count(enc_cfg.layers, enc_cfg.embed, classes, cfg),
                     before, params_checksum(encoder.params), ckpt)


# ---------------------------------------------------------------- full finetuning

@dataclass(frozen=True)
class FinetuneRecipe:
    optimizer: str = "adamw"
    lr: float = 2e-3
    schedule: str = "constant"
    warmup: float = 0.05
    layer_decay: float = 0.75
    min_layer_decay: float | None = None
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    clip: float | None = None
    droppath: float = 0.2
    ema: float = 1e-4
    mixup: float = 0.8
    smoothing: float = 0.1
    epochs: float = 50
    batch: int = 1024
    crop_scale: tuple = (0.08, 1.0)
    flip_p: float = 0.5

    @classmethod
    def mae_lineage(cls, **overrides) -> "FinetuneRecipe":
        return cls(**overrides)

    @classmethod
    def wsp_lineage(cls, **overrides) -> "FinetuneRecipe":
        base = dict(optimizer="sgd", lr=2.4e-2, schedule="constant", warmup=0.05, layer_decay=1.0,
                    weight_decay=0.0, momentum=0.9, clip=1.0, droppath=0.2, ema=1e-4, mixup=0.1,
                    smoothing=0.0, batch=2048)
        base.update(overrides)
        return cls(**base)

    def optimizer_spec(self) -> OptimizerSpec:
        return OptimizerSpec(self.optimizer, self.beta1, self.beta2, weight_decay=self.weight_decay,
                             momentum=self.momentum, clip=self.clip)


@dataclass
class FinetuneResult:
    raw_accuracy: float
    ema_accuracy: float
    lr_scale: dict = field(default_factory=dict)
    checkpoint: Checkpoint | None = None


def group_lr_scale(param_names, layers: int, decay: float, min_cap: float | None) -> dict:
    mults = layerwise_lr_multipliers(layers, decay, min_cap)
    out = {}
    for name in param_names:
        bare = name.split("/", 1)[1] if name.startswith("encoder/") else "head"
        out[name] = mults[group_index(bare, layers)]
    return out


def classify(encoder, head_w, head_b, images, batch=256) -> np.ndarray:
    logits = []
    for i in range(0, len(images), batch):
        pooled, _ = encoder(eval_batch(images[i:i + batch]))
        logits.append(pooled.data @ head_w + head_b)
    return np.concatenate(logits) if logits else np.zeros((0, len(head_b)))


def full_finetune(encoder_init: dict | None, config, train: LabeledDataset, val: LabeledDataset,
                  recipe: FinetuneRecipe, stream: Stream, log=None, resume: Checkpoint | None = None,
                  stop_step: int | None = None) -> FinetuneResult:
    from dataclasses import replace

    cfg = replace(config, droppath_rate=recipe.droppath)
    classes = len(train.class_names)
    n = len(train)
    total = steps_for(recipe.epochs, n, recipe.batch)
    digest = config_digest({"stage": "finetune", "encoder": cfg.digest_fields(), "recipe": asdict(recipe),
                            "classes": classes, "n": n})
    encoder = ViTEncoder(cfg, stream=stream.child("encoder"))
    if encoder_init is not None:
        restore(encoder.params, encoder_init, "")
    head = init_params({"head.w": (cfg.embed, classes), "head.b": (classes,)}, stream)
    head["head.w"].data[:] = stream.child("head").generator().normal(0, 0.02, (cfg.embed, classes))
    params = {**{"encoder/" + k: v for k, v in encoder.params.items()}, "head/w": head["head.w"],
              "head/b": head["head.b"]}
    state, start = resume_state(resume, "finetune", digest)
    if resume is not None:
        restore(params, resume.tensors, "")
    lr_scale = group_lr_scale(params, cfg.layers, recipe.layer_decay, recipe.min_layer_decay)
    schedule = LrSchedule(recipe.schedule, recipe.lr, recipe.warmup, total)
    aug = AugmentConfig(scale=tuple(recipe.crop_scale), size=cfg.image_size, flip_p=recipe.flip_p)
    targets = label_smooth(one_hot(train.labels, classes), recipe.smoothing)
    data_stream = stream.child("batches")

    def loss_fn(step):
        idx = batch_indices(data_stream, n, recipe.batch, step)
        x = augment_batch(train.images[idx], aug, stream.child("augment", step), idx)
        t = targets[idx]
        if recipe.mixup > 0:
            x, t, _ = mixup_batch(x, t, recipe.mixup, stream.child("mixup", step).generator())
        pooled, _ = encoder(x, training=True, stream=stream.child("droppath", step))
        return T.softmax_cross_entropy_soft(T.linear(pooled, params["head/w"], params["head/b"]), t)

    if not state.ema:
        state.ema = {k: np.array(v.data, copy=True) for k, v in params.items()}
    stop = total if stop_step is None else min(stop_step, total)
    train_loop(params, loss_fn, schedule, recipe.optimizer_spec(), state, start, stop,
               lr_scale=lr_scale, ema_rate=recipe.ema, log=log)
    ckpt = Checkpoint("finetune", digest, snapshot(params, ""), step=stop, opt_state=state.arrays(),
                      opt_t=state.t, rng_state=stream.state(), meta={"total_steps": total})
    eval_cfg = replace(cfg, droppath_rate=0.0)
    raw = ViTEncoder(eval_cfg, params={k[len("encoder/"):]: v for k, v in params.items()
                                       if k.startswith("encoder/")})
    raw_acc = topk_accuracy(classify(raw, params["head/w"].data, params["head/b"].data, val.images), val.labels)
    ema = ViTEncoder(eval_cfg, params={k[len("encoder/"):]: T.Tensor(v) for k, v in state.ema.items()
                                       if k.startswith("encoder/")})
    ema_acc = topk_accuracy(classify(ema, state.ema["head/w"], state.ema["head/b"], val.images), val.labels)
    return FinetuneResult(raw_acc, ema_acc, lr_scale, ckpt)
