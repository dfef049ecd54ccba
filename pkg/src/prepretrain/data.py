"""Procedural weakly-labeled images, downstream sets and augmentations.

Every record is a pure function of ``(seed, index)``: the spec is drawn from
a per-index stream, the pixels from the spec alone.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import Stream

SHAPES = ("circle", "square", "triangle", "cross")
FILLS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.15, 0.85, 0.90),
    "white": (0.96, 0.96, 0.96),
    "orange": (0.98, 0.55, 0.10),
}
BACKGROUNDS = {
    "black": (0.05, 0.05, 0.05),
    "gray": (0.45, 0.45, 0.45),
    "navy": (0.08, 0.10, 0.35),
    "olive": (0.35, 0.35, 0.08),
}

# hashtag synonyms per class; the many-to-one map stands in for synset mapping
SYNONYMS = {
    "circle": ("circle", "round", "disc"),
    "square": ("square", "box", "block"),
    "triangle": ("triangle", "pyramid", "wedge"),
    "cross": ("cross", "plus", "xmark"),
    "red": ("red", "crimson", "scarlet"),
    "green": ("green", "emerald", "lime"),
    "blue": ("blue", "azure", "cobalt"),
    "yellow": ("yellow", "lemon", "golden"),
    "magenta": ("magenta", "pink", "fuchsia"),
    "cyan": ("cyan", "aqua", "teal"),
    "white": ("white", "snow", "ivory"),
    "orange": ("orange", "tangerine", "amber"),
    "black": ("black", "dark", "night"),
    "gray": ("gray", "grey", "silver"),
    "navy": ("navy", "midnight", "ocean"),
    "olive": ("olive", "khaki", "moss"),
}
JUNK_TAGS = ("love", "instagood", "photooftheday", "tbt", "cute", "follow", "happy", "art", "nofilter", "mood")
PROSE = (
    "look at this {fill} {shape}",
    "a {fill} {shape} on {background}",
    "my new {shape} painting",
    "{fill} vibes today",
    "weekend project",
    "just a {shape} on a {background} wall",
    "shapes and colors",
)

# per-pixel sensor noise std; normalized MAE targets turn it into pure noise on flat patches
PIXEL_NOISE = 0.0
# object placement jitter, in units of the image side
CENTER_RANGE = (0.3, 0.7)
# kept narrow enough that the desk ViT learns shape within a few hundred steps
SCALE_RANGE = (0.22, 0.32)
ANGLE_RANGE = (-0.3, 0.3)
MEAN = (0.5, 0.5, 0.5)
STD = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class ImageSpec:
    shape: str
    fill: str
    background: str
    cx: float
    cy: float
    scale: float
    angle: float
    seed: int

    def attributes(self) -> tuple:
        return (self.shape, self.fill, self.background)


@dataclass(frozen=True)
class LabelVocabulary:
    classes: tuple
    hashtag_map: dict

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if not self.classes:
            raise ValueError("empty vocabulary")
        for tag, cls in self.hashtag_map.items():
            if cls not in self.classes:
                raise ValueError(f"hashtag {tag!r} maps to unknown class {cls!r}")

    @property
    def index(self) -> dict:
        return {c: i for i, c in enumerate(self.classes)}

    def __len__(self):
        return len(self.classes)


def default_vocabulary() -> LabelVocabulary:
    classes = tuple(SHAPES) + tuple(FILLS) + tuple(BACKGROUNDS)
    mapping = {tag: cls for cls in classes for tag in SYNONYMS[cls]}
    return LabelVocabulary(classes, mapping)


@dataclass
class WeakRecord:
    id: int
    spec: ImageSpec
    caption: str
    labels: list
    hash: str
    merged_ids: list = field(default_factory=list)

    def to_json(self) -> str:
        d = {"id": self.id, "spec": asdict(self.spec), "caption": self.caption,
             "labels": list(self.labels), "hash": self.hash}
        if self.merged_ids:
            d["merged_ids"] = list(self.merged_ids)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "WeakRecord":
        d = json.loads(line)
        return cls(d["id"], ImageSpec(**d["spec"]), d["caption"], list(d["labels"]), d["hash"],
                   list(d.get("merged_ids", [])))


# ---------------------------------------------------------------- rendering

def render(spec: ImageSpec, size: int = 32, supersample: int = 2) -> np.ndarray:
    """uint8 [3, size, size] image; a pure function of the spec."""
    s = size * supersample
    coords = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - spec.cx, yy - spec.cy
    c, si = math.cos(spec.angle), math.sin(spec.angle)
    u, v = c * dx + si * dy, -si * dx + c * dy
    r = spec.scale
    if spec.shape == "circle":
        mask = u * u + v * v <= r * r
    elif spec.shape == "square":
        mask = (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    elif spec.shape == "triangle":
        # upward triangle inscribed in radius r
        mask = (v <= r * 0.5) & (v >= -r + 1.732 * np.abs(u))
    elif spec.shape == "cross":
        arm = r * 0.32
        mask = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    else:
        raise ValueError(f"unknown shape {spec.shape!r}")
    mask = mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    fg = np.asarray(FILLS[spec.fill])[:, None, None]
    bg = np.asarray(BACKGROUNDS[spec.background])[:, None, None]
    img = bg + (fg - bg) * mask[None]
    noise = np.random.Generator(np.random.PCG64(spec.seed)).normal(0.0, PIXEL_NOISE, size=img.shape)
    return np.clip(np.round((img + noise) * 255.0), 0, 255).astype(np.uint8)


def content_hash(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels).tobytes()).hexdigest()


def random_spec(rng: np.random.Generator, shape=None, fill=None, background=None) -> ImageSpec:
    return ImageSpec(
        shape=shape or SHAPES[rng.integers(len(SHAPES))],
        fill=fill or tuple(FILLS)[rng.integers(len(FILLS))],
        background=background or tuple(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))],
        cx=float(rng.uniform(*CENTER_RANGE)),
        cy=float(rng.uniform(*CENTER_RANGE)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        angle=float(rng.uniform(*ANGLE_RANGE)),
        seed=int(rng.integers(0, 2**62)),
    )


# ---------------------------------------------------------------- weak dataset

def planted_tags(spec: ImageSpec, rng: np.random.Generator) -> list:
    return [SYNONYMS[a][rng.integers(len(SYNONYMS[a]))] for a in spec.attributes()]


def synthesize_caption(spec: ImageSpec, vocab: LabelVocabulary, noise_rate: float,
                       rng: np.random.Generator) -> tuple:
    """Returns (caption, every tag written into it, in caption order).

    Distractor class tags appear at ``noise_rate``; junk tags map to no class.
    """
    tags = planted_tags(spec, rng)
    if noise_rate > 0 and rng.random() < noise_rate:
        truth = set(spec.attributes())
        wrong = [c for c in vocab.classes if c not in truth]
        cls = wrong[rng.integers(len(wrong))]
        syn = [t for t, c in vocab.hashtag_map.items() if c == cls]
        tags.append(syn[rng.integers(len(syn))])
    junk = [JUNK_TAGS[i] for i in rng.choice(len(JUNK_TAGS), size=rng.integers(0, 3), replace=False)]
    all_tags = tags + junk
    order = rng.permutation(len(all_tags))
    prose = PROSE[rng.integers(len(PROSE))].format(fill=spec.fill, shape=spec.shape,
                                                   background=spec.background)
    written = [all_tags[i] for i in order]
    caption = prose + " " + " ".join("#" + t for t in written)
    return caption, written


def _record_spec(seed: int, i: int, dup_rate: float) -> ImageSpec:
    rng = Stream(seed).child("weak", "spec", i).generator()
    if i > 0 and dup_rate > 0 and rng.random() < dup_rate:
        return _record_spec(seed, int(rng.integers(0, i)), dup_rate)
    return random_spec(rng)


def make_record(i: int, seed: int, vocab: LabelVocabulary, noise_rate: float, dup_rate: float,
                image_size: int = 32) -> WeakRecord:
    from .wsp import extract_hashtags, labels_from_tags

    spec = _record_spec(seed, i, dup_rate)
    rng = Stream(seed).child("weak", "caption", i).generator()
    caption, _ = synthesize_caption(spec, vocab, noise_rate, rng)
    labels = labels_from_tags(extract_hashtags(caption), vocab)
    return WeakRecord(i, spec, caption, labels, content_hash(render(spec, image_size)))


def generate_weak_dataset(n: int, vocab: LabelVocabulary, noise_rate: float, dup_rate: float,
                          seed: int, image_size: int = 32) -> list:
    if vocab is None or len(vocab) == 0:
        raise ValueError("empty vocabulary")
    if not (0 <= noise_rate < 1 and 0 <= dup_rate < 1):
        raise ValueError("noise_rate and dup_rate must lie in [0, 1)")
    return [make_record(i, seed, vocab, noise_rate, dup_rate, image_size) for i in range(n)]


def dedup_merge(manifest: list) -> list:
    """Merge records with equal content hashes; labels become the union."""
    groups: dict = {}
    order = []
    for rec in manifest:
        if rec.hash not in groups:
            groups[rec.hash] = []
            order.append(rec.hash)
        groups[rec.hash].append(rec)
    out = []
    for h in order:
        recs = groups[h]
        first = recs[0]
        if len(recs) == 1:
            out.append(first)
            continue
        labels = list(first.labels)
        for r in recs[1:]:
            labels.extend(lab for lab in r.labels if lab not in labels)
        out.append(WeakRecord(first.id, first.spec, first.caption, labels, h,
                              [r.id for r in recs[1:]]))
    return out


def write_manifest(path, manifest: list):
    with open(path, "w") as f:
        for rec in manifest:
            f.write(rec.to_json() + "\n")


def read_manifest(path) -> list:
    with open(path) as f:
        return [WeakRecord.from_json(line) for line in f if line.strip()]


def render_all(specs, image_size: int = 32) -> np.ndarray:
    out = np.empty((len(specs), 3, image_size, image_size), dtype=np.uint8)
    for i, spec in enumerate(specs):
        out[i] = render(spec, image_size)
    return out


# ---------------------------------------------------------------- downstream

@dataclass
class LabeledDataset:
    images: np.ndarray      # uint8 [N, 3, H, W]
    labels: np.ndarray      # int64 [N]
    ids: np.ndarray         # int64 [N]
    class_names: list
    specs: list

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.ids[idx],
                              self.class_names, [self.specs[i] for i in idx])


def default_downstream_classes() -> list:
    return [(fill, shape) for shape in SHAPES for fill in FILLS]


def generate_downstream(n_per_class: int, classes: list, seed: int, long_tail_ratio: float | None = None,
                        val_fraction: float = 0.25, image_size: int = 32) -> tuple:
    """Clean single-label (fill, shape) classes; returns (train, val)."""
    sizes = []
    for k in range(len(classes)):
        if long_tail_ratio is None:
            sizes.append(n_per_class)
        else:
            sizes.append(max(1, int(round(n_per_class * long_tail_ratio ** k))))
    specs, labels, ids, is_val = [], [], [], []
    uid = 0
    for c, ((fill, shape), size) in enumerate(zip(classes, sizes)):
        n_val = int(round(size * val_fraction)) if size > 1 else 0
        split = Stream(seed).child("downstream", "split", c).generator().permutation(size)
        val_members = set(split[:n_val].tolist())
        for j in range(size):
            rng = Stream(seed).child("downstream", c, j).generator()
            specs.append(random_spec(rng, shape=shape, fill=fill))
            labels.append(c)
            ids.append(uid)
            is_val.append(j in val_members)
            uid += 1
    full = LabeledDataset(render_all(specs, image_size), np.asarray(labels, np.int64),
                          np.asarray(ids, np.int64), [f"{f} {s}" for f, s in classes], specs)
    is_val = np.asarray(is_val)
    return full.subset(np.flatnonzero(~is_val)), full.subset(np.flatnonzero(is_val))


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    size: int = 32
    flip_p: float = 0.5
    mean: tuple = MEAN
    std: tuple = STD
    crop: bool = True

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("output size must be positive")
        if not (0 < self.scale[0] <= self.scale[1] <= 1.0) or not (0 < self.ratio[0] <= self.ratio[1]):
            raise ValueError("invalid crop scale/ratio ranges")


def augment_preset(stage: str, size: int = 32) -> AugmentConfig:
    scales = {"mae": (0.2, 1.0), "wsp": (0.08, 1.0), "lit": (0.9, 1.0), "finetune": (0.08, 1.0),
              "lowshot": (0.08, 1.0)}
    return AugmentConfig(scale=scales[stage], size=size)


def sample_crop_box(height: int, width: int, scale, ratio, rng: np.random.Generator) -> tuple:
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            i = int(rng.integers(0, height - h + 1))
            j = int(rng.integers(0, width - w + 1))
            return i, j, h, w
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _cubic(x, a=-0.5):
    x = np.abs(x)
    return np.where(x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1,
                    np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0))


@functools.lru_cache(maxsize=256)
def bicubic_matrix(in_size: int, out_size: int) -> np.ndarray:
    """[out, in] interpolation weights (half-pixel centers, clamped edges)."""
    src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    base = np.floor(src).astype(int)
    W = np.zeros((out_size, in_size))
    for k in range(-1, 3):
        idx = base + k
        w = _cubic(src - idx)
        np.add.at(W, (np.arange(out_size), np.clip(idx, 0, in_size - 1)), w)
    W.flags.writeable = False
    return W


def resize_bicubic(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = image.shape
    Wy, Wx = bicubic_matrix(h, out_h), bicubic_matrix(w, out_w)
    return (Wy @ image) @ Wx.T


def random_resized_crop(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """float image in [0, 1] -> cropped, bicubic-resized image clipped to [0, 1]."""
    _, h, w = image.shape
    i, j, ch, cw = sample_crop_box(h, w, config.scale, config.ratio, rng)
    out = resize_bicubic(image[:, i:i + ch, j:j + cw], config.size, config.size)
    return np.clip(out, 0.0, 1.0)


def horizontal_flip(image: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError("flip probability must lie in [0, 1]")
    if rng.random() < p:
        return image[..., ::-1].copy()
    return image


def normalize(images: np.ndarray, mean=MEAN, std=STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return ((images - m) / s).astype(np.float32)


def to_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / 255.0


def augment_batch(images: np.ndarray, config: AugmentConfig | None, stream: Stream, keys) -> np.ndarray:
    """uint8 batch -> normalized float32 batch; sample k uses substream ``keys[k]``."""
    x = to_float(images)
    if config is None:
        return normalize(x)
    out = np.empty((len(x), x.shape[1], config.size, config.size), dtype=np.float32)
    for k, key in enumerate(keys):
        rng = stream.child(int(key)).generator()
        img = random_resized_crop(x[k], config, rng) if config.crop else x[k]
        out[k] = horizontal_flip(img, config.flip_p, rng)
    return normalize(out, config.mean, config.std)


def eval_batch(images: np.ndarray) -> np.ndarray:
    return normalize(to_float(images))
