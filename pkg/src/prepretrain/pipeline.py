"""Stage chains, grids and the FLOPs/accuracy report."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import default_downstream_classes, default_vocabulary, generate_downstream, generate_weak_dataset
from .flops import stage_flops
from .lit import DEFAULT_TEMPLATES, LitRecipe, TextConfig, TextEncoder, TextTokenizer, AlignmentHeads
from .lit import lit_train, load_templates, zero_shot_accuracy
from .mae import DESK_DECODER, DecoderConfig, MaeRecipe, mae_pretrain
from .metrics import MetricsLog
from .rng import Stream
from .train import params_checksum
from .transfer import (FinetuneRecipe, LowShotRecipe, ProbeRecipe, VptConfig, full_finetune, linear_probe,
                       make_kshot_splits, vpt_adapt)
from .vit import ViTConfig, ViTEncoder, get_config
from .wsp import WspRecipe, build_weak_image_set, wsp_train

STAGE_KINDS = ("mae", "wsp", "lit", "probe", "lowshot", "finetune", "zeroshot")
TRAIN_KINDS = ("mae", "wsp", "finetune")


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class DataConfig:
    records: int = 20000
    noise: float = 0.2
    dup_rate: float = 0.05
    per_class: int = 60
    long_tail: float | None = None
    val_fraction: float = 0.25
    seed: int | None = None   # None: follow the run seed


@dataclass(frozen=True)
class StagePlan:
    kind: str
    epochs: float | None = None
    init: str = "previous"
    overrides: dict = field(default_factory=dict)
    stop_step: int | None = None
    shots: int = 5

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise PipelineError(f"unknown stage kind {self.kind!r}")
        if self.epochs is not None and self.epochs <= 0:
            raise PipelineError("stage epochs must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    name: str = "run"
    encoder: ViTConfig = field(default_factory=lambda: get_config("ViT-Tiny-Desk"))
    decoder: DecoderConfig = DESK_DECODER
    text: dict = field(default_factory=dict)
    data: DataConfig = DataConfig()
    stages: tuple = ()
    templates: str | None = None


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise PipelineError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def parse_config(raw: dict) -> PipelineConfig:
    raw = dict(raw)
    enc = raw.pop("encoder", "ViT-Tiny-Desk")
    if isinstance(enc, str):
        encoder = get_config(enc)
    else:
        enc = dict(enc)
        base = enc.pop("base", None)
        encoder = replace(get_config(base), **enc) if base else _from_dict(ViTConfig, enc)
    decoder = _from_dict(DecoderConfig, raw.pop("decoder", {}))
    data = _from_dict(DataConfig, raw.pop("data", {}))
    stages = tuple(_from_dict(StagePlan, dict(s)) for s in raw.pop("stages", []))
    cfg = _from_dict(PipelineConfig, {**raw, "encoder": encoder, "decoder": decoder, "data": data,
                                      "stages": stages})
    validate_chain(cfg.stages)
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        text = f.read()
    if str(path).endswith(".json"):
        raw = json.loads(text)
    else:
        import yaml

        raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise PipelineError("config must be a mapping")
    cfg = parse_config(raw)
    if cfg.templates and not os.path.isabs(cfg.templates):
        cfg = replace(cfg, templates=os.path.join(os.path.dirname(os.path.abspath(path)), cfg.templates))
    return cfg


def validate_chain(stages):
    have_encoder = False
    have_text = False
    for i, s in enumerate(stages):
        if s.init not in ("previous", "fresh") and not s.init:
            raise PipelineError(f"stage {i}: empty init")
        needs_encoder = s.kind in ("lit", "probe", "lowshot", "zeroshot")
        if needs_encoder and s.init == "fresh" and s.kind != "probe":
            raise PipelineError(f"stage {i}: {s.kind} needs a trained encoder")
        if s.init == "previous" and (needs_encoder or s.kind in ("wsp", "finetune")) and not have_encoder:
            if s.kind in ("wsp", "finetune"):
                pass   # nothing earlier: treated as a fresh start
            else:
                raise PipelineError(f"stage {i}: {s.kind} has no previous encoder to use")
        if s.kind == "zeroshot" and not have_text and s.init == "previous":
            raise PipelineError(f"stage {i}: zeroshot must follow a lit stage")
        if s.kind == "mae" and s.init not in ("previous", "fresh"):
            raise PipelineError(f"stage {i}: mae always starts fresh")
        if s.kind in TRAIN_KINDS:
            have_encoder = True
        if s.kind == "lit":
            have_text = True


def _clean(v):
    return tuple(v) if isinstance(v, list) else v


def build_recipe(kind: str, stage: StagePlan):
    over = {k: _clean(v) for k, v in stage.overrides.items()}
    if stage.epochs is not None:
        over["epochs"] = stage.epochs
    if kind == "mae":
        return replace(MaeRecipe(), **over)
    if kind == "wsp":
        return replace(WspRecipe(), **over)
    if kind == "lit":
        return replace(LitRecipe(), **over)
    if kind == "probe":
        return replace(ProbeRecipe(), **over)
    if kind == "lowshot":
        vpt = {k[4:]: over.pop(k) for k in list(over) if k.startswith("vpt_")}
        base = LowShotRecipe.for_shots(stage.shots)
        return replace(base, **over), VptConfig(**vpt)
    if kind == "finetune":
        lineage = over.pop("lineage", "mae")
        return (FinetuneRecipe.wsp_lineage if lineage == "wsp" else FinetuneRecipe.mae_lineage)(**over)
    return None


# ---------------------------------------------------------------- run

class _Data:
    """Datasets built lazily once per run."""

    def __init__(self, cfg: PipelineConfig, seed: int):
        self.cfg, self.seed = cfg, seed if cfg.data.seed is None else cfg.data.seed
        self._weak = self._down = None

    @property
    def weak(self):
        if self._weak is None:
            d = self.cfg.data
            vocab = default_vocabulary()
            manifest = generate_weak_dataset(d.records, vocab, d.noise, d.dup_rate, self.seed,
                                             self.cfg.encoder.image_size)
            self._weak = build_weak_image_set(manifest, vocab, self.cfg.encoder.image_size)
        return self._weak

    @property
    def downstream(self):
        if self._down is None:
            d = self.cfg.data
            self._down = generate_downstream(d.per_class, default_downstream_classes(), self.seed + 1,
                                             d.long_tail, d.val_fraction, self.cfg.encoder.image_size)
        return self._down


def encoder_tensors_from(ckpt: Checkpoint) -> dict:
    pre = "encoder/"
    out = {k[len(pre):]: v for k, v in ckpt.tensors.items() if k.startswith(pre)}
    if not out:
        raise CheckpointError(f"a {ckpt.kind} checkpoint holds no encoder")
    return out


def make_encoder(config: ViTConfig, tensors: dict | None, stream: Stream) -> ViTEncoder:
    from .train import restore

    enc = ViTEncoder(config, stream=stream)
    if tensors is not None:
        restore(enc.params, tensors, "")
    return enc


@dataclass
class RunResult:
    stages: list
    out: str | None = None

    def last(self, kind: str) -> dict:
        for r in reversed(self.stages):
            if r["kind"] == kind:
                return r
        raise KeyError(kind)


def _stage_file(out, i, kind):
    return os.path.join(out, "checkpoints", f"{i:02d}_{kind}.ckpt") if out else None


def run_pipeline(config: PipelineConfig, seed: int = 0, out: str | None = None, resume: bool = False,
                 resume_ckpt: str | None = None) -> RunResult:
    """Execute stages in order, threading the encoder (and text tower) between them.

    With ``resume``, existing stage checkpoints in ``out`` are reused when complete
    and continued when partial. ``resume_ckpt`` resumes the first training stage.
    """
    validate_chain(config.stages)
    if out:
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    log = MetricsLog(os.path.join(out, "metrics.jsonl") if out else None, run_id=config.name, seed=seed,
                     append=bool(resume or resume_ckpt))
    root = Stream(int(seed))
    data = _Data(config, int(seed))
    encoder_tensors, text_state = None, None
    results = []
    flops_so_far = 0
    pending_resume = load_checkpoint(resume_ckpt) if resume_ckpt else None
    for i, stage in enumerate(config.stages):
        stream = root.child("stage", i, stage.kind)
        path = _stage_file(out, i, stage.kind)
        prior = None
        if resume and path and os.path.exists(path):
            prior = load_checkpoint(path)
        if pending_resume is not None and pending_resume.kind == stage.kind:
            prior, pending_resume = pending_resume, None
        if stage.init not in ("previous", "fresh"):
            if not os.path.exists(stage.init):
                raise PipelineError(f"stage {i}: checkpoint {stage.init} not found")
            init_ckpt = load_checkpoint(stage.init)
            init_tensors = encoder_tensors_from(init_ckpt)
            if stage.kind == "zeroshot":
                text_state = init_ckpt
        elif stage.init == "fresh":
            init_tensors = None
        else:
            init_tensors = encoder_tensors
        slog = log.stage_logger(f"{i:02d}_{stage.kind}")
        rec, ckpt, encoder_out, text_out = _run_stage(config, stage, i, stream, data, init_tensors,
                                                      text_state, slog, prior)
        if stage.kind in ("mae", "wsp", "lit"):
            flops_so_far += rec.get("flops", 0)
        rec["flops_cumulative"] = flops_so_far
        if ckpt is not None and path:
            save_checkpoint(path, ckpt)
        if encoder_out is not None:
            encoder_tensors = encoder_out
        if text_out is not None:
            text_state = text_out
        results.append(rec)
        if rec.get("complete") is False:
            break
    result = RunResult(results, out)
    if out:
        with open(os.path.join(out, "results.json"), "w") as f:
            json.dump({"name": config.name, "seed": seed, "stages": results}, f, indent=2, sort_keys=True)
            f.write("\n")
    return result


def _stage_meta(kind, i, stage, ckpt):
    total = ckpt.meta.get("total_steps") if ckpt is not None else None
    complete = ckpt is None or total is None or ckpt.step >= total
    return {"index": i, "kind": kind, "step": ckpt.step if ckpt is not None else 0, "complete": complete}


def _prior_if_complete(prior):
    return prior is not None and prior.meta.get("total_steps") is not None and prior.step >= prior.meta["total_steps"]


def _run_stage(config, stage, i, stream, data, init_tensors, text_state, log, prior):
    kind = stage.kind
    enc_cfg = config.encoder
    if kind == "mae":
        recipe = build_recipe(kind, stage)
        weak = data.weak
        ckpt, _, _ = (prior, None, None) if _prior_if_complete(prior) else mae_pretrain(
            weak.images, enc_cfg, recipe, stream, config.decoder, log, prior, stage.stop_step)
        rec = _stage_meta(kind, i, stage, ckpt)
        rec["loss"] = _final_loss(log)
        rec["flops"] = stage_flops("mae", enc_cfg, len(weak.images), recipe.epochs, recipe.batch,
                                   mask_ratio=recipe.mask_ratio, decoder=config.decoder).total
        rec["epochs"] = recipe.epochs
        return rec, ckpt, encoder_tensors_from(ckpt), None
    if kind == "wsp":
        recipe = build_recipe(kind, stage)
        weak = data.weak
        ckpt, _, _ = (prior, None, None) if _prior_if_complete(prior) else wsp_train(
            weak, enc_cfg, recipe, stream, init_tensors, log, prior, stage.stop_step)
        rec = _stage_meta(kind, i, stage, ckpt)
        rec["loss"] = _final_loss(log)
        rec["flops"] = stage_flops("wsp", enc_cfg, len(weak.images), recipe.epochs, recipe.batch,
                                   classes=weak.targets.shape[1]).total
        rec["epochs"] = recipe.epochs
        rec["init"] = "checkpoint" if init_tensors is not None else "random"
        return rec, ckpt, encoder_tensors_from(ckpt), None
    if kind == "finetune":
        recipe = build_recipe(kind, stage)
        train, val = data.downstream
        res = full_finetune(init_tensors, enc_cfg, train, val, recipe, stream, log, prior, stage.stop_step)
        rec = _stage_meta(kind, i, stage, res.checkpoint)
        rec.update(raw_accuracy=res.raw_accuracy, ema_accuracy=res.ema_accuracy)
        return rec, res.checkpoint, encoder_tensors_from(res.checkpoint), None

    encoder = make_encoder(enc_cfg, init_tensors, stream.child("encoder"))
    if kind == "probe":
        recipe = build_recipe(kind, stage)
        train, val = data.downstream
        res = linear_probe(encoder, train, val, recipe, stream, log, prior, stage.stop_step)
        rec = _stage_meta(kind, i, stage, res.checkpoint)
        rec.update(accuracy=res.accuracy, frozen_unchanged=res.encoder_checksum_before == res.encoder_checksum_after)
        return rec, res.checkpoint, None, None
    if kind == "lowshot":
        recipe, vpt = build_recipe(kind, stage)
        train, val = data.downstream
        splits = make_kshot_splits(train.labels, stage.shots)
        res = vpt_adapt(encoder, vpt, train, val, splits, recipe, stream, log, prior, stage.stop_step)
        rec = {"index": i, "kind": kind, "step": res.checkpoint.step,
               "complete": not math.isnan(res.mean_accuracy), "shots": stage.shots,
               "accuracy": res.mean_accuracy, "split_accuracies": res.split_accuracies,
               "trainable_params": res.trainable_params,
               "frozen_unchanged": res.backbone_checksum_before == res.backbone_checksum_after}
        return rec, res.checkpoint, None, None
    if kind == "lit":
        recipe = build_recipe(kind, stage)
        weak = data.weak
        tok, tcfg = text_setup(config)
        res = lit_train(weak.images, weak.captions, encoder, tok, tcfg, recipe, stream, log, prior,
                        stage.stop_step)
        rec = _stage_meta(kind, i, stage, res.checkpoint)
        rec["loss"] = _final_loss(log)
        rec["frozen_unchanged"] = res.image_checksum_before == res.image_checksum_after
        rec["flops"] = stage_flops("lit", enc_cfg, len(weak.images), recipe.epochs, recipe.batch,
                                   text=tcfg, embed_dim=recipe.shared_dim).total
        # the lit checkpoint also carries the image tower so zero-shot can start from it alone
        from .train import snapshot
        res.checkpoint.tensors.update(snapshot(encoder.params, "encoder/"))
        return rec, res.checkpoint, None, res.checkpoint
    if kind == "zeroshot":
        if text_state is None:
            raise PipelineError("zeroshot needs a lit checkpoint")
        tok, tcfg = text_setup(config)
        text, heads = text_towers(text_state, tcfg, enc_cfg.embed)
        templates = load_templates(config.templates) if config.templates else list(DEFAULT_TEMPLATES)
        _, val = data.downstream
        acc = zero_shot_accuracy(val, templates, tok, text, encoder, heads)
        c = len(val.class_names)
        chance = 1.0 / c
        sd = math.sqrt(chance * (1 - chance) / max(len(val), 1))
        rec = {"index": i, "kind": kind, "step": 0, "complete": True, "accuracy": acc, "chance": chance, "n": len(val),
               "z_over_chance": (acc - chance) / sd if sd > 0 else 0.0, "templates": len(templates)}
        return rec, None, None, None
    raise PipelineError(f"unknown stage kind {kind!r}")


def text_setup(config: PipelineConfig):
    extra = load_templates(config.templates) if config.templates else list(DEFAULT_TEMPLATES)
    context = int(config.text.get("context", 16))
    tok = TextTokenizer.synthetic(context, extra)
    fields_ = {k: v for k, v in config.text.items() if k != "context"}
    tcfg = TextConfig(context=context, vocab_size=len(tok), **fields_)
    return tok, tcfg


def text_towers(ckpt: Checkpoint, tcfg: TextConfig, image_embed: int):
    from .lit import alignment_shapes, text_shapes
    from . import tensor as T

    def pick(prefix, shapes):
        out = {}
        for name, shape in shapes.items():
            key = prefix + name
            if key not in ckpt.tensors:
                raise CheckpointError(f"lit checkpoint lacks {key}")
            arr = ckpt.tensors[key]
            if tuple(arr.shape) != tuple(shape):
                raise CheckpointError(f"shape mismatch for {key}")
            out[name] = T.Tensor(arr)
        return out

    shared = int(ckpt.meta.get("shared_dim", 32))
    text = TextEncoder(tcfg, params=pick("text/", text_shapes(tcfg)))
    heads = AlignmentHeads(image_embed, tcfg.embed, shared,
                           params=pick("heads/", alignment_shapes(image_embed, tcfg.embed, shared)))
    return text, heads


def _final_loss(log) -> float | None:
    return log.last("loss") if hasattr(log, "last") else None


# ---------------------------------------------------------------- grid + report

GRID_MAE_EPOCHS = (0.0, 0.1, 0.2, 0.4, 1.0)
GRID_WSP_EPOCHS = (0.1, 0.2, 0.4, 1.0)
GRID_COLUMNS = ("seed", "mae_epochs", "wsp_epochs", "accuracy", "flops_mae", "flops_wsp", "flops_total")


def _stage(raw: dict, kind: str) -> StagePlan:
    return replace(StagePlan(kind), **raw) if raw else StagePlan(kind)


def grid_prepretrain_epochs(config: PipelineConfig, seeds=(0, 1, 2), mae_epochs=GRID_MAE_EPOCHS,
                            wsp_epochs=GRID_WSP_EPOCHS, out: str | None = None, progress=None) -> list:
    """Every (mae budget, wsp budget) cell, probed; mae=0 is the plain WSP series.

    The stage settings come from the config's first mae / wsp / probe stages.
    Each MAE run is shared by the cells that start from it, which is identical
    to rerunning it because training is a pure function of (config, seed).
    """
    by_kind = {}
    for s in config.stages:
        by_kind.setdefault(s.kind, s)
    mae_plan = by_kind.get("mae", StagePlan("mae"))
    wsp_plan = by_kind.get("wsp", StagePlan("wsp"))
    probe_plan = by_kind.get("probe", StagePlan("probe"))
    rows = []
    for seed in seeds:
        data = _Data(config, int(seed))
        weak = data.weak
        train, val = data.downstream
        root = Stream(int(seed))
        for me in mae_epochs:
            init, flops_mae = None, 0
            if me > 0:
                plan = replace(mae_plan, epochs=me, stop_step=None)
                recipe = build_recipe("mae", plan)
                ckpt, _, _ = mae_pretrain(weak.images, config.encoder, recipe, root.child("stage", 0, "mae"),
                                          config.decoder)
                init = encoder_tensors_from(ckpt)
                flops_mae = stage_flops("mae", config.encoder, len(weak.images), me, recipe.batch,
                                        mask_ratio=recipe.mask_ratio, decoder=config.decoder).total
            for we in wsp_epochs:
                plan = replace(wsp_plan, epochs=we, stop_step=None)
                recipe = build_recipe("wsp", plan)
                idx = 1 if me > 0 else 0
                ckpt, enc, _ = wsp_train(weak, config.encoder, recipe, root.child("stage", idx, "wsp"), init)
                probe_stream = root.child("stage", idx + 1, "probe")
                acc = linear_probe(enc, train, val, build_recipe("probe", probe_plan), probe_stream).accuracy
                flops_wsp = stage_flops("wsp", config.encoder, len(weak.images), we, recipe.batch,
                                        classes=weak.targets.shape[1]).total
                row = {"seed": int(seed), "mae_epochs": me, "wsp_epochs": we, "accuracy": acc,
                       "flops_mae": flops_mae, "flops_wsp": flops_wsp, "flops_total": flops_mae + flops_wsp}
                rows.append(row)
                if progress:
                    progress(row)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "grid.csv"), "w") as f:
            f.write(rows_csv(rows, GRID_COLUMNS))
        with open(os.path.join(out, "grid_means.csv"), "w") as f:
            f.write(rows_csv(grid_means(rows), ("mae_epochs", "wsp_epochs", "accuracy", "seeds", "flops_total")))
    return rows


def rows_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def grid_means(rows) -> list:
    cells = {}
    for r in rows:
        cells.setdefault((r["mae_epochs"], r["wsp_epochs"]), []).append(r)
    out = []
    for (me, we), rs in sorted(cells.items()):
        out.append({"mae_epochs": me, "wsp_epochs": we, "accuracy": float(np.mean([r["accuracy"] for r in rs])),
                    "seeds": len(rs), "flops_total": rs[0]["flops_total"]})
    return out


def series(rows, mae_epochs: float) -> dict:
    """wsp budget -> mean accuracy for one pre-pretraining budget."""
    return {r["wsp_epochs"]: r["accuracy"] for r in grid_means(rows) if r["mae_epochs"] == mae_epochs}


def interpolate_log_flops(points, flops: float) -> float | None:
    """Accuracy at ``flops`` on a piecewise-linear curve in log-FLOPs; None outside the range."""
    pts = sorted(points)
    xs = [math.log(f) for f, _ in pts]
    x = math.log(flops)
    if not pts or x < xs[0] - 1e-12 or x > xs[-1] + 1e-12:
        return None
    for (x0, (_, a0)), (x1, (_, a1)) in zip(zip(xs, pts), zip(xs[1:], pts[1:])):
        if x0 - 1e-12 <= x <= x1 + 1e-12:
            if x1 == x0:
                return max(a0, a1)
            t = (x - x0) / (x1 - x0)
            return a0 + t * (a1 - a0)
    return pts[-1][1] if abs(x - xs[-1]) <= 1e-12 else None


@dataclass
class EfficiencyReport:
    rows: list          # one per plan: plan, mae_epochs, wsp_epochs, flops_*, accuracy
    matched: list       # ours points inside the WSP FLOPs range, with the interpolated WSP accuracy

    def ours_wins(self) -> bool:
        return bool(self.matched) and all(m["ours_accuracy"] >= m["wsp_accuracy"] for m in self.matched)

    def csv(self) -> str:
        return rows_csv(self.rows, ("plan", "mae_epochs", "wsp_epochs", "flops_mae", "flops_wsp",
                                    "flops_total", "accuracy"))


def efficiency_report(rows, ours_mae_epochs: float = 1.0) -> EfficiencyReport:
    if not rows:
        raise PipelineError("no grid results to report")
    means = grid_means(rows)
    flops_mae = {}
    for r in rows:
        flops_mae[(r["mae_epochs"], r["wsp_epochs"])] = (r["flops_mae"], r["flops_wsp"])
    table = []
    for m in means:
        if m["mae_epochs"] not in (0.0, ours_mae_epochs):
            continue
        fm, fw = flops_mae[(m["mae_epochs"], m["wsp_epochs"])]
        table.append({"plan": "wsp" if m["mae_epochs"] == 0 else "ours", "mae_epochs": m["mae_epochs"],
                      "wsp_epochs": m["wsp_epochs"], "flops_mae": fm, "flops_wsp": fw,
                      "flops_total": fm + fw, "accuracy": m["accuracy"]})
    wsp_curve = [(r["flops_total"], r["accuracy"]) for r in table if r["plan"] == "wsp"]
    matched = []
    for r in table:
        if r["plan"] != "ours":
            continue
        ref = interpolate_log_flops(wsp_curve, r["flops_total"])
        if ref is not None:
            matched.append({"flops_total": r["flops_total"], "wsp_epochs": r["wsp_epochs"],
                            "ours_accuracy": r["accuracy"], "wsp_accuracy": ref})
    return EfficiencyReport(table, matched)
