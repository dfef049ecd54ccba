"""Command line entry point: ``prepretrain <subcommand> --config ... --seed ... --out ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .pipeline import (GRID_MAE_EPOCHS, GRID_WSP_EPOCHS, PipelineConfig, StagePlan, efficiency_report,
                       grid_means, grid_prepretrain_epochs, load_config, run_pipeline, validate_chain)

SINGLE_STAGE = {
    "pre-pretrain": "mae",
    "pretrain": "wsp",
    "lit": "lit",
    "probe": "probe",
    "lowshot": "lowshot",
    "finetune": "finetune",
    "zeroshot": "zeroshot",
}


class CliError(Exception):
    pass


def _config(args) -> PipelineConfig:
    if args.config is None:
        return PipelineConfig()
    return load_config(args.config)


def single_stage_config(cfg: PipelineConfig, kind: str, init: str | None) -> PipelineConfig:
    """Keep the config's first stage of ``kind`` (or a default one) as a one-stage plan."""
    stage = next((s for s in cfg.stages if s.kind == kind), StagePlan(kind))
    if init is not None:
        stage = replace(stage, init=init)
    elif stage.init == "previous":
        if kind in ("mae", "wsp", "finetune"):
            stage = replace(stage, init="fresh")
        elif kind != "zeroshot":
            raise CliError(f"{kind} needs --init <checkpoint> (or an init path in the config)")
    if kind == "zeroshot" and stage.init in ("previous", "fresh"):
        raise CliError("zeroshot needs --init <lit checkpoint>")
    plan = (stage,)
    validate_chain(plan)
    return replace(cfg, stages=plan)


def cmd_stage(args, kind):
    cfg = single_stage_config(_config(args), kind, args.init)
    res = run_pipeline(cfg, args.seed, args.out, resume_ckpt=args.resume)
    return {"stage": res.stages[-1], "out": args.out}


def cmd_pipeline(args):
    cfg = _config(args)
    if not cfg.stages:
        raise CliError("the config lists no stages")
    res = run_pipeline(cfg, args.seed, args.out, resume=args.resume is not None and args.resume == "auto",
                       resume_ckpt=None if args.resume in (None, "auto") else args.resume)
    return {"stages": res.stages, "out": args.out}


def cmd_grid(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    mae = [float(x) for x in args.mae_epochs.split(",")] if args.mae_epochs else list(GRID_MAE_EPOCHS)
    wsp = [float(x) for x in args.wsp_epochs.split(",")] if args.wsp_epochs else list(GRID_WSP_EPOCHS)

    def progress(row):
        print(json.dumps(row, sort_keys=True), file=sys.stderr, flush=True)

    rows = grid_prepretrain_epochs(cfg, seeds, mae, wsp, args.out, progress)
    out = {"cells": grid_means(rows)}
    if 0.0 in mae and max(mae) > 0:
        rep = efficiency_report(rows, max(mae))
        out["matched_flops"] = rep.matched
        if args.out:
            with open(os.path.join(args.out, "efficiency.csv"), "w") as f:
                f.write(rep.csv())
    return out


def cmd_flops(args):
    from .flops import flops_csv, stage_flops
    from .pipeline import build_recipe, text_setup
    from .vit import DESK_CONFIGS, PAPER_CONFIGS, get_config

    rows = []
    if args.config:
        cfg = _config(args)
        n = cfg.data.records
        for s in cfg.stages:
            if s.kind not in ("mae", "wsp", "lit"):
                continue
            r = build_recipe(s.kind, s)
            kw = {}
            if s.kind == "mae":
                kw = {"mask_ratio": r.mask_ratio, "decoder": cfg.decoder}
            elif s.kind == "lit":
                kw = {"text": text_setup(cfg)[1], "embed_dim": r.shared_dim}
            rows.append(stage_flops(s.kind, cfg.encoder, n, r.epochs, r.batch, **kw))
    else:
        for name in tuple(PAPER_CONFIGS) + tuple(DESK_CONFIGS):
            c = get_config(name)
            rows.append(stage_flops("mae", c, 1, 1.0, 1))
            rows.append(stage_flops("wsp", c, 1, 1.0, 1))
    text = flops_csv(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "flops.csv"), "w") as f:
            f.write(text)
    sys.stdout.write(text)
    return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prepretrain")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON config")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--resume", help="checkpoint to resume from ('auto' for pipeline: reuse --out)")

    for name in SINGLE_STAGE:
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--init", help="encoder checkpoint to start from")
    for name in ("pipeline", "flops"):
        common(sub.add_parser(name))
    sp = sub.add_parser("grid")
    common(sp)
    sp.add_argument("--seeds", help="comma separated, e.g. 0,1,2")
    sp.add_argument("--mae-epochs")
    sp.add_argument("--wsp-epochs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise CliError("seed must be an unsigned 64-bit integer")
        if args.command in SINGLE_STAGE:
            result = cmd_stage(args, SINGLE_STAGE[args.command])
        elif args.command == "pipeline":
            result = cmd_pipeline(args)
        elif args.command == "grid":
            result = cmd_grid(args)
        else:
            result = cmd_flops(args)
        if result is not None:
            print(json.dumps(result, sort_keys=True, default=str))
        return 0
    except Exception as err:   # one machine-readable line, whatever failed
        msg = json.dumps({"error": type(err).__name__, "message": str(err).replace("\n", " ")})
        print(msg, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
