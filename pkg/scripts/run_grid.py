"""Pre-pretraining budget grid: accuracy per (mae epochs, wsp epochs) plus the matched-FLOPs comparison.

    python scripts/run_grid.py --config configs/grid_desk.yaml --out runs/grid --seeds 0,1,2
"""

import argparse
import json
import os

from prepretrain.pipeline import GRID_WSP_EPOCHS, efficiency_report, grid_prepretrain_epochs, load_config, series


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "..", "configs", "grid_desk.yaml"))
    p.add_argument("--out", default="runs/grid")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--mae-epochs", default="0,1.0")
    args = p.parse_args()

    os.makedirs(args.out, exist_ok=True)
    mae = [float(x) for x in args.mae_epochs.split(",")]
    rows = grid_prepretrain_epochs(load_config(args.config), [int(s) for s in args.seeds.split(",")], mae,
                                   GRID_WSP_EPOCHS, args.out,
                                   progress=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    wsp = series(rows, 0.0)
    for me in mae:
        if me == 0:
            continue
        ours = series(rows, me)
        for e in GRID_WSP_EPOCHS:
            print(f"mae={me} wsp={e}: ours {ours[e]:.4f}  wsp {wsp[e]:.4f}  gap {ours[e] - wsp[e]:+.4f}")
        rep = efficiency_report(rows, me)
        with open(os.path.join(args.out, f"efficiency_mae{me}.csv"), "w") as f:
            f.write(rep.csv())
        for m in rep.matched:
            print(f"  matched flops {m['flops_total']:.3e}: ours {m['ours_accuracy']:.4f} "
                  f"wsp {m['wsp_accuracy']:.4f}")


if __name__ == "__main__":
    main()
