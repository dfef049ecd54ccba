"""Run a stage chain from a config, e.g.

    python scripts/run_pipeline.py configs/desk_pipeline.yaml runs/desk 0
    python scripts/run_pipeline.py configs/lit_desk.yaml runs/lit 0
"""

import json
import sys

from prepretrain.pipeline import load_config, run_pipeline

config, out = sys.argv[1], sys.argv[2]
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
res = run_pipeline(load_config(config), seed, out, resume=True)
for rec in res.stages:
    print(json.dumps(rec, sort_keys=True, default=str))
