"""Per-sample training-step FLOPs for every named config, MAE (ratio 0.75, desk decoder) vs WSP."""

from prepretrain.flops import mae_step_report, wsp_step_report
from prepretrain.mae import DESK_DECODER
from prepretrain.vit import NAMED_CONFIGS

print(f"{'config':16s} {'fwd GFLOPs':>11s} {'mae step':>12s} {'wsp step':>12s} {'ratio':>6s}")
for name, cfg in NAMED_CONFIGS.items():
    mae = mae_step_report(cfg, DESK_DECODER, 0.75).step
    wsp = wsp_step_report(cfg, 16)
    print(f"{name:16s} {wsp.forward / 1e9:11.3f} {mae:12.4g} {wsp.step:12.4g} {mae / wsp.step:6.3f}")
