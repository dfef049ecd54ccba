import json
import os

import pytest
import yaml

from prepretrain.cli import main

TINY = {"name": "cli", "encoder": {"layers": 2, "embed": 16, "mlp": 32, "heads": 2, "patch": 4, "image_size": 8},
        "decoder": {"layers": 1, "embed": 8, "heads": 2}, "data": {"records": 32, "per_class": 4}}


def _write(tmp_path, stages, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(dict(TINY, stages=stages)))
    return str(path)


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_pipeline_command(tmp_path, capsys):
    cfg = _write(tmp_path, [{"kind": "mae", "overrides": {"batch": 8}}, {"kind": "wsp", "overrides": {"batch": 8}}])
    out = str(tmp_path / "run")
    assert main(["pipeline", "--config", cfg, "--seed", "1", "--out", out]) == 0
    res = json.loads(capsys.readouterr().out)
    assert [s["kind"] for s in res["stages"]] == ["mae", "wsp"]
    assert os.path.exists(os.path.join(out, "checkpoints", "01_wsp.ckpt"))
    assert main(["pipeline", "--config", cfg, "--seed", "1", "--out", out, "--resume", "auto"]) == 0


def test_single_stage_commands(tmp_path, capsys):
    cfg = _write(tmp_path, [{"kind": "mae", "overrides": {"batch": 8}},
                            {"kind": "probe", "overrides": {"epochs": 1, "batch": 16}}])
    out = str(tmp_path / "mae")
    assert main(["pre-pretrain", "--config", cfg, "--out", out]) == 0
    capsys.readouterr()
    ckpt = os.path.join(out, "checkpoints", "00_mae.ckpt")
    assert main(["probe", "--config", cfg, "--init", ckpt, "--out", str(tmp_path / "probe")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["stage"]["kind"] == "probe" and res["stage"]["frozen_unchanged"]


@pytest.mark.parametrize("argv,kind", [
    (["probe"], "CliError"),
    (["zeroshot"], "CliError"),
    (["pipeline", "--seed", "-1"], "CliError"),
    (["pipeline", "--config", "/nonexistent.yaml"], "FileNotFoundError"),
])
def test_errors_are_one_json_line(argv, kind, capsys):
    assert main(argv) == 1
    err = _error(capsys)
    assert err["error"] == kind and err["message"]


def test_bad_chain_and_missing_checkpoint(tmp_path, capsys):
    bad = _write(tmp_path, [{"kind": "mae"}, {"kind": "zeroshot"}], "bad.yaml")
    assert main(["pipeline", "--config", bad]) == 1
    assert _error(capsys)["error"] == "PipelineError"
    cfg = _write(tmp_path, [])
    assert main(["finetune", "--config", cfg, "--init", str(tmp_path / "gone.ckpt")]) == 1
    assert "not found" in _error(capsys)["message"]


def test_flops_command(tmp_path, capsys):
    assert main(["flops", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# flops")
    assert "ViT-6.5B" in text and "ViT-Tiny-Desk" in text
    assert open(tmp_path / "flops.csv").read() == text


def test_grid_command(tmp_path, capsys):
    cfg = _write(tmp_path, [{"kind": "mae", "overrides": {"batch": 16}}, {"kind": "wsp", "overrides": {"batch": 16}},
                            {"kind": "probe", "overrides": {"epochs": 1, "batch": 32}}])
    assert main(["grid", "--config", cfg, "--seeds", "0", "--mae-epochs", "0,1", "--wsp-epochs", "0.5,1",
                 "--out", str(tmp_path / "g")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert len(res["cells"]) == 4 and "matched_flops" in res
    assert os.path.exists(tmp_path / "g" / "efficiency.csv")
