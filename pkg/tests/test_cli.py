from __future__ import annotations

import json

import pytest

from mcsg.cli import build_parser, main

TINY = [
    "resolution=32", "fid_dim=8", "synthetic.slices_per_patient=2", "gan.total_steps=2", "gan.batch_size=4",
    "gan.latent_dim=16", "gan.channel_max=16", "unet.base_width=4", "unet.depth=2", "unet.epochs=1",
    "unet.steps_per_epoch=1", "unet.batch_size=4",
]


def run(capsys, *argv, out, status=0):
    args = [*argv, "--out", str(out)]
    for item in TINY:
        args += ["--set", item]
    assert main(args) == status
    captured = capsys.readouterr()
    return captured.out if status == 0 else captured.err


def test_parser_rejects_bad_choices():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["generate", "--method", "BL", "--count", "20"])
    with pytest.raises(SystemExit):
        parser.parse_args(["train-seg", "--count", "30"])
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_show_config_applies_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 4\nunet.epochs = 9\n")
    out = run(capsys, "show-config", "--config", str(cfg), "--seed", "5", out=tmp_path)
    lines = out.splitlines()
    assert "seed = 5" in lines and "unet.epochs = 1" in lines and "resolution = 32" in lines


def test_pipeline_subcommands(tmp_path, capsys):
    out = run(capsys, "prepare-data", out=tmp_path)
    assert "split.json" in out
    case = tmp_path / "SYNTHETIC-20"
    assert (case / "data" / "dataset.json").exists()

    out = run(capsys, "train-gan", "--variant", "MSG", out=tmp_path)
    assert out.strip().endswith(".ckpt") and list((case / "gan").glob("MSG-*.ckpt"))

    out = run(capsys, "generate", "--method", "MCSG", "--count", "20", out=tmp_path)
    assert "from 20 patients" in out and "FID (random_projection)" in out

    out = run(capsys, "train-seg", "--method", "MCSG", "--count", "20", out=tmp_path)
    assert out.startswith("MC-SG + w.o. + 20: mean DSC")
    out = run(capsys, "train-seg", out=tmp_path)
    assert out.startswith("BL + w.o.: mean DSC")

    report = tmp_path / "bl.json"
    out = run(capsys, "evaluate", "--model", str(case / "models" / "bl_w_o.ckpt"), "--report", str(report), out=tmp_path)
    stored = json.loads((case / "results.jsonl").read_text().splitlines()[-1])
    assert json.loads(out)["mean_dsc"] == stored["mean_dsc"]
    assert json.loads(report.read_text())["mean_dsc"] == stored["mean_dsc"]

    out = run(capsys, "plot", out=tmp_path)
    assert "plot.csv" in out and (case / "plot.png").exists()


def test_stats_on_incomplete_grid_fails(tmp_path, capsys):
    run(capsys, "train-seg", out=tmp_path)
    assert "incomplete grid" in run(capsys, "stats", out=tmp_path, status=2)


def test_missing_dataset_exit_status(tmp_path, capsys):
    err = run(capsys, "prepare-data", "--set", f"dataset={tmp_path / 'none'}", out=tmp_path, status=2)
    assert "missing dataset" in err
