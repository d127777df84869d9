"""Tests for the command-line interface."""

import json
from pathlib import Path

import pytest
import torch
import yaml

from facetex.cli import build_parser, main

torch.set_num_threads(1)

SUBCOMMANDS = [
    "gen-data",
    "train",
    "sample",
    "repose",
    "interpolate",
    "eval-consistency",
    "eval-ffd",
    "ablate",
]


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    """A study YAML plus generated data and a 2-step trained run."""
    root = tmp_path_factory.mktemp("cli_study")
    config = {
        "dataset": {
            "dataset_seed": 3,
            "n_identities": 4,
            "samples_per_identity": 6,
            "image_size": 64,
            "texture_size": 64,
            "test_fraction": 0.25,
            "n_vertices": 144,
        },
        "experiment": {
            "dataset_dir": str(root / "data"),
            "run_dir": str(root / "run"),
            "steps": 2,
            "batch_size": 2,
            "log_every": 1,
            "seed": 0,
        },
    }
    path = root / "study.yaml"
    path.write_text(yaml.safe_dump(config))
    assert main(["gen-data", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path)]) == 0
    return path, root


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_every_subcommand_accepts_config_and_seed(name):
    args = build_parser().parse_args(
        [name, "--config", "study.yaml", "--seed", "7"]
    )
    assert args.config == "study.yaml"
    assert args.seed == 7
    assert callable(args.func)


def test_command_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_gen_data_and_train_artifacts(study):
    path, root = study
    assert (root / "data" / "manifest.json").exists()
    assert (root / "run" / "checkpoint_final.pt").exists()
    assert (root / "run" / "train_log.csv").exists()
    manifest = json.loads((root / "run" / "run.json").read_text())
    assert manifest["final_step"] == 2


def test_train_debug_raster_flag(study, tmp_path):
    path, root = study
    config = yaml.safe_load(path.read_text())
    config["experiment"]["run_dir"] = str(tmp_path / "dbg")
    config["experiment"]["steps"] = 1
    dbg_path = tmp_path / "study.yaml"
    dbg_path.write_text(yaml.safe_dump(config))
    assert main(["train", "--config", str(dbg_path), "--debug-raster"]) == 0
    for name in ("coverage", "uv_u", "uv_v"):
        assert (tmp_path / "dbg" / f"debug_raster_{name}.png").exists()


def test_sample_writes_pngs(study, tmp_path):
    path, _ = study
    out = tmp_path / "samples"
    assert main(
        ["sample", "--config", str(path), "--n", "2", "--out", str(out)]
    ) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "sample_000.png", "sample_001.png",
    ]


def test_repose_writes_strip(study, tmp_path):
    path, _ = study
    out = tmp_path / "strip.png"
    assert main(
        ["repose", "--config", str(path), "--angles=-60,0,60",
         "--out", str(out)]
    ) == 0
    from PIL import Image

    with Image.open(out) as image:
        assert image.size == (3 * 64, 64)


def test_interpolate_writes_strip(study, tmp_path):
    path, _ = study
    out = tmp_path / "interp.png"
    assert main(
        ["interpolate", "--config", str(path), "--steps", "3",
         "--out", str(out)]
    ) == 0
    from PIL import Image

    with Image.open(out) as image:
        assert image.size == (3 * 64, 64)


def test_missing_checkpoint_is_reported(study, tmp_path):
    path, _ = study
    config = yaml.safe_load(path.read_text())
    config["experiment"]["run_dir"] = str(tmp_path / "empty")
    bad = tmp_path / "study.yaml"
    bad.write_text(yaml.safe_dump(config))
    with pytest.raises(SystemExit, match="checkpoint"):
        main(["sample", "--config", str(bad)])


def test_config_without_experiment_section_is_rejected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"dataset": {}}))
    with pytest.raises(SystemExit, match="experiment"):
        main(["train", "--config", str(bad)])


def test_seed_override_changes_run(study, tmp_path):
    path, root = study
    config = yaml.safe_load(path.read_text())
    config["experiment"]["run_dir"] = str(tmp_path / "seeded")
    config["experiment"]["steps"] = 1
    seeded = tmp_path / "study.yaml"
    seeded.write_text(yaml.safe_dump(config))
    assert main(["train", "--config", str(seeded), "--seed", "5"]) == 0
    saved = yaml.safe_load(
        (tmp_path / "seeded" / "config.yaml").read_text()
    )
    assert saved["seed"] == 5
