"""Command-line interface for the full study workflow.

One YAML file describes a study with two sections::

    dataset:          # knobs of the synthetic data generator
      n_identities: 50
      samples_per_identity: 40
      ...
    experiment:       # training/evaluation knobs
      dataset_dir: runs/fast/data
      run_dir: runs/fast
      ...

``gen-data`` materializes the dataset into ``experiment.dataset_dir``; the
other subcommands train on it and read/write artifacts under
``experiment.run_dir``.  ``--seed`` overrides the config's seed (the
dataset seed for ``gen-data``, the experiment seed otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import pipeline
from .geometry import yaw_pitch_pose
from .metrics import (
    Embedder,
    EmbedderConfig,
    consistency_table,
    save_consistency_report,
    train_embedder,
)
from .rasterizer import dump_debug_images, project, rasterize
from .geometry import compute_mesh, pose_mesh
from .synthdata import DatasetConfig, DatasetStore, generate_dataset

logger = logging.getLogger(__name__)


def _load_study(path):
    with open(path) as fp:
        raw = yaml.safe_load(fp)
    if not isinstance(raw, dict) or "experiment" not in raw:
        raise SystemExit(
            f"{path}: expected a mapping with an 'experiment' section"
        )
    return raw.get("dataset", {}) or {}, raw["experiment"]


def _experiment_config(args, **overrides) -> pipeline.ExperimentConfig:
    _, experiment = _load_study(args.config)
    experiment.update(overrides)
    if args.seed is not None:
        experiment["seed"] = args.seed
    return pipeline.ExperimentConfig(**experiment)


def _load_state(args) -> pipeline.TrainState:
    config = _experiment_config(args)
    checkpoint = args.checkpoint or (
        Path(config.run_dir) / "checkpoint_final.pt"
    )
    if not Path(checkpoint).exists():
        raise SystemExit(
            f"no checkpoint at {checkpoint}; run `facetex train` first"
        )
    return pipeline.load_checkpoint(checkpoint, dataset_dir=config.dataset_dir)


def _get_embedder(args, store: DatasetStore, run_dir: Path) -> Embedder:
    """Load the evaluation embedder, training and caching it if needed."""
    path = Path(args.embedder) if args.embedder else run_dir / "embedder.pt"
    if path.exists():
        embedder = Embedder.load(path)
        print(f"loaded embedder from {path} "
              f"(gate accuracy {embedder.gate_accuracy:.3f})")
        return embedder
    print("training identity embedder (one-time, cached for later runs)")
    embedder = train_embedder(
        store, EmbedderConfig(seed=args.seed if args.seed is not None else 0)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    embedder.save(path)
    print(f"embedder gate accuracy {embedder.gate_accuracy:.3f} "
          f"(reliable={embedder.reliable}); saved to {path}")
    return embedder


def _save_png(image_chw: np.ndarray, path) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pipeline.export_image(image_chw)).save(path)


def _parse_angles(text: str) -> list:
    return [float(a) for a in text.split(",") if a.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    dataset_raw, experiment = _load_study(args.config)
    if args.seed is not None:
        dataset_raw["dataset_seed"] = args.seed
    config = DatasetConfig(out_dir=experiment["dataset_dir"], **dataset_raw)
    generate_dataset(config)
    store = DatasetStore(config.out_dir)
    print(
        f"wrote {len(store)} samples "
        f"({len(store.train_ids)} train / {len(store.test_ids)} test "
        f"identities) to {config.out_dir}"
    )
    return 0


def _dump_raster_debug(state: pipeline.TrainState, run_dir: Path) -> None:
    sample = state.store.load_sample(0)
    vertices = pose_mesh(
        compute_mesh(state.store.model, sample.alpha, sample.beta), sample.pose
    )
    coords, depth = project(vertices, state.camera)
    raster = rasterize(
        coords, depth, state.store.model.triangles,
        state.store.model.uv_coords, state.camera.image_size,
    )
    paths = dump_debug_images(raster, str(run_dir / "debug_raster"))
    print("wrote raster debug images: " + ", ".join(paths))


def cmd_train(args) -> int:
    config = _experiment_config(args)
    if args.debug_raster:
        Path(config.run_dir).mkdir(parents=True, exist_ok=True)
        _dump_raster_debug(pipeline.init_state(config), Path(config.run_dir))
    state, records = pipeline.train(config)
    finished = [r for r in records if not r.aborted]
    if finished:
        last = finished[-1]
        print(
            f"step {last.step}: g_total {last.g_total:.4f} "
            f"d_total {last.d_total:.4f} l2 {last.components.l2:.4f}"
        )
    if state.incidents:
        print(f"{len(state.incidents)} aborted steps; see run.json")
    print(f"run artifacts in {config.run_dir}")
    return 0


def cmd_sample(args) -> int:
    state = _load_state(args)
    out_dir = Path(args.out or Path(state.config.run_dir) / "samples")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    model = state.store.model
    dataset_config = state.store.manifest["config"]
    for i in range(args.n):
        z = pipeline.sample_identity(rng, state)
        alpha = rng.normal(0.0, dataset_config["alpha_std"], model.d_alpha)
        beta = rng.normal(0.0, dataset_config["beta_std"], model.d_beta)
        image, mask = pipeline.generate(
            z, alpha, beta, yaw_pitch_pose(0.0, 0.0), state.camera, state
        )
        _save_png(image * mask[None], out_dir / f"sample_{i:03d}.png")
    print(f"wrote {args.n} samples to {out_dir}")
    return 0


def cmd_repose(args) -> int:
    state = _load_state(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    model = state.store.model
    dataset_config = state.store.manifest["config"]
    z = pipeline.sample_identity(rng, state)
    alpha = rng.normal(0.0, dataset_config["alpha_std"], model.d_alpha)
    beta = rng.normal(0.0, dataset_config["beta_std"], model.d_beta)
    angles = _parse_angles(args.angles)
    grid = pipeline.repose_grid(z, alpha, beta, angles, state, axis=args.axis)
    out = args.out or Path(state.config.run_dir) / f"repose_{args.axis}.png"
    _save_png(grid, out)
    print(f"wrote {args.axis} sweep over {angles} to {out}")
    return 0


def cmd_interpolate(args) -> int:
    state = _load_state(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    model = state.store.model
    dataset_config = state.store.manifest["config"]
    z_a = pipeline.sample_identity(rng, state)
    z_b = pipeline.sample_identity(rng, state)
    alpha = rng.normal(0.0, dataset_config["alpha_std"], model.d_alpha)
    beta = rng.normal(0.0, dataset_config["beta_std"], model.d_beta)
    cells = []
    for i in range(args.steps):
        t = i / (args.steps - 1) if args.steps > 1 else 0.0
        z = pipeline.interpolate(z_a, z_b, t)
        image, _ = pipeline.generate(
            z, alpha, beta, yaw_pitch_pose(0.0, 0.0), state.camera, state
        )
        cells.append(image)
    out = args.out or Path(state.config.run_dir) / "interpolate.png"
    _save_png(np.concatenate(cells, axis=2), out)
    print(f"wrote {args.steps}-step interpolation to {out}")
    return 0


def cmd_eval_consistency(args) -> int:
    state = _load_state(args)
    run_dir = Path(state.config.run_dir)
    embedder = _get_embedder(args, state.store, run_dir)
    report = pipeline.evaluate_consistency(
        state,
        embedder,
        n_identities=args.n_identities,
        angles=tuple(_parse_angles(args.angles)),
        seed=args.seed if args.seed is not None else 0,
    )
    save_consistency_report(
        report, run_dir / "consistency.txt", run_dir / "consistency.json"
    )
    print(consistency_table(report))
    print(f"report written to {run_dir / 'consistency.txt'}")
    return 0


def cmd_eval_ffd(args) -> int:
    state = _load_state(args)
    run_dir = Path(state.config.run_dir)
    embedder = _get_embedder(args, state.store, run_dir)
    value = pipeline.evaluate_ffd(
        state, embedder, n_images=args.n_images,
        seed=args.seed if args.seed is not None else 0,
    )
    payload = {
        "ffd": value,
        "n_generated": args.n_images,
        "embedder_reliable": embedder.reliable,
    }
    with open(run_dir / "ffd.json", "w") as fp:
        json.dump(payload, fp, indent=1, sort_keys=True)
        fp.write("\n")
    print(f"FFD: {value:.4f} (written to {run_dir / 'ffd.json'})")
    return 0


def cmd_ablate(args) -> int:
    base = _experiment_config(args)
    store = DatasetStore(base.dataset_dir)
    run_dir = Path(base.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    embedder = _get_embedder(args, store, run_dir)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = pipeline.run_ablation(
        base, embedder, seeds=seeds,
        n_eval_images=args.n_eval_images,
        n_consistency_identities=args.n_consistency_identities,
        store=store,
    )
    pipeline.save_ablation_report(
        result, run_dir / "ablation.txt", run_dir / "ablation.json"
    )
    print(pipeline.ablation_table(result))
    print(f"report written to {run_dir / 'ablation.txt'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facetex",
        description="Latent face textures: data generation, training, "
                    "sampling, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="study YAML file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic dataset")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--debug-raster", action="store_true",
                   help="dump uv/coverage debug images before training")

    for name, func, help_text in [
        ("sample", cmd_sample, "render identities sampled from the prior"),
        ("repose", cmd_repose, "render one identity across a pose sweep"),
        ("interpolate", cmd_interpolate,
         "render a latent-space interpolation strip"),
        ("eval-consistency", cmd_eval_consistency,
         "identity consistency across poses"),
        ("eval-ffd", cmd_eval_ffd,
         "Fréchet feature distance against the dataset"),
    ]:
        p = add(name, func, help_text)
        p.add_argument("--checkpoint", default=None,
                       help="checkpoint path (default: final checkpoint "
                            "under the run dir)")
        if name == "sample":
            p.add_argument("--n", type=int, default=8)
            p.add_argument("--out", default=None)
        elif name == "repose":
            p.add_argument("--angles", default="-60,-45,-30,-15,0,15,30,45,60",
                           help="comma-separated degrees; use the "
                                "--angles=-60,0,60 form for negatives")
            p.add_argument("--axis", choices=("yaw", "pitch"), default="yaw")
            p.add_argument("--out", default=None)
        elif name == "interpolate":
            p.add_argument("--steps", type=int, default=7)
            p.add_argument("--out", default=None)
        elif name == "eval-consistency":
            p.add_argument("--n-identities", type=int, default=256)
            p.add_argument("--angles", default="-45,-30,-15,0,15,30,45",
                           help="comma-separated degrees (must include 0); "
                                "use the --angles=-45,0,45 form for negatives")
            p.add_argument("--embedder", default=None,
                           help="trained embedder file (default: train and "
                                "cache one under the run dir)")
        elif name == "eval-ffd":
            p.add_argument("--n-images", type=int, default=256)
            p.add_argument("--embedder", default=None)

    p = add("ablate", cmd_ablate,
            "train and score the texture-size/rgb-loss grid")
    p.add_argument("--seeds", default="0,1", help="comma-separated seeds")
    p.add_argument("--n-eval-images", type=int, default=128)
    p.add_argument("--n-consistency-identities", type=int, default=32)
    p.add_argument("--embedder", default=None)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
