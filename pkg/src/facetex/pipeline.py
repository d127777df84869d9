"""Training orchestration, generation, checkpointing, and experiment recipes.

One training step runs the full generative path — encode the un-augmented
masked image, sample a latent, decode a neural texture, rasterize it under
the sample's (augmented) pose, synthesize the exterior features, translate
to RGB+mask — then applies one discriminator update followed by one
generator update.  Everything downstream of a seeded config is
deterministic: batch selection, augmentation draws, reparameterization
noise, and weight init all come from explicit generator streams that are
serialized into checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from .augment import (
    AffineTransform,
    AugmentConfig,
    apply_to_image,
    apply_to_mask,
    compose_with_projection,
    sample_affine,
)
from .geometry import Pose, compute_mesh, pose_mesh, yaw_pitch_pose
from .losses import (
    GeneratorLossComponents,
    LossWeights,
    PerceptualExtractor,
    adv_discriminator,
    adv_generator,
    format_log_line,
    kl_divergence,
    log_header,
    mask_bce,
    perceptual,
    photometric_l2,
    rgb_texture_loss,
    total_generator_loss,
)
from .metrics import (
    ConsistencyReport,
    Embedder,
    frechet_feature_distance,
    identity_consistency,
)
from .networks import (
    LATENT_DIM,
    AdditiveDecoder,
    Encoder,
    Feature2Image,
    LatentCode,
    NetworkConfig,
    TextureDecoder,
    TwoScaleDiscriminator,
    init_weights,
    reparameterize,
)
from .rasterizer import Camera, project, rasterize, sample_texture
from .synthdata import DatasetStore

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
# The perceptual extractor must be identical across every run we ever
# compare, so its seed is a module constant rather than part of the config.
PERCEPTUAL_SEED = 0


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything a training run depends on, YAML-serializable.

    The ablation grid is spanned by ``texture_channels`` ∈ {3, 16} ×
    ``rgb_loss_enabled`` ∈ {True, False}; all other fields stay fixed when
    comparing variants.
    """

    dataset_dir: str
    run_dir: str
    image_size: int = 64
    texture_size: int = 64
    texture_channels: int = 16
    rgb_loss_enabled: bool = True
    # loss weights
    lambda_l2: float = 1.0
    lambda_vgg: float = 2.0
    lambda_mask: float = 1.0
    lambda_kl: float = 0.1
    lambda_adv: float = 1.0
    lambda_rgb: float = 1.0
    # augmentation ranges
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    max_translate_frac: float = 0.05
    flip_prob: float = 0.5
    # optimizer / schedule
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    steps: int = 2000
    # network widths
    encoder_channels: int = 16
    texture_decoder_channels: int = 32
    additive_decoder_channels: int = 32
    unet_channels: int = 16
    discriminator_channels: int = 16
    # bookkeeping
    log_every: int = 10
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        if self.texture_channels not in (3, 16):
            raise ValueError(
                f"texture_channels must be 3 or 16, got {self.texture_channels}"
            )
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be >= 1")
        for name in ("lambda_l2", "lambda_vgg", "lambda_mask", "lambda_kl",
                     "lambda_adv", "lambda_rgb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.network_config()  # validates sizes/widths eagerly

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            image_size=self.image_size,
            texture_size=self.texture_size,
            texture_channels=self.texture_channels,
            encoder_channels=self.encoder_channels,
            texture_decoder_channels=self.texture_decoder_channels,
            additive_decoder_channels=self.additive_decoder_channels,
            unet_channels=self.unet_channels,
            discriminator_channels=self.discriminator_channels,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_2=self.lambda_l2,
            lambda_vgg=self.lambda_vgg,
            lambda_m=self.lambda_mask,
            lambda_kl=self.lambda_kl,
            lambda_adv=self.lambda_adv,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            image_size=self.image_size,
            max_rotation_deg=self.max_rotation_deg,
            scale_range=self.scale_range,
            max_translate_frac=self.max_translate_frac,
            flip_prob=self.flip_prob,
        )


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fp:
        yaml.safe_dump(dataclasses.asdict(config), fp, sort_keys=True)


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fp:
        raw = yaml.safe_load(fp)
    raw.update(overrides)
    return ExperimentConfig(**raw)


# ---------------------------------------------------------------------------
# Train state and batches
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TrainState:
    """Everything a training step reads or writes; owned by one thread."""

    config: ExperimentConfig
    store: DatasetStore
    camera: Camera
    step: int
    encoder: Encoder
    texture_decoder: TextureDecoder
    additive_decoder: AdditiveDecoder
    feature2image: Feature2Image
    discriminator: TwoScaleDiscriminator
    perceptual: PerceptualExtractor
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: np.random.Generator
    noise_gen: torch.Generator
    incidents: List[str]

    def generator_modules(self) -> dict:
        return {
            "encoder": self.encoder,
            "texture_decoder": self.texture_decoder,
            "additive_decoder": self.additive_decoder,
            "feature2image": self.feature2image,
        }

    def all_modules(self) -> dict:
        return {**self.generator_modules(), "discriminator": self.discriminator}


@dataclasses.dataclass(frozen=True)
class Batch:
    """One training batch; targets are augmented, the encoder input is not."""

    image: torch.Tensor          # (B, 3, H, W) un-augmented I
    mask: torch.Tensor           # (B, 1, H, W) un-augmented M, {0, 1} float
    encoder_input: torch.Tensor  # (B, 3, H, W) I * M
    target_image: torch.Tensor   # (B, 3, H, W) A(I)
    target_mask: torch.Tensor    # (B, 1, H, W) A(M), {0, 1} float
    alpha: np.ndarray            # (B, d_alpha)
    beta: np.ndarray             # (B, d_beta)
    poses: tuple                 # B Pose objects
    transforms: tuple            # B AffineTransform objects
    indices: tuple               # manifest rows the batch came from


@dataclasses.dataclass(frozen=True)
class StepRecord:
    """Loss record for one train_step: the five generator components (raw),
    the optional texture-RGB term, both totals, and the discriminator loss."""

    step: int
    components: GeneratorLossComponents
    rgb: Optional[float]
    g_total: float
    objective: float
    d_total: float
    grad_norm: float
    aborted: bool = False
    missing_grads: tuple = ()


def init_state(config: ExperimentConfig, store: Optional[DatasetStore] = None) -> TrainState:
    """Build networks, optimizers, and RNG streams for a fresh run."""
    if store is None:
        store = DatasetStore(config.dataset_dir)
    h, w = store.camera.image_size
    if (h, w) != (config.image_size, config.image_size):
        raise ValueError(
            f"dataset images are {(h, w)} but config.image_size is "
            f"{config.image_size}"
        )
    net_config = config.network_config()
    torch_gen = torch.Generator().manual_seed(
        int(np.random.SeedSequence([config.seed, 48623]).generate_state(1)[0])
    )
    encoder = init_weights(Encoder(net_config), torch_gen)
    texture_decoder = init_weights(TextureDecoder(net_config), torch_gen)
    additive_decoder = init_weights(AdditiveDecoder(net_config), torch_gen)
    feature2image = init_weights(Feature2Image(net_config), torch_gen)
    discriminator = init_weights(TwoScaleDiscriminator(net_config), torch_gen)

    gen_params = [
        p
        for module in (encoder, texture_decoder, additive_decoder, feature2image)
        for p in module.parameters()
    ]
    opt_g = torch.optim.Adam(
        gen_params, lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
    )
    noise_gen = torch.Generator().manual_seed(
        int(np.random.SeedSequence([config.seed, 48619]).generate_state(1)[0])
    )
    return TrainState(
        config=config,
        store=store,
        camera=store.camera,
        step=0,
        encoder=encoder,
        texture_decoder=texture_decoder,
        additive_decoder=additive_decoder,
        feature2image=feature2image,
        discriminator=discriminator,
        perceptual=PerceptualExtractor(seed=PERCEPTUAL_SEED),
        opt_g=opt_g,
        opt_d=opt_d,
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 48611])),
        noise_gen=noise_gen,
        incidents=[],
    )


def make_batch(state: TrainState, indices: Optional[Sequence[int]] = None) -> Batch:
    """Load samples, sample one affine per sample, and build target tensors.

    The encoder input is computed from the raw image and mask; the affine
    only ever touches the reconstruction targets and (via composition with
    the projection) the rasterized geometry.
    """
    store, config = state.store, state.config
    if indices is None:
        n_train = len(store.train_indices)
        rows = state.rng.choice(
            n_train, size=config.batch_size, replace=n_train < config.batch_size
        )
        indices = [store.train_indices[int(r)] for r in rows]
    augment_config = config.augment_config()

    images, masks, targets, target_masks = [], [], [], []
    alphas, betas, poses, transforms = [], [], [], []
    for index in indices:
        sample = store.load_sample(int(index))
        transform = sample_affine(state.rng, augment_config)
        image_hwc = sample.image.transpose(1, 2, 0)
        target = apply_to_image(transform, image_hwc).astype(np.float32)
        target_mask = apply_to_mask(transform, sample.mask)
        images.append(sample.image.astype(np.float32))
        masks.append(sample.mask.astype(np.float32)[None])
        targets.append(target.transpose(2, 0, 1))
        target_masks.append(target_mask.astype(np.float32)[None])
        alphas.append(sample.alpha)
        betas.append(sample.beta)
        poses.append(sample.pose)
        transforms.append(transform)

    image = torch.from_numpy(np.stack(images))
    mask = torch.from_numpy(np.stack(masks))
    return Batch(
        image=image,
        mask=mask,
        encoder_input=image * mask,
        target_image=torch.from_numpy(np.stack(targets)),
        target_mask=torch.from_numpy(np.stack(target_masks)),
        alpha=np.stack(alphas),
        beta=np.stack(betas),
        poses=tuple(poses),
        transforms=tuple(transforms),
        indices=tuple(int(i) for i in indices),
    )


# ---------------------------------------------------------------------------
# Rendering path
# ---------------------------------------------------------------------------


def _render_face_features(
    state: TrainState,
    textures: torch.Tensor,
    alpha: np.ndarray,
    beta: np.ndarray,
    poses: Sequence[Pose],
    transforms: Optional[Sequence[AffineTransform]] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rasterize each sample's face mesh and sample its neural texture.

    Returns (f_face (B, C, H, W), coverage (B, 1, H, W) float).  Geometry is
    fixed (numpy); gradients flow only into ``textures``.
    """
    model = state.store.model
    feature_maps, coverages = [], []
    for i in range(textures.shape[0]):
        vertices = pose_mesh(compute_mesh(model, alpha[i], beta[i]), poses[i])
        coords, depth = project(vertices, state.camera)
        if transforms is not None:
            coords = compose_with_projection(transforms[i], coords)
        raster = rasterize(
            coords, depth, model.triangles, model.uv_coords,
            state.camera.image_size,
        )
        feature_maps.append(sample_texture(textures[i], raster))
        coverages.append(
            torch.from_numpy(raster.coverage.astype(np.float32))[None]
        )
    return torch.stack(feature_maps), torch.stack(coverages)


def _generator_forward(state: TrainState, batch: Batch):
    """Full generative path for a batch; returns all intermediates."""
    dist = state.encoder(batch.encoder_input)
    noise = torch.randn(
        dist.mu.shape, generator=state.noise_gen, dtype=dist.mu.dtype
    )
    code = reparameterize(dist, noise)
    textures = state.texture_decoder(code.z_face)
    f_face, face_cov = _render_face_features(
        state, textures, batch.alpha, batch.beta, batch.poses, batch.transforms
    )
    f_additive = state.additive_decoder(code.z_additive, f_face)
    pred_image, mask_logits = state.feature2image(f_face, f_additive)
    return dist, code, textures, f_face, face_cov, pred_image, mask_logits


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _zero_or_missing_grads(modules: dict) -> tuple:
    names = []
    for module_name, module in modules.items():
        for param_name, param in module.named_parameters():
            if not param.requires_grad:
                continue
            if param.grad is None or not bool(param.grad.abs().max() > 0):
                names.append(f"{module_name}.{param_name}")
    return tuple(names)


def _grad_norm(modules: dict) -> float:
    total = 0.0
    for module in modules.values():
        for param in module.parameters():
            if param.grad is not None:
                total += float(param.grad.square().sum())
    return float(np.sqrt(total))


def train_step(
    state: TrainState, batch: Batch, collect_grad_stats: bool = False
) -> StepRecord:
    """One discriminator update, then one generator update.

    Both backward passes run before either optimizer steps (the generator's
    adversarial term differentiates through the discriminator's forward
    graph, which an in-place weight update would invalidate); the weight
    updates themselves are applied discriminator-first.  Any non-finite loss
    aborts the step with the state untouched and the incident recorded.
    """
    config = state.config
    if not torch.equal(batch.encoder_input, batch.image * batch.mask):
        raise AssertionError(
            "encoder input must be the un-augmented masked image"
        )
    dist, code, textures, f_face, face_cov, pred_image, mask_logits = (
        _generator_forward(state, batch)
    )
    mask_prob = torch.sigmoid(mask_logits)

    l2 = photometric_l2(pred_image, batch.target_image)
    vgg = perceptual(pred_image, batch.target_image, state.perceptual)
    mask = mask_bce(mask_prob, batch.target_mask)
    kl = kl_divergence(dist)

    use_adv = config.lambda_adv > 0
    if use_adv:
        fake_out = state.discriminator(pred_image)
        real_out = state.discriminator(batch.target_image)
        adv = adv_generator(
            [scores for scores, _ in fake_out],
            [feats for _, feats in fake_out],
            [feats for _, feats in real_out],
        )
        fake_detached = state.discriminator(pred_image.detach())
        d_loss = adv_discriminator(
            [scores for scores, _ in fake_detached],
            [scores for scores, _ in real_out],
            config.lambda_adv,
        )
    else:
        adv = pred_image.new_zeros(())
        d_loss = None

    rgb = None
    if config.rgb_loss_enabled:
        rgb = rgb_texture_loss(f_face, batch.target_image * face_cov)

    components = GeneratorLossComponents(l2=l2, vgg=vgg, mask=mask, kl=kl, adv=adv)
    g_total = total_generator_loss(components, config.loss_weights())
    objective = g_total if rgb is None else g_total + config.lambda_rgb * rgb

    checked = [l2, vgg, mask, kl, adv, objective]
    if rgb is not None:
        checked.append(rgb)
    if d_loss is not None:
        checked.append(d_loss)
    if not all(torch.isfinite(v) for v in checked):
        incident = (
            f"step {state.step}: non-finite loss "
            f"(l2={_f(l2):.4g} vgg={_f(vgg):.4g} mask={_f(mask):.4g} "
            f"kl={_f(kl):.4g} adv={_f(adv):.4g}); step aborted"
        )
        state.incidents.append(incident)
        logger.warning(incident)
        return StepRecord(
            step=state.step,
            components=GeneratorLossComponents(
                l2=_f(l2), vgg=_f(vgg), mask=_f(mask), kl=_f(kl), adv=_f(adv),
            ),
            rgb=None if rgb is None else _f(rgb),
            g_total=_f(g_total),
            objective=_f(objective),
            d_total=0.0 if d_loss is None else _f(d_loss),
            grad_norm=0.0,
            aborted=True,
        )

    state.opt_g.zero_grad(set_to_none=True)
    objective.backward()
    grad_norm = _grad_norm(state.generator_modules())
    missing: tuple = ()
    if collect_grad_stats:
        missing = _zero_or_missing_grads(state.generator_modules())

    if d_loss is not None:
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        if collect_grad_stats:
            missing = missing + _zero_or_missing_grads(
                {"discriminator": state.discriminator}
            )
        state.opt_d.step()
    state.opt_g.step()
    state.step += 1

    return StepRecord(
        step=state.step,
        components=GeneratorLossComponents(
            l2=_f(l2), vgg=_f(vgg), mask=_f(mask), kl=_f(kl), adv=_f(adv),
        ),
        rgb=None if rgb is None else _f(rgb),
        g_total=_f(g_total),
        objective=_f(objective),
        d_total=0.0 if d_loss is None else _f(d_loss),
        grad_norm=grad_norm,
        missing_grads=missing,
    )


def train(
    config: ExperimentConfig, store: Optional[DatasetStore] = None
) -> Tuple[TrainState, List[StepRecord]]:
    """Run a full training loop, logging CSV losses and checkpoints.

    The run directory receives ``train_log.csv`` (one line per step),
    periodic and final checkpoints, and a ``run.json`` manifest.
    """
    state = init_state(config, store)
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.yaml")
    records: List[StepRecord] = []
    started = time.time()
    with open(run_dir / "train_log.csv", "w") as log:
        log.write(log_header() + "\n")
        while state.step < config.steps:
            batch = make_batch(state)
            record = train_step(state, batch)
            records.append(record)
            if record.aborted:
                # The RNG streams have advanced, so the next batch differs;
                # repeated aborts indicate a diverged run.
                continue
            if record.step % config.log_every == 0 or record.step == config.steps:
                log.write(
                    format_log_line(
                        record.step, record.components, config.loss_weights(),
                        record.d_total,
                    )
                    + "\n"
                )
            if record.step % config.checkpoint_every == 0:
                save_checkpoint(state, run_dir / f"checkpoint_step{record.step}.pt")
    save_checkpoint(state, run_dir / "checkpoint_final.pt")
    manifest = {
        "config": dataclasses.asdict(config),
        "dataset_manifest": str(Path(config.dataset_dir) / "manifest.json"),
        "final_step": state.step,
        "wall_time_s": round(time.time() - started, 3),
        "incidents": state.incidents,
        "checkpoint": "checkpoint_final.pt",
        "log": "train_log.csv",
    }
    with open(run_dir / "run.json", "w") as fp:
        json.dump(manifest, fp, indent=1, sort_keys=True)
        fp.write("\n")
    return state, records


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def generate(
    z: LatentCode,
    alpha: np.ndarray,
    beta: np.ndarray,
    pose: Pose,
    camera: Camera,
    state: TrainState,
    return_soft_mask: bool = False,
):
    """Render one identity at an explicit pose: (image, mask).

    The image is a (3, H, W) float32 array in [-1, 1]; the mask is the
    predicted foreground thresholded at 0.5 (the soft mask is returned too
    when requested).  The same inputs always produce the same outputs.
    """
    if not isinstance(pose, Pose):
        raise ValueError("pose must be a Pose")
    texture = state.texture_decoder(z.z_face)
    model = state.store.model
    vertices = pose_mesh(compute_mesh(model, alpha, beta), pose)
    coords, depth = project(vertices, camera)
    raster = rasterize(
        coords, depth, model.triangles, model.uv_coords, camera.image_size
    )
    f_face = sample_texture(texture, raster)
    f_additive = state.additive_decoder(z.z_additive, f_face)
    image, mask_logits = state.feature2image(f_face, f_additive)
    soft_mask = torch.sigmoid(mask_logits)
    image_np = image.numpy().astype(np.float32)
    mask_np = (soft_mask.numpy()[0] > 0.5)
    if return_soft_mask:
        return image_np, mask_np, soft_mask.numpy()[0].astype(np.float32)
    return image_np, mask_np


def sample_identity(
    rng: np.random.Generator,
    state: TrainState,
    mode: str = "prior",
    reference: Optional[np.ndarray] = None,
    posterior_scale: float = 1.0,
) -> LatentCode:
    """Draw a latent code, either from the prior or around an encoding.

    Prior mode ignores ``reference`` and draws z ~ N(0, I).  Posterior mode
    encodes ``reference`` (a foreground-masked (3, H, W) image in [-1, 1])
    and draws z = mu + posterior_scale * sigma * eps; scale 0 returns the
    posterior mean exactly.
    """
    if mode == "prior":
        z = rng.standard_normal(LATENT_DIM).astype(np.float32)
        return LatentCode(z=torch.from_numpy(z))
    if mode == "posterior":
        if reference is None:
            raise ValueError("posterior mode requires a reference image")
        with torch.no_grad():
            image = torch.as_tensor(
                np.asarray(reference), dtype=torch.float32
            )
            dist = state.encoder(image)
        noise = torch.from_numpy(
            posterior_scale * rng.standard_normal(LATENT_DIM).astype(np.float32)
        )
        return reparameterize(dist, noise)
    raise ValueError(f"unknown sampling mode {mode!r}")


def interpolate(z_a: LatentCode, z_b: LatentCode, t: float) -> LatentCode:
    """Linear interpolation (1 - t) * z_a + t * z_b for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return LatentCode(z=(1.0 - t) * z_a.z + t * z_b.z)


def repose_grid(
    z: LatentCode,
    alpha: np.ndarray,
    beta: np.ndarray,
    angles: Sequence[float],
    state: TrainState,
    axis: str = "yaw",
) -> np.ndarray:
    """Render one identity across pose angles, concatenated along width.

    ``axis`` selects yaw or pitch sweeps.  Angles may extend well beyond
    the training pose range; rendering must not fail there, it just
    extrapolates.  Returns a (3, H, len(angles) * W) float32 image.
    """
    if axis not in ("yaw", "pitch"):
        raise ValueError(f"axis must be 'yaw' or 'pitch', got {axis!r}")
    cells = []
    for angle in angles:
        yaw, pitch = (angle, 0.0) if axis == "yaw" else (0.0, angle)
        image, _ = generate(
            z, alpha, beta, yaw_pitch_pose(yaw, pitch), state.camera, state
        )
        cells.append(image)
    return np.concatenate(cells, axis=2)


def export_image(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    clipped = np.clip(image, -1.0, 1.0)
    return (
        np.round((clipped.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": dataclasses.asdict(state.config),
        "step": state.step,
        "modules": {
            name: module.state_dict()
            for name, module in state.all_modules().items()
        },
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "np_rng_state": state.rng.bit_generator.state,
        "noise_gen_state": state.noise_gen.get_state(),
        "incidents": list(state.incidents),
    }
    torch.save(blob, path)


def load_checkpoint(path, dataset_dir: Optional[str] = None) -> TrainState:
    """Restore a TrainState; forward passes are bit-identical to save time.

    ``dataset_dir`` overrides the config's dataset path, for checkpoints
    that moved machines.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    raw = dict(blob["config"])
    if dataset_dir is not None:
        raw["dataset_dir"] = dataset_dir
    config = ExperimentConfig(**raw)
    state = init_state(config)
    for name, module in state.all_modules().items():
        module.load_state_dict(blob["modules"][name])
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_d.load_state_dict(blob["opt_d"])
    state.rng.bit_generator.state = blob["np_rng_state"]
    state.noise_gen.set_state(blob["noise_gen_state"])
    state.step = blob["step"]
    state.incidents = list(blob["incidents"])
    return state


# ---------------------------------------------------------------------------
# Evaluation harness glue
# ---------------------------------------------------------------------------


def consistency_render_fn(state: TrainState, seed: int = 0):
    """Deterministic (identity index, yaw, pitch) -> masked render callback.

    Identity i's latent, shape, and expression are derived from
    (seed, i) alone, so every angle sees the same identity and repeated
    calls are reproducible.  Expressions follow the dataset generator's
    beta ~ N(0, beta_std^2).
    """
    dataset_config = state.store.manifest["config"]
    alpha_std = dataset_config["alpha_std"]
    beta_std = dataset_config["beta_std"]
    model = state.store.model

    def render(identity_index: int, yaw_deg: float, pitch_deg: float) -> np.ndarray:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, 6151, identity_index])
        )
        z = LatentCode(
            z=torch.from_numpy(rng.standard_normal(LATENT_DIM).astype(np.float32))
        )
        alpha = rng.normal(0.0, alpha_std, size=model.d_alpha)
        beta = rng.normal(0.0, beta_std, size=model.d_beta)
        image, mask = generate(
            z, alpha, beta, yaw_pitch_pose(yaw_deg, pitch_deg),
            state.camera, state,
        )
        return image * mask[None]

    return render


def evaluate_consistency(
    state: TrainState,
    embedder: Embedder,
    n_identities: int = 256,
    angles: Sequence[float] = (-45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0),
    seed: int = 0,
) -> ConsistencyReport:
    """Identity-consistency protocol over prior-sampled identities."""
    training_range = float(state.store.manifest["config"]["yaw_range_deg"])
    return identity_consistency(
        consistency_render_fn(state, seed),
        embedder,
        n_identities=n_identities,
        angles=angles,
        training_range_deg=training_range,
    )


def _generated_stack(state: TrainState, n_images: int, seed: int) -> np.ndarray:
    """Render n_images prior draws with dataset-distribution poses."""
    dataset_config = state.store.manifest["config"]
    yaw_range = dataset_config["yaw_range_deg"]
    pitch_range = dataset_config["pitch_range_deg"]
    alpha_std = dataset_config["alpha_std"]
    beta_std = dataset_config["beta_std"]
    model = state.store.model
    images = []
    for i in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9257, i]))
        z = LatentCode(
            z=torch.from_numpy(rng.standard_normal(LATENT_DIM).astype(np.float32))
        )
        alpha = rng.normal(0.0, alpha_std, size=model.d_alpha)
        beta = rng.normal(0.0, beta_std, size=model.d_beta)
        yaw = rng.uniform(-yaw_range, yaw_range)
        pitch = rng.uniform(-pitch_range, pitch_range)
        image, mask = generate(
            z, alpha, beta, yaw_pitch_pose(yaw, pitch), state.camera, state
        )
        images.append(image * mask[None])
    return np.stack(images)


def evaluate_ffd(
    state: TrainState,
    embedder: Embedder,
    n_images: int = 256,
    seed: int = 0,
) -> float:
    """Fréchet feature distance between dataset images and prior renders.

    The real side prefers the held-out test identities and falls back to
    the full dataset when the test split is smaller than the 100-image
    minimum.
    """
    store = state.store
    real_indices = store.test_indices
    if len(real_indices) < 100:
        real_indices = list(range(len(store)))
    real = np.stack(
        [store.load_sample(i).image for i in real_indices]
    )
    generated = _generated_stack(state, n_images, seed)
    return frechet_feature_distance(real, generated, embedder)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("3ch + rgb loss", 3, True),
    ("3ch, no rgb loss", 3, False),
    ("16ch + rgb loss", 16, True),
    ("16ch, no rgb loss", 16, False),
)


@dataclasses.dataclass(frozen=True)
class AblationRow:
    label: str
    texture_channels: int
    rgb_loss_enabled: bool
    ffd: float
    consistency: float
    error: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class AblationResult:
    rows: tuple
    seeds: tuple
    steps: int


def run_ablation(
    base_config: ExperimentConfig,
    embedder: Embedder,
    seeds: Sequence[int] = (0, 1),
    n_eval_images: int = 128,
    n_consistency_identities: int = 32,
    store: Optional[DatasetStore] = None,
) -> AblationResult:
    """Train the four (texture_channels, rgb_loss) variants and score them.

    Every variant gets identical budgets: same steps, same seeds, same
    evaluation draws, same embedder.  FFD and the mean off-axis identity
    consistency are averaged over seeds.  A variant whose training raises
    is reported with its error and NaN metrics; the table is still emitted.
    """
    if store is None:
        store = DatasetStore(base_config.dataset_dir)
    rows = []
    for label, channels, rgb_enabled in ABLATION_VARIANTS:
        ffds, consistencies = [], []
        error = None
        for seed in seeds:
            run_dir = (
                Path(base_config.run_dir)
                / f"ablation_c{channels}_rgb{int(rgb_enabled)}_seed{seed}"
            )
            variant = dataclasses.replace(
                base_config,
                texture_channels=channels,
                rgb_loss_enabled=rgb_enabled,
                seed=seed,
                run_dir=str(run_dir),
            )
            try:
                state, _ = train(variant, store)
                ffds.append(evaluate_ffd(state, embedder, n_eval_images))
                report = evaluate_consistency(
                    state, embedder, n_identities=n_consistency_identities
                )
                off_axis = [a != 0.0 for a in report.angles]
                consistencies.append(
                    float(
                        np.concatenate(
                            [report.yaw_mean[off_axis], report.pitch_mean[off_axis]]
                        ).mean()
                    )
                )
            except Exception as exc:  # noqa: BLE001 - per-variant isolation
                error = f"seed {seed}: {exc}"
                logger.warning("ablation variant %s failed: %s", label, error)
                break
        rows.append(
            AblationRow(
                label=label,
                texture_channels=channels,
                rgb_loss_enabled=rgb_enabled,
                ffd=float(np.mean(ffds)) if ffds and error is None else float("nan"),
                consistency=(
                    float(np.mean(consistencies))
                    if consistencies and error is None
                    else float("nan")
                ),
                error=error,
            )
        )
    return AblationResult(
        rows=tuple(rows), seeds=tuple(seeds), steps=base_config.steps
    )


def ablation_table(result: AblationResult) -> str:
    """Four variants x (FFD, identity consistency), one row per variant."""
    lines = [
        f"texture ablation ({result.steps} steps, "
        f"mean over seeds {list(result.seeds)})",
        "",
        f"{'variant':<22}{'FFD':>10}{'consistency':>14}",
    ]
    for row in result.rows:
        lines.append(
            f"{row.label:<22}{row.ffd:>10.3f}{row.consistency:>14.3f}"
            + (f"   FAILED: {row.error}" if row.error else "")
        )
    return "\n".join(lines) + "\n"


def save_ablation_report(result: AblationResult, table_path, json_path) -> None:
    Path(table_path).write_text(ablation_table(result))
    payload = {
        "seeds": list(result.seeds),
        "steps": result.steps,
        "rows": [dataclasses.asdict(row) for row in result.rows],
    }
    with open(json_path, "w") as fp:
        json.dump(payload, fp, indent=1, sort_keys=True)
        fp.write("\n")
