"""Deterministic synthetic dataset of textured head renders.

Replaces a captured face corpus with a fully controlled analog: each identity
is a procedural RGB texture (low-frequency sinusoid fields plus fixed dark
eye/mouth blobs) on the shared morphable sphere-patch model, and an
"exterior" collar mesh — a ring surrounding the face patch, rigidly attached
to the head pose — stands in for hair and other regions the face model does
not cover.  The collar exists only in the data generator; the learned
pipeline never sees its geometry, so exterior pixels must be explained by the
additive pathway.

Rendering is unlit, z-buffered, and classic (texture lookup per pixel), so
every sample is exactly reproducible from the manifest: all sampled
parameters are rounded to 9 decimals before rendering and stored in that
form.  Images and masks are written as PNG; the manifest is sorted JSON with
a schema version.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .geometry import (
    MorphableModel,
    Pose,
    compute_mesh,
    load_model,
    make_synthetic_model,
    pose_mesh,
    save_model,
    yaw_pitch_pose,
)
from .rasterizer import Camera, default_camera, project, rasterize, sample_texture

SCHEMA_VERSION = 1
_ROUND_DECIMALS = 9
_BLOB_VALUE = -0.85
# (u, v, sigma_u, sigma_v) in UV space; v < 0.5 is the upper half on screen.
_FACE_LANDMARKS = (
    (0.35, 0.38, 0.045, 0.045),
    (0.65, 0.38, 0.045, 0.045),
    (0.50, 0.66, 0.090, 0.035),
)


def _round9(x):
    return np.round(np.asarray(x, dtype=np.float64), _ROUND_DECIMALS)


@dataclass(frozen=True)
class Identity:
    """One synthetic person: a shape coefficient and ground-truth textures."""

    id: int
    texture_rgb: np.ndarray  # (3, Ht, Wt) in [-1, 1]
    alpha: np.ndarray  # (d_alpha,) fixed per identity
    exterior_texture: np.ndarray  # (3, Ht', Wt') in [-1, 1]
    exterior_seed: int


@dataclass(frozen=True)
class Sample:
    """One rendered training tuple."""

    image: np.ndarray  # (3, H, W) in [-1, 1], background exactly 0
    mask: np.ndarray  # (H, W) bool, union coverage of face + exterior mesh
    alpha: np.ndarray
    beta: np.ndarray
    pose: Pose
    camera: Camera
    identity_id: int

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:] or self.mask.dtype != bool:
            raise ValueError("mask must be bool (H, W) matching the image")
        if np.any(self.image[:, ~self.mask] != 0):
            raise ValueError("background pixels must be exactly zero")
        if self.image.min() < -1 or self.image.max() > 1:
            raise ValueError("image values must lie in [-1, 1]")


@dataclass(frozen=True)
class DatasetConfig:
    """Knobs of :func:`generate_dataset`."""

    out_dir: str
    dataset_seed: int = 0
    n_identities: int = 50
    samples_per_identity: int = 40
    image_size: int = 64
    texture_size: int = 128
    # Wide enough that face + collar stay fully in frame under the pose
    # ranges below plus downstream affine augmentation (scale 1.1, +-5%).
    focal_scale: float = 0.72
    yaw_range_deg: float = 30.0
    pitch_range_deg: float = 30.0
    alpha_std: float = 0.5
    beta_std: float = 0.5
    test_fraction: float = 0.2
    model_seed: int = 0
    n_vertices: int = 576
    d_alpha: int = 8
    d_beta: int = 8

    def __post_init__(self) -> None:
        if self.n_identities < 1 or self.samples_per_identity < 1:
            raise ValueError("need at least one identity and one sample each")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")
        if self.image_size < 16 or self.texture_size < 16:
            raise ValueError("image_size and texture_size must be >= 16")


def _procedural_field(rng: np.random.Generator, shape_hw: Tuple[int, int],
                      n_waves: int, total_amplitude: float = 0.55,
                      wrap_u: bool = False) -> np.ndarray:
    """(3, H, W) per-channel tone offset plus low-frequency sinusoids.

    The tone offset is the identity's "skin tone" analog; continuous wave
    frequencies keep the per-identity fingerprints high-entropy so a small
    recognition network can separate identities the way it separates real
    faces.  With ``wrap_u`` the u-axis frequencies are integers, which keeps
    textures for meshes whose u coordinate wraps (the collar ring) seamless.
    Values stay within ``|tone| + total_amplitude <= 0.95``.
    """
    h, w = shape_hw
    vv, uu = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    tex = np.zeros((3, h, w))
    for c in range(3):
        tex[c] += rng.uniform(-0.2, 0.2)
        amps = rng.uniform(0.3, 1.0, size=n_waves)
        amps *= total_amplitude / amps.sum()
        for a in amps:
            if wrap_u:
                fu = float(rng.integers(1, 4))
            else:
                fu = rng.uniform(0.3, 2.0)
            fv = rng.uniform(0.3, 2.0)
            phase = rng.uniform(0, 2 * np.pi)
            tex[c] += a * np.sin(2 * np.pi * (fu * uu + fv * vv) + phase)
    return tex


def _landmark_weight(shape_hw: Tuple[int, int]) -> np.ndarray:
    """Gaussian blob weights at the canonical eye/mouth UV locations."""
    h, w = shape_hw
    vv, uu = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    weight = np.zeros((h, w))
    for cu, cv, su, sv in _FACE_LANDMARKS:
        weight += np.exp(-0.5 * (((uu - cu) / su) ** 2 + ((vv - cv) / sv) ** 2))
    return np.clip(weight, 0.0, 1.0)


def _collar_mesh(
    n_theta: int = 8,
    n_phi: int = 48,
    theta_range_deg: Tuple[float, float] = (55.0, 80.0),
    radius_range: Tuple[float, float] = (1.04, 1.22),
):
    """Ring band around the face patch's -z axis, with a duplicated UV seam.

    Polar angle theta is measured from the patch axis; the band starts inside
    the patch's corner extent so the collar slightly overlaps the face rim
    (drawn in front of it, like hair over a hairline).  The radius flares
    outward with theta — without the flare, perspective folds the band into
    a sliver around the face silhouette and almost no exterior pixels
    survive.
    """
    t0, t1 = np.deg2rad(theta_range_deg)
    theta = np.linspace(t0, t1, n_theta)
    phi = np.linspace(0.0, 2.0 * np.pi, n_phi + 1)  # duplicated seam column
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    x = np.sin(tt) * np.cos(pp)
    y = np.sin(tt) * np.sin(pp)
    z = -np.cos(tt)
    radius = radius_range[0] + (radius_range[1] - radius_range[0]) * (
        (tt - t0) / (t1 - t0)
    )
    vertices = (radius[..., None] * np.stack([x, y, z], axis=-1)).reshape(-1, 3)
    uv = np.stack(
        [pp / (2.0 * np.pi), (tt - t0) / (t1 - t0)], axis=-1
    ).reshape(-1, 2)
    idx = np.arange(n_theta * (n_phi + 1)).reshape(n_theta, n_phi + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    triangles = np.concatenate(
        [np.stack([a, b, c], axis=1), np.stack([b, d, c], axis=1)], axis=0
    ).astype(np.int64)
    return vertices, uv, triangles


class SyntheticWorld:
    """Shared context for identity synthesis and classic rendering.

    Bundles the morphable face model with the generator-only exterior collar
    mesh and the dataset seed that makes every identity reproducible.
    """

    def __init__(
        self,
        model: MorphableModel,
        dataset_seed: int,
        texture_size: int = 128,
        exterior_texture_size: Tuple[int, int] = (64, 256),
        alpha_std: float = 0.5,
    ):
        self.model = model
        self.dataset_seed = int(dataset_seed)
        self.texture_size = int(texture_size)
        self.exterior_texture_size = tuple(exterior_texture_size)
        self.alpha_std = float(alpha_std)
        self.collar_vertices, self.collar_uv, self.collar_triangles = _collar_mesh()

    def make_identity(self, identity_id: int) -> Identity:
        """Deterministic identity from (dataset_seed, id)."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.dataset_seed, 7919, identity_id])
        )
        size = (self.texture_size, self.texture_size)
        base = _procedural_field(rng, size, n_waves=6)
        w = _landmark_weight(size)[None]
        texture = base * (1.0 - w) + _BLOB_VALUE * w
        alpha = _round9(rng.normal(0.0, self.alpha_std, size=self.model.d_alpha))
        exterior_seed = int(
            np.random.SeedSequence(
                [self.dataset_seed, 104729, identity_id]
            ).generate_state(1)[0]
        )
        ext_rng = np.random.default_rng(exterior_seed)
        exterior = _procedural_field(
            ext_rng, self.exterior_texture_size, n_waves=8, wrap_u=True
        )
        return Identity(
            id=int(identity_id),
            texture_rgb=texture,
            alpha=alpha,
            exterior_texture=exterior,
            exterior_seed=exterior_seed,
        )

    def render_sample(
        self, identity: Identity, beta: np.ndarray, pose: Pose, camera: Camera
    ) -> Sample:
        """Unlit z-buffered render of face + collar into a training tuple."""
        face = compute_mesh(self.model, identity.alpha, np.asarray(beta))
        n_face_vertices = face.shape[0]
        n_face_triangles = self.model.triangles.shape[0]
        vertices = np.concatenate([face, self.collar_vertices], axis=0)
        triangles = np.concatenate(
            [self.model.triangles, self.collar_triangles + n_face_vertices], axis=0
        )
        uvs = np.concatenate([self.model.uv_coords, self.collar_uv], axis=0)
        coords, depth = project(pose_mesh(vertices, pose), camera)
        raster = rasterize(coords, depth, triangles, uvs, camera.image_size)

        face_won = raster.coverage & (raster.tri_index < n_face_triangles)
        ext_won = raster.coverage & (raster.tri_index >= n_face_triangles)
        image = np.zeros((3,) + raster.coverage.shape)
        for texture, region in (
            (identity.texture_rgb, face_won),
            (identity.exterior_texture, ext_won),
        ):
            sub = dataclasses.replace(raster, coverage=region)
            image += sample_texture(torch.from_numpy(texture), sub).numpy()
        return Sample(
            image=image,
            mask=raster.coverage.copy(),
            alpha=identity.alpha.copy(),
            beta=np.asarray(beta, dtype=np.float64).copy(),
            pose=pose,
            camera=camera,
            identity_id=identity.id,
        )


def _encode_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((image.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(
        np.uint8
    )


def _decode_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0


def _rounded_pose(yaw_deg: float, pitch_deg: float) -> Pose:
    """Pose whose stored and rendered matrices are the same 9-decimal values."""
    p = yaw_pitch_pose(yaw_deg, pitch_deg)
    return Pose(rotation=_round9(p.rotation), translation=_round9(p.translation))


def generate_dataset(config: DatasetConfig) -> Path:
    """Write images, masks, the morphable model, and a manifest; return the
    manifest path.

    Regenerating with the same config is byte-identical.  The train/test
    split is by identity, so held-out people never appear in training data.
    """
    out = Path(config.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    model = make_synthetic_model(
        config.model_seed, config.n_vertices, config.d_alpha, config.d_beta
    )
    save_model(model, out / "model.npz")
    world = SyntheticWorld(
        model,
        config.dataset_seed,
        texture_size=config.texture_size,
        alpha_std=config.alpha_std,
    )
    camera = default_camera(config.image_size, focal_scale=config.focal_scale)

    ids = np.arange(config.n_identities)
    split_rng = np.random.default_rng(
        np.random.SeedSequence([config.dataset_seed, 32452843])
    )
    split_rng.shuffle(ids)
    n_test = int(round(config.test_fraction * config.n_identities))
    if config.test_fraction > 0 and config.n_identities > 1:
        n_test = max(1, min(n_test, config.n_identities - 1))
    test_ids = sorted(int(i) for i in ids[:n_test])
    train_ids = sorted(int(i) for i in ids[n_test:])

    records: List[Dict] = []
    for identity_id in range(config.n_identities):
        identity = world.make_identity(identity_id)
        for s in range(config.samples_per_identity):
            rng = np.random.default_rng(
                np.random.SeedSequence(
                    [config.dataset_seed, 15485863, identity_id, s]
                )
            )
            yaw = float(_round9(rng.uniform(-config.yaw_range_deg,
                                            config.yaw_range_deg)))
            pitch = float(_round9(rng.uniform(-config.pitch_range_deg,
                                              config.pitch_range_deg)))
            beta = _round9(rng.normal(0.0, config.beta_std, size=config.d_beta))
            pose = _rounded_pose(yaw, pitch)
            sample = world.render_sample(identity, beta, pose, camera)

            stem = f"id{identity_id:03d}_s{s:03d}.png"
            Image.fromarray(_encode_image(sample.image)).save(out / "images" / stem)
            Image.fromarray(
                (sample.mask * np.uint8(255))
            ).save(out / "masks" / stem)
            records.append(
                {
                    "identity": identity_id,
                    "image": f"images/{stem}",
                    "mask": f"masks/{stem}",
                    "alpha": identity.alpha.tolist(),
                    "beta": beta.tolist(),
                    "rotation": pose.rotation.reshape(-1).tolist(),  # row-major
                    "translation": pose.translation.tolist(),
                    "yaw_deg": yaw,
                    "pitch_deg": pitch,
                }
            )

    stored_config = dataclasses.asdict(config)
    stored_config.pop("out_dir")  # datasets stay byte-identical when relocated
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": stored_config,
        "camera": {
            "focal": camera.focal,
            "cx": float(camera.principal_point[0]),
            "cy": float(camera.principal_point[1]),
            "height": camera.image_size[0],
            "width": camera.image_size[1],
        },
        "model_file": "model.npz",
        "splits": {"train": train_ids, "test": test_ids},
        "samples": records,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as fp:
        json.dump(manifest, fp, indent=1, sort_keys=True)
        fp.write("\n")
    return manifest_path


class DatasetStore:
    """Random access into a generated dataset directory.

    Images come back foreground-masked (multiplied by the binary mask), which
    restores the exact-zero background that PNG quantization would otherwise
    blur.
    """

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "manifest.json") as fp:
            self.manifest = json.load(fp)
        if self.manifest["schema_version"] != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported manifest schema {self.manifest['schema_version']}"
            )
        self.model = load_model(self.root / self.manifest["model_file"])
        cam = self.manifest["camera"]
        self.camera = Camera(
            focal=cam["focal"],
            principal_point=np.array([cam["cx"], cam["cy"]]),
            image_size=(cam["height"], cam["width"]),
        )
        self.train_ids = set(self.manifest["splits"]["train"])
        self.test_ids = set(self.manifest["splits"]["test"])
        self.records = self.manifest["samples"]
        self.train_indices = [
            i for i, r in enumerate(self.records) if r["identity"] in self.train_ids
        ]
        self.test_indices = [
            i for i, r in enumerate(self.records) if r["identity"] in self.test_ids
        ]

    def __len__(self) -> int:
        return len(self.records)

    def load_sample(self, index: int) -> Sample:
        r = self.records[index]
        raw = np.asarray(Image.open(self.root / r["image"]))
        mask = np.asarray(Image.open(self.root / r["mask"])) > 127
        image = _decode_image(raw) * mask[None]
        return Sample(
            image=image,
            mask=mask,
            alpha=np.array(r["alpha"]),
            beta=np.array(r["beta"]),
            pose=Pose(
                rotation=np.array(r["rotation"]).reshape(3, 3),
                translation=np.array(r["translation"]),
            ),
            camera=self.camera,
            identity_id=r["identity"],
        )
