"""Evaluation harness: identity consistency and Fréchet feature distance.

Absolute identity-similarity numbers depend entirely on the embedding
network, so this module trains a small convolutional classifier on the
synthetic identities and uses its normalized penultimate activations as a
stand-in for a face-recognition embedding.  The two metrics built on top:

* ``identity_consistency`` — cosine similarity between embeddings of the
  same generated identity rendered frontally and at a sweep of yaw/pitch
  angles, reported as per-angle mean/std over many identities.
* ``frechet_feature_distance`` — the 2-Wasserstein distance between
  Gaussians fitted to embeddings of a real and a generated image set (the
  FID construction with a configurable embedder).
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import warnings
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .augment import AugmentConfig, apply_to_image, sample_affine
from .networks import init_weights

EMBED_DIM = 64

# Gaussian-moment matrices whose most-negative eigenvalue is worse than
# -PSD_TOL * max(1, largest eigenvalue) are treated as genuinely non-PSD
# rather than as rounding noise.
PSD_TOL = 1e-6


# ---------------------------------------------------------------------------
# Embedder
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class EmbedderConfig:
    """Training hyperparameters for the identity embedder."""

    embed_dim: int = EMBED_DIM
    channels: tuple = (16, 32, 64, 64)
    batch_size: int = 64
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    max_epochs: int = 60
    target_accuracy: float = 0.9
    holdout_fraction: float = 0.2
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ValueError("target_accuracy must be in (0, 1]")


class Embedder(nn.Module):
    """Small convolutional identity classifier used as an embedding network.

    ``forward`` returns class logits (training only).  ``embed`` returns the
    unit-normalized penultimate activations — a 64-dim descriptor that is
    what every metric in this module consumes.  ``reliable`` records whether
    training reached the held-out accuracy gate; metrics computed with an
    unreliable embedder should be treated as indicative only.
    """

    def __init__(self, n_classes: int, image_size: int,
                 config: EmbedderConfig = EmbedderConfig()):
        super().__init__()
        if image_size < 2 ** len(config.channels):
            raise ValueError("image_size too small for the conv stack")
        self.n_classes = n_classes
        self.image_size = image_size
        self.config = config
        layers: list[nn.Module] = []
        c_prev = 3
        for c in config.channels:
            layers += [
                nn.Conv2d(c_prev, c, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(c, c, 3, stride=1, padding=1),
                nn.ReLU(inplace=True),
            ]
            c_prev = c
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embedding = nn.Linear(c_prev, config.embed_dim)
        self.head = nn.Linear(config.embed_dim, n_classes)
        self.gate_accuracy: float | None = None
        self.reliable: bool = False

    def _penultimate(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.pool(self.features(images)).flatten(1)
        return self.embedding(feats)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self._penultimate(images))

    @torch.no_grad()
    def embed(self, images) -> torch.Tensor:
        """Unit-norm embeddings, shape (N, embed_dim).

        Accepts a torch tensor or numpy array of shape (N, 3, H, W) or a
        single (3, H, W) image; H and W must match the training resolution.
        The descriptor averages the image and its horizontal mirror before
        normalizing, which makes it flip-invariant and noticeably more
        pose-robust — the same averaging face-recognition embeddings use.
        """
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if x.dim() == 3:
            x = x[None]
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"embedder trained at {self.image_size}px, got {tuple(x.shape[-2:])}"
            )
        was_training = self.training
        self.eval()
        emb = self._penultimate(x) + self._penultimate(x.flip(-1))
        if was_training:
            self.train()
        return emb / emb.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def save(self, path) -> None:
        torch.save(
            {
                "state_dict": self.state_dict(),
                "n_classes": self.n_classes,
                "image_size": self.image_size,
                "config": dataclasses.asdict(self.config),
                "gate_accuracy": self.gate_accuracy,
                "reliable": self.reliable,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "Embedder":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        cfg = EmbedderConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in blob["config"].items()
        })
        net = cls(blob["n_classes"], blob["image_size"], cfg)
        net.load_state_dict(blob["state_dict"])
        net.gate_accuracy = blob["gate_accuracy"]
        net.reliable = blob["reliable"]
        net.eval()
        return net


def _holdout_split(dataset, holdout_fraction: float):
    """Per-identity index split of the training identities.

    The last ``holdout_fraction`` of each identity's samples (at least one)
    are held out, so the gate measures generalization to unseen poses and
    expressions of known identities.
    """
    by_identity: dict[int, list[int]] = {}
    for idx in dataset.train_indices:
        by_identity.setdefault(dataset.records[idx]["identity"], []).append(idx)
    fit_idx, gate_idx = [], []
    for ident in sorted(by_identity):
        rows = by_identity[ident]
        n_hold = max(1, round(holdout_fraction * len(rows)))
        if n_hold >= len(rows):
            raise ValueError(f"identity {ident} has too few samples to hold out")
        fit_idx += rows[:-n_hold]
        gate_idx += rows[-n_hold:]
    return fit_idx, gate_idx, sorted(by_identity)


def train_embedder(dataset, config: EmbedderConfig = EmbedderConfig()) -> Embedder:
    """Train the identity embedder on a generated dataset.

    Requires at least 20 training identities.  Each epoch trains on
    affine-augmented copies of the fit split (pose-invariance is the whole
    point of the embedding) with a cosine learning-rate decay, then scores
    flip-averaged classification accuracy on the held-out split; the best
    epoch's weights are kept.  Training stops as soon as held-out accuracy
    reaches ``config.target_accuracy``; if the gate is never reached the
    embedder is still returned but flagged ``reliable=False`` (with a
    warning), so downstream metrics can report themselves as unreliable
    instead of silently lying.
    """
    if len(dataset.train_ids) < 20:
        raise ValueError(
            f"need >= 20 training identities, got {len(dataset.train_ids)}"
        )
    fit_idx, gate_idx, idents = _holdout_split(dataset, config.holdout_fraction)
    class_of = {ident: k for k, ident in enumerate(idents)}

    def load(indices):
        images, labels = [], []
        for i in indices:
            s = dataset.load_sample(i)
            images.append(s.image)
            labels.append(class_of[s.identity_id])
        return (
            np.stack(images).astype(np.float32),
            torch.tensor(labels, dtype=torch.long),
        )

    x_fit, y_fit = load(fit_idx)
    x_gate, y_gate = load(gate_idx)
    x_gate = torch.from_numpy(x_gate)
    image_size = x_fit.shape[-1]

    net = Embedder(len(idents), image_size, config)
    torch_gen = torch.Generator().manual_seed(config.seed)
    init_weights(net, torch_gen)
    optimizer = torch.optim.Adam(
        net.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    affine_config = AugmentConfig(image_size=image_size)

    def gate_accuracy() -> float:
        net.eval()
        with torch.no_grad():
            logits = net(x_gate) + net(x_gate.flip(-1))
        net.train()
        return float((logits.argmax(dim=1) == y_gate).float().mean())

    best_accuracy, best_state = 0.0, copy.deepcopy(net.state_dict())
    net.train()
    for epoch in range(config.max_epochs):
        decay = 0.5 * (1.0 + math.cos(math.pi * epoch / config.max_epochs))
        for group in optimizer.param_groups:
            group["lr"] = config.learning_rate * decay
        order = rng.permutation(len(fit_idx))
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = x_fit[rows]
            if config.augment:
                batch = batch.copy()
                for k in range(len(rows)):
                    transform = sample_affine(rng, affine_config)
                    batch[k] = apply_to_image(
                        transform, batch[k].transpose(1, 2, 0)
                    ).transpose(2, 0, 1)
            optimizer.zero_grad()
            loss = nn.functional.cross_entropy(
                net(torch.from_numpy(batch)), y_fit[rows], label_smoothing=0.1
            )
            loss.backward()
            optimizer.step()
        accuracy = gate_accuracy()
        if accuracy > best_accuracy:
            best_accuracy, best_state = accuracy, copy.deepcopy(net.state_dict())
        if accuracy >= config.target_accuracy:
            break
    net.load_state_dict(best_state)
    net.eval()
    net.gate_accuracy = best_accuracy
    net.reliable = best_accuracy >= config.target_accuracy
    if not net.reliable:
        warnings.warn(
            f"embedder held-out accuracy {best_accuracy:.3f} below gate "
            f"{config.target_accuracy:.3f}; identity metrics are unreliable",
            RuntimeWarning,
        )
    return net


def embed_images(embedder: Embedder, images, batch_size: int = 64) -> np.ndarray:
    """Embed a stack of images in batches; returns float64 (N, D) unit rows."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"expected (N, 3, H, W) images, got {images.shape}")
    chunks = [
        embedder.embed(images[i:i + batch_size]).numpy()
        for i in range(0, len(images), batch_size)
    ]
    feats = np.concatenate(chunks, axis=0).astype(np.float64)
    # Renormalize in float64 so self-similarity is 1 to near machine
    # precision rather than float32 rounding.
    return feats / np.linalg.norm(feats, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Identity consistency
# ---------------------------------------------------------------------------


RenderFn = Callable[[int, float, float], np.ndarray]


@dataclasses.dataclass(frozen=True)
class ConsistencyReport:
    """Per-angle identity-similarity statistics.

    ``yaw_mean[k]`` is the mean cosine similarity between each identity's
    frontal embedding and its embedding rendered at yaw ``angles[k]``
    (pitch 0), over ``n_identities`` identities; likewise for pitch.
    ``training_range_deg``, when set, marks which angles extrapolate beyond
    the generator's training pose range.
    """

    angles: tuple
    yaw_mean: np.ndarray
    yaw_std: np.ndarray
    pitch_mean: np.ndarray
    pitch_std: np.ndarray
    n_identities: int
    embedder_reliable: bool = True
    training_range_deg: float | None = None

    def __post_init__(self):
        n = len(self.angles)
        for name in ("yaw_mean", "yaw_std", "pitch_mean", "pitch_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per angle")
            object.__setattr__(self, name, arr)
        for mean in (self.yaw_mean, self.pitch_mean):
            if np.any(mean < -1.0 - 1e-9) or np.any(mean > 1.0 + 1e-9):
                raise ValueError("cosine similarities must lie in [-1, 1]")

    def extrapolated_angles(self) -> tuple:
        if self.training_range_deg is None:
            return ()
        return tuple(a for a in self.angles if abs(a) > self.training_range_deg)


def _similarity_stats(reference: np.ndarray, other: np.ndarray):
    sims = np.sum(reference * other, axis=1)
    sims = np.clip(sims, -1.0, 1.0)
    return float(sims.mean()), float(sims.std())


def identity_consistency(
    render_fn: RenderFn,
    embedder: Embedder,
    n_identities: int = 256,
    angles: Sequence[float] = (-45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0),
    training_range_deg: float | None = None,
    batch_size: int = 64,
) -> ConsistencyReport:
    """Cosine similarity between frontal and re-posed renders per identity.

    ``render_fn(identity_index, yaw_deg, pitch_deg)`` must deterministically
    return a foreground-masked (3, H, W) image in [-1, 1] for the same
    latent identity at the requested pose; the report is then a pure
    function of (render_fn, angle list).  The angle list must contain the
    0° reference; its column compares the frontal embedding with itself and
    serves as a sanity anchor at exactly 1.
    """
    angles = tuple(float(a) for a in angles)
    if 0.0 not in angles:
        raise ValueError("angles must include the 0 degree reference")
    if n_identities < 1:
        raise ValueError("n_identities must be positive")

    def embed_angle(yaw: float, pitch: float) -> np.ndarray:
        renders = np.stack(
            [render_fn(i, yaw, pitch) for i in range(n_identities)]
        )
        return embed_images(embedder, renders, batch_size=batch_size)

    frontal = embed_angle(0.0, 0.0)
    stats = {"yaw": ([], []), "pitch": ([], [])}
    for angle in angles:
        for axis in ("yaw", "pitch"):
            if angle == 0.0:
                mean, std = _similarity_stats(frontal, frontal)
            elif axis == "yaw":
                mean, std = _similarity_stats(frontal, embed_angle(angle, 0.0))
            else:
                mean, std = _similarity_stats(frontal, embed_angle(0.0, angle))
            stats[axis][0].append(mean)
            stats[axis][1].append(std)
    return ConsistencyReport(
        angles=angles,
        yaw_mean=np.array(stats["yaw"][0]),
        yaw_std=np.array(stats["yaw"][1]),
        pitch_mean=np.array(stats["pitch"][0]),
        pitch_std=np.array(stats["pitch"][1]),
        n_identities=n_identities,
        embedder_reliable=embedder.reliable,
        training_range_deg=training_range_deg,
    )


def consistency_table(report: ConsistencyReport) -> str:
    """Text table with angles as columns and one mean±std row per axis."""
    width = 14
    header = "angle".ljust(8) + "".join(
        f"{a:+.0f}\N{DEGREE SIGN}".rjust(width) for a in report.angles
    )
    lines = [
        f"identity consistency over {report.n_identities} identities",
        "(cosine similarity to the 0\N{DEGREE SIGN} render; mean\N{PLUS-MINUS SIGN}std)",
        "",
        header,
    ]
    for axis, mean, std in (
        ("yaw", report.yaw_mean, report.yaw_std),
        ("pitch", report.pitch_mean, report.pitch_std),
    ):
        cells = "".join(
            f"{m:.3f}\N{PLUS-MINUS SIGN}{s:.3f}".rjust(width)
            for m, s in zip(mean, std)
        )
        lines.append(axis.ljust(8) + cells)
    extrapolated = report.extrapolated_angles()
    if extrapolated:
        marked = ", ".join(f"{a:+.0f}\N{DEGREE SIGN}" for a in extrapolated)
        lines += [
            "",
            f"note: {marked} lie outside the \N{PLUS-MINUS SIGN}"
            f"{report.training_range_deg:.0f}\N{DEGREE SIGN} training pose range; "
            "similarity there is extrapolation and expected to degrade",
        ]
    if not report.embedder_reliable:
        lines += [
            "",
            "warning: embedder failed its accuracy gate; values are unreliable",
        ]
    return "\n".join(lines) + "\n"


def save_consistency_report(report: ConsistencyReport, table_path, json_path) -> None:
    """Write the human-readable table and a machine-readable JSON twin."""
    Path(table_path).write_text(consistency_table(report))
    payload = {
        "n_identities": report.n_identities,
        "angles": list(report.angles),
        "yaw": {"mean": report.yaw_mean.tolist(), "std": report.yaw_std.tolist()},
        "pitch": {
            "mean": report.pitch_mean.tolist(),
            "std": report.pitch_std.tolist(),
        },
        "embedder_reliable": report.embedder_reliable,
        "training_range_deg": report.training_range_deg,
        "extrapolated_angles": list(report.extrapolated_angles()),
    }
    with open(json_path, "w") as fp:
        json.dump(payload, fp, indent=1, sort_keys=True)
        fp.write("\n")


def load_consistency_report(json_path) -> ConsistencyReport:
    with open(json_path) as fp:
        payload = json.load(fp)
    return ConsistencyReport(
        angles=tuple(payload["angles"]),
        yaw_mean=np.array(payload["yaw"]["mean"]),
        yaw_std=np.array(payload["yaw"]["std"]),
        pitch_mean=np.array(payload["pitch"]["mean"]),
        pitch_std=np.array(payload["pitch"]["std"]),
        n_identities=payload["n_identities"],
        embedder_reliable=payload["embedder_reliable"],
        training_range_deg=payload["training_range_deg"],
    )


# ---------------------------------------------------------------------------
# Fréchet feature distance
# ---------------------------------------------------------------------------


def _sqrtm_psd(mat: np.ndarray, label: str) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues inside -PSD_TOL*scale of zero are clamped to zero (rounding
    noise); anything more negative means the input is genuinely not a
    covariance-like matrix and raises.
    """
    sym = 0.5 * (mat + mat.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    scale = max(1.0, float(eigvals[-1]))
    if eigvals[0] < -PSD_TOL * scale:
        raise RuntimeError(
            f"{label} is not positive semi-definite "
            f"(min eigenvalue {eigvals[0]:.3e}); Fréchet distance undefined"
        )
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_from_moments(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """||mu1-mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^{1/2}).

    The cross term is computed as tr sqrt(S1 cov2 S1) with S1 = sqrt(cov1):
    that matrix is symmetric PSD whenever both inputs are, which keeps the
    whole computation inside real symmetric eigendecompositions.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValueError("moment shapes must match between the two sets")
    if cov1.shape != (mu1.size, mu1.size):
        raise ValueError("covariance shape must be (dim, dim)")
    root1 = _sqrtm_psd(cov1, "first covariance")
    product = root1 @ cov2 @ root1
    sym = 0.5 * (product + product.T)
    eigvals = np.linalg.eigvalsh(sym)
    scale = max(1.0, float(eigvals[-1]))
    if eigvals[0] < -PSD_TOL * scale:
        raise RuntimeError(
            f"covariance product is not positive semi-definite "
            f"(min eigenvalue {eigvals[0]:.3e}); Fréchet distance undefined"
        )
    trace_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * trace_sqrt)
    # Exact zero for identical moments can round to a tiny negative number.
    return max(value, 0.0)


def feature_moments(features: np.ndarray):
    """Sample mean and covariance (ddof=1) of an (N, D) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need an (N >= 2, D) feature matrix")
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_feature_distance(
    real_images, generated_images, embedder: Embedder, batch_size: int = 64
) -> float:
    """Fréchet distance between embedding Gaussians of two image sets.

    Both sets must contain at least 100 images (moment estimates below that
    are too noisy to rank models).  Images should be foreground-masked,
    matching how the embedder was trained.
    """
    real_images = np.asarray(real_images, dtype=np.float32)
    generated_images = np.asarray(generated_images, dtype=np.float32)
    for name, stack in (("real", real_images), ("generated", generated_images)):
        if stack.ndim != 4 or stack.shape[0] < 100:
            raise ValueError(f"need >= 100 {name} images, got {stack.shape}")
    mu1, cov1 = feature_moments(embed_images(embedder, real_images, batch_size))
    mu2, cov2 = feature_moments(
        embed_images(embedder, generated_images, batch_size)
    )
    return frechet_from_moments(mu1, cov1, mu2, cov2)


def masked_psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """PSNR restricted to a foreground mask, for images in [-1, 1].

    The peak-to-peak signal range is 2, so PSNR = 10 * log10(4 / mse) with
    the mse taken over masked pixels (all channels).  Identical images give
    +inf; an empty mask is an error.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[-2:]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image {pred.shape[-2:]}"
        )
    if not mask.any():
        raise ValueError("mask selects no pixels")
    diff = (pred - target) ** 2
    mse = float(diff[..., mask].mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * math.log10(4.0 / mse))
