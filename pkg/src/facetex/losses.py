"""Objective terms for training the texture-generation pipeline.

Generator side: photometric L2, perceptual feature loss, mask cross entropy,
KL regularization toward the standard-normal prior, and a least-squares
adversarial term with feature matching.  Discriminator side: the symmetric
least-squares objective.  An optional RGB-texture term ties the first three
neural-texture channels to the image for the ablation grid.

Reduction convention: every norm is implemented as a mean over its elements,
which keeps the default loss weights resolution-independent.  All functions
return scalar tensors differentiable w.r.t. their prediction inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .networks import LatentDistribution, init_weights

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective (discriminator reuses lambda_adv)."""

    lambda_2: float = 1.0
    lambda_vgg: float = 2.0
    lambda_m: float = 1.0
    lambda_kl: float = 0.1
    lambda_adv: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_2", "lambda_vgg", "lambda_m", "lambda_kl",
                     "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class GeneratorLossComponents:
    """Raw (unweighted) per-term values, kept for logging."""

    l2: torch.Tensor
    vgg: torch.Tensor
    mask: torch.Tensor
    kl: torch.Tensor
    adv: torch.Tensor


class PerceptualExtractor(nn.Module):
    """Frozen multi-scale conv stack standing in for a pretrained backbone.

    Five stride-2 conv layers, features tapped after each activation, with
    per-layer weights ``layer_weights`` (all ones by default).  Weights are
    seed-initialized, marked non-trainable, and never updated; any object
    with the same call signature and a ``layer_weights`` attribute (e.g. an
    actual pretrained feature stack) can be substituted in
    :func:`perceptual`.
    """

    def __init__(
        self,
        seed: int = 0,
        channels: Sequence[int] = (16, 32, 64, 64, 64),
        layer_weights: Optional[Sequence[float]] = None,
    ):
        super().__init__()
        if layer_weights is None:
            layer_weights = [1.0] * len(channels)
        if len(layer_weights) != len(channels):
            raise ValueError("layer_weights length must match channels")
        self.layer_weights: Tuple[float, ...] = tuple(float(v) for v in layer_weights)
        layers = []
        c_in = 3
        for c_out in channels:
            layers.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                    nn.LeakyReLU(0.2),
                )
            )
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        init_weights(self, torch.Generator().manual_seed(seed))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "PerceptualExtractor":
        # Frozen: ignore train-mode switches from a surrounding module.
        return super().train(False)

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        x = image if image.dim() == 4 else image.unsqueeze(0)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )


def photometric_l2(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    _check_same_shape(pred, target)
    return (pred - target).square().mean()


def perceptual(pred: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """Sum_j v_j * mean |phi_j(pred) - phi_j(target)| over extractor layers."""
    _check_same_shape(pred, target)
    f_pred = extractor(pred)
    f_target = extractor(target)
    total = pred.new_zeros(())
    for v, fp, ft in zip(extractor.layer_weights, f_pred, f_target):
        total = total + v * (fp - ft).abs().mean()
    return total


def mask_bce(pred_mask_prob: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy, mean over pixels, with probabilities clamped.

    ``pred_mask_prob`` holds probabilities (post-sigmoid); they are clamped
    to [eps, 1-eps] with eps=1e-7 so a saturated prediction cannot produce
    an infinite loss.
    """
    _check_same_shape(pred_mask_prob, target_mask)
    t = target_mask.to(pred_mask_prob.dtype)
    if not torch.all((t == 0) | (t == 1)):
        raise ValueError("target_mask must be binary")
    p = pred_mask_prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def kl_divergence(dist: LatentDistribution) -> torch.Tensor:
    """KL(q || N(0, I)) for a diagonal Gaussian, mean over dimensions.

    Closed form per coordinate: 0.5 * (exp(log_var) + mu^2 - 1 - log_var);
    averaged over latent dimensions (and batch) per the mean-reduction
    convention.
    """
    term = 0.5 * (torch.exp(dist.log_var) + dist.mu.square() - 1.0 - dist.log_var)
    return term.mean()


def _as_scale_lists(scores) -> List[torch.Tensor]:
    if isinstance(scores, torch.Tensor):
        return [scores]
    return list(scores)


def adv_generator(
    fake_scores,
    fake_features,
    real_features,
) -> torch.Tensor:
    """Least-squares realism plus feature matching, both averaged per scale.

    ``fake_scores`` is a list over discriminator scales of patch-score
    tensors; the feature arguments are lists over scales of per-layer
    activation lists.  Real-branch features are detached, so no gradient
    reaches the discriminator (or the real image) through this term.
    """
    scores = _as_scale_lists(fake_scores)
    if len(fake_features) != len(real_features) or len(scores) != len(fake_features):
        raise ValueError("per-scale lists must have equal length")
    realism = sum((1.0 - s).square().mean() for s in scores) / len(scores)
    matching = scores[0].new_zeros(())
    for fake_layers, real_layers in zip(fake_features, real_features):
        if len(fake_layers) != len(real_layers):
            raise ValueError("feature list lengths differ between branches")
        if not fake_layers:
            continue
        per_scale = sum(
            (f - r.detach()).abs().mean() for f, r in zip(fake_layers, real_layers)
        ) / len(fake_layers)
        matching = matching + per_scale
    return realism + matching / len(fake_features)


def adv_discriminator(
    fake_scores, real_scores, lambda_adv: float = 1.0
) -> torch.Tensor:
    """lambda_adv * 0.5 * [D(fake)^2 + (1 - D(real))^2], averaged per scale."""
    fake = _as_scale_lists(fake_scores)
    real = _as_scale_lists(real_scores)
    if len(fake) != len(real):
        raise ValueError("fake/real scale counts differ")
    total = fake[0].new_zeros(())
    for f, r in zip(fake, real):
        total = total + 0.5 * (f.square().mean() + (1.0 - r).square().mean())
    return lambda_adv * total / len(fake)


def rgb_texture_loss(feature_image: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the first three feature channels and A(I).

    Ties the leading channels of the rasterized neural texture to the RGB
    target so the learned texture resembles a classical color texture.
    """
    channel_axis = 0 if feature_image.dim() == 3 else 1
    if feature_image.dim() not in (3, 4) or feature_image.shape[channel_axis] < 3:
        raise ValueError(
            f"feature image needs >= 3 channels, got shape {tuple(feature_image.shape)}"
        )
    rgb = feature_image.narrow(channel_axis, 0, 3)
    _check_same_shape(rgb, target)
    return (rgb - target).square().mean()


def total_generator_loss(
    components: GeneratorLossComponents, weights: LossWeights
) -> torch.Tensor:
    """Weighted sum of the five generator terms."""
    return (
        weights.lambda_2 * components.l2
        + weights.lambda_vgg * components.vgg
        + weights.lambda_m * components.mask
        + weights.lambda_kl * components.kl
        + weights.lambda_adv * components.adv
    )


LOG_FIELDS = [
    "step",
    "l2", "vgg", "mask", "kl", "adv",
    "w_l2", "w_vgg", "w_mask", "w_kl", "w_adv",
    "g_total", "d_total",
]


def log_header() -> str:
    """CSV header matching :func:`format_log_line`."""
    return ",".join(LOG_FIELDS)


def format_log_line(
    step: int,
    components: GeneratorLossComponents,
    weights: LossWeights,
    d_total: float,
) -> str:
    """One CSV record: raw terms, weighted terms, and both totals."""
    raw = [components.l2, components.vgg, components.mask, components.kl,
           components.adv]
    raw = [float(v) for v in raw]
    lam = [weights.lambda_2, weights.lambda_vgg, weights.lambda_m,
           weights.lambda_kl, weights.lambda_adv]
    weighted = [l * v for l, v in zip(lam, raw)]
    values = [step, *raw, *weighted, sum(weighted), float(d_total)]
    return ",".join(
        str(v) if isinstance(v, int) else f"{v:.6g}" for v in values
    )
