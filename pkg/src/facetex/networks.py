"""Learnable components of the texture-generation pipeline.

Five networks with interface contracts and configurable capacity:

* :class:`Encoder` — residual conv encoder mapping a foreground-masked RGB
  image to a diagonal-Gaussian latent distribution (mu, log_var in R^256).
* :class:`TextureDecoder` — maps the first latent half ``z_face`` to a neural
  texture in UV space.  Takes no pose or expression input, so the texture is
  pose-independent by construction.
* :class:`AdditiveDecoder` — maps the second half ``z_additive`` to an
  additive feature image, conditioned on the rasterized face feature image
  (concatenated at every resolution) so the output can adapt to pose.
* :class:`Feature2Image` — U-Net translating the stacked feature images into
  an RGB image in [-1, 1] plus foreground-mask logits.
* :class:`TwoScaleDiscriminator` — least-squares patch discriminators at two
  image scales, exposing intermediate activations for feature matching.

All randomness is injected through explicit ``torch.Generator`` objects
(:func:`init_weights`, :func:`reparameterize`), keeping runs reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import nn

LATENT_DIM = 256
LATENT_SPLIT = 128  # z = z_face (first half) || z_additive (second half)
_EXPAND_GRID = 8  # latent vectors are broadcast onto this spatial grid
INITIAL_LOG_VAR = -4.0  # encoder posteriors start sharp (sigma ~ 0.14)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NetworkConfig:
    """Capacity and resolution knobs shared by all five networks."""

    image_size: int = 64
    texture_size: int = 64
    texture_channels: int = 16  # C; the ablation grid uses 3 and 16
    encoder_channels: int = 16
    texture_decoder_channels: int = 32
    additive_decoder_channels: int = 32
    unet_channels: int = 16
    discriminator_channels: int = 16

    def __post_init__(self) -> None:
        if not _is_pow2(self.image_size) or not 32 <= self.image_size <= 256:
            raise ValueError(
                f"image_size must be a power of two in [32, 256], got {self.image_size}"
            )
        if not _is_pow2(self.texture_size) or not 16 <= self.texture_size <= 256:
            raise ValueError(
                f"texture_size must be a power of two in [16, 256], "
                f"got {self.texture_size}"
            )
        if self.texture_channels < 1:
            raise ValueError("texture_channels must be >= 1")
        for name in ("encoder_channels", "texture_decoder_channels",
                     "additive_decoder_channels", "unet_channels",
                     "discriminator_channels"):
            v = getattr(self, name)
            if v < 8 or v % 8:
                raise ValueError(f"{name} must be a positive multiple of 8, got {v}")


@dataclass(frozen=True)
class LatentDistribution:
    """Diagonal Gaussian q(z | I) with log-space variance."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.log_var.shape or self.mu.shape[-1] != LATENT_DIM:
            raise ValueError(
                f"mu/log_var must agree with last dim {LATENT_DIM}, got "
                f"{tuple(self.mu.shape)} / {tuple(self.log_var.shape)}"
            )
        if not torch.all(torch.isfinite(self.log_var)):
            raise ValueError("log_var contains non-finite entries")


@dataclass(frozen=True)
class LatentCode:
    """A 256-d latent; the two 128-d halves drive different decoders."""

    z: torch.Tensor

    def __post_init__(self) -> None:
        if self.z.shape[-1] != LATENT_DIM:
            raise ValueError(f"z must have last dim {LATENT_DIM}, got "
                             f"{tuple(self.z.shape)}")

    @property
    def z_face(self) -> torch.Tensor:
        return self.z[..., :LATENT_SPLIT]

    @property
    def z_additive(self) -> torch.Tensor:
        return self.z[..., LATENT_SPLIT:]


def reparameterize(dist: LatentDistribution, noise: torch.Tensor) -> LatentCode:
    """z = mu + exp(0.5 * log_var) * noise, with externally supplied noise."""
    if noise.shape != dist.mu.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != mu shape {tuple(dist.mu.shape)}"
        )
    return LatentCode(z=dist.mu + torch.exp(0.5 * dist.log_var) * noise)


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


class _ResBlock(nn.Module):
    """3x3-conv residual block with optional stride-2 downsampling."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm1 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = _norm(c_out)
        self.skip = (
            nn.Conv2d(c_in, c_out, 1, stride=stride)
            if (c_in != c_out or stride != 1)
            else nn.Identity()
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


def _ensure_batch(x: torch.Tensor, ndim: int) -> Tuple[torch.Tensor, bool]:
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() == ndim:
        return x, False
    raise ValueError(f"expected {ndim - 1}- or {ndim}-dim tensor, got {x.dim()}-dim")


class Encoder(nn.Module):
    """Residual encoder: masked RGB image -> LatentDistribution.

    Four stride-2 residual stages over a stride-2 stem (ResNet-18 lineage,
    width set by config), global average pool, then linear heads for mu and
    log_var.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        b = config.encoder_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, b, 3, stride=2, padding=1), _norm(b), nn.ReLU(inplace=True)
        )
        self.stages = nn.Sequential(
            _ResBlock(b, b, stride=2),
            _ResBlock(b, 2 * b, stride=2),
            _ResBlock(2 * b, 4 * b, stride=2),
            _ResBlock(4 * b, 8 * b, stride=2),
        )
        self.head_mu = nn.Linear(8 * b, LATENT_DIM)
        self.head_log_var = nn.Linear(8 * b, LATENT_DIM)

    def forward(self, masked_image: torch.Tensor) -> LatentDistribution:
        x, squeeze = _ensure_batch(masked_image, 4)
        s = self.config.image_size
        if x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(
                f"expected (*, 3, {s}, {s}) input, got {tuple(x.shape)}"
            )
        h = self.stages(self.stem(x)).mean(dim=(2, 3))
        mu, log_var = self.head_mu(h), self.head_log_var(h)
        if squeeze:
            mu, log_var = mu.squeeze(0), log_var.squeeze(0)
        return LatentDistribution(mu=mu, log_var=log_var)


def _positional_grid(size: int, n_freq: int = 3) -> torch.Tensor:
    """Fixed sinusoidal coordinate features over a size x size grid."""
    coord = torch.linspace(-1.0, 1.0, size)
    v, u = torch.meshgrid(coord, coord, indexing="ij")
    feats = [u, v]
    for k in range(n_freq):
        w = math.pi * (2.0 ** k)
        feats.extend([torch.sin(w * u), torch.cos(w * u),
                      torch.sin(w * v), torch.cos(w * v)])
    return torch.stack(feats)


class _LatentExpand(nn.Module):
    """Broadcast a latent vector onto an 8x8 grid stacked along channels.

    A fixed sinusoidal coordinate encoding is concatenated before the
    projection: the broadcast alone is spatially constant, which leaves
    zero-padding as the only source of position information and makes
    spatial detail prohibitively slow to fit on small step budgets.
    """

    def __init__(self, latent_dim: int, c_out: int):
        super().__init__()
        pos = _positional_grid(_EXPAND_GRID)
        self.register_buffer("pos", pos)
        self.proj = nn.Conv2d(latent_dim + pos.shape[0], c_out, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        grid = z[:, :, None, None].expand(-1, -1, _EXPAND_GRID, _EXPAND_GRID)
        pos = self.pos[None].expand(grid.shape[0], -1, -1, -1)
        return self.proj(torch.cat([grid, pos], dim=1))


class _UpBlock(nn.Module):
    """Nearest 2x upsample followed by a residual block."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.block = _ResBlock(c_in, c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(self.up(x))


class TextureDecoder(nn.Module):
    """z_face (128) -> neural texture (C, Ht, Wt).

    The forward signature admits no pose, expression, or geometry input;
    textures are pose-independent at the interface level.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        b = config.texture_decoder_channels
        n_up = int(math.log2(config.texture_size // _EXPAND_GRID))
        self.expand = _LatentExpand(LATENT_SPLIT, 4 * b)
        blocks: List[nn.Module] = []
        c = 4 * b
        for i in range(n_up):
            c_next = max(b, c // 2) if i else c
            blocks.append(_UpBlock(c, c_next))
            c = c_next
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(c, config.texture_channels, 3, padding=1)

    def forward(self, z_face: torch.Tensor) -> torch.Tensor:
        z, squeeze = _ensure_batch(z_face, 2)
        if z.shape[1] != LATENT_SPLIT:
            raise ValueError(f"z_face must have dim {LATENT_SPLIT}, got {z.shape[1]}")
        tex = self.head(self.blocks(self.expand(z)))
        return tex.squeeze(0) if squeeze else tex


class AdditiveDecoder(nn.Module):
    """(z_additive, f_face) -> additive feature image (C, H, W).

    The rasterized face feature image is rescaled and concatenated as
    conditioning at every resolution, so one latent code yields different
    outputs under different poses.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        b = config.additive_decoder_channels
        cond = config.texture_channels
        n_up = int(math.log2(config.image_size // _EXPAND_GRID))
        self.expand = _LatentExpand(LATENT_SPLIT, 4 * b)
        self.blocks = nn.ModuleList()
        c = 4 * b
        for i in range(n_up):
            c_next = max(b, c // 2) if i else c
            self.blocks.append(_UpBlock(c + cond, c_next))
            c = c_next
        self.head = nn.Conv2d(c + cond, config.texture_channels, 3, padding=1)

    def forward(self, z_additive: torch.Tensor, f_face: torch.Tensor) -> torch.Tensor:
        z, squeeze = _ensure_batch(z_additive, 2)
        f, _ = _ensure_batch(f_face, 4)
        if z.shape[1] != LATENT_SPLIT:
            raise ValueError(
                f"z_additive must have dim {LATENT_SPLIT}, got {z.shape[1]}"
            )
        s = self.config.image_size
        if f.shape[1] != self.config.texture_channels or f.shape[2:] != (s, s):
            raise ValueError(
                f"f_face must be (*, {self.config.texture_channels}, {s}, {s}), "
                f"got {tuple(f_face.shape)}"
            )
        if f.shape[0] != z.shape[0]:
            raise ValueError("z_additive and f_face batch sizes differ")
        h = self.expand(z)
        for block in self.blocks:
            cond = nn.functional.interpolate(
                f, size=h.shape[2:], mode="bilinear", align_corners=False
            )
            h = block(torch.cat([h, cond], dim=1))
        out = self.head(torch.cat([h, f], dim=1))
        return out.squeeze(0) if squeeze else out


class Feature2Image(nn.Module):
    """U-Net from stacked feature images to (RGB in [-1,1], mask logits)."""

    N_LEVELS = 4

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        b = config.unet_channels
        c_in = 2 * config.texture_channels
        widths = [b, 2 * b, 4 * b, 8 * b]
        self.stem = _ResBlock(c_in, widths[0])
        self.down = nn.ModuleList(
            _ResBlock(widths[i], widths[i + 1], stride=2) for i in range(3)
        )
        self.bottleneck = _ResBlock(widths[3], widths[3])
        self.up = nn.ModuleList(
            _UpBlock(widths[i + 1] + widths[i + 1], widths[i]) for i in reversed(range(3))
        )
        self.fuse = nn.ModuleList(
            _ResBlock(widths[i] + widths[i], widths[i]) for i in reversed(range(3))
        )
        self.image_head = nn.Conv2d(widths[0], 3, 3, padding=1)
        self.mask_head = nn.Conv2d(widths[0], 1, 3, padding=1)

    def forward(
        self, f_face: torch.Tensor, f_additive: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        f1, squeeze = _ensure_batch(f_face, 4)
        f2, _ = _ensure_batch(f_additive, 4)
        if f1.shape != f2.shape:
            raise ValueError(
                f"feature images must share shape, got {tuple(f_face.shape)} vs "
                f"{tuple(f_additive.shape)}"
            )
        c = self.config.texture_channels
        s = self.config.image_size
        if f1.shape[1] != c or f1.shape[2:] != (s, s):
            raise ValueError(
                f"expected (*, {c}, {s}, {s}) feature images, got {tuple(f1.shape)}"
            )
        x = torch.cat([f1, f2], dim=1)
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = self.bottleneck(skips[-1])
        for i, (up, fuse) in enumerate(zip(self.up, self.fuse)):
            h = up(torch.cat([h, skips[-1 - i]], dim=1))
            h = fuse(torch.cat([h, skips[-2 - i]], dim=1))
        image = torch.tanh(self.image_head(h))
        mask_logits = self.mask_head(h)
        if squeeze:
            image, mask_logits = image.squeeze(0), mask_logits.squeeze(0)
        return image, mask_logits


class _PatchDiscriminator(nn.Module):
    """4-layer least-squares patch discriminator (scores are unbounded).

    Deliberately normalization-free: spatial normalization (instance/group)
    would couple every patch score to the whole image and break the locality
    guarantee that each score depends only on its receptive field.
    """

    # (kernel, stride) per layer; padding 1 everywhere.
    LAYOUT = [(4, 2), (4, 2), (4, 1), (3, 1)]

    def __init__(self, base_channels: int):
        super().__init__()
        b = base_channels
        widths = [3, b, 2 * b, 4 * b]
        layers = []
        for i, (k, s) in enumerate(self.LAYOUT[:-1]):
            conv = nn.Conv2d(widths[i], widths[i + 1], k, stride=s, padding=1)
            layers.append(nn.Sequential(conv, nn.LeakyReLU(0.2, inplace=True)))
        self.features = nn.ModuleList(layers)
        k, s = self.LAYOUT[-1]
        self.score = nn.Conv2d(widths[-1], 1, k, stride=s, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        feats = []
        h = x
        for layer in self.features:
            h = layer(h)
            feats.append(h)
        return self.score(h), feats

    @classmethod
    def receptive_field(cls) -> Tuple[int, int]:
        """(extent, stride) in input pixels of one patch score."""
        rf, jump = 1, 1
        for k, s in cls.LAYOUT:
            rf += (k - 1) * jump
            jump *= s
        return rf, jump


class TwoScaleDiscriminator(nn.Module):
    """Identical patch discriminators on the image and its 2x downsampling.

    Returns, per scale k (input downsampled by 2**k), a pair of
    (patch_scores, feature_maps); feature maps feed the feature-matching
    loss.
    """

    N_SCALES = 2

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(
            _PatchDiscriminator(config.discriminator_channels)
            for _ in range(self.N_SCALES)
        )
        self.pool = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(
        self, image: torch.Tensor
    ) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
        x, _ = _ensure_batch(image, 4)
        if x.shape[1] != 3:
            raise ValueError(f"expected RGB input, got {x.shape[1]} channels")
        out = []
        for disc in self.scales:
            out.append(disc(x))
            x = self.pool(x)
        return out

    @staticmethod
    def receptive_field() -> Tuple[int, int]:
        """(extent, stride) of a scale-0 patch score, in input pixels."""
        return _PatchDiscriminator.receptive_field()


def init_weights(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Seeded fan-in (He) initialization for all conv/linear weights.

    Biases start at zero and affine norms at identity; every random draw
    goes through ``generator`` so two modules initialized with generators in
    the same state get identical weights.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.GroupNorm, nn.InstanceNorm2d)) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
        for m in module.modules():
            if isinstance(m, Encoder):
                # A zero bias would start the posterior at sigma = 1, and the
                # resulting unit reparameterization noise swamps the identity
                # signal for hundreds of steps; start sharp and let the KL
                # term widen the posterior as far as the data supports.
                m.head_log_var.bias.fill_(INITIAL_LOG_VAR)
    return module


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
