"""One-to-many affine augmentation.

Samples in-plane affine transforms (rotation, isotropic scale, translation,
horizontal flip — all about the image center) and applies them consistently to
three kinds of data:

* images, via bilinear inverse warping with zero fill,
* binary masks, via nearest-neighbor inverse warping,
* projected vertex coordinates, by composing the transform with the camera
  projection so that rasterized coverage stays pixel-aligned with the warped
  image.

Transform matrices act on pixel-index coordinates, i.e. the sample point of
pixel ``(i, j)`` is ``(x=j, y=i)``.  A pure horizontal flip is therefore
``x' = (W - 1) - x`` and warps an image into its exact column reversal.  The
rasterizer addresses pixel centers at ``(j + 0.5, i + 0.5)`` instead, so
:func:`compose_with_projection` shifts coordinates by half a pixel before and
after applying the matrix; this keeps the two conventions aligned to the same
physical pixel grid (a flip maps the center of column ``j`` onto the center of
column ``W - 1 - j``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

_DET_BOUNDS = (0.5, 2.0)


@dataclass(frozen=True)
class AffineParams:
    """Sampled augmentation parameters, retained for logging."""

    angle_deg: float
    scale: float
    translation: Tuple[float, float]  # pixels, (tx, ty)
    flip: bool


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for :func:`sample_affine`.

    ``image_size`` is needed because transforms are expressed in pixel units
    (translation is sampled as a fraction of the image size, and rotation /
    scale / flip are taken about the image center).
    """

    image_size: int = 64
    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    max_translate_frac: float = 0.05
    flip_prob: float = 0.5

    def __post_init__(self) -> None:
        if self.image_size < 1:
            raise ValueError(f"image_size must be >= 1, got {self.image_size}")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if lo * lo < _DET_BOUNDS[0] or hi * hi > _DET_BOUNDS[1]:
            raise ValueError(
                f"scale_range {self.scale_range} exceeds determinant bounds "
                f"{_DET_BOUNDS}"
            )
        if self.max_translate_frac < 0:
            raise ValueError("max_translate_frac must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass(frozen=True)
class AffineTransform:
    """A 2x3 affine map over pixel-index coordinates ``(x, y)``.

    The linear part must have absolute determinant within ``[0.5, 2.0]``
    (bounded scale; a flip contributes a sign, not magnitude).
    """

    matrix: np.ndarray
    params: Optional[AffineParams] = None

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"matrix must have shape (2, 3), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix contains non-finite entries")
        det = abs(float(np.linalg.det(m[:, :2])))
        if not (_DET_BOUNDS[0] <= det <= _DET_BOUNDS[1]):
            raise ValueError(
                f"|det| of the linear part is {det:.4g}, outside {_DET_BOUNDS}"
            )
        object.__setattr__(self, "matrix", m)

    def apply_to_points(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of ``(x, y)`` index coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (N, 2), got {pts.shape}")
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(
            matrix=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            params=AffineParams(0.0, 1.0, (0.0, 0.0), False),
        )


def make_affine(params: AffineParams, image_size: int) -> AffineTransform:
    """Build the pixel-space matrix for ``params``, centered on the image.

    The linear part is ``R(angle) @ (scale * F)`` where ``F`` mirrors the x
    axis when ``flip`` is set; the translation keeps the image center fixed
    (plus the sampled offset).  Positive angles rotate ``+x`` toward ``+y``,
    which is clockwise on screen since y points down.
    """
    theta = np.deg2rad(params.angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    fx = -1.0 if params.flip else 1.0
    lin = rot @ (params.scale * np.array([[fx, 0.0], [0.0, 1.0]]))
    center = np.array([(image_size - 1) / 2.0, (image_size - 1) / 2.0])
    shift = center + np.asarray(params.translation, dtype=np.float64) - lin @ center
    return AffineTransform(
        matrix=np.concatenate([lin, shift[:, None]], axis=1), params=params
    )


def sample_affine(rng: np.random.Generator, config: AugmentConfig) -> AffineTransform:
    """Draw a random transform within ``config`` ranges.

    angle ~ U(-max_rotation_deg, +max_rotation_deg), scale ~ U(scale_range),
    per-axis translation ~ U(+-max_translate_frac) * image_size, flip with
    probability ``flip_prob``.
    """
    angle = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    scale = float(rng.uniform(*config.scale_range))
    t = rng.uniform(-config.max_translate_frac, config.max_translate_frac, size=2)
    translation = (
        float(t[0] * config.image_size),
        float(t[1] * config.image_size),
    )
    flip = bool(rng.random() < config.flip_prob)
    return make_affine(
        AffineParams(angle_deg=angle, scale=scale, translation=translation, flip=flip),
        config.image_size,
    )


def _inverse_matrix(matrix: np.ndarray) -> np.ndarray:
    lin_inv = np.linalg.inv(matrix[:, :2])
    return np.concatenate([lin_inv, -(lin_inv @ matrix[:, 2])[:, None]], axis=1)


def _source_grid(transform: AffineTransform, shape: Tuple[int, int]):
    h, w = shape
    inv = _inverse_matrix(transform.matrix)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return sx, sy


def apply_to_image(transform: AffineTransform, image: np.ndarray) -> np.ndarray:
    """Warp an (H, W) or (H, W, C) image; bilinear, zero fill outside.

    Out-of-bounds bilinear neighbors contribute zero, so content fades to
    background over the last half-texel rather than clipping abruptly.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (H, W, C), got {img.shape}")
    h, w = img.shape[:2]
    sx, sy = _source_grid(transform, (h, w))

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    work = img.astype(np.float64, copy=False)
    flat = work.reshape(h, w, -1)
    out = np.zeros_like(flat)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            wgt = np.where(inside, wgt, 0.0)
            xc = np.clip(xi, 0, w - 1).astype(np.intp)
            yc = np.clip(yi, 0, h - 1).astype(np.intp)
            out += wgt[:, :, None] * flat[yc, xc]
    out = out.reshape(img.shape)
    return out.astype(img.dtype, copy=False) if img.dtype.kind == "f" else out


def apply_to_mask(transform: AffineTransform, mask: np.ndarray) -> np.ndarray:
    """Warp an (H, W) binary mask with nearest-neighbor resampling.

    The output has the same dtype as the input and stays binary; source
    points that round to outside the frame become background (0 / False).
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    h, w = m.shape
    sx, sy = _source_grid(transform, (h, w))
    xr = np.rint(sx).astype(np.intp)
    yr = np.rint(sy).astype(np.intp)
    inside = (xr >= 0) & (xr <= w - 1) & (yr >= 0) & (yr <= h - 1)
    out = np.zeros_like(m)
    out[inside] = m[yr[inside], xr[inside]]
    return out


def compose_with_projection(
    transform: AffineTransform, projected_coords: np.ndarray
) -> np.ndarray:
    """Apply ``transform`` to continuous raster coordinates (N, 2).

    Projected vertices live in the rasterizer's continuous frame where pixel
    ``(i, j)`` is centered at ``(j + 0.5, i + 0.5)``, while the affine matrix
    acts on pixel indices; the half-pixel shift converts between the two.
    Rasterizing the composed coordinates then matches
    ``apply_to_mask(transform, coverage)`` up to resampling at mask
    boundaries — in particular a pure flip maps pixel centers exactly onto
    mirrored pixel centers.
    """
    coords = np.asarray(projected_coords, dtype=np.float64)
    return transform.apply_to_points(coords - 0.5) + 0.5
