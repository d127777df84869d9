"""Software rasterizer: pinhole projection, z-buffered perspective-correct UV
interpolation, and differentiable bilinear texture sampling.

Conventions (shared with the brute-force test oracle, bit-exactly):
  * pixel (i, j) is sampled at continuous coordinates (x, y) = (j + 0.5, i + 0.5)
  * a pixel is covered when all three edge functions share a sign (edges inclusive)
  * depth ties resolve to the lower triangle index
  * uv (0, 0) maps to texel center (0, 0) and uv (1, 1) to texel center
    (Ht - 1, Wt - 1)  (align-corners)

Only gradients w.r.t. texture values are provided; mesh geometry is an input,
never a learned quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Camera:
    """Perspective pinhole camera with fixed intrinsics."""

    focal: float
    principal_point: np.ndarray  # (2,) pixels, (cx, cy)
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        object.__setattr__(self, "principal_point", pp)
        h, w = self.image_size
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0.0 <= pp[0] <= w and 0.0 <= pp[1] <= h):
            raise ValueError("principal point outside image bounds")


def _as_hw(image_size) -> tuple[int, int]:
    """Normalize an int (square) or (H, W) pair to a concrete (H, W)."""
    if np.isscalar(image_size):
        return int(image_size), int(image_size)
    h, w = image_size
    return int(h), int(w)


def default_camera(image_size, focal_scale: float = 1.05) -> Camera:
    """Camera centered on the image with focal = focal_scale * min(H, W).

    ``image_size`` is either an int (square image) or an (H, W) pair.
    """
    h, w = _as_hw(image_size)
    return Camera(
        focal=focal_scale * min(h, w),
        principal_point=np.array([w / 2.0, h / 2.0]),
        image_size=(h, w),
    )


@dataclass
class RasterOutput:
    """Per-pixel rasterization result. uv_image is zero-filled and depth is
    +inf outside the coverage mask; tri_index is -1 there."""

    uv_image: np.ndarray   # (H, W, 2)
    coverage: np.ndarray   # (H, W) bool
    depth: np.ndarray      # (H, W)
    tri_index: np.ndarray  # (H, W) int64

    @property
    def image_size(self) -> tuple[int, int]:
        return self.coverage.shape


def project(vertices: np.ndarray, camera: Camera):
    """Pinhole projection u = f*x/z + cx, v = f*y/z + cy.

    Returns (coords (N, 2), depth (N,)). Rejects vertices at or behind the
    camera plane.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    z = vertices[:, 2]
    if np.any(z <= 0.0):
        raise ValueError("all vertices must be strictly in front of the camera (z > 0)")
    cx, cy = camera.principal_point
    u = camera.focal * vertices[:, 0] / z + cx
    v = camera.focal * vertices[:, 1] / z + cy
    return np.stack([u, v], axis=1), z.copy()


def rasterize(coords: np.ndarray, depth: np.ndarray, triangles: np.ndarray,
              uv_coords: np.ndarray, image_size) -> RasterOutput:
    """Z-buffered rasterization with perspective-correct barycentric UVs.

    Vectorized over candidate (triangle, pixel) pairs gathered from clipped
    triangle bounding boxes; the winner per pixel is the minimum-depth
    candidate, ties broken by the lower triangle index.  ``image_size`` is an
    int (square image) or an (H, W) pair.
    """
    h, w = _as_hw(image_size)
    uv_image = np.zeros((h, w, 2))
    coverage = np.zeros((h, w), dtype=bool)
    depth_image = np.full((h, w), np.inf)
    tri_index = np.full((h, w), -1, dtype=np.int64)
    out = RasterOutput(uv_image, coverage, depth_image, tri_index)

    triangles = np.asarray(triangles, dtype=np.int64)
    if triangles.size == 0:
        return out
    coords = np.asarray(coords, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    uv_coords = np.asarray(uv_coords, dtype=np.float64)

    p0, p1, p2 = (coords[triangles[:, k]] for k in range(3))
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])

    xs = np.stack([p0[:, 0], p1[:, 0], p2[:, 0]], axis=1)
    ys = np.stack([p0[:, 1], p1[:, 1], p2[:, 1]], axis=1)
    # Pixel centers are at half-integers: column j is tested iff j + 0.5 lies
    # within [xmin, xmax].
    j0 = np.maximum(np.ceil(xs.min(axis=1) - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(xs.max(axis=1) - 0.5), w - 1).astype(np.int64)
    i0 = np.maximum(np.ceil(ys.min(axis=1) - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(ys.max(axis=1) - 0.5), h - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    counts = np.where(area == 0.0, 0, nx * ny)
    total = int(counts.sum())
    if total == 0:
        return out

    tri_flat = np.repeat(np.arange(triangles.shape[0]), counts)
    starts = np.cumsum(counts) - counts
    offset = np.arange(total) - np.repeat(starts, counts)
    nx_flat = nx[tri_flat]
    px = (j0[tri_flat] + offset % nx_flat) + 0.5
    py = (i0[tri_flat] + offset // nx_flat) + 0.5

    x0, y0 = p0[tri_flat, 0], p0[tri_flat, 1]
    x1, y1 = p1[tri_flat, 0], p1[tri_flat, 1]
    x2, y2 = p2[tri_flat, 0], p2[tri_flat, 1]
    w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    inside = ((w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)) | ((w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0))
    if not inside.any():
        return out

    tri_flat = tri_flat[inside]
    px, py = px[inside], py[inside]
    w0, w1, w2 = w0[inside], w1[inside], w2[inside]
    area_flat = area[tri_flat]
    l0, l1, l2 = w0 / area_flat, w1 / area_flat, w2 / area_flat

    z0 = depth[triangles[tri_flat, 0]]
    z1 = depth[triangles[tri_flat, 1]]
    z2 = depth[triangles[tri_flat, 2]]
    inv_z = l0 / z0 + l1 / z1 + l2 / z2
    pix_depth = 1.0 / inv_z
    b0 = (l0 / z0) * pix_depth
    b1 = (l1 / z1) * pix_depth
    b2 = (l2 / z2) * pix_depth

    uv0 = uv_coords[triangles[tri_flat, 0]]
    uv1 = uv_coords[triangles[tri_flat, 1]]
    uv2 = uv_coords[triangles[tri_flat, 2]]
    u = np.clip(b0 * uv0[:, 0] + b1 * uv1[:, 0] + b2 * uv2[:, 0], 0.0, 1.0)
    v = np.clip(b0 * uv0[:, 1] + b1 * uv1[:, 1] + b2 * uv2[:, 1], 0.0, 1.0)

    pix = (py - 0.5).astype(np.int64) * w + (px - 0.5).astype(np.int64)
    order = np.lexsort((tri_flat, pix_depth, pix))
    pix_sorted = pix[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    iy, jx = pix[win] // w, pix[win] % w
    uv_image[iy, jx, 0] = u[win]
    uv_image[iy, jx, 1] = v[win]
    coverage[iy, jx] = True
    depth_image[iy, jx] = pix_depth[win]
    tri_index[iy, jx] = tri_flat[win]
    return out


def sample_texture(texture: torch.Tensor, raster: RasterOutput) -> torch.Tensor:
    """Bilinearly sample a (C, Ht, Wt) texture at the rasterized UVs.

    Align-corners mapping x = u*(Wt-1), y = v*(Ht-1). Output is a (C, H, W)
    feature image, zero outside coverage, differentiable w.r.t. the texture
    (piecewise linear). Preserves the texture dtype.
    """
    if texture.ndim != 3:
        raise ValueError("texture must be (C, Ht, Wt)")
    c, ht, wt = texture.shape
    if ht < 2 or wt < 2:
        raise ValueError("texture must be at least 2x2")
    h, w = raster.image_size
    iy, jx = np.nonzero(raster.coverage)
    out = texture.new_zeros((c, h, w))
    if iy.size == 0:
        return out

    uv = torch.from_numpy(raster.uv_image[iy, jx]).to(texture.dtype)
    x = uv[:, 0] * (wt - 1)
    y = uv[:, 1] * (ht - 1)
    x0 = x.floor().long().clamp(0, wt - 1)
    y0 = y.floor().long().clamp(0, ht - 1)
    x1 = (x0 + 1).clamp(max=wt - 1)
    y1 = (y0 + 1).clamp(max=ht - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(0)
    fy = (y - y0.to(y.dtype)).unsqueeze(0)

    t00 = texture[:, y0, x0]
    t01 = texture[:, y0, x1]
    t10 = texture[:, y1, x0]
    t11 = texture[:, y1, x1]
    # a + (b - a) * t keeps constant textures bit-exact (no (1-t)+t rounding).
    top = t00 + (t01 - t00) * fx
    bot = t10 + (t11 - t10) * fx
    vals = top + (bot - top) * fy

    out[:, torch.from_numpy(iy), torch.from_numpy(jx)] = vals
    return out


def dump_debug_images(raster: RasterOutput, prefix) -> list[str]:
    """Write coverage and the UV channels as grayscale PNGs for inspection."""
    from PIL import Image

    paths = []
    arrays = {
        "coverage": raster.coverage.astype(np.float64),
        "uv_u": raster.uv_image[:, :, 0],
        "uv_v": raster.uv_image[:, :, 1],
    }
    for name, arr in arrays.items():
        path = f"{prefix}_{name}.png"
        Image.fromarray((np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
