"""PCA morphable face mesh: linear shape/expression synthesis, rigid posing,
and a deterministic synthetic model factory used in place of scan-based models.

Conventions: mesh radius 1.0 centered at the origin, front of the surface
facing +z, y up. Yaw is a rotation about y, pitch about x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMALITY_TOL = 1e-6


@dataclass(frozen=True)
class MorphableModel:
    """Linear PCA mesh model. Vertices are synthesized as
    mean + shape_basis @ alpha + expr_basis @ beta."""

    mean_vertices: np.ndarray  # (N, 3)
    shape_basis: np.ndarray    # (N, 3, d_alpha)
    expr_basis: np.ndarray     # (N, 3, d_beta)
    triangles: np.ndarray      # (T, 3) int
    uv_coords: np.ndarray      # (N, 2) in [0, 1]
    seed: int = 0

    def __post_init__(self):
        n = self.mean_vertices.shape[0]
        if self.mean_vertices.shape != (n, 3):
            raise ValueError("mean_vertices must be (N, 3)")
        if self.shape_basis.shape[:2] != (n, 3) or self.shape_basis.ndim != 3:
            raise ValueError("shape_basis must be (N, 3, d_alpha)")
        if self.expr_basis.shape[:2] != (n, 3) or self.expr_basis.ndim != 3:
            raise ValueError("expr_basis must be (N, 3, d_beta)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle indices out of range")
        if self.uv_coords.shape != (n, 2):
            raise ValueError("uv_coords must be (N, 2)")
        if self.uv_coords.min() < 0.0 or self.uv_coords.max() > 1.0:
            raise ValueError("uv_coords must lie in [0, 1]")
        for name, basis in (("shape_basis", self.shape_basis), ("expr_basis", self.expr_basis)):
            norms = np.linalg.norm(basis.reshape(-1, basis.shape[2]), axis=0)
            if np.any(norms == 0.0):
                raise ValueError(f"{name} has a dead (all-zero) coefficient column")

    @property
    def n_vertices(self) -> int:
        return self.mean_vertices.shape[0]

    @property
    def d_alpha(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def d_beta(self) -> int:
        return self.expr_basis.shape[2]


@dataclass(frozen=True)
class Pose:
    """Rigid head pose: rotation in SO(3) plus a translation in camera units."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3, 3) and translation (3,)")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMALITY_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


def yaw_pitch_pose(yaw_deg: float, pitch_deg: float, distance: float = 2.5) -> Pose:
    """Pose from yaw (about y) then pitch (about x), translated to `distance`
    along +z so the mesh sits in front of the camera. R = R_y(yaw) @ R_x(pitch)."""
    y = np.deg2rad(yaw_deg)
    p = np.deg2rad(pitch_deg)
    ry = np.array([
        [np.cos(y), 0.0, np.sin(y)],
        [0.0, 1.0, 0.0],
        [-np.sin(y), 0.0, np.cos(y)],
    ])
    rx = np.array([
        [1.0, 0.0, 0.0],
        [0.0, np.cos(p), -np.sin(p)],
        [0.0, np.sin(p), np.cos(p)],
    ])
    return Pose(rotation=ry @ rx, translation=np.array([0.0, 0.0, distance]))


def compute_mesh(model: MorphableModel, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Synthesize vertices: mean + shape_basis·alpha + expr_basis·beta. Exactly
    linear in (alpha, beta)."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != model.d_alpha:
        raise ValueError(f"alpha has length {alpha.shape[0]}, expected {model.d_alpha}")
    if beta.shape[0] != model.d_beta:
        raise ValueError(f"beta has length {beta.shape[0]}, expected {model.d_beta}")
    return (
        model.mean_vertices
        + np.einsum("nkd,d->nk", model.shape_basis, alpha)
        + np.einsum("nkd,d->nk", model.expr_basis, beta)
    )


def pose_mesh(vertices: np.ndarray, pose: Pose) -> np.ndarray:
    """Apply the rigid transform v -> R v + t to every vertex."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValueError("vertices must be (N, 3)")
    return vertices @ pose.rotation.T + pose.translation


def _grid_dims(n_vertices: int) -> tuple[int, int]:
    # Smallest near-square grid with at least n_vertices points.
    nv = int(np.ceil(np.sqrt(n_vertices)))
    nu = int(np.ceil(n_vertices / nv))
    return max(nv, 2), max(nu, 2)


def _sphere_patch(nv: int, nu: int, half_angle_deg: float = 60.0):
    """Open front-facing section of the unit sphere on a regular (nv, nu) grid.

    u maps to azimuth, v to elevation, both spanning ±half_angle about -z, so
    under the default pose (which translates the sphere down +z in front of
    the camera) the convex side faces the viewer.  The UV parameterization is
    bijective by construction.
    """
    u = np.linspace(0.0, 1.0, nu)
    v = np.linspace(0.0, 1.0, nv)
    uu, vv = np.meshgrid(u, v)  # (nv, nu)
    half = np.deg2rad(half_angle_deg)
    azim = (uu - 0.5) * 2.0 * half
    elev = (vv - 0.5) * 2.0 * half
    x = np.cos(elev) * np.sin(azim)
    y = np.sin(elev)
    z = -np.cos(elev) * np.cos(azim)
    vertices = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)

    idx = np.arange(nv * nu).reshape(nv, nu)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    triangles = np.concatenate(
        [np.stack([a, b, c], axis=1), np.stack([b, d, c], axis=1)], axis=0
    ).astype(np.int64)
    return vertices, uv, triangles


def _smooth_fields(rng: np.random.Generator, uv: np.ndarray, n_fields: int,
                   max_amplitude: float, n_waves: int = 3) -> np.ndarray:
    """Random low-frequency vertex displacement fields over UV, each scaled so
    the largest per-vertex displacement equals max_amplitude."""
    n = uv.shape[0]
    fields = np.zeros((n, 3, n_fields))
    for k in range(n_fields):
        disp = np.zeros((n, 3))
        for _ in range(n_waves):
            freq = rng.integers(0, 3, size=2)
            if freq[0] == 0 and freq[1] == 0:
                freq[rng.integers(0, 2)] = 1
            phase = rng.uniform(0.0, 2.0 * np.pi)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            amp = rng.uniform(0.3, 1.0)
            wave = np.sin(2.0 * np.pi * (uv @ freq.astype(np.float64)) + phase)
            disp += amp * wave[:, None] * direction[None, :]
        peak = np.linalg.norm(disp, axis=1).max()
        fields[:, :, k] = disp * (max_amplitude / peak)
    return fields


def make_synthetic_model(seed: int, n_vertices: int = 576, d_alpha: int = 8,
                         d_beta: int = 8) -> MorphableModel:
    """Deterministic desk-scale morphable model: a sphere-section mesh with
    latitude/longitude UVs and smooth random displacement bases.

    The vertex count is rounded up to the nearest full grid (smallest
    near-square grid with >= n_vertices points). Basis columns are scaled so a
    unit coefficient displaces no vertex by more than 15% of the mesh radius.
    """
    if n_vertices < 64:
        raise ValueError("n_vertices must be >= 64")
    if d_alpha < 1 or d_beta < 1:
        raise ValueError("d_alpha and d_beta must be >= 1")
    nv, nu = _grid_dims(n_vertices)
    vertices, uv, triangles = _sphere_patch(nv, nu)
    rng = np.random.default_rng(seed)
    shape_basis = _smooth_fields(rng, uv, d_alpha, max_amplitude=0.15)
    expr_basis = _smooth_fields(rng, uv, d_beta, max_amplitude=0.15)
    return MorphableModel(
        mean_vertices=vertices,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        triangles=triangles,
        uv_coords=uv,
        seed=seed,
    )


def save_model(model: MorphableModel, path) -> None:
    """Lossless single-file serialization (npz) of all fields plus seed/dims."""
    np.savez(
        path,
        mean_vertices=model.mean_vertices,
        shape_basis=model.shape_basis,
        expr_basis=model.expr_basis,
        triangles=model.triangles,
        uv_coords=model.uv_coords,
        seed=np.int64(model.seed),
        dims=np.array([model.n_vertices, model.d_alpha, model.d_beta], dtype=np.int64),
    )


def load_model(path) -> MorphableModel:
    with np.load(path) as data:
        model = MorphableModel(
            mean_vertices=data["mean_vertices"],
            shape_basis=data["shape_basis"],
            expr_basis=data["expr_basis"],
            triangles=data["triangles"],
            uv_coords=data["uv_coords"],
            seed=int(data["seed"]),
        )
    return model
