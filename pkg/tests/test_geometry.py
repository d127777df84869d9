import numpy as np
import pytest
from hypothesis import given, strategies as st

from facetex import geometry as G

from oracles import compute_mesh_reference


@pytest.fixture(scope="module")
def model():
    return G.make_synthetic_model(seed=7)


class TestComputeMesh:
    def test_zero_coefficients_give_mean(self, model):
        v = G.compute_mesh(model, np.zeros(model.d_alpha), np.zeros(model.d_beta))
        assert np.array_equal(v, model.mean_vertices)

    def test_superposition(self, model, rng):
        a1 = rng.normal(size=model.d_alpha)
        a2 = rng.normal(size=model.d_alpha)
        zero_b = np.zeros(model.d_beta)
        lhs = G.compute_mesh(model, a1 + a2, zero_b) - model.mean_vertices
        rhs = (G.compute_mesh(model, a1, zero_b) - model.mean_vertices) + (
            G.compute_mesh(model, a2, zero_b) - model.mean_vertices)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_single_basis_vector_doubled(self):
        # Synthetic model with one basis column b and alpha = (2,):
        # vertices must equal mean + 2 b, element-wise.
        rng = np.random.default_rng(3)
        n = 80
        mean = rng.normal(size=(n, 3))
        b = rng.normal(size=(n, 3, 1))
        expr = rng.normal(size=(n, 3, 1))
        model = G.MorphableModel(
            mean_vertices=mean, shape_basis=b, expr_basis=expr,
            triangles=np.array([[0, 1, 2]]), uv_coords=np.full((n, 2), 0.5))
        got = G.compute_mesh(model, np.array([2.0]), np.array([0.0]))
        expected = compute_mesh_reference(mean, b, expr, [2.0], [0.0])
        np.testing.assert_allclose(got, expected, atol=1e-12)
        np.testing.assert_allclose(got, mean + 2.0 * b[:, :, 0], atol=1e-12)

    def test_loop_oracle_random_coefficients(self, model, rng):
        alpha = rng.normal(size=model.d_alpha)
        beta = rng.normal(size=model.d_beta)
        got = G.compute_mesh(model, alpha, beta)
        expected = compute_mesh_reference(
            model.mean_vertices, model.shape_basis, model.expr_basis, alpha, beta)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_dimension_mismatch_rejected(self, model):
        with pytest.raises(ValueError):
            G.compute_mesh(model, np.zeros(model.d_alpha + 1), np.zeros(model.d_beta))
        with pytest.raises(ValueError):
            G.compute_mesh(model, np.zeros(model.d_alpha), np.zeros(model.d_beta - 1))

    @given(scale=st.floats(min_value=-2.0, max_value=2.0))
    def test_linearity_in_scale(self, scale):
        model = G.make_synthetic_model(seed=11, n_vertices=64)
        alpha = np.linspace(-1, 1, model.d_alpha)
        zero_b = np.zeros(model.d_beta)
        direct = G.compute_mesh(model, scale * alpha, zero_b) - model.mean_vertices
        scaled = scale * (G.compute_mesh(model, alpha, zero_b) - model.mean_vertices)
        np.testing.assert_allclose(direct, scaled, atol=1e-6)


class TestPoseMesh:
    def test_identity_pose_unchanged(self, model):
        pose = G.Pose(rotation=np.eye(3), translation=np.zeros(3))
        v = G.pose_mesh(model.mean_vertices, pose)
        np.testing.assert_array_equal(v, model.mean_vertices)

    def test_yaw_180_negates_x_and_z(self, model):
        pose = G.yaw_pitch_pose(180.0, 0.0, distance=0.0)
        v = G.pose_mesh(model.mean_vertices, pose)
        np.testing.assert_allclose(v[:, 0], -model.mean_vertices[:, 0], atol=1e-12)
        np.testing.assert_allclose(v[:, 1], model.mean_vertices[:, 1], atol=1e-12)
        np.testing.assert_allclose(v[:, 2], -model.mean_vertices[:, 2], atol=1e-12)

    def test_yaw_45_on_unit_x(self):
        # Hand-computed: R_y(45) @ (1,0,0) = (cos45, 0, -sin45), plus t.
        t = np.array([0.1, -0.2, 2.0])
        pose = G.Pose(rotation=G.yaw_pitch_pose(45.0, 0.0).rotation, translation=t)
        v = G.pose_mesh(np.array([[1.0, 0.0, 0.0]]), pose)
        expected = np.array([np.cos(np.deg2rad(45)), 0.0, -np.sin(np.deg2rad(45))]) + t
        np.testing.assert_allclose(v[0], expected, atol=1e-12)

    def test_pairwise_distances_preserved(self, model, rng):
        pose = G.yaw_pitch_pose(rng.uniform(-60, 60), rng.uniform(-60, 60))
        v = G.pose_mesh(model.mean_vertices, pose)
        idx = rng.integers(0, model.n_vertices, size=(50, 2))
        d_before = np.linalg.norm(
            model.mean_vertices[idx[:, 0]] - model.mean_vertices[idx[:, 1]], axis=1)
        d_after = np.linalg.norm(v[idx[:, 0]] - v[idx[:, 1]], axis=1)
        np.testing.assert_allclose(d_before, d_after, atol=1e-6)

    def test_non_orthonormal_rotation_rejected(self):
        r = np.eye(3)
        r[0, 0] = 1.1
        with pytest.raises(ValueError):
            G.Pose(rotation=r, translation=np.zeros(3))

    def test_reflection_rejected(self):
        r = np.diag([-1.0, 1.0, 1.0])  # orthonormal but det = -1
        with pytest.raises(ValueError):
            G.Pose(rotation=r, translation=np.zeros(3))


class TestSyntheticModel:
    def test_same_seed_bit_identical(self):
        a = G.make_synthetic_model(seed=42)
        b = G.make_synthetic_model(seed=42)
        for field in ("mean_vertices", "shape_basis", "expr_basis", "triangles", "uv_coords"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_different_seeds_differ(self):
        a = G.make_synthetic_model(seed=1)
        b = G.make_synthetic_model(seed=2)
        assert not np.array_equal(a.shape_basis, b.shape_basis)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            G.make_synthetic_model(seed=0, n_vertices=32)
        with pytest.raises(ValueError):
            G.make_synthetic_model(seed=0, d_alpha=0)

    def test_basis_displacement_bounded(self, model):
        for basis in (model.shape_basis, model.expr_basis):
            for d in range(basis.shape[2]):
                peak = np.linalg.norm(basis[:, :, d], axis=1).max()
                assert peak <= 0.15 + 1e-9
                assert peak > 0.0

    def test_triangles_nonzero_area_at_rest(self, model):
        v = model.mean_vertices
        e1 = v[model.triangles[:, 1]] - v[model.triangles[:, 0]]
        e2 = v[model.triangles[:, 2]] - v[model.triangles[:, 0]]
        areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        assert np.all(areas > 1e-9)

    def test_rasterized_uv_spans_unit_square(self, model):
        from facetex import rasterizer as R

        posed = G.pose_mesh(model.mean_vertices, G.yaw_pitch_pose(0.0, 0.0))
        cam = R.default_camera((64, 64))
        coords, depth = R.project(posed, cam)
        ro = R.rasterize(coords, depth, model.triangles, model.uv_coords, (64, 64))
        assert ro.coverage.any()
        uvs = ro.uv_image[ro.coverage]
        bins = np.zeros((10, 10), dtype=bool)
        cells = np.clip((uvs * 10).astype(int), 0, 9)
        bins[cells[:, 1], cells[:, 0]] = True
        assert bins.mean() > 0.5

    def test_serialization_round_trip(self, model, tmp_path):
        path = tmp_path / "model.npz"
        G.save_model(model, path)
        loaded = G.load_model(path)
        for field in ("mean_vertices", "shape_basis", "expr_basis", "triangles", "uv_coords"):
            assert np.array_equal(getattr(model, field), getattr(loaded, field))
        assert loaded.seed == model.seed
