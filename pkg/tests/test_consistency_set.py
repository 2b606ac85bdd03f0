import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpvmpc import (
    DataSet,
    SchedulingBound,
    build_m,
    in_sigma,
    project_qmi,
    reconstruct_preimage,
)
from lpvmpc.consistency_set import (
    ConsistencyCertificate,
    ProjectedQmi,
    build_ni,
    outer_for,
    sample_matrices,
)
from lpvmpc.lpv_model import sample_pi

from helpers import preset_bound


def unit_disc_bound():
    return SchedulingBound(g11=np.array([[1.0]]), g12=np.array([[0.0]]),
                           g22=np.array([[-1.0]]))


def scalar_line_dataset():
    # one sample of x_{t+1} = A x_t with x_0 = x_1 = 1, u_0 = 0, z = x
    return DataSet(U=np.array([[0.0]]), X=np.array([[1.0, 1.0]]),
                   Z=np.array([[1.0]]))


def random_bound(rng, n_x, n_z):
    a = rng.standard_normal((n_z, n_z))
    g22 = -(a @ a.T + 0.5 * np.eye(n_z))
    center = rng.standard_normal((n_z, n_x))
    g12 = -(g22 @ center).T
    b = rng.standard_normal((n_x, n_x))
    schur = b @ b.T + 0.3 * np.eye(n_x)
    g11 = schur + g12 @ np.linalg.solve(g22, g12.T)
    return SchedulingBound(g11=g11, g12=g12, g22=g22)


class TestProjectedQmi:
    def test_scalar_projection_closed_form(self):
        proj = project_qmi(np.array([[2.0]]), unit_disc_bound())
        np.testing.assert_allclose(proj.y11, [[1.0]])
        np.testing.assert_allclose(proj.y12, [[0.0]])
        np.testing.assert_allclose(proj.y22, [[-0.25]])

    def test_identity_projection_returns_same_set(self):
        b = preset_bound(1.0)
        proj = project_qmi(np.eye(2), b)
        np.testing.assert_allclose(proj.y11, b.g11, atol=1e-12)
        np.testing.assert_allclose(proj.y12, b.g12, atol=1e-12)
        np.testing.assert_allclose(proj.y22, b.g22, atol=1e-12)

    def test_value_and_contains(self):
        proj = project_qmi(np.array([[2.0]]), unit_disc_bound())
        # V = E Delta^T with |Delta| <= 1, so V ranges over [-2, 2]
        assert proj.contains([[1.9]])
        assert proj.contains([[-2.0]], tol=1e-9)
        assert not proj.contains([[2.1]])
        val = proj.value([[2.0]])
        assert abs(val[0, 0]) <= 1e-12

    def test_forward_and_backward_inclusion(self):
        rng = np.random.default_rng(42)
        b = random_bound(rng, 2, 3)
        e = rng.standard_normal((2, 3))
        proj = project_qmi(e, b)
        for _ in range(100):
            d = sample_pi(b, rng)
            assert proj.contains(e @ d.T, tol=1e-9)
        # sample V from the projected set, pull it back, check both sets
        proj_as_bound = SchedulingBound(g11=proj.y11, g12=proj.y12,
                                        g22=proj.y22)
        for _ in range(100):
            v = sample_pi(proj_as_bound, rng).T
            d = reconstruct_preimage(e, b, v)
            np.testing.assert_allclose(e @ d.T, v, atol=1e-9)
            stack = np.vstack([np.eye(2), d.T])
            resid = stack.T @ b.full @ stack
            assert np.linalg.eigvalsh(resid).min() >= -1e-9

    def test_rank_deficient_e_rejected(self):
        b = random_bound(np.random.default_rng(0), 2, 2)
        with pytest.raises(ValueError, match="full row rank"):
            project_qmi(np.array([[1.0, 0.0], [2.0, 0.0]]), b)

    def test_tall_e_rejected(self):
        b = unit_disc_bound()
        with pytest.raises(ValueError, match="rows"):
            project_qmi(np.array([[1.0], [1.0]]), b)

    def test_degenerate_blocks_rejected(self):
        with pytest.raises(ValueError):
            ProjectedQmi(y11=np.eye(1), y12=np.zeros((1, 1)), y22=np.eye(1))
        with pytest.raises(ValueError):
            ProjectedQmi(y11=np.zeros((1, 1)), y12=np.zeros((1, 1)),
                         y22=-np.eye(1))

    def test_preimage_shape_checks(self):
        b = unit_disc_bound()
        with pytest.raises(ValueError, match="V must be"):
            reconstruct_preimage(np.array([[1.0]]), b, np.zeros((2, 1)))


class TestPerSampleMatrices:
    def test_single_sample_aggregate(self):
        m = build_m(scalar_line_dataset(), unit_disc_bound(), [1.0])
        np.testing.assert_allclose(
            m, [[0.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 0.0]],
            atol=1e-14)

    def test_ni_matches_row_projection(self):
        b = preset_bound(1.0)
        z = np.array([0.3, -0.4])
        ni = build_ni(z, b)
        np.testing.assert_allclose(ni, project_qmi(z[None, :], b).full,
                                   atol=1e-12)

    def test_ni_block_structure(self):
        b = preset_bound(1.3)
        z = np.array([0.5, 0.2])
        ni = build_ni(z, b)
        n_x = b.n_x
        tail = ni[n_x, n_x]
        assert tail < 0
        schur = ni[:n_x, :n_x] - np.outer(ni[:n_x, n_x], ni[n_x, :n_x]) / tail
        np.testing.assert_allclose(schur, b.schur, atol=1e-12)

    def test_ni_rejects_uninformative_z(self):
        with pytest.raises(ValueError, match="informativity"):
            build_ni(np.zeros(2), preset_bound(1.0))

    def test_outer_embedding_literal(self):
        out = outer_for([1.0, 2.0], [3.0], [4.0, 5.0])
        want = np.array([[1.0, 0.0, 4.0],
                         [0.0, 1.0, 5.0],
                         [0.0, 0.0, -1.0],
                         [0.0, 0.0, -2.0],
                         [0.0, 0.0, -3.0]])
        np.testing.assert_array_equal(out, want)

    def test_normalized_sample_matrices_unit_norm(self, canon):
        mis = sample_matrices(canon["ds"], canon["bound"], normalize=True)
        assert mis.shape == (20, 5, 5)
        peaks = np.abs(np.linalg.eigvalsh(mis)).max(axis=1)
        np.testing.assert_allclose(peaks, np.ones(20), rtol=1e-12)


class TestConsistencyMembership:
    def test_scalar_examples(self):
        ds = scalar_line_dataset()
        b = unit_disc_bound()
        assert in_sigma(np.array([[1.0]]), np.array([[0.0]]), ds, b)
        assert not in_sigma(np.array([[3.0]]), np.array([[0.0]]), ds, b)

    def test_scalar_boundary_values(self):
        ds = scalar_line_dataset()
        b = unit_disc_bound()
        for a in (0.0, 2.0):
            assert in_sigma(np.array([[a]]), np.array([[0.0]]), ds, b,
                            tol=1e-12)
        for a in (-1e-6, 2.0 + 1e-6):
            assert not in_sigma(np.array([[a]]), np.array([[0.0]]), ds, b,
                                tol=1e-9)

    def test_true_system_is_member(self, canon):
        plant = canon["plant"]
        assert in_sigma(plant.A_s, plant.B_s, canon["ds"], canon["bound"])

    def test_distant_system_is_not(self, canon):
        plant = canon["plant"]
        assert not in_sigma(plant.A_s + 1.0, plant.B_s, canon["ds"],
                            canon["bound"])

    def test_empty_dataset_vacuous(self):
        ds = DataSet(np.zeros((1, 0)), np.zeros((1, 1)), np.zeros((1, 0)))
        assert in_sigma(np.array([[7.0]]), np.array([[7.0]]), ds,
                        unit_disc_bound())

    def test_shape_validation(self):
        ds = scalar_line_dataset()
        b = unit_disc_bound()
        with pytest.raises(ValueError, match="A must be"):
            in_sigma(np.eye(2), np.array([[0.0]]), ds, b)
        with pytest.raises(ValueError, match="B must be"):
            in_sigma(np.array([[1.0]]), np.zeros((1, 2)), ds, b)


class TestCertificate:
    def test_margins_match_per_sample_forms(self, canon):
        cert = ConsistencyCertificate.from_data(canon["ds"], canon["bound"])
        plant = canon["plant"]
        margins = cert.margins(plant.A_s, plant.B_s)
        assert margins.shape == (20,)
        v = np.vstack([np.eye(2), plant.A_s.T, plant.B_s.T])
        for i in (0, 7, 19):
            form = v.T @ cert.mis[i] @ v
            np.testing.assert_allclose(
                margins[i], np.linalg.eigvalsh(0.5 * (form + form.T)).min(),
                atol=1e-12)
        assert cert.contains(plant.A_s, plant.B_s)

    def test_m_of_is_linear(self, canon):
        cert = ConsistencyCertificate.from_data(canon["ds"], canon["bound"])
        rng = np.random.default_rng(5)
        a1 = rng.uniform(size=20)
        a2 = rng.uniform(size=20)
        np.testing.assert_allclose(cert.m_of(a1) + cert.m_of(a2),
                                   cert.m_of(a1 + a2), atol=1e-12)
        np.testing.assert_allclose(cert.m_of(2.0 * a1), 2.0 * cert.m_of(a1),
                                   atol=1e-12)

    def test_m_of_matches_build_m(self, canon):
        cert = ConsistencyCertificate.from_data(canon["ds"], canon["bound"])
        alpha = np.linspace(0.0, 1.0, 20)
        np.testing.assert_allclose(cert.m_of(alpha),
                                   build_m(canon["ds"], canon["bound"],
                                           alpha), atol=1e-12)

    def test_multiplier_validation(self, canon):
        cert = ConsistencyCertificate.from_data(canon["ds"], canon["bound"])
        with pytest.raises(ValueError, match="nonnegative"):
            cert.m_of(-np.ones(20))
        with pytest.raises(ValueError, match="length"):
            cert.m_of(np.ones(3))

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=20, deadline=None)
    def test_membership_of_generating_system(self, seed):
        rng = np.random.default_rng(seed)
        n_x, n_u, n_z = 2, 1, 2
        b = random_bound(rng, n_x, n_z)
        a_true = rng.standard_normal((n_x, n_x))
        rho = np.abs(np.linalg.eigvals(a_true)).max()
        a_true *= 0.8 / max(rho, 0.8)
        b_true = rng.standard_normal((n_x, n_u))
        c = rng.standard_normal((n_z, n_x)) + np.eye(n_z, n_x)
        x = np.zeros((n_x, 6))
        u = rng.standard_normal((n_u, 5))
        x[:, 0] = rng.standard_normal(n_x)
        for t in range(5):
            z = c @ x[:, t]
            if np.linalg.norm(z) <= 1e-6:
                return
            x[:, t + 1] = (a_true @ x[:, t] + b_true @ u[:, t]
                           + sample_pi(b, rng) @ z)
        ds = DataSet(u, x, c @ x[:, :5])
        assert in_sigma(a_true, b_true, ds, b)
