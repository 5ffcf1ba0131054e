import numpy as np
import pytest

from conftest import coupled_material, coupling_tensors
from fpmflexo.errors import MaterialError
from fpmflexo.material import (
    MaterialModel,
    constitutive_full,
    constitutive_reduced,
    elastic_matrix,
    electrostatic_matrices,
    electrostatic_stress_index,
    isotropic_builder,
    sigma_es,
)


def random_spd(rng, n, semidefinite=False):
    A = rng.standard_normal((n, n))
    S = A @ A.T
    return S if semidefinite else S + n * np.eye(n)


def random_material(rng):
    return MaterialModel(C=random_spd(rng, 3), Cmk=random_spd(rng, 6, True), Lam=random_spd(rng, 2),
                         Phi=random_spd(rng, 4, True), a=rng.standard_normal((6, 2)),
                         b=rng.standard_normal((3, 4)), e=rng.standard_normal((3, 2)))


def test_zero_inputs_give_zero_outputs():
    out = constitutive_full(coupled_material(full=True), np.zeros(3), np.zeros(6), np.zeros(2), np.zeros(4))
    assert all(not np.any(o) for o in out)


def test_decoupled_response():
    mat = isotropic_builder(2.0, 0.25, 0.1, permittivity=[[3.0, 0.5], [0.5, 2.0]])
    E = np.array([0.3, -0.7])
    s, mu, D, Q = constitutive_full(mat, [1, 0, 0], np.zeros(6), E, np.zeros(4))
    assert np.allclose(s, mat.C[:, 0])
    assert np.allclose(D, mat.Lam @ E)
    assert not mu.any() and not Q.any()


def test_full_relations_match_dense_products():
    rng = np.random.default_rng(0)
    mat = random_material(rng)
    eps, kap, E, V = rng.standard_normal(3), rng.standard_normal(6), rng.standard_normal(2), rng.standard_normal(4)
    s, mu, D, Q = constitutive_full(mat, eps, kap, E, V)
    assert np.allclose(s, mat.C @ eps - mat.e @ E - mat.b @ V)
    assert np.allclose(mu, mat.Cmk @ kap - mat.a @ E)
    assert np.allclose(D, mat.Lam @ E + mat.e.T @ eps + mat.a.T @ kap)
    assert np.allclose(Q, mat.Phi @ V + mat.b.T @ eps)


def test_stacked_inputs_match_single_evaluations():
    rng = np.random.default_rng(1)
    mat = random_material(rng)
    eps, kap, E, V = (rng.standard_normal((5, k)) for k in (3, 6, 2, 4))
    stacked = constitutive_full(mat, eps, kap, E, V)
    for i in range(5):
        single = constitutive_full(mat, eps[i], kap[i], E[i], V[i])
        for a, b in zip(stacked, single):
            assert np.allclose(a[i], b)


def test_reduced_without_gradient_is_piezoelectric():
    mat = coupled_material()
    eps, E = np.array([0.1, -0.2, 0.05]), np.array([0.4, 0.3])
    _, _, D = constitutive_reduced(mat, eps, np.zeros(6), E)
    assert np.allclose(D, mat.Lam @ E + mat.e.T @ eps)


def test_unit_gradient_slot_gives_matching_column():
    mat = coupled_material()
    for j in range(6):
        _, mu, _ = constitutive_reduced(mat, np.zeros(3), np.eye(6)[j], np.zeros(2))
        assert np.allclose(mu, mat.Cmk[:, j])


def test_full_and_reduced_agree_without_field_gradient():
    rng = np.random.default_rng(2)
    mat = coupled_material()
    eps, kap, E = rng.standard_normal(3), rng.standard_normal(6), rng.standard_normal(2)
    full = constitutive_full(mat, eps, kap, E, np.zeros(4))
    red = constitutive_reduced(mat, eps, kap, E)
    for a, b in zip(full[:3], red):
        assert np.allclose(a, b)


def test_electrostatic_stress_uniaxial_example():
    Dh, Qh = electrostatic_matrices([1.0, 0.0], np.zeros(4))
    assert np.allclose(sigma_es(Dh, Qh, [1.0, 0.0], np.zeros(4)), [0.5, -0.5, 0, 0])


def test_electrostatic_stress_vanishes_without_displacement():
    rng = np.random.default_rng(3)
    Dh, Qh = electrostatic_matrices(np.zeros(2), np.zeros(4))
    assert not sigma_es(Dh, Qh, rng.standard_normal(2), rng.standard_normal(4)).any()


def test_electrostatic_matrix_form_equals_index_form():
    rng = np.random.default_rng(4)
    D, Q, E, V = (rng.standard_normal((1000, k)) for k in (2, 4, 2, 4))
    Dh, Qh = electrostatic_matrices(D, Q)
    matrix = sigma_es(Dh, Qh, E, V)
    index = np.array([electrostatic_stress_index(*args) for args in zip(D, Q, E, V)])
    assert np.abs(matrix - index).max() <= 1e-12 * max(1.0, np.abs(index).max())


def test_electrostatic_matrix_rows():
    Dh, _ = electrostatic_matrices([2.0, 3.0], np.zeros(4))
    assert np.allclose(Dh[0], [1.0, -1.5])


def test_isotropic_builder_limits():
    mat = isotropic_builder(1.0, 0.0, 0.0)
    assert np.allclose(mat.C, np.diag([1.0, 1.0, 0.5]))
    assert not mat.Cmk.any() and not mat.has_gradient_elasticity
    assert not (mat.a.any() or mat.b.any() or mat.e.any())


def test_length_scale_doubles_gradient_stiffness_fourfold():
    m1 = isotropic_builder(1.0, 0.3, 0.1)
    m2 = isotropic_builder(1.0, 0.3, 0.2)
    assert np.allclose(m2.Cmk, 4 * m1.Cmk)


def test_plane_stress_and_strain():
    E, nu = 3.0, 0.2
    assert elastic_matrix(E, nu, "stress")[0, 0] == pytest.approx(E / (1 - nu**2))
    assert elastic_matrix(E, nu, "strain")[0, 0] == pytest.approx(E * (1 - nu) / ((1 + nu) * (1 - 2 * nu)))
    with pytest.raises(MaterialError):
        elastic_matrix(E, nu, "axisymmetric")


@pytest.mark.parametrize("nu", [0.5, 0.7, -1.0])
def test_incompressible_and_invalid_poisson_rejected(nu):
    with pytest.raises(MaterialError):
        isotropic_builder(1.0, nu)


def test_invalid_matrices_rejected():
    with pytest.raises(MaterialError, match="shape"):
        MaterialModel(C=np.eye(2))
    with pytest.raises(MaterialError, match="symmetric"):
        MaterialModel(C=np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]), Lam=np.eye(2))
    with pytest.raises(MaterialError, match="positive definite"):
        MaterialModel(C=np.eye(3), Lam=-np.eye(2))
    with pytest.raises(MaterialError, match="semidefinite"):
        MaterialModel(C=np.eye(3), Lam=np.eye(2), Cmk=-np.eye(6))


def test_reduced_energy_form_is_symmetric():
    """The quadratic energy of the reduced model has transpose-paired coupling blocks."""
    mat = coupled_material()
    n = 11
    H = np.zeros((n, n))
    for k in range(n):
        z = np.eye(n)[k]
        s, mu, D = constitutive_reduced(mat, z[:3], z[3:9], z[9:])
        H[:, k] = np.concatenate([s, mu, -D])
    assert np.allclose(H, H.T, atol=1e-15)


def test_scaled_coupling():
    a, e, b = coupling_tensors()
    mat = coupled_material(full=True).scaled_coupling(1e-3)
    assert np.allclose(mat.a, 1e-3 * a) and np.allclose(mat.e, 1e-3 * e) and np.allclose(mat.b, 1e-3 * b)
