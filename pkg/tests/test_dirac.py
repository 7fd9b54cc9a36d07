import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diracflow import dirac as D
from diracflow import geometry as G
from diracflow.errors import KernelNotMinimal, ProjectionDegenerate

SPHERE = G.Sphere(2, 1.0)
CIRCLE = G.CircleProduct((1.0,))


# -- Clifford algebra ---------------------------------------------------------


def test_clifford_example():
    out = D.clifford_mul(0, np.array([1.0, 0.0], dtype=complex))
    assert np.allclose(out, [0.0, 1.0j])


@settings(max_examples=30, deadline=None)
@given(
    st.tuples(*[st.floats(-5, 5) for _ in range(4)]),
    st.tuples(*[st.floats(-5, 5) for _ in range(4)]),
)
def test_clifford_skew_and_isometry(a, b):
    xi = np.array([a[0] + 1j * a[1], a[2] + 1j * a[3]])
    eta = np.array([b[0] + 1j * b[1], b[2] + 1j * b[3]])
    for beta in (0, 1):
        lhs = np.vdot(D.clifford_mul(beta, xi), eta)
        rhs = -np.vdot(xi, D.clifford_mul(beta, eta))
        assert lhs == pytest.approx(rhs, abs=1e-12)
        assert np.vdot(
            D.clifford_mul(beta, xi), D.clifford_mul(beta, xi)
        ).real == pytest.approx(np.vdot(xi, xi).real, abs=1e-12)


def test_clifford_relations():
    rng = np.random.default_rng(0)
    xi = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    for beta in (0, 1):
        sq = D.clifford_mul(beta, D.clifford_mul(beta, xi))
        assert np.allclose(sq, -xi, atol=1e-14)
    ab = D.clifford_mul(0, D.clifford_mul(1, xi))
    ba = D.clifford_mul(1, D.clifford_mul(0, xi))
    assert np.allclose(ab, -ba, atol=1e-14)


# -- free Dirac ---------------------------------------------------------------

ALL_STRUCTURES = [(False, False), (True, False), (False, True), (True, True)]


def test_free_dirac_constant_spinor():
    d = G.TorusDomain(8, 8)
    vals = np.zeros((8, 8, 2), dtype=complex)
    vals[..., 0] = 1.0
    out = D.free_dirac(D.SpinorField(vals, d))
    assert np.max(np.abs(out.values)) <= 1e-13


@pytest.mark.parametrize("ap", ALL_STRUCTURES)
def test_free_spectrum_matches_analytic(ap):
    d = G.TorusDomain(8, 8, antiperiodic=ap)
    H = D.FreeDiracOperator(d).as_matrix()
    assert np.linalg.norm(H - H.conj().T) <= 1e-12 * np.linalg.norm(H)
    ev = np.sort(np.linalg.eigvalsh(0.5 * (H + H.conj().T)))
    exact = np.sort(D.free_spectrum_analytic(d, ev.size))
    assert np.max(np.abs(ev - exact)) <= 1e-11


def test_fully_antiperiodic_smallest_eigenvalue():
    d = G.TorusDomain(8, 8, antiperiodic=(True, True))
    H = D.FreeDiracOperator(d).as_matrix()
    ev = np.linalg.eigvalsh(0.5 * (H + H.conj().T))
    assert np.min(np.abs(ev)) == pytest.approx(np.sqrt(2) / 2, abs=1e-12)


def test_plane_wave_pointwise_magnitude():
    d = G.TorusDomain(8, 8, antiperiodic=(True, False))
    k = (2, -1)
    shift = d.spin_shifts
    phase = np.exp(
        1j * ((k[0] + shift[0]) * d.x1 + (k[1] + shift[1]) * d.x2)
    )
    vals = np.zeros((8, 8, 2), dtype=complex)
    vals[..., 0] = phase
    out = D.free_dirac(D.SpinorField(vals, d))
    mag = np.sqrt(np.sum(np.abs(out.values) ** 2, axis=-1))
    expect = np.hypot(k[0] + shift[0], k[1] + shift[1])
    assert np.allclose(mag, expect, atol=1e-10)


# -- operator along a map -------------------------------------------------------


def _tangent_spinor(u, seed=0, kmax=2):
    return D.random_tangent_spinor(u, np.random.default_rng(seed), kmax=kmax)


def test_constant_map_connection_vanishes():
    d = G.TorusDomain(8, 8)
    u = G.constant_map(d, SPHERE)
    psi = _tangent_spinor(u)
    out = D.dirac_along_map(u, psi)
    free = D._free_dirac_block(d, psi.values)
    assert np.allclose(out.values, free, atol=1e-12)


def test_constant_map_constant_tangent_spinor_harmonic():
    d = G.TorusDomain(8, 8)
    u = G.constant_map(d, SPHERE)
    vals = np.zeros((8, 8, 2, 3), dtype=complex)
    vals[..., 0, 0] = 1.0  # e_x is tangent at the north-pole base point
    psi = D.TwistedSpinorField(vals, u)
    out = D.dirac_along_map(u, psi)
    assert np.max(np.abs(out.values)) <= 1e-13


def test_self_adjointness_random_pairings():
    d = G.TorusDomain(10, 10)
    u = G.perturbed_map(G.constant_map(d, SPHERE), 0.2, seed=3)
    op = D.assemble_operator(u)
    rng = np.random.default_rng(4)
    for _ in range(5):
        a = rng.standard_normal((op.dim,)) + 1j * rng.standard_normal((op.dim,))
        b = rng.standard_normal((op.dim,)) + 1j * rng.standard_normal((op.dim,))
        lhs = np.vdot(a, op.apply(b))
        rhs = np.vdot(op.apply(a), b)
        assert abs(lhs - rhs) <= 1e-10 * (
            np.linalg.norm(a) * np.linalg.norm(b)
        )


def test_assembled_matches_projected_formula():
    # agreement holds to aliasing precision; band-limited data keeps the
    # comparison at the 1e-10 contract level
    d = G.TorusDomain(16, 16)
    u = G.perturbed_map(G.constant_map(d, SPHERE), 0.05, seed=5, kmax=1)
    op = D.assemble_operator(u)
    w = SPHERE.project(u.values)
    P = SPHERE.tangent_projector(w)
    rng = np.random.default_rng(6)
    for s in range(20):
        psi = D.random_tangent_spinor(u, rng, kmax=1)
        via_op = op.apply_field(psi.values[..., None])[..., 0]
        raw = D.dirac_along_map(u, psi).values
        projected = np.einsum("xyAB,xysB->xysA", P, raw)
        assert np.max(np.abs(via_op - projected)) <= 1e-10


def test_hermiticity_residual_tiny():
    d = G.TorusDomain(8, 8)
    u = G.perturbed_map(G.constant_map(d, SPHERE), 0.3, seed=7)
    assert D.assemble_operator(u).hermiticity_residual() <= 1e-11


def test_tangency_preserved_by_operator():
    # emergent tangency of the raw formula holds to aliasing precision,
    # so the 1e-9 slack needs resolved band-limited data
    d = G.TorusDomain(16, 16)
    u = G.perturbed_map(G.constant_map(d, SPHERE), 0.05, seed=8, kmax=1)
    psi = _tangent_spinor(u, seed=9, kmax=1)
    res_in = psi.tangency_residual()
    out = D.dirac_along_map(u, psi)
    assert out.tangency_residual() <= 10 * res_in + 1e-9


# -- spectra -----------------------------------------------------------------


def test_constant_map_kernel_dims():
    d = G.TorusDomain(8, 8)
    rep = D.compute_spectrum(D.assemble_operator(G.constant_map(d, SPHERE)), k=8)
    assert rep.kernel_dim_complex == 4  # 2 * intrinsic_dim
    assert rep.gap == pytest.approx(1.0, abs=1e-9)

    d_ap = G.TorusDomain(8, 8, antiperiodic=(True, True))
    rep = D.compute_spectrum(
        D.assemble_operator(G.constant_map(d_ap, SPHERE)), k=8
    )
    assert rep.kernel_dim_complex == 0
    assert rep.gap == pytest.approx(np.sqrt(2) / 2, abs=1e-9)


def test_constant_map_free_multiplicity():
    """Twisted spectrum at a constant map = free spectrum with multiplicity
    n (the target dimension), on the near-zero window.  The window cuts the
    degenerate shell at an arbitrary sign mix, so compare magnitudes."""
    d = G.TorusDomain(8, 8, antiperiodic=(True, True))
    rep = D.compute_spectrum(D.assemble_operator(G.constant_map(d, SPHERE)), k=8)
    free = np.abs(D.free_spectrum_analytic(d, 4))
    expect = np.sort(np.repeat(free, 2))
    assert np.allclose(np.sort(np.abs(rep.eigenvalues)), expect, atol=1e-9)


def test_spectral_symmetry_and_even_multiplicity():
    d = G.TorusDomain(12, 12)
    for seed in range(3):
        u = G.perturbed_map(G.constant_map(d, SPHERE), 0.1, seed=seed)
        rep = D.compute_spectrum(D.assemble_operator(u), k=8)
        ev = np.sort(rep.eigenvalues)
        assert np.max(np.abs(ev + ev[::-1])) <= 1e-8
        # quaternionic structure: even complex multiplicities; the doubling
        # is exact only modulo the unpaired Nyquist mode, so doubled levels
        # split at aliasing scale and we group with tolerance
        for lam in ev:
            mult = np.sum(np.abs(ev - lam) <= 1e-6)
            assert mult % 2 == 0


def test_perturbed_kernel_dim_stable():
    d = G.TorusDomain(12, 12)
    base = G.constant_map(d, SPHERE)
    rep0 = D.compute_spectrum(D.assemble_operator(base), k=8)
    rep1 = D.compute_spectrum(
        D.assemble_operator(G.perturbed_map(base, 0.02, seed=11)), k=8
    )
    assert rep1.kernel_dim_complex == rep0.kernel_dim_complex == 4


def test_winding_map_lattice_modes_filtered():
    d = G.TorusDomain(8, 8)
    rep = D.compute_spectrum(
        D.assemble_operator(G.winding_map(d, CIRCLE, 1, 0)), k=8
    )
    assert rep.kernel_dim_complex == 2
    assert rep.gap == pytest.approx(1.0, abs=1e-9)
    assert len(rep.lattice_eigenvalues) > 0  # doubling artifacts reported


def test_vectors_weighted_orthonormal():
    d = G.TorusDomain(8, 8)
    u = G.perturbed_map(G.constant_map(d, SPHERE), 0.1, seed=12)
    rep = D.compute_spectrum(D.assemble_operator(u), k=6)
    V = rep.vectors.reshape(-1, rep.vectors.shape[-1])
    gram = V.conj().T @ V * d.cell_area
    assert np.allclose(gram, np.eye(gram.shape[0]), atol=1e-10)


def test_near_kernel_projector_properties():
    d = G.TorusDomain(8, 8)
    u = G.constant_map(d, CIRCLE)
    rep = D.compute_spectrum(D.assemble_operator(u), k=6)
    V = rep.kernel_vectors().reshape(-1, rep.kernel_dim_complex)
    P = V @ V.conj().T * d.cell_area
    assert np.allclose(P @ P, P, atol=1e-10)
    assert np.allclose(P, P.conj().T, atol=1e-12)


def test_iterative_path_matches_dense():
    d = G.TorusDomain(10, 10)
    u = G.perturbed_map(G.constant_map(d, CIRCLE), 0.05, seed=13)
    op = D.assemble_operator(u)
    dense = D.compute_spectrum(op, k=6, method="dense")
    warm = dense.vectors.reshape(op.dim, -1) * np.sqrt(d.cell_area)
    # drift the warm subspace the way a flow step would, so the iterative
    # refinement actually runs
    rng = np.random.default_rng(14)
    warm = warm + 1e-5 * (
        rng.standard_normal(warm.shape) + 1j * rng.standard_normal(warm.shape)
    )
    it = D.compute_spectrum(op, k=6, method="iterative", warm_vectors=warm)
    assert np.allclose(
        np.abs(it.eigenvalues), np.abs(dense.eigenvalues), atol=1e-7
    )
    assert it.kernel_dim_complex == dense.kernel_dim_complex


def test_spectral_report_roundtrip(tmp_path):
    d = G.TorusDomain(8, 8)
    rep = D.compute_spectrum(D.assemble_operator(G.constant_map(d, CIRCLE)), k=5)
    js = rep.to_json_dict()
    assert js["kernel_dim_complex"] == 2
    assert len(js["eigenvalues"]) == 5
    rep.save_eigenvectors(tmp_path / "vecs")
    import json

    header = json.loads((tmp_path / "vecs.json").read_text())
    arr = np.fromfile(tmp_path / "vecs.bin", dtype=np.float64).reshape(
        header["shape"]
    )
    rebuilt = arr[..., 0] + 1j * arr[..., 1]
    assert np.allclose(rebuilt, rep.vectors)


# -- constraint solver -----------------------------------------------------------


def test_solve_constraint_fixed_point():
    d = G.TorusDomain(12, 12)
    u = G.constant_map(d, CIRCLE)
    base = D.solve_constraint(u, None)
    assert base.psi.l2_norm() == pytest.approx(1.0, abs=1e-12)
    assert base.residual <= 1e-10
    again = D.solve_constraint(u, base.psi, phase_ref=base.psi)
    assert np.max(np.abs(again.psi.values - base.psi.values)) <= 1e-12


def test_solve_constraint_kernel_not_minimal_on_sphere_constant():
    d = G.TorusDomain(8, 8)
    u = G.constant_map(d, SPHERE)  # kernel dim 4
    with pytest.raises(KernelNotMinimal):
        D.solve_constraint(u, None)


def test_solve_constraint_projection_degenerate():
    d = G.TorusDomain(8, 8)
    u = G.constant_map(d, CIRCLE)
    base = D.solve_constraint(u, None)
    # reference orthogonal to the kernel: its projection is ~zero
    ortho = base.psi.values.copy()
    ortho *= np.exp(1j * d.x1)[:, :, None, None]
    bad_ref = D.TwistedSpinorField(ortho, u)
    with pytest.raises(ProjectionDegenerate):
        D.solve_constraint(u, bad_ref)


def test_psi_lipschitz_stable_under_halving():
    d = G.TorusDomain(12, 12)
    u0 = G.constant_map(d, CIRCLE)
    base = D.solve_constraint(u0, None)
    rng = np.random.default_rng(15)
    eta = G.smooth_field(d, rng, 2, 1.0)
    ratios = []
    for amp in (1e-2, 5e-3):
        ua = G.MapField(CIRCLE.project(u0.values + amp * eta), d, CIRCLE)
        sol = D.solve_constraint(ua, base.psi, phase_ref=base.psi)
        num = np.max(
            np.sqrt(np.sum(np.abs(sol.psi.values - base.psi.values) ** 2, axis=(2, 3)))
        )
        ratios.append(num / ua.c0_distance(u0))
    assert abs(ratios[0] - ratios[1]) <= 0.25 * ratios[0]


def test_projection_norm_lower_bound_in_ball():
    d = G.TorusDomain(12, 12)
    scheme = G.ConstantsScheme.for_target(CIRCLE)
    u0 = G.constant_map(d, CIRCLE)
    base = D.solve_constraint(u0, None)
    for seed in range(5):
        up = G.perturbed_map(u0, scheme.ball_radius * 0.95, seed=seed)
        sol = D.solve_constraint(up, base.psi, phase_ref=base.psi)
        assert sol.projection_norm >= np.sqrt(0.5)
        assert sol.projection_norm <= 1.0 + 1e-12


def test_constraint_residual_bound():
    d = G.TorusDomain(12, 12)
    u = G.perturbed_map(G.constant_map(d, CIRCLE), 0.02, seed=21)
    sol = D.solve_constraint(u, None)
    assert sol.residual <= sol.report.gap * 1e-8


# -- Lipschitz diagnostics ---------------------------------------------------------


def test_operator_lipschitz_zero_for_equal_maps():
    d = G.TorusDomain(8, 8)
    u = G.constant_map(d, CIRCLE)
    assert D.operator_lipschitz_check(u, u) == 0.0


def test_operator_lipschitz_stable_under_halving():
    # a curved target and a base map with nonzero gradient keep the
    # first-order conjugation difference alive; on flat targets the sharp
    # constant is zero and the ratio decays with amplitude
    d = G.TorusDomain(10, 10)
    u0 = G.perturbed_map(G.constant_map(d, SPHERE), 0.3, seed=30)
    rng = np.random.default_rng(16)
    eta = G.smooth_field(d, rng, 3, 1.0)
    cs = []
    for amp in (1e-3, 5e-4):
        v = G.MapField(SPHERE.project(u0.values + amp * eta), d, SPHERE)
        cs.append(
            D.operator_lipschitz_check(v, u0, trials=4, rng=np.random.default_rng(17))
        )
    assert cs[0] > 0
    assert abs(cs[0] - cs[1]) <= 0.25 * cs[0]


def test_transport_holonomy_bounded():
    # the holonomy defect scales with the loop area, so the base-to-u leg
    # stays fixed while only the u-to-v distance halves
    d = G.TorusDomain(10, 10)
    u0 = G.constant_map(d, SPHERE)
    rng = np.random.default_rng(18)
    e1 = G.smooth_field(d, rng, 3, 1.0)
    e2 = G.smooth_field(d, rng, 3, 1.0)
    u = G.MapField(SPHERE.project(u0.values + 0.2 * e1), d, SPHERE)
    cs = []
    for amp in (2e-2, 1e-2):
        v = G.MapField(SPHERE.project(u.values + amp * e2), d, SPHERE)
        cs.append(
            D.transport_holonomy_check(
                u0, u, v, samples=3, rng=np.random.default_rng(19)
            )
        )
    assert np.isfinite(cs[0]) and cs[0] > 0
    assert abs(cs[0] - cs[1]) <= 0.25 * max(cs[0], cs[1])
