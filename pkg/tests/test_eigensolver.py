import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from ldeqd import eigensolver, geometry, kpcore
from ldeqd.eigensolver import SolveRequest, kramers_groups, residual, solve_interior
from ldeqd.kpcore import HB

GAAS_EC = -0.21 + 1.519
ME = 0.067


def uniform(dims, spacing):
    z = np.zeros(dims)
    return geometry.CompositionGrid(z, z, spacing, ternaries={0: "GaAs"})


def laplacian(n, t=1.0):
    return sp.diags([-t * np.ones(n - 1), 2 * t * np.ones(n), -t * np.ones(n - 1)], [-1, 0, 1], format="csr")


def discrete_levels(n, t, j):
    return 2 * t * (1 - np.cos(np.asarray(j) * math.pi / (n + 1)))


@pytest.fixture(scope="module")
def chain_op(db):
    return kpcore.assemble_single_band(uniform((1, 1, 1200), (1.0, 1.0, 0.05)), db, "electron")


def test_diagonal_trivial():
    sol = solve_interior(sp.diags([1.0, 2.0, 3.0]).tocsr(), SolveRequest(shift=2.1))
    assert sol.energies[0] == pytest.approx(2.0, abs=1e-14)
    assert np.allclose(np.abs(sol.envelopes[0]), [0, 1, 0])


@pytest.mark.parametrize("method", eigensolver.METHODS)
def test_discrete_laplacian_oracle(chain_op, method):
    n, h = 1200, 0.05
    t = HB / (ME * h * h)
    req = SolveRequest(shift=GAAS_EC - 1e-3, n_states=3, tol=1e-9, method=method, max_iterations=2000)
    sol = solve_interior(chain_op, req)
    assert sol.converged
    exact = GAAS_EC + discrete_levels(n, t, [1, 2, 3])
    assert np.allclose(np.sort(sol.energies) - GAAS_EC, exact - GAAS_EC, rtol=1e-10, atol=0)
    assert np.all(sol.residuals <= req.tol)


@pytest.mark.parametrize("inner", ["direct", "gmres"])
def test_inner_solvers(chain_op, inner):
    n, h = 1200, 0.05
    t = HB / (ME * h * h)
    sol = solve_interior(chain_op, SolveRequest(shift=GAAS_EC - 1e-3, n_states=2, tol=1e-9, inner=inner))
    exact = discrete_levels(n, t, [1, 2])
    assert np.allclose(np.sort(sol.energies) - GAAS_EC, exact, rtol=1e-10, atol=0)


def test_box_triplet(db):
    n, h = 32, 0.3
    op = kpcore.assemble_single_band(uniform((n, n, n), (h, h, h)), db, "electron")
    t = HB / (ME * h * h)
    sol = solve_interior(op, SolveRequest(shift=GAAS_EC, n_states=4, tol=1e-7, method="lobpcg-folded"))
    assert sol.converged
    e = np.sort(sol.energies) - GAAS_EC
    one, two = discrete_levels(n, t, [1, 2])
    assert e[0] == pytest.approx(3 * one, rel=1e-6)
    assert np.allclose(e[1:], 2 * one + two, rtol=1e-6)
    # cubic box: the triplet is exactly degenerate, the gap to the ground state
    # is the continuum ratio 6/3 within discretization error
    assert np.ptp(e[1:]) < 1e-6
    L = (n + 1) * h
    assert e[0] == pytest.approx(3 * HB * math.pi**2 / (ME * L**2), rel=2e-3)
    assert e[1] / e[0] == pytest.approx(2.0, rel=2e-3)


def test_normalization_and_orthonormality(chain_op):
    sol = solve_interior(chain_op, SolveRequest(shift=GAAS_EC, n_states=4, tol=1e-9))
    norms = np.sum(np.abs(sol.envelopes) ** 2, axis=1) * sol.voxel_volume
    assert np.allclose(norms, 1.0, atol=1e-10)
    assert np.abs(sol.gram() - np.eye(4)).max() < 1e-8


def test_kramers_pairs_orthonormal(db):
    # 8-band states come in Kramers pairs; both members reported and orthonormal
    shape = geometry.parametric_nanohole(6.0, 40.0)
    grid = geometry.rasterize(shape, (12, 12, 14), (5.0, 5.0, 1.2), min_margin=4.0)
    op = kpcore.assemble_kp8(grid, db)
    ec, _ = op.band_edges()
    req = SolveRequest(shift=float(ec.min()) - 0.005, n_states=2, tol=1e-7, method="lobpcg-folded")
    sol = solve_interior(op, req)
    assert sol.converged
    assert [len(g) for g in sol.levels()] == [2]
    assert np.abs(sol.gram() - np.eye(2)).max() < 1e-8


def test_reported_residuals_recompute(chain_op):
    sol = solve_interior(chain_op, SolveRequest(shift=GAAS_EC, n_states=3, tol=1e-9))
    again = residual(chain_op, sol)
    assert np.allclose(again, sol.residuals, rtol=0, atol=1e-12)


def test_residual_exact_and_mismatch():
    H = laplacian(50)
    w, V = np.linalg.eigh(H.toarray())
    sol = eigensolver.EigenSolution(w[:2], V[:, :2].T.astype(complex), np.zeros(2), 0, 0, 0.0, "dense")
    assert residual(H, sol).max() < 1e-13
    with pytest.raises(ValueError, match="do not match"):
        residual(laplacian(51), sol)


def test_residual_grows_with_perturbation():
    H = laplacian(200)
    w, V = np.linalg.eigh(H.toarray())
    noise = np.random.default_rng(3).standard_normal(200)
    noise -= V[:, 0] * (V[:, 0] @ noise)
    out = []
    for eps in [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1e-1]:
        x = V[:, 0] + eps * noise
        sol = eigensolver.EigenSolution(w[:1], x[None, :].astype(complex), np.zeros(1), 0, 0, 0.0, "dense")
        out.append(residual(H, sol)[0])
    assert np.all(np.diff(out) > 0)


@pytest.mark.parametrize("method", eigensolver.METHODS)
def test_shift_invariance(chain_op, method):
    c = 0.37
    req = SolveRequest(shift=GAAS_EC, n_states=3, tol=1e-9, method=method, max_iterations=2000)
    a = solve_interior(chain_op, req)
    H = chain_op.matrix + c * sp.identity(chain_op.dimension, format="csr")
    b = solve_interior(H, SolveRequest(shift=GAAS_EC + c, n_states=3, tol=1e-9, method=method, max_iterations=2000))
    assert np.allclose(np.sort(b.energies), np.sort(a.energies) + c, atol=1e-9)
    ia, ib = np.argsort(a.energies), np.argsort(b.energies)
    va = a.envelopes[ia] * math.sqrt(a.voxel_volume)
    vb = b.envelopes[ib]
    ov = np.abs(np.sum(va.conj() * vb, axis=1))
    assert np.all(ov > 1 - 1e-8)


@pytest.mark.parametrize("method", eigensolver.METHODS)
def test_determinism(chain_op, method):
    req = SolveRequest(shift=GAAS_EC, n_states=2, tol=1e-9, method=method, seed=7, max_iterations=2000)
    a = solve_interior(chain_op, req)
    b = solve_interior(chain_op, req)
    assert a.energies.tobytes() == b.energies.tobytes()
    assert a.envelopes.tobytes() == b.envelopes.tobytes()
    assert a.seed == 7


def test_non_convergence_flagged(chain_op):
    req = SolveRequest(shift=GAAS_EC, n_states=2, tol=1e-12, method="lobpcg-folded", max_iterations=3)
    sol = solve_interior(chain_op, req)
    assert not sol.converged
    assert sol.n_states == 2


def test_shift_on_eigenvalue_is_perturbed():
    H = laplacian(1000)
    e1 = discrete_levels(1000, 1.0, 1)
    sol = solve_interior(H, SolveRequest(shift=float(e1), n_states=1, tol=1e-10, inner="direct"))
    assert sol.energies[0] == pytest.approx(e1, rel=1e-10)


def test_request_validation():
    with pytest.raises(ValueError, match="n_states"):
        SolveRequest(shift=0.0, n_states=0)
    with pytest.raises(ValueError, match="tol"):
        SolveRequest(shift=0.0, tol=0.0)
    with pytest.raises(ValueError, match="method"):
        SolveRequest(shift=0.0, method="arnoldi")
    with pytest.raises(ValueError, match="max_iterations"):
        SolveRequest(shift=0.0, max_iterations=0)
    with pytest.raises(ValueError, match="exceeds"):
        solve_interior(laplacian(3), SolveRequest(shift=0.0, n_states=4))


def test_energies_sorted_by_distance(chain_op):
    shift = GAAS_EC + 0.004
    sol = solve_interior(chain_op, SolveRequest(shift=shift, n_states=4, tol=1e-9))
    d = np.abs(sol.energies - shift)
    assert np.all(np.diff(d) >= 0)


def test_save_load_round_trip(chain_op, tmp_path):
    sol = solve_interior(chain_op, SolveRequest(shift=GAAS_EC, n_states=2, tol=1e-9, seed=3))
    eigensolver.save_solution(sol, tmp_path / "s.npz")
    again = eigensolver.load_solution(tmp_path / "s.npz")
    assert np.array_equal(again.energies, sol.energies)
    assert np.array_equal(again.envelopes, sol.envelopes)
    assert again.dims == sol.dims and again.seed == 3 and again.voxel_volume == sol.voxel_volume
    assert np.array_equal(residual(chain_op, again), residual(chain_op, sol))


def test_kramers_groups():
    e = [1.0, 1.0 + 5e-7, 2.0, 1.5, 2.0 + 2e-7, 2.0 + 4e-7]
    assert kramers_groups(e) == [[0, 1], [3], [2, 4, 5]]
    assert kramers_groups(e, threshold=1e-8) == [[0], [1], [3], [2], [4], [5]]


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 40), k=st.integers(1, 3), seed=st.integers(0, 10))
def test_random_hermitian_matches_dense(n, k, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    H = (A + A.conj().T) / 2
    shift = float(rng.uniform(-1, 1))
    k = min(k, n)
    sol = solve_interior(H, SolveRequest(shift=shift, n_states=k))
    w = np.linalg.eigvalsh(H)
    near = w[np.argsort(np.abs(w - shift), kind="stable")[:k]]
    assert np.allclose(np.sort(sol.energies), np.sort(near), atol=1e-10)
    assert np.all(sol.residuals < 1e-9)

