from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from oracles import dense_lambda_max, design, pinv_full, pinv_hodgerank
from hodgemix.data import ComparisonDataset, apply_d, apply_d_adjoint, apply_X, build_dataset, connected_components
from hodgemix.errors import SolverDidNotConverge
from hodgemix.lbi import ModelFit, loss
from hodgemix.simulation import SimulationConfig, simulate
from hodgemix.solvers import (
    DisconnectedGraphWarning,
    LaplacianSolver,
    LsSolveOptions,
    cgls,
    full_least_squares,
    hodgerank,
    laplacian,
    power_iteration,
    spectral_norm_XtX,
)

# Fixed instance; expected values from the SVD pseudoinverse of the explicit design.
FIXED = [(0, 0, 1, 1.0), (0, 1, 2, 0.5), (1, 2, 0, -0.25), (1, 0, 1, 0.75), (0, 2, 3, 1.5), (1, 3, 1, -1.0), (0, 0, 3, 2.0)]
FIXED_HODGERANK = [0.8229166666666664, 0.11458333333333354, 0.18750000000000006, -1.125]
FIXED_FULL_THETA = [0.4374999999999996, 0.06845238095238118, 0.13988095238095183, -0.6458333333333326]
FIXED_FULL_BETA = [
    0.1875000000000001, 0.05654761904761913, -0.01488095238095277, -0.22916666666666663,
    0.2499999999999996, 0.01190476190476196, 0.15476190476190463, -0.4166666666666661,
    0.5, 0.14285714285714277,
]
FIXED_LAMBDA_MAX = 6.493959207434936


def _align(theta, labels):
    """Subtract per-component means so two solutions are comparable."""
    out = np.array(theta, dtype=float)
    for c in np.unique(labels):
        out[labels == c] -= out[labels == c].mean()
    return out


class TestHodgeRank:
    def test_chain(self, chain):
        np.testing.assert_allclose(hodgerank(chain), [1.0, 0.0, -1.0], atol=1e-12)

    def test_cyclic_triangle(self):
        ds = build_dataset([(0, 0, 1, 1.0), (0, 1, 2, 1.0), (0, 2, 0, 1.0)], 3, 1)
        np.testing.assert_allclose(hodgerank(ds), 0.0, atol=1e-12)

    def test_isolated_item(self):
        ds = build_dataset([(0, 0, 1, 1.0)], 3, 1)
        with pytest.warns(DisconnectedGraphWarning):
            theta = hodgerank(ds)
        np.testing.assert_allclose(theta, [0.5, -0.5, 0.0], atol=1e-12)

    def test_fixed_instance(self):
        ds = build_dataset(FIXED, 4, 2)
        np.testing.assert_allclose(hodgerank(ds), FIXED_HODGERANK, atol=1e-10)

    def test_weighted_matches_pinv(self, rng):
        for _ in range(5):
            ds = random_dataset(rng, 6, 2, 25, weighted=True)
            np.testing.assert_allclose(hodgerank(ds), pinv_hodgerank(ds), atol=1e-8)

    def test_zero_weight_record_is_ignored(self, chain):
        ds = ComparisonDataset.from_arrays(
            [0, 0, 0], [0, 1, 2], [1, 2, 0], [1.0, 1.0, 50.0], [1.0, 1.0, 0.0], n_items=3, n_annotators=1
        )
        np.testing.assert_allclose(hodgerank(ds), hodgerank(chain), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_gauge_and_optimality(self, seed, connected):
        ds = random_dataset(np.random.default_rng(seed), 6, 3, 15, weighted=True, connected=connected)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DisconnectedGraphWarning)
            theta = hodgerank(ds)
        labels = connected_components(ds).items
        for c in np.unique(labels):
            assert abs(theta[labels == c].mean()) <= 1e-12
        grad = apply_d_adjoint(ds, ds.weight * (ds.y - apply_d(ds, theta)))
        assert np.linalg.norm(grad) <= 1e-8 * max(1.0, np.linalg.norm(apply_d_adjoint(ds, ds.weight * ds.y)))
        np.testing.assert_allclose(_align(theta, labels), _align(pinv_hodgerank(ds), labels), atol=1e-7)


class TestFullLeastSquares:
    def test_fixed_instance(self):
        ds = build_dataset(FIXED, 4, 2)
        theta, beta = full_least_squares(ds)
        np.testing.assert_allclose(theta, FIXED_FULL_THETA, atol=1e-9)
        np.testing.assert_allclose(beta, FIXED_FULL_BETA, atol=1e-9)

    def test_consistent_single_annotator(self, rng):
        theta_star = rng.normal(size=5)
        theta_star -= theta_star.mean()
        ds0 = random_dataset(rng, 5, 1, 20)
        ds = ds0.with_responses(apply_d(ds0, theta_star))
        theta, beta = full_least_squares(ds)
        fit = ModelFit.from_beta(0, theta, beta, 1)
        assert loss(ds, fit) <= 1e-20
        # the min-norm split shares a consistent signal between theta and delta
        np.testing.assert_allclose(theta + beta[:5], theta_star, atol=1e-9)

    def test_left_clicker_recovers_gamma(self):
        rng = np.random.default_rng(3)
        n, N = 10, 3000
        i = rng.integers(0, n, N)
        j = rng.integers(0, n - 1, N)
        j += j >= i
        # annotator 0 is unbiased and consistent with theta* = 0, annotator 1 clicks left
        u = np.r_[np.zeros(N // 2, int), np.ones(N - N // 2, int)]
        y = np.where(u == 1, 1.0, rng.choice([-1.0, 1.0], N) * 0.0)
        ds = ComparisonDataset.from_arrays(u, i, j, y, n_items=n, n_annotators=2)
        theta, beta = full_least_squares(ds)
        delta, gamma = beta[: 2 * n].reshape(2, n), beta[2 * n :]
        # the min-norm solution splits the common offset between annotators;
        # the difference is identified
        assert gamma[1] - gamma[0] == pytest.approx(1.0, abs=1e-8)
        assert np.abs(delta).max() <= 1e-8 and np.abs(theta).max() <= 1e-8

    def test_loss_not_worse_than_hodgerank(self, rng):
        for _ in range(5):
            ds = random_dataset(rng, 5, 3, 30, weighted=True)
            theta, beta = full_least_squares(ds)
            lf = loss(ds, ModelFit.from_beta(0, theta, beta, 3))
            lh = loss(ds, ModelFit.common(hodgerank(ds), 3))
            assert lf <= lh + 1e-12

    def test_matches_pinv(self, rng):
        for _ in range(10):
            ds = random_dataset(rng, int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(5, 31)), weighted=True)
            theta, beta = full_least_squares(ds)
            t_ref, b_ref = pinv_full(ds)
            np.testing.assert_allclose(theta, t_ref, atol=1e-7)
            np.testing.assert_allclose(beta, b_ref, atol=1e-7)

    def test_private_gauge(self, rng):
        ds = random_dataset(rng, 6, 3, 12)
        theta, beta = full_least_squares(ds)
        lab = connected_components(ds)
        delta = beta[: ds.n_annotators * 6].reshape(-1, 6)
        for u in range(ds.n_annotators):
            assert np.all(delta[u, ~lab.touched[u]] == 0.0)
            comp = lab.annotator_items[u]
            for c in np.unique(comp[lab.touched[u]]):
                assert abs(delta[u, comp == c].sum()) <= 1e-10

    def test_noiseless_recovery(self):
        cfg = SimulationConfig(n_items=8, n_annotators=5, p1=0, p2=0, sigma_noise=0.0, n_min=30, n_max=40, rng_seed=2)
        ds, truth = simulate(cfg)
        target = truth.theta_star - truth.theta_star.mean()
        np.testing.assert_allclose(hodgerank(ds), target, atol=1e-8)
        theta, beta = full_least_squares(ds)
        fit = ModelFit.from_beta(0, theta, beta, 5)
        assert loss(ds, fit) <= 1e-16
        # min-norm shares the signal evenly: theta = U/(U+1) theta*, and every
        # personalized score vector theta + delta^u equals theta*
        np.testing.assert_allclose(theta, 5 / 6 * target, atol=1e-8)
        for u in range(5):
            np.testing.assert_allclose(theta + fit.delta[u], target, atol=1e-8)
        assert np.abs(fit.gamma).max() <= 1e-8

    def test_non_convergence_raises(self, rng):
        ds = random_dataset(rng, 6, 3, 30)
        with pytest.raises(SolverDidNotConverge) as info:
            full_least_squares(ds, LsSolveOptions(max_iterations=2))
        assert info.value.iterations == 2


class TestSpectralNorm:
    def test_single_record(self):
        ds = build_dataset([(0, 0, 1, 1.0)], 2, 1)
        assert spectral_norm_XtX(ds, 1e-10) == pytest.approx(3.0, rel=1e-9)

    def test_fixed_instance(self):
        ds = build_dataset(FIXED, 4, 2)
        assert spectral_norm_XtX(ds, 1e-9) == pytest.approx(FIXED_LAMBDA_MAX, rel=1e-7)

    def test_duplication_doubles(self, rng):
        ds = random_dataset(rng, 5, 2, 15)
        twice = ComparisonDataset.from_arrays(
            np.tile(ds.annotator, 2), np.tile(ds.left, 2), np.tile(ds.right, 2), np.tile(ds.y, 2),
            n_items=5, n_annotators=2,
        )
        assert spectral_norm_XtX(twice, 1e-10) == pytest.approx(2 * spectral_norm_XtX(ds, 1e-10), rel=1e-8)

    def test_bounds(self, rng):
        ds = random_dataset(rng, 6, 3, 30, weighted=True)
        _, X = design(ds)
        lam = spectral_norm_XtX(ds, 1e-8)
        assert lam >= (ds.weight[:, None] * X * X).sum(axis=0).max() * (1 - 1e-8)
        assert lam == pytest.approx(dense_lambda_max(ds), rel=1e-6)

    def test_power_iteration_on_matrix(self):
        A = np.diag([5.0, 2.0, 1.0])
        assert power_iteration(lambda v: A @ v, 3, 1e-10) == pytest.approx(5.0, rel=1e-9)
        assert power_iteration(lambda v: 0 * v, 3) == 0.0
        with pytest.raises(SolverDidNotConverge):
            power_iteration(lambda v: np.diag([1.0, 0.999999, 0.5]) @ v, 3, 1e-14, max_iterations=5)


class TestLaplacianSolver:
    def test_dense_and_sparse_agree(self, rng):
        for connected in (True, False):
            ds = random_dataset(rng, 8, 2, 12, connected=connected)
            rhs = apply_d_adjoint(ds, ds.y)
            a = LaplacianSolver(ds).solve(rhs)
            b = LaplacianSolver(ds, dense_limit=0).solve(rhs)
            np.testing.assert_allclose(a, b, atol=1e-9)
            np.testing.assert_allclose(a, np.linalg.pinv(laplacian(ds)) @ rhs, atol=1e-9)

    def test_laplacian_matches_dense(self, rng):
        ds = random_dataset(rng, 5, 2, 14, weighted=True)
        d, _ = design(ds)
        np.testing.assert_allclose(laplacian(ds), d.T @ (ds.weight[:, None] * d), atol=1e-12)


def test_cgls_small_system():
    A = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
    b = np.array([1.0, 2.0, 3.0])
    x, its = cgls(lambda v: A @ v, lambda r: A.T @ r, b, 2, 1e-12, 10)
    np.testing.assert_allclose(x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-10)
    assert its <= 2
    x0, its0 = cgls(lambda v: A @ v, lambda r: A.T @ r, np.zeros(3), 2, 1e-12, 10)
    assert its0 == 0 and np.all(x0 == 0)


def test_options_validation():
    with pytest.raises(Exception):
        LsSolveOptions(rel_tolerance=0)
    with pytest.raises(Exception):
        LsSolveOptions(max_iterations=0)
