"""Least-squares building blocks.

All solves are minimum-norm: CGLS started from zero never leaves the row
space of the operator, so the solution it converges to is orthogonal to the
null space (constant shifts of scores within a connected component).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse.csgraph import connected_components as _cc

from .data import (
    ComparisonDataset,
    apply_d,
    apply_d_adjoint,
    apply_X,
    apply_X_adjoint,
)
from .errors import InputError, SolverDidNotConverge

log = logging.getLogger(__name__)

__all__ = [
    "LsSolveOptions",
    "DisconnectedGraphWarning",
    "cgls",
    "hodgerank",
    "full_least_squares",
    "spectral_norm_XtX",
    "power_iteration",
    "laplacian",
    "LaplacianSolver",
    "center_components",
]


class DisconnectedGraphWarning(UserWarning):
    """Score differences across components of the item graph are unidentifiable."""


@dataclass(frozen=True)
class LsSolveOptions:
    rel_tolerance: float = 1e-10
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if not self.rel_tolerance > 0:
            raise InputError("rel_tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise InputError("max_iterations must be positive")

    def iterations_for(self, dataset: ComparisonDataset) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return 10 * (dataset.n_items + dataset.n_annotators * dataset.n_items)


def cgls(
    matvec: Callable[[NDArray], NDArray],
    rmatvec: Callable[[NDArray], NDArray],
    b: NDArray,
    n: int,
    rel_tolerance: float,
    max_iterations: int,
) -> tuple[NDArray[np.float64], int]:
    """Conjugate gradients on the normal equations ``A^T A x = A^T b``.

    Stops once ``||A^T (b - A x)|| <= rel_tolerance * ||A^T b||``.  Returns
    ``(x, iterations)``; raises :class:`SolverDidNotConverge` otherwise.
    """
    x = np.zeros(n)
    r = np.array(b, dtype=np.float64)
    s = rmatvec(r)
    target = rel_tolerance * np.linalg.norm(s)
    gamma = s @ s
    if np.sqrt(gamma) <= target or gamma == 0.0:
        return x, 0
    p = s.copy()
    for it in range(1, max_iterations + 1):
        q = matvec(p)
        qq = q @ q
        if qq == 0.0:
            break
        a = gamma / qq
        x += a * p
        r -= a * q
        s = rmatvec(r)
        gamma_new = s @ s
        if np.sqrt(gamma_new) <= target:
            return x, it
        p *= gamma_new / gamma
        p += s
        gamma = gamma_new
    raise SolverDidNotConverge(
        f"CGLS: normal-equation residual {np.sqrt(gamma):.3e} above {target:.3e} "
        f"after {max_iterations} iterations",
        iterations=max_iterations,
        residual=float(np.sqrt(gamma)),
    )


def _positive_weight_components(dataset: ComparisonDataset) -> tuple[int, NDArray[np.int64]]:
    keep = dataset.weight > 0
    g = sparse.coo_matrix(
        (np.ones(int(keep.sum())), (dataset.left[keep], dataset.right[keep])),
        shape=(dataset.n_items, dataset.n_items),
    )
    n_comp, labels = _cc(g.tocsr(), directed=False)
    return int(n_comp), labels.astype(np.int64)


def center_components(theta: NDArray, labels: NDArray[np.int64], n_components: int) -> NDArray[np.float64]:
    """Subtract the per-component mean."""
    sums = np.bincount(labels, theta, minlength=n_components)
    sizes = np.bincount(labels, minlength=n_components)
    return theta - (sums / sizes)[labels]


def _warn_if_disconnected(dataset: ComparisonDataset, n_comp: int) -> None:
    if n_comp > 1:
        warnings.warn(
            f"item graph has {n_comp} connected components; scores are centred per component "
            "and are not comparable across components",
            DisconnectedGraphWarning,
            stacklevel=3,
        )


def hodgerank(dataset: ComparisonDataset, options: LsSolveOptions | None = None) -> NDArray[np.float64]:
    """Common ranking: min-norm solution of ``min ||sqrt(w) (y - d theta)||``.

    Scores have mean zero over every connected component of the item graph.
    """
    options = options or LsSolveOptions()
    sw = dataset.sqrt_weight
    theta, _ = cgls(
        lambda v: sw * apply_d(dataset, v),
        lambda r: apply_d_adjoint(dataset, sw * r),
        sw * dataset.y,
        dataset.n_items,
        options.rel_tolerance,
        options.iterations_for(dataset),
    )
    n_comp, labels = _positive_weight_components(dataset)
    _warn_if_disconnected(dataset, n_comp)
    return center_components(theta, labels, n_comp)


def full_least_squares(
    dataset: ComparisonDataset, options: LsSolveOptions | None = None
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Min-norm least squares over ``(theta, beta)`` jointly: the full model.

    Returns ``(theta, beta)``.  Min-norm implies the gauge conditions: theta
    averages to zero per item component, and each ``delta^u`` averages to zero
    over every component of the annotator's private subgraph (and vanishes on
    items the annotator never compared).
    """
    options = options or LsSolveOptions()
    n = dataset.n_items
    sw = dataset.sqrt_weight

    def matvec(v):
        return sw * (apply_d(dataset, v[:n]) + apply_X(dataset, v[n:]))

    def rmatvec(r):
        r = sw * r
        return np.concatenate([apply_d_adjoint(dataset, r), apply_X_adjoint(dataset, r)])

    x, it = cgls(
        matvec,
        rmatvec,
        sw * dataset.y,
        n + dataset.beta_size,
        options.rel_tolerance,
        options.iterations_for(dataset),
    )
    log.debug("full least squares converged in %d CGLS iterations", it)
    n_comp, _ = _positive_weight_components(dataset)
    _warn_if_disconnected(dataset, n_comp)
    return x[:n], x[n:]


def power_iteration(
    matvec: Callable[[NDArray], NDArray],
    size: int,
    tol: float = 1e-6,
    *,
    max_iterations: int = 100_000,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a symmetric PSD map.

    Stops once the eigen-residual ``||A v - lam v||`` falls to ``tol * lam``
    for the unit iterate ``v`` and its Rayleigh quotient ``lam``; that bounds
    the distance from ``lam`` to the spectrum by the same amount.  The start
    vector is Gaussian from ``seed``.
    """
    v = np.random.default_rng(seed).standard_normal(size)
    v /= np.linalg.norm(v)
    res = np.inf
    for it in range(1, max_iterations + 1):
        u = matvec(v)
        lam = float(v @ u)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        res = float(np.linalg.norm(u - lam * v))
        if res <= tol * abs(lam):
            return lam
        v = u / norm
    raise SolverDidNotConverge(
        f"power iteration: eigen-residual {res:.3e} above relative tolerance {tol} after {max_iterations} sweeps",
        iterations=max_iterations,
        residual=res,
    )


def spectral_norm_XtX(
    dataset: ComparisonDataset,
    tol: float = 1e-6,
    *,
    max_iterations: int = 100_000,
    seed: int = 0,
) -> float:
    """``||X^T W X||_2`` by power iteration on ``beta -> X^T W X beta``.

    ``W`` is the diagonal of record weights (identity for unweighted data).
    """
    w = dataset.weight
    return power_iteration(
        lambda v: apply_X_adjoint(dataset, w * apply_X(dataset, v)),
        dataset.beta_size,
        tol,
        max_iterations=max_iterations,
        seed=seed,
    )


def laplacian(dataset: ComparisonDataset, *, dense: bool = True):
    """Weighted graph Laplacian ``d^T W d`` (``n_items x n_items``)."""
    n = dataset.n_items
    w = dataset.weight
    off = sparse.coo_matrix((-w, (dataset.left, dataset.right)), shape=(n, n))
    deg = np.bincount(dataset.left, w, minlength=n) + np.bincount(dataset.right, w, minlength=n)
    L = (off + off.T + sparse.diags(deg)).tocsr()
    return L.toarray() if dense else L


class LaplacianSolver:
    """Repeated min-norm solves ``theta = (d^T W d)^+ rhs``.

    For up to ``dense_limit`` items the pseudoinverse is formed once, using
    ``L^+ = (L + P)^{-1} - P`` where ``P`` projects onto the per-component
    constants.  Larger graphs fall back to CGLS on the sparse Laplacian.
    """

    def __init__(self, dataset: ComparisonDataset, options: LsSolveOptions | None = None, dense_limit: int = 4000):
        self.options = options or LsSolveOptions()
        self.max_iterations = self.options.iterations_for(dataset)
        self.n_components, self.labels = _positive_weight_components(dataset)
        n = dataset.n_items
        self.pinv: NDArray[np.float64] | None = None
        self.L = None
        if n <= dense_limit:
            sizes = np.bincount(self.labels, minlength=self.n_components)
            P = (self.labels[:, None] == self.labels[None, :]) / sizes[self.labels][:, None]
            self.pinv = np.linalg.inv(laplacian(dataset) + P) - P
        else:
            self.L = laplacian(dataset, dense=False)

    def solve(self, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.pinv is not None:
            return self.pinv @ rhs
        L = self.L
        theta, _ = cgls(lambda v: L @ v, lambda r: L @ r, rhs, L.shape[0], self.options.rel_tolerance, self.max_iterations)
        return center_components(theta, self.labels, self.n_components)
