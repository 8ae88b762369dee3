"""Linearized Bregman iteration for the mixed-effects ranking model.

One run produces a whole regularization path: starting from the common
ranking with no random effects, annotator deviations ``delta^u`` (one group
per annotator) and position biases ``gamma^u`` enter the model one by one,
strongest signals first.

Per iteration ``k``::

    theta  <- argmin_theta L(theta, beta)          (exact, min-norm)
    z      <- z + (alpha / m) X^T W (y - d theta - X beta)
    beta   <- kappa * shrinkage(z)
    t      <- (k + 1) * alpha

with ``L(theta, beta) = ||sqrt(W)(y - d theta - X beta)||^2 / (2m)``.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .data import (
    ComparisonDataset,
    apply_d,
    apply_d_adjoint,
    apply_X,
    apply_X_adjoint,
    join_beta,
    split_beta,
)
from .errors import ConfigError, ConfigUnstable, DimensionMismatch, IndexOutOfRange, TOutOfRange
from .solvers import LaplacianSolver, LsSolveOptions, hodgerank, spectral_norm_XtX

log = logging.getLogger(__name__)

__all__ = [
    "LbiConfig",
    "PathPoint",
    "Activation",
    "LbiPath",
    "ModelFit",
    "shrinkage",
    "penalty",
    "lbi_fit",
    "interpolate",
    "predict",
    "loss",
    "mse",
]

#: Memory budget (float64 entries) for the per-annotator Gram blocks.
GRAM_BUDGET = 8_000_000


@dataclass(frozen=True)
class LbiConfig:
    """Path parameters.

    Every ``checkpoint_every``-th iterate is stored; if ``max_points`` is set
    and the store overflows, every other stored iterate is dropped and the
    stride doubles.

    ``alpha="auto"`` picks ``m / (kappa * ||X^T X||_2)``.  The run stops at
    ``max_iterations`` or once ``t >= t_max``, whichever comes first; with
    neither set it stops when the number of active groups has not changed
    by more than ``saturation_tol`` of all groups over the last
    ``saturation_fraction`` of the iterations, counted only once at least
    half of the groups are active.  A run where nothing can ever activate
    (residual already orthogonal to ``X``) stops as stationary.
    """

    kappa: float = 100.0
    alpha: float | str = "auto"
    max_iterations: int | None = None
    t_max: float | None = None
    checkpoint_every: int = 1
    max_points: int | None = None
    rng_seed: int = 0
    z_update_theta: str = "fresh"
    saturation_fraction: float = 0.1
    saturation_tol: float = 0.01
    min_iterations: int = 100
    iteration_cap: int = 200_000
    power_tol: float = 1e-6
    backend: str = "auto"
    solver: LsSolveOptions = field(default_factory=LsSolveOptions)

    def __post_init__(self) -> None:
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ConfigError("kappa must be positive")
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                raise ConfigError(f"alpha must be a positive number or 'auto', got {self.alpha!r}")
        elif not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ConfigError("max_iterations must be nonnegative")
        if self.t_max is not None and not self.t_max >= 0:
            raise ConfigError("t_max must be nonnegative")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")
        if self.max_points is not None and self.max_points < 2:
            raise ConfigError("max_points must be at least 2")
        if self.z_update_theta not in ("fresh", "stale"):
            raise ConfigError("z_update_theta must be 'fresh' or 'stale'")
        if self.backend not in ("auto", "gram", "records"):
            raise ConfigError("backend must be 'auto', 'gram' or 'records'")
        if not 0 < self.saturation_fraction < 1:
            raise ConfigError("saturation_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "solver"}
        d["solver"] = {"rel_tolerance": self.solver.rel_tolerance, "max_iterations": self.solver.max_iterations}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LbiConfig":
        d = dict(d)
        solver = d.pop("solver", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown LBI config keys: {sorted(unknown)}")
        if solver is not None:
            d["solver"] = LsSolveOptions(**solver)
        return cls(**d)


def shrinkage(z: ArrayLike, n_items: int, n_annotators: int) -> NDArray[np.float64]:
    """Proximal map of ``P(beta) = ||gamma||_1 + sum_u ||delta^u||_2``.

    Group soft-thresholding on every ``delta^u`` block and scalar
    soft-thresholding on every ``gamma^u``; ``||z|| <= 1`` maps to zero.
    Multiply by ``kappa`` to get ``beta``.
    """
    z = np.asarray(z, dtype=np.float64)
    zd, zg = split_beta(z, n_items, n_annotators)
    norms = np.sqrt(np.einsum("ij,ij->i", zd, zd))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        fd = np.where(norms > 1.0, 1.0 - 1.0 / norms, 0.0)
        fg = np.where(np.abs(zg) > 1.0, 1.0 - 1.0 / np.abs(zg), 0.0)
    return join_beta(fd[:, None] * zd, fg * zg)


def penalty(beta: ArrayLike, n_items: int, n_annotators: int) -> float:
    delta, gamma = split_beta(np.asarray(beta, dtype=np.float64), n_items, n_annotators)
    return float(np.abs(gamma).sum() + np.linalg.norm(delta, axis=1).sum())


@dataclass(frozen=True)
class ModelFit:
    """Dense parameter snapshot ``(theta, delta, gamma)`` at path time ``t``."""

    t: float
    theta: NDArray[np.float64]
    delta: NDArray[np.float64]
    gamma: NDArray[np.float64]

    @property
    def n_items(self) -> int:
        return self.theta.size

    @property
    def n_annotators(self) -> int:
        return self.gamma.size

    @property
    def beta(self) -> NDArray[np.float64]:
        return join_beta(self.delta, self.gamma)

    @classmethod
    def common(cls, theta: ArrayLike, n_annotators: int, t: float = 0.0) -> "ModelFit":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(t, theta, np.zeros((n_annotators, theta.size)), np.zeros(n_annotators))

    @classmethod
    def from_beta(cls, t: float, theta: ArrayLike, beta: ArrayLike, n_annotators: int) -> "ModelFit":
        theta = np.asarray(theta, dtype=np.float64)
        delta, gamma = split_beta(np.asarray(beta, dtype=np.float64), theta.size, n_annotators)
        return cls(t, theta, delta, gamma)


@dataclass(frozen=True, eq=False)
class PathPoint:
    """One stored iterate.  ``beta`` and the active sets derive from ``z``."""

    t: float
    k: int
    theta: NDArray[np.float64]
    z: NDArray[np.float64]
    kappa: float
    n_items: int
    n_annotators: int

    @cached_property
    def beta(self) -> NDArray[np.float64]:
        return self.kappa * shrinkage(self.z, self.n_items, self.n_annotators)

    @property
    def delta(self) -> NDArray[np.float64]:
        return split_beta(self.beta, self.n_items, self.n_annotators)[0]

    @property
    def gamma(self) -> NDArray[np.float64]:
        return split_beta(self.beta, self.n_items, self.n_annotators)[1]

    @property
    def active_delta(self) -> NDArray[np.int64]:
        return np.flatnonzero(np.any(self.delta != 0.0, axis=1))

    @property
    def active_gamma(self) -> NDArray[np.int64]:
        return np.flatnonzero(self.gamma != 0.0)

    def fit(self) -> ModelFit:
        delta, gamma = split_beta(self.beta, self.n_items, self.n_annotators)
        return ModelFit(self.t, self.theta, delta, gamma)


@dataclass(frozen=True)
class Activation:
    annotator: int
    block: str  # "delta" or "gamma"
    t: float
    k: int


@dataclass(eq=False)
class LbiPath:
    config: LbiConfig
    alpha: float
    spectral_norm: float
    m: int
    n_items: int
    n_annotators: int
    points: list[PathPoint]
    activations: list[Activation]
    n_iterations: int
    stop_reason: str
    dataset_digest: str = ""
    checkpoint_every: int = 1

    @property
    def kappa(self) -> float:
        return self.config.kappa

    @property
    def t_end(self) -> float:
        return self.points[-1].t

    @cached_property
    def times(self) -> list[float]:
        return [p.t for p in self.points]

    def first_activation(self, block: str) -> NDArray[np.float64]:
        """First path time each annotator's ``block`` became nonzero (NaN if never)."""
        out = np.full(self.n_annotators, np.nan)
        for a in self.activations:
            if a.block == block:
                out[a.annotator] = a.t
        return out

    def fit_at(self, t: float) -> ModelFit:
        return interpolate(self, t)


# -- engine ----------------------------------------------------------------------


class _GramEngine:
    """Works on per-annotator Gram blocks ``G_u = X_u^T W X_u`` of size ``(n+1)^2``.

    ``X_u^T W d`` equals the first ``n`` columns of ``G_u``, so an iteration
    costs ``O(U n^2)`` independent of the record count.  Vectors in beta
    space use the block layout ``(U, n+1)`` with ``gamma`` in the last column.
    """

    def __init__(self, ds: ComparisonDataset):
        n, U = ds.n_items, ds.n_annotators
        s = n + 1
        w, wy = ds.weight, ds.weight * ds.y
        u, l, r = ds.annotator, ds.left, ds.right
        base = u * s * s
        idx = np.concatenate([
            base + l * s + l, base + r * s + r, base + n * s + n,
            base + l * s + r, base + r * s + l,
            base + l * s + n, base + n * s + l,
            base + r * s + n, base + n * s + r,
        ])
        vals = np.concatenate([w, w, w, -w, -w, w, w, -w, -w])
        self.G = np.bincount(idx, vals, minlength=U * s * s).reshape(U, s, s)
        self.Gtheta = np.ascontiguousarray(self.G[:, :, :n]).reshape(U * s, n)
        b = np.bincount(u * s + l, wy, minlength=U * s) - np.bincount(u * s + r, wy, minlength=U * s)
        b += np.bincount(u * s + n, wy, minlength=U * s)
        self.b = b.reshape(U, s)
        self.dWy = apply_d_adjoint(ds, wy)
        self.n = n
        self.H = np.zeros_like(self.b)

    def xtx(self, V: NDArray) -> NDArray:
        return np.einsum("uij,uj->ui", self.G, V)

    def lambda_max(self, config: "LbiConfig") -> float:
        # X^T W X is block diagonal with the G_u as blocks
        return float(np.linalg.eigvalsh(self.G)[:, -1].max())

    def prepare(self, B: NDArray) -> None:
        self.H = self.xtx(B)

    def theta_rhs(self) -> NDArray:
        return self.dWy - self.H[:, : self.n].sum(axis=0)

    def gradient(self, theta: NDArray) -> NDArray:
        return self.b - self.H - (self.Gtheta @ theta).reshape(self.b.shape)


class _RecordEngine:
    """Matrix-free operator applications, ``O(m)`` per iteration."""

    def __init__(self, ds: ComparisonDataset):
        self.ds = ds
        self.dWy = apply_d_adjoint(ds, ds.weight * ds.y)
        self.n, self.U = ds.n_items, ds.n_annotators
        self.xb = np.zeros(ds.m)

    def _blocks(self, flat: NDArray) -> NDArray:
        delta, gamma = split_beta(flat, self.n, self.U)
        return np.concatenate([delta, gamma[:, None]], axis=1)

    def xtx(self, V: NDArray) -> NDArray:
        ds = self.ds
        return self._blocks(apply_X_adjoint(ds, ds.weight * apply_X(ds, _to_flat(V, self.n))))

    def lambda_max(self, config: "LbiConfig") -> float:
        return spectral_norm_XtX(self.ds, config.power_tol, seed=config.rng_seed)

    def prepare(self, B: NDArray) -> None:
        self.xb = apply_X(self.ds, _to_flat(B, self.n))

    def theta_rhs(self) -> NDArray:
        return self.dWy - apply_d_adjoint(self.ds, self.ds.weight * self.xb)

    def gradient(self, theta: NDArray) -> NDArray:
        ds = self.ds
        r = ds.y - apply_d(ds, theta) - self.xb
        return self._blocks(apply_X_adjoint(ds, ds.weight * r))


def _to_flat(B: NDArray, n: int) -> NDArray[np.float64]:
    return join_beta(B[:, :n], B[:, n])


def _block_shrink(Z: NDArray, n: int, kappa: float) -> tuple[NDArray, NDArray, NDArray]:
    """``kappa * shrinkage`` in block layout, plus the active masks."""
    zd, zg = Z[:, :n], Z[:, n]
    norms = np.sqrt(np.einsum("ij,ij->i", zd, zd))
    act_d, act_g = norms > 1.0, np.abs(zg) > 1.0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        fd = np.where(act_d, 1.0 - 1.0 / norms, 0.0)
        fg = np.where(act_g, 1.0 - 1.0 / np.abs(zg), 0.0)
    B = np.empty_like(Z)
    B[:, :n] = kappa * (fd[:, None] * zd)
    B[:, n] = kappa * (fg * zg)
    return B, act_d, act_g


def _make_engine(dataset: ComparisonDataset, backend: str):
    n, U = dataset.n_items, dataset.n_annotators
    if backend == "auto":
        backend = "gram" if U * (n + 1) ** 2 <= GRAM_BUDGET else "records"
    return _GramEngine(dataset) if backend == "gram" else _RecordEngine(dataset)


def resolve_alpha(dataset: ComparisonDataset, config: LbiConfig, engine=None) -> tuple[float, float]:
    """``(alpha, ||X^T W X||_2)``; validates an explicit step against the stability bound.

    The norm comes from power iteration, or from the exact per-annotator
    block eigenvalues when ``engine`` holds the Gram blocks.
    """
    if engine is None:
        lam = spectral_norm_XtX(dataset, config.power_tol, seed=config.rng_seed)
    else:
        lam = engine.lambda_max(config)
    m = dataset.m
    if config.alpha == "auto":
        if lam == 0.0:
            raise ConfigError("X^T X vanishes (all weights zero?); cannot pick alpha")
        return m / (config.kappa * lam), lam
    alpha = float(config.alpha)
    if alpha * config.kappa * lam / m >= 2.0:
        raise ConfigUnstable(
            f"alpha*kappa*||X^T X||/m = {alpha * config.kappa * lam / m:.4g} must stay below 2"
        )
    return alpha, lam


def lbi_fit(
    dataset: ComparisonDataset,
    config: LbiConfig | None = None,
    *,
    record_at: Iterable[float] | None = None,
) -> LbiPath:
    """Run the iteration and return the stored path.

    By default every ``checkpoint_every``-th iterate is stored (plus the
    first and the last).  With ``record_at``, only the iterates bracketing
    each requested time are kept, which is all :func:`interpolate` needs at
    those times; the activation log is always complete.
    """
    config = config or LbiConfig()
    n, U, m = dataset.n_items, dataset.n_annotators, dataset.m
    engine = _make_engine(dataset, config.backend)
    alpha, lam = resolve_alpha(dataset, config, engine)
    kappa = config.kappa
    step = alpha / m
    solver = LaplacianSolver(dataset, config.solver)

    keep: set[int] | None = None
    if record_at is not None:
        keep = set()
        for t in record_at:
            q = t / alpha
            keep.update({math.floor(q), math.ceil(q)})

    K = config.max_iterations
    if config.t_max is not None:
        k_t = math.ceil(config.t_max / alpha - 1e-9)
        K = k_t if K is None else min(K, k_t)
    saturate = K is None
    if saturate:
        K = config.iteration_cap
    n_groups = 2 * int(np.count_nonzero(dataset.counts))

    def point(k: int, theta: NDArray, Z: NDArray) -> PathPoint:
        return PathPoint(k * alpha, k, theta.copy(), _to_flat(Z, n), kappa, n, U)

    theta = hodgerank(dataset, config.solver)
    Z = np.zeros((U, n + 1))
    B = np.zeros((U, n + 1))
    points = [point(0, theta, Z)]
    activations: list[Activation] = []
    seen_d = np.zeros(U, dtype=bool)
    seen_g = np.zeros(U, dtype=bool)
    history = [0]  # active-group count after each iteration
    stop_reason = "iteration_cap" if saturate else "max_iterations"
    gscale = max(1.0, float(np.abs(engine.gradient(theta)).max()))
    stale = config.z_update_theta == "stale"
    every = config.checkpoint_every

    k = 0
    while k < K:
        engine.prepare(B)
        theta_new = solver.solve(engine.theta_rhs())
        g = engine.gradient(theta if stale else theta_new)
        theta = theta_new
        Z += step * g
        B, act_d, act_g = _block_shrink(Z, n, kappa)
        k += 1
        t = k * alpha
        new_d = act_d & ~seen_d
        new_g = act_g & ~seen_g
        if new_d.any() or new_g.any():
            for u in np.flatnonzero(new_d):
                activations.append(Activation(int(u), "delta", t, k))
            for u in np.flatnonzero(new_g):
                activations.append(Activation(int(u), "gamma", t, k))
            seen_d |= new_d
            seen_g |= new_g
        count = int(np.count_nonzero(act_d) + np.count_nonzero(act_g))
        history.append(count)
        last = k == K
        if saturate and k >= config.min_iterations:
            if not activations and np.abs(g).max() <= 1e-12 * gscale:
                stop_reason, last = "stationary", True
            elif count >= 0.5 * n_groups:
                back = history[k - math.ceil(config.saturation_fraction * k)]
                if count - back <= config.saturation_tol * n_groups:
                    stop_reason, last = "saturated", True
        if last or (keep is None and k % every == 0) or (keep is not None and k in keep):
            points.append(point(k, theta, Z))
            if keep is None and config.max_points is not None and len(points) > config.max_points:
                every *= 2
                points = [p for p in points if p.k % every == 0 or (last and p.k == k)]
        if last:
            break
    if not saturate and config.t_max is not None and k * alpha >= config.t_max - 1e-12 * alpha:
        stop_reason = "t_max"

    log.debug("LBI stopped after %d iterations (%s), %d activations", k, stop_reason, len(activations))
    return LbiPath(
        config=config,
        alpha=alpha,
        spectral_norm=lam,
        m=m,
        n_items=n,
        n_annotators=U,
        points=points,
        activations=activations,
        n_iterations=k,
        stop_reason=stop_reason,
        dataset_digest=dataset.digest,
        checkpoint_every=every,
    )


def interpolate(path: LbiPath, t: float) -> ModelFit:
    """Model at time ``t``: linear in ``(theta, z)`` between the bracketing
    stored iterates, then ``beta = kappa * shrinkage(z)``."""
    times = path.times
    if not (0.0 <= t <= times[-1]):
        raise TOutOfRange(f"t={t} outside the path range [0, {times[-1]}]")
    j = bisect.bisect_left(times, t)
    if times[j] == t:
        return path.points[j].fit()
    p0, p1 = path.points[j - 1], path.points[j]
    w = (t - p0.t) / (p1.t - p0.t)
    theta = (1.0 - w) * p0.theta + w * p1.theta
    z = (1.0 - w) * p0.z + w * p1.z
    beta = path.kappa * shrinkage(z, path.n_items, path.n_annotators)
    return ModelFit.from_beta(t, theta, beta, path.n_annotators)


def predict(fit: ModelFit, annotators: ArrayLike, left: ArrayLike, right: ArrayLike) -> NDArray[np.float64]:
    """``(theta_i + delta^u_i) - (theta_j + delta^u_j) + gamma^u``.

    Annotator indices that are negative or beyond the fit's table are
    treated as unseen and get the common model.
    """
    u = np.asarray(annotators, dtype=np.int64).reshape(-1)
    i = np.asarray(left, dtype=np.int64).reshape(-1)
    j = np.asarray(right, dtype=np.int64).reshape(-1)
    if not (u.size == i.size == j.size):
        raise DimensionMismatch("annotator, left and right must have equal length")
    n = fit.n_items
    for name, a in (("left", i), ("right", j)):
        if a.size and (a.min() < 0 or a.max() >= n):
            raise IndexOutOfRange(f"{name} item index outside [0, {n})")
    out = fit.theta[i] - fit.theta[j]
    seen = (u >= 0) & (u < fit.n_annotators)
    us = u[seen]
    out[seen] += fit.delta[us, i[seen]] - fit.delta[us, j[seen]] + fit.gamma[us]
    return out


def _check_fit(dataset: ComparisonDataset, fit: ModelFit) -> None:
    if fit.n_items != dataset.n_items or fit.delta.shape != (dataset.n_annotators, dataset.n_items):
        raise DimensionMismatch("fit dimensions do not match the dataset")


def residual(dataset: ComparisonDataset, fit: ModelFit) -> NDArray[np.float64]:
    _check_fit(dataset, fit)
    return dataset.y - predict(fit, dataset.annotator, dataset.left, dataset.right)


def loss(dataset: ComparisonDataset, fit: ModelFit) -> float:
    """``||sqrt(W)(y - d theta - X beta)||^2 / (2m)``."""
    r = residual(dataset, fit)
    return float(dataset.weight @ (r * r)) / (2 * dataset.m)


def mse(dataset: ComparisonDataset, fit: ModelFit) -> float:
    """Unweighted mean squared prediction error over ``dataset``'s records."""
    r = residual(dataset, fit)
    return float(r @ r) / dataset.m
