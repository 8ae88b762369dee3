"""Early stopping by K-fold cross-validation and the repeated holdout harness."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ._parallel import ordered_map
from .data import ComparisonDataset
from .errors import InputError, TooFewRecords
from .lbi import LbiConfig, LbiPath, ModelFit, interpolate, lbi_fit, mse
from .solvers import full_least_squares, hodgerank

log = logging.getLogger(__name__)

__all__ = [
    "FoldAssignment",
    "CvResult",
    "RepeatResult",
    "EvalTable",
    "kfold_split",
    "holdout_split",
    "default_grid",
    "cross_validate",
    "holdout_eval",
]

DEFAULT_GRID = 50


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold: NDArray[np.int64]
    K: int
    seed: int

    def test_index(self, k: int) -> NDArray[np.int64]:
        return np.flatnonzero(self.fold == k)

    def train_index(self, k: int) -> NDArray[np.int64]:
        return np.flatnonzero(self.fold != k)

    def sizes(self) -> NDArray[np.int64]:
        return np.bincount(self.fold, minlength=self.K)


def kfold_split(dataset: ComparisonDataset, K: int = 5, seed: int = 0) -> FoldAssignment:
    """Annotator-stratified folds.

    Each annotator's records are shuffled and dealt round-robin; the dealing
    position carries over between annotators so fold sizes differ by at
    most one overall.
    """
    if K < 2:
        raise InputError("K must be at least 2")
    rng = np.random.default_rng(seed)
    fold = np.empty(dataset.m, dtype=np.int64)
    offset = 0
    for idx in dataset.annotator_index:
        if idx.size == 0:
            continue
        fold[rng.permutation(idx)] = (offset + np.arange(idx.size)) % K
        offset = (offset + idx.size) % K
    sizes = np.bincount(fold, minlength=K)
    if np.any(sizes == 0):
        raise TooFewRecords(f"{dataset.m} records cannot fill {K} folds")
    return FoldAssignment(fold, K, seed)


def holdout_split(dataset: ComparisonDataset, ratio: float, seed: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Per-annotator split: ``round(ratio * N^u)`` records (at least one) go to training."""
    if not 0 < ratio < 1:
        raise InputError("split ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for idx in dataset.annotator_index:
        if idx.size == 0:
            continue
        perm = rng.permutation(idx)
        k = min(idx.size, max(1, int(round(ratio * idx.size))))
        train.append(perm[:k])
        test.append(perm[k:])
    train_idx, test_idx = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    if test_idx.size == 0:
        raise TooFewRecords("holdout split left no test records")
    return train_idx, test_idx


@dataclass(frozen=True, eq=False)
class CvResult:
    t_grid: NDArray[np.float64]
    mean_error: NDArray[np.float64]
    fold_errors: NDArray[np.float64]  # (K, len(t_grid))
    t_cv: float
    K: int
    seed: int

    @property
    def best_index(self) -> int:
        return int(np.flatnonzero(self.t_grid == self.t_cv)[0])


def default_grid(t_end: float, size: int = DEFAULT_GRID) -> NDArray[np.float64]:
    return np.linspace(0.0, t_end, size)


def _path_horizon(dataset: ComparisonDataset, config: LbiConfig) -> float:
    """Final t of a full-data run under ``config`` (only the end point is kept)."""
    return lbi_fit(dataset, config, record_at=()).t_end


def _fold_errors(
    task: tuple[int, NDArray[np.int64], NDArray[np.int64]],
    dataset: ComparisonDataset,
    config: LbiConfig,
    grid: NDArray[np.float64],
) -> tuple[NDArray[np.float64], float]:
    _, train, test = task
    path = lbi_fit(dataset.subset(train), config, record_at=grid)
    held = dataset.subset(test)
    errs = np.full(grid.size, np.nan)
    for g, t in enumerate(grid):
        if t <= path.t_end:
            errs[g] = mse(held, interpolate(path, t))
    return errs, path.t_end


def _argmin_smallest_t(errors: NDArray[np.float64], scale: float) -> int:
    """First index within roundoff of the minimum; ``scale`` is the error
    level of the trivial predictor, so exact fits tie at zero."""
    lo = np.nanmin(errors)
    return int(np.flatnonzero(errors <= lo + 1e-12 * max(abs(lo), scale))[0])


def cross_validate(
    dataset: ComparisonDataset,
    config: LbiConfig | None = None,
    K: int = 5,
    t_grid: ArrayLike | int | None = None,
    seed: int = 0,
    *,
    n_jobs: int | None = None,
) -> CvResult:
    """Pick the stopping time with the least mean held-out squared error.

    ``t_grid`` may be explicit times, or a point count for an even grid from
    0 to the end of a full-data run under ``config`` (default 50 points).
    Fold paths run to the last grid time.  Ties go to the smallest ``t``.
    """
    config = config or LbiConfig()
    folds = kfold_split(dataset, K, seed)
    if t_grid is None or np.ndim(t_grid) == 0:
        size = DEFAULT_GRID if t_grid is None else int(t_grid)
        grid = default_grid(_path_horizon(dataset, config), size)
    else:
        grid = np.sort(np.asarray(t_grid, dtype=np.float64))
        if grid.size == 0 or grid[0] < 0:
            raise InputError("t_grid must be nonempty and nonnegative")
    if config.t_max is None and config.max_iterations is None:
        config = replace(config, t_max=float(grid[-1]))

    tasks = [(k, folds.train_index(k), folds.test_index(k)) for k in range(K)]
    results = ordered_map(partial(_fold_errors, dataset=dataset, config=config, grid=grid), tasks, n_jobs)
    fold_errors = np.vstack([r[0] for r in results])
    shortest = min(r[1] for r in results)
    usable = grid <= shortest
    if not usable.all():
        warnings.warn(
            f"t grid clipped to {shortest:.6g}, the end of the shortest fold path",
            RuntimeWarning,
            stacklevel=2,
        )
        grid, fold_errors = grid[usable], fold_errors[:, usable]
    mean = fold_errors.mean(axis=0)
    best = _argmin_smallest_t(mean, float(np.mean(dataset.y**2)))
    return CvResult(grid, mean, fold_errors, float(grid[best]), K, seed)


# -- repeated holdout -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RepeatResult:
    repeat: int
    seed: int
    hodgerank_error: float
    mixed_error: float
    t_cv: float
    cv: CvResult
    test_curve: NDArray[np.float64] | None = None  # test error along test_grid
    full_ls_error: float | None = None
    test_grid: NDArray[np.float64] | None = None


@dataclass(frozen=True, eq=False)
class EvalTable:
    repeats: list[RepeatResult]
    split_ratio: float
    K_cv: int
    seed: int
    methods: tuple[str, ...] = ("HodgeRank", "MixedEffects")

    def errors(self, method: str) -> NDArray[np.float64]:
        key = {"HodgeRank": "hodgerank_error", "MixedEffects": "mixed_error", "FullLS": "full_ls_error"}[method]
        return np.array([getattr(r, key) for r in self.repeats], dtype=np.float64)

    def stats(self, method: str) -> dict[str, float]:
        e = self.errors(method)
        return {
            "min": float(e.min()),
            "mean": float(e.mean()),
            "max": float(e.max()),
            "std": float(e.std(ddof=1)) if e.size > 1 else 0.0,
        }

    def rows(self) -> list[tuple[str, dict[str, float]]]:
        return [(m, self.stats(m)) for m in self.methods]


def _one_repeat(
    task: tuple[int, int],
    dataset: ComparisonDataset,
    config: LbiConfig,
    split_ratio: float,
    K_cv: int,
    grid_size: int,
    test_curve: bool | int,
    compare_full: bool,
) -> RepeatResult:
    r, seed = task
    train_idx, test_idx = holdout_split(dataset, split_ratio, seed)
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    U = dataset.n_annotators

    hr = mse(test, ModelFit.common(hodgerank(train, config.solver), U))

    t_end = _path_horizon(train, config)
    grid = default_grid(t_end, grid_size)
    cv = cross_validate(train, config, K_cv, grid, seed, n_jobs=1)

    t_grid = None
    if test_curve:
        t_grid = cv.t_grid
        if test_curve is not True:
            t_grid = np.union1d(t_grid, default_grid(cv.t_grid[-1], int(test_curve)))
    fixed = replace(config, t_max=float(cv.t_grid[-1] if test_curve else cv.t_cv), max_iterations=None)
    path = lbi_fit(train, fixed, record_at=[cv.t_cv] if t_grid is None else t_grid)
    mixed = mse(test, interpolate(path, cv.t_cv))
    curve = None if t_grid is None else np.array([mse(test, interpolate(path, t)) for t in t_grid])

    full = None
    if compare_full:
        theta, beta = full_least_squares(train, config.solver)
        full = mse(test, ModelFit.from_beta(np.inf, theta, beta, U))
    log.info("repeat %d: hodgerank %.5f mixed %.5f t_cv %.4g", r, hr, mixed, cv.t_cv)
    return RepeatResult(r, seed, hr, mixed, cv.t_cv, cv, curve, full, t_grid)


def repeat_seeds(seed: int, repeats: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(repeats)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def holdout_eval(
    dataset: ComparisonDataset,
    config: LbiConfig | None = None,
    split_ratio: float = 0.7,
    repeats: int = 20,
    K_cv: int = 5,
    seed: int = 0,
    *,
    grid_size: int = DEFAULT_GRID,
    test_curve: bool | int = False,
    compare_full: bool = False,
    n_jobs: int | None = None,
) -> EvalTable:
    """HodgeRank vs. the mixed model at ``t_cv``, over repeated random splits.

    Per repeat: stratified split, common ranking fitted on training, CV
    inside the training set only, mixed model refitted on the whole training
    set and read at ``t_cv``; both scored by test MSE.  ``test_curve`` also
    records test error along the CV grid (``True``) or along the CV grid
    merged with that many evenly spaced times (an ``int``);
    ``compare_full`` scores the full least-squares model too.
    """
    if repeats < 1:
        raise InputError("repeats must be at least 1")
    if not 0 < split_ratio < 1:
        raise InputError("split ratio must lie strictly between 0 and 1")
    config = config or LbiConfig()
    tasks = list(enumerate(repeat_seeds(seed, repeats)))
    fn = partial(
        _one_repeat,
        dataset=dataset,
        config=config,
        split_ratio=split_ratio,
        K_cv=K_cv,
        grid_size=grid_size,
        test_curve=test_curve,
        compare_full=compare_full,
    )
    results = ordered_map(fn, tasks, n_jobs)
    methods = ("HodgeRank", "MixedEffects") + (("FullLS",) if compare_full else ())
    return EvalTable(results, split_ratio, K_cv, seed, methods)
