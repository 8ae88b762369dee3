"""Annotator-level analyses: activation order, distance to the common
ranking, personalized rankings and position-bias audits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import kendalltau

from .data import ComparisonDataset, connected_components
from .errors import UnknownAnnotator
from .lbi import LbiPath, ModelFit
from .solvers import LsSolveOptions, full_least_squares

__all__ = [
    "JumpOrders",
    "AnnotatorReport",
    "RankingReport",
    "jump_orders",
    "l2_distances",
    "position_bias_report",
    "ranking_report",
    "representative_annotators",
    "kendall_tau",
]


@dataclass(frozen=True, eq=False)
class JumpOrders:
    """First activation time and ordinal rank (1 = earliest) per annotator.

    Annotators that never activate have ``t = NaN`` and ``rank = 0``.
    """

    t_delta: NDArray[np.float64]
    rank_delta: NDArray[np.int64]
    t_gamma: NDArray[np.float64]
    rank_gamma: NDArray[np.int64]

    def order(self, block: str) -> NDArray[np.int64]:
        """Activated annotators, earliest first."""
        rank = self.rank_delta if block == "delta" else self.rank_gamma
        active = np.flatnonzero(rank > 0)
        return active[np.argsort(rank[active])]


def _ranks(t: NDArray[np.float64]) -> NDArray[np.int64]:
    rank = np.zeros(t.size, dtype=np.int64)
    active = np.flatnonzero(np.isfinite(t))
    # lexsort: last key is primary, so ties in t fall back to annotator index
    order = active[np.lexsort((active, t[active]))]
    rank[order] = np.arange(1, order.size + 1)
    return rank


def jump_orders(path: LbiPath) -> JumpOrders:
    td = path.first_activation("delta")
    tg = path.first_activation("gamma")
    return JumpOrders(td, _ranks(td), tg, _ranks(tg))


def l2_distances(
    dataset: ComparisonDataset,
    options: LsSolveOptions | None = None,
    *,
    solution: tuple[NDArray, NDArray] | None = None,
) -> NDArray[np.float64]:
    """``||theta^u - theta||`` between personalized and common full-model scores.

    Measured over the items each annotator compared, with both score vectors
    centred on every connected piece of the annotator's own comparison
    graph.  NaN for annotators without records.  Pass a precomputed
    ``full_least_squares`` result as ``solution`` to skip the solve.
    """
    theta, beta = solution if solution is not None else full_least_squares(dataset, options)
    n, U = dataset.n_items, dataset.n_annotators
    delta = beta[: U * n].reshape(U, n)
    comps = connected_components(dataset)
    out = np.full(U, np.nan)
    for u in range(U):
        items = np.flatnonzero(comps.touched[u])
        if items.size == 0:
            continue
        labels = comps.annotator_items[u, items]
        _, inv = np.unique(labels, return_inverse=True)
        # theta^u - theta = delta^u; centring both scores only centres delta^u
        d = delta[u, items]
        d = d - (np.bincount(inv, d) / np.bincount(inv))[inv]
        out[u] = float(np.linalg.norm(d))
    return out


@dataclass(frozen=True)
class AnnotatorReport:
    annotator: int
    annotator_id: str
    n_records: int
    left_clicks: int
    right_clicks: int
    jump_rank_delta: int | None
    jump_t_delta: float | None
    jump_rank_gamma: int | None
    jump_t_gamma: float | None
    l2_distance: float | None
    gamma_at_t: float
    delta_norm_at_t: float


def position_bias_report(
    dataset: ComparisonDataset,
    fit: ModelFit,
    path: LbiPath | None = None,
    l2: NDArray[np.float64] | None = None,
) -> list[AnnotatorReport]:
    """One report per annotator with records.

    Ordered by ``gamma`` activation time along ``path`` (earliest first);
    annotators whose ``gamma`` never activated follow, by ``|gamma|``
    descending then index.  Without a path every annotator is in the second
    group.
    """
    U = dataset.n_annotators
    jumps = jump_orders(path) if path is not None else None
    left = np.bincount(dataset.annotator, dataset.y > 0, minlength=U).astype(np.int64)
    right = np.bincount(dataset.annotator, dataset.y < 0, minlength=U).astype(np.int64)
    counts = dataset.counts
    dnorm = np.linalg.norm(fit.delta, axis=1)

    def when(t: float) -> float | None:
        return float(t) if np.isfinite(t) else None

    reports = []
    for u in np.flatnonzero(counts > 0):
        rd = tg = td = rg = None
        if jumps is not None:
            rd, td = int(jumps.rank_delta[u]) or None, when(jumps.t_delta[u])
            rg, tg = int(jumps.rank_gamma[u]) or None, when(jumps.t_gamma[u])
        reports.append(
            AnnotatorReport(
                annotator=int(u),
                annotator_id=dataset.annotator_labels[u],
                n_records=int(counts[u]),
                left_clicks=int(left[u]),
                right_clicks=int(right[u]),
                jump_rank_delta=rd,
                jump_t_delta=td,
                jump_rank_gamma=rg,
                jump_t_gamma=tg,
                l2_distance=None if l2 is None or np.isnan(l2[u]) else float(l2[u]),
                gamma_at_t=float(fit.gamma[u]),
                delta_norm_at_t=float(dnorm[u]),
            )
        )

    def key(r: AnnotatorReport):
        if r.jump_rank_gamma is not None:
            return (0, r.jump_rank_gamma, 0.0, r.annotator)
        return (1, 0, -abs(r.gamma_at_t), r.annotator)

    return sorted(reports, key=key)


@dataclass(frozen=True, eq=False)
class RankingReport:
    """``common`` and each ``personalized[u]`` list items best-first.

    ``positions[i, 0]`` is item ``i``'s 1-based rank in the common ranking and
    ``positions[i, c]`` its rank for ``annotators[c - 1]``.
    """

    common: NDArray[np.int64]
    annotators: tuple[int, ...]
    personalized: dict[int, NDArray[np.int64]]
    positions: NDArray[np.int64]


def _order(scores: NDArray[np.float64]) -> NDArray[np.int64]:
    idx = np.arange(scores.size)
    return np.lexsort((idx, -scores))


def ranking_report(fit: ModelFit, annotators: Sequence[int]) -> RankingReport:
    n = fit.n_items
    for u in annotators:
        if not 0 <= int(u) < fit.n_annotators:
            raise UnknownAnnotator(f"annotator index {u} not in [0, {fit.n_annotators})")
    common = _order(fit.theta)
    personal = {int(u): _order(fit.theta + fit.delta[int(u)]) for u in annotators}
    positions = np.empty((n, 1 + len(personal)), dtype=np.int64)
    for c, order in enumerate([common, *personal.values()]):
        positions[order, c] = np.arange(1, n + 1)
    return RankingReport(common, tuple(int(u) for u in annotators), personal, positions)


def representative_annotators(path: LbiPath, per_group: int = 3) -> list[int]:
    """Early, middle and late ``delta`` activations (``per_group`` each)."""
    order = jump_orders(path).order("delta")
    if order.size <= 3 * per_group:
        return order.tolist()
    mid = order.size // 2 - per_group // 2
    picks = list(order[:per_group]) + list(order[mid : mid + per_group]) + list(order[-per_group:])
    return [int(u) for u in picks]


def kendall_tau(fit: ModelFit, annotator: int) -> float:
    """Kendall tau between common and personalized scores.

    Not part of the model itself; a convenience summary for reports.
    """
    if not 0 <= annotator < fit.n_annotators:
        raise UnknownAnnotator(f"annotator index {annotator} not in [0, {fit.n_annotators})")
    return float(kendalltau(fit.theta, fit.theta + fit.delta[annotator]).statistic)
