"""Comparison data model and matrix-free design operators.

A dataset is a multigraph of records ``(u, i, j, y, w)``: annotator ``u`` saw
item ``i`` on the left and ``j`` on the right and answered ``y`` (positive
means the left item was preferred) with confidence weight ``w``.

The linear model over records is ``y = d theta + X beta + noise`` with
``X = [D, A]``.  ``beta`` uses a flat layout: the per-annotator deviation
blocks ``delta`` (annotator-major, ``n_annotators * n_items`` entries)
followed by one position bias ``gamma`` per annotator.  None of the operators
materialize a matrix; every application is a gather or a ``bincount`` over
the records.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse
from scipy.sparse.csgraph import connected_components as _cc

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    InputError,
    NegativeWeight,
    NonFiniteResponse,
    SelfComparison,
)

__all__ = [
    "ComparisonRecord",
    "ComparisonDataset",
    "ComponentLabels",
    "build_dataset",
    "apply_d",
    "apply_d_adjoint",
    "apply_X",
    "apply_X_adjoint",
    "connected_components",
    "beta_size",
    "split_beta",
    "join_beta",
]


@dataclass(frozen=True)
class ComparisonRecord:
    annotator: int
    left: int
    right: int
    y: float
    weight: float = 1.0


def _frozen(a: ArrayLike, dtype) -> NDArray:
    out = np.array(a, dtype=dtype, copy=True).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ComparisonDataset:
    """Validated, immutable comparison multigraph.

    Use :func:`build_dataset` or :meth:`from_arrays` rather than the raw
    constructor; both validate.
    """

    n_items: int
    n_annotators: int
    annotator: NDArray[np.int64]
    left: NDArray[np.int64]
    right: NDArray[np.int64]
    y: NDArray[np.float64]
    weight: NDArray[np.float64]
    annotator_labels: tuple[str, ...] = field(default=())
    item_labels: tuple[str, ...] = field(default=())

    @classmethod
    def from_arrays(
        cls,
        annotator: ArrayLike,
        left: ArrayLike,
        right: ArrayLike,
        y: ArrayLike,
        weight: ArrayLike | None = None,
        *,
        n_items: int,
        n_annotators: int,
        annotator_labels: Sequence[str] | None = None,
        item_labels: Sequence[str] | None = None,
    ) -> "ComparisonDataset":
        annotator = _frozen(annotator, np.int64)
        m = annotator.size
        if weight is None:
            weight = np.ones(m)
        ds = cls(
            n_items=int(n_items),
            n_annotators=int(n_annotators),
            annotator=annotator,
            left=_frozen(left, np.int64),
            right=_frozen(right, np.int64),
            y=_frozen(y, np.float64),
            weight=_frozen(weight, np.float64),
            annotator_labels=tuple(annotator_labels)
            if annotator_labels is not None
            else tuple(f"u{k}" for k in range(n_annotators)),
            item_labels=tuple(item_labels)
            if item_labels is not None
            else tuple(f"i{k}" for k in range(n_items)),
        )
        ds._validate()
        return ds

    def _validate(self) -> None:
        if self.n_items < 1 or self.n_annotators < 1:
            raise InputError("n_items and n_annotators must be positive")
        m = self.annotator.size
        if m == 0:
            raise InputError("a dataset needs at least one record")
        for name in ("left", "right", "y", "weight"):
            if getattr(self, name).size != m:
                raise DimensionMismatch(f"{name} has {getattr(self, name).size} entries, expected {m}")
        if len(self.annotator_labels) != self.n_annotators:
            raise DimensionMismatch("annotator_labels length differs from n_annotators")
        if len(self.item_labels) != self.n_items:
            raise DimensionMismatch("item_labels length differs from n_items")
        for name, bound in (("annotator", self.n_annotators), ("left", self.n_items), ("right", self.n_items)):
            a = getattr(self, name)
            bad = np.flatnonzero((a < 0) | (a >= bound))
            if bad.size:
                k = int(bad[0])
                raise IndexOutOfRange(f"record {k}: {name} index {int(a[k])} not in [0, {bound})")
        bad = np.flatnonzero(self.left == self.right)
        if bad.size:
            raise SelfComparison(f"record {int(bad[0])}: item {int(self.left[bad[0]])} compared with itself")
        bad = np.flatnonzero(~np.isfinite(self.y))
        if bad.size:
            raise NonFiniteResponse(f"record {int(bad[0])}: response is not finite")
        bad = np.flatnonzero(~(self.weight >= 0) | ~np.isfinite(self.weight))
        if bad.size:
            raise NegativeWeight(f"record {int(bad[0])}: weight {self.weight[bad[0]]} is not a finite nonnegative number")

    # -- shape ---------------------------------------------------------------

    @property
    def m(self) -> int:
        return int(self.annotator.size)

    @property
    def beta_size(self) -> int:
        return beta_size(self.n_items, self.n_annotators)

    @cached_property
    def counts(self) -> NDArray[np.int64]:
        """Per-annotator record counts ``N^u``."""
        return np.bincount(self.annotator, minlength=self.n_annotators)

    @cached_property
    def annotator_index(self) -> tuple[NDArray[np.int64], ...]:
        order = np.argsort(self.annotator, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(self.counts)])
        return tuple(order[bounds[u] : bounds[u + 1]] for u in range(self.n_annotators))

    @cached_property
    def item_graph(self) -> sparse.csr_matrix:
        """Symmetric item adjacency (edge multiplicities as values)."""
        ones = np.ones(self.m)
        g = sparse.coo_matrix((ones, (self.left, self.right)), shape=(self.n_items, self.n_items))
        return (g + g.T).tocsr()

    @property
    def is_weighted(self) -> bool:
        return bool(np.any(self.weight != 1.0))

    @cached_property
    def sqrt_weight(self) -> NDArray[np.float64]:
        return np.sqrt(self.weight)

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.n_items, self.n_annotators], dtype=np.int64).tobytes())
        for a in (self.annotator, self.left, self.right, self.y, self.weight):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    # -- derived datasets ----------------------------------------------------

    def subset(self, index: ArrayLike) -> "ComparisonDataset":
        """Records ``index`` (in that order), keeping the full label tables."""
        index = np.asarray(index, dtype=np.int64)
        return ComparisonDataset.from_arrays(
            self.annotator[index],
            self.left[index],
            self.right[index],
            self.y[index],
            self.weight[index],
            n_items=self.n_items,
            n_annotators=self.n_annotators,
            annotator_labels=self.annotator_labels,
            item_labels=self.item_labels,
        )

    def with_responses(self, y: ArrayLike) -> "ComparisonDataset":
        return ComparisonDataset.from_arrays(
            self.annotator,
            self.left,
            self.right,
            y,
            self.weight,
            n_items=self.n_items,
            n_annotators=self.n_annotators,
            annotator_labels=self.annotator_labels,
            item_labels=self.item_labels,
        )

    def records(self) -> list[ComparisonRecord]:
        return [
            ComparisonRecord(int(u), int(i), int(j), float(v), float(w))
            for u, i, j, v, w in zip(self.annotator, self.left, self.right, self.y, self.weight)
        ]

    def same_as(self, other: "ComparisonDataset") -> bool:
        """Exact equality of shape, records and labels."""
        return (
            self.n_items == other.n_items
            and self.n_annotators == other.n_annotators
            and self.annotator_labels == other.annotator_labels
            and self.item_labels == other.item_labels
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("annotator", "left", "right", "y", "weight")
            )
        )


def build_dataset(
    records: Iterable[ComparisonRecord | Sequence[float]],
    n_items: int,
    n_annotators: int,
    *,
    annotator_labels: Sequence[str] | None = None,
    item_labels: Sequence[str] | None = None,
) -> ComparisonDataset:
    """Validate ``records`` and build the index structures.

    Records may be :class:`ComparisonRecord` instances or plain tuples
    ``(annotator, left, right, y[, weight])``.
    """
    if n_items < 1 or n_annotators < 1:
        raise InputError("n_items and n_annotators must be positive")
    rows = []
    for rec in records:
        if isinstance(rec, ComparisonRecord):
            rows.append((rec.annotator, rec.left, rec.right, rec.y, rec.weight))
        else:
            rec = tuple(rec)
            if len(rec) == 4:
                rec = rec + (1.0,)
            if len(rec) != 5:
                raise InputError(f"record {rec!r} must have 4 or 5 fields")
            rows.append(rec)
    if not rows:
        raise InputError("a dataset needs at least one record")
    u, i, j, y, w = zip(*rows)
    for name, col in (("annotator", u), ("left", i), ("right", j)):
        if any(int(v) != v for v in col):
            raise InputError(f"{name} indices must be integers")
    return ComparisonDataset.from_arrays(
        u, i, j, y, w,
        n_items=n_items,
        n_annotators=n_annotators,
        annotator_labels=annotator_labels,
        item_labels=item_labels,
    )


# -- beta layout ---------------------------------------------------------------


def beta_size(n_items: int, n_annotators: int) -> int:
    return n_annotators * (n_items + 1)


def split_beta(beta: NDArray, n_items: int, n_annotators: int) -> tuple[NDArray, NDArray]:
    """Views ``(delta, gamma)`` with ``delta`` shaped ``(n_annotators, n_items)``."""
    beta = np.asarray(beta)
    if beta.shape != (beta_size(n_items, n_annotators),):
        raise DimensionMismatch(
            f"beta has shape {beta.shape}, expected ({beta_size(n_items, n_annotators)},)"
        )
    k = n_annotators * n_items
    return beta[:k].reshape(n_annotators, n_items), beta[k:]


def join_beta(delta: ArrayLike, gamma: ArrayLike) -> NDArray[np.float64]:
    delta = np.asarray(delta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if delta.ndim != 2 or delta.shape[0] != gamma.size:
        raise DimensionMismatch("delta must be (n_annotators, n_items) and match gamma")
    return np.concatenate([delta.reshape(-1), gamma])


# -- operators -----------------------------------------------------------------


def _check_len(v: ArrayLike, n: int, what: str) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise DimensionMismatch(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def apply_d(dataset: ComparisonDataset, theta: ArrayLike) -> NDArray[np.float64]:
    """``(d theta)[k] = theta[left_k] - theta[right_k]``."""
    theta = _check_len(theta, dataset.n_items, "theta")
    return theta[dataset.left] - theta[dataset.right]


def apply_d_adjoint(dataset: ComparisonDataset, r: ArrayLike) -> NDArray[np.float64]:
    r = _check_len(r, dataset.m, "record vector")
    n = dataset.n_items
    return np.bincount(dataset.left, r, minlength=n) - np.bincount(dataset.right, r, minlength=n)


def apply_X(dataset: ComparisonDataset, beta: ArrayLike) -> NDArray[np.float64]:
    """``(X beta)[k] = delta[u, left] - delta[u, right] + gamma[u]`` for record ``k``."""
    n, U = dataset.n_items, dataset.n_annotators
    delta, gamma = split_beta(_check_len(beta, beta_size(n, U), "beta"), n, U)
    flat = delta.reshape(-1)
    base = dataset.annotator * n
    return flat[base + dataset.left] - flat[base + dataset.right] + gamma[dataset.annotator]


def apply_X_adjoint(dataset: ComparisonDataset, r: ArrayLike) -> NDArray[np.float64]:
    r = _check_len(r, dataset.m, "record vector")
    n, U = dataset.n_items, dataset.n_annotators
    base = dataset.annotator * n
    size = U * n
    delta = np.bincount(base + dataset.left, r, minlength=size) - np.bincount(
        base + dataset.right, r, minlength=size
    )
    gamma = np.bincount(dataset.annotator, r, minlength=U)
    return np.concatenate([delta, gamma])


# -- connectivity --------------------------------------------------------------


@dataclass(frozen=True)
class ComponentLabels:
    """Connected-component ids.

    ``items[i]`` labels the global item graph.  ``annotator_items[u, i]``
    labels annotator ``u``'s private subgraph; items the annotator never
    touched are singletons.  ``touched[u, i]`` marks items ``u`` compared.
    """

    items: NDArray[np.int64]
    n_components: int
    annotator_items: NDArray[np.int64]
    touched: NDArray[np.bool_]

    def item_groups(self) -> list[NDArray[np.int64]]:
        return [np.flatnonzero(self.items == c) for c in range(self.n_components)]


def connected_components(dataset: ComparisonDataset) -> ComponentLabels:
    n, U = dataset.n_items, dataset.n_annotators
    n_comp, items = _cc(dataset.item_graph, directed=False)

    base = dataset.annotator * n
    ones = np.ones(dataset.m)
    g = sparse.coo_matrix((ones, (base + dataset.left, base + dataset.right)), shape=(U * n, U * n))
    _, private = _cc(g.tocsr(), directed=False)
    touched = np.zeros(U * n, dtype=bool)
    touched[base + dataset.left] = True
    touched[base + dataset.right] = True
    return ComponentLabels(
        items=items.astype(np.int64),
        n_components=int(n_comp),
        annotator_items=private.astype(np.int64).reshape(U, n),
        touched=touched.reshape(U, n),
    )
