"""File formats: comparison CSV, path JSON Lines, report tables.

Every emitted file starts with a metadata record (tool version, config
hash, seed, effective config).  In CSV files that is a ``# hodgemix {...}``
comment line; readers skip ``#`` lines.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .data import ComparisonDataset
from .errors import EmptyFile, InputError, MalformedRow, UnknownChoiceToken
from .lbi import Activation, LbiConfig, LbiPath, PathPoint

__all__ = [
    "metadata",
    "parse_comparisons_csv",
    "write_comparisons_csv",
    "write_table",
    "read_table",
    "write_path",
    "read_path",
    "fmt",
]

HEADER = ["annotator_id", "left_item", "right_item", "choice"]
META_PREFIX = "# hodgemix "
LABELS_PREFIX = "# hodgemix-labels "


def fmt(x: float) -> str:
    """17 significant digits: enough to round-trip any double."""
    return format(float(x), ".17g")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def metadata(kind: str, config: dict, seed: int | None = None, **extra: Any) -> dict:
    return _jsonable(
        {
            "tool": "hodgemix",
            "version": __version__,
            "kind": kind,
            "config_hash": config_hash(config),
            "seed": seed,
            "config": config,
            **extra,
        }
    )


def _dump(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


# -- comparison CSV ------------------------------------------------------------------


def _parse_choice(token: str, line: int) -> float:
    t = token.strip()
    low = t.lower()
    if low == "left":
        return 1.0
    if low == "right":
        return -1.0
    try:
        y = float(t)
    except ValueError:
        raise UnknownChoiceToken(f"choice {token!r} is neither 'left', 'right' nor a number", line) from None
    if not math.isfinite(y):
        raise MalformedRow(f"choice {token!r} is not finite", line)
    return y


def parse_comparisons_csv(path: str | Path) -> ComparisonDataset:
    """Read ``annotator_id,left_item,right_item,choice[,weight]`` rows.

    External ids map to dense indices in first-appearance order, unless a
    ``# hodgemix-labels`` line declares the tables up front (as written by
    :func:`write_comparisons_csv`).
    """
    annotators: dict[str, int] = {}
    items: dict[str, int] = {}
    cols: tuple[list, ...] = ([], [], [], [], [])
    header: list[str] | None = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.startswith(LABELS_PREFIX):
                labels = json.loads(raw[len(LABELS_PREFIX):])
                for name in labels.get("annotators", []):
                    annotators.setdefault(name, len(annotators))
                for name in labels.get("items", []):
                    items.setdefault(name, len(items))
                continue
            if raw.lstrip().startswith("#") or not raw.strip():
                continue
            row = next(csv.reader([raw]))
            row = [c.strip() for c in row]
            if header is None:
                if row[:4] != HEADER or len(row) > 5 or (len(row) == 5 and row[4] != "weight"):
                    raise MalformedRow(f"expected header {','.join(HEADER)}[,weight], got {raw.strip()!r}", lineno)
                header = row
                continue
            if len(row) != len(header):
                raise MalformedRow(f"expected {len(header)} fields, got {len(row)}", lineno)
            a, i, j = row[0], row[1], row[2]
            if not a or not i or not j:
                raise MalformedRow("empty id", lineno)
            if i == j:
                raise MalformedRow(f"item {i!r} compared with itself", lineno)
            y = _parse_choice(row[3], lineno)
            w = 1.0
            if len(row) == 5:
                try:
                    w = float(row[4])
                except ValueError:
                    raise MalformedRow(f"weight {row[4]!r} is not a number", lineno) from None
                if not (math.isfinite(w) and w >= 0):
                    raise MalformedRow(f"weight {row[4]!r} must be finite and nonnegative", lineno)
            cols[0].append(annotators.setdefault(a, len(annotators)))
            cols[1].append(items.setdefault(i, len(items)))
            cols[2].append(items.setdefault(j, len(items)))
            cols[3].append(y)
            cols[4].append(w)
    if header is None or not cols[0]:
        raise EmptyFile(f"{path}: no comparison records")
    return ComparisonDataset.from_arrays(
        *cols,
        n_items=len(items),
        n_annotators=len(annotators),
        annotator_labels=list(annotators),
        item_labels=list(items),
    )


def write_comparisons_csv(dataset: ComparisonDataset, path: str | Path, meta: dict | None = None) -> None:
    weighted = dataset.is_weighted
    a_lab, i_lab = dataset.annotator_labels, dataset.item_labels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(META_PREFIX + _dump(meta) + "\n")
        fh.write(LABELS_PREFIX + _dump({"annotators": list(a_lab), "items": list(i_lab)}) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER + (["weight"] if weighted else []))
        for u, i, j, y, wt in zip(
            dataset.annotator.tolist(), dataset.left.tolist(), dataset.right.tolist(),
            dataset.y.tolist(), dataset.weight.tolist(),
        ):
            row = [a_lab[u], i_lab[i], i_lab[j], fmt(y)]
            if weighted:
                row.append(fmt(wt))
            w.writerow(row)


# -- generic tables --------------------------------------------------------------------


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else fmt(v)
    return str(v)


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]], meta: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(META_PREFIX + _dump(meta) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_table(path: str | Path) -> tuple[dict | None, list[dict[str, str]]]:
    """``(metadata, rows)`` of a table written by :func:`write_table`."""
    meta = None
    lines = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.startswith(META_PREFIX):
                meta = json.loads(raw[len(META_PREFIX):])
            elif not raw.startswith("#"):
                lines.append(raw)
    return meta, list(csv.DictReader(lines))


# -- path files --------------------------------------------------------------------


def z_sidecar(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".z.jsonl")


def write_path(lbi_path: LbiPath, path: str | Path, meta: dict | None = None, store_z: bool = False) -> None:
    """One JSON object per stored iterate after a header line.

    ``delta`` and ``gamma`` are sparse maps keyed by annotator index.  With
    ``store_z`` the dual variable goes to ``<path>.z.jsonl``, one array per
    iterate in the same order.
    """
    p = lbi_path
    header = {
        "header": True,
        "meta": meta,
        "config": p.config.to_dict(),
        "dataset_hash": p.dataset_digest,
        "spectral_norm_XtX": p.spectral_norm,
        "alpha": p.alpha,
        "kappa": p.kappa,
        "m": p.m,
        "n_items": p.n_items,
        "n_annotators": p.n_annotators,
        "n_iterations": p.n_iterations,
        "stop_reason": p.stop_reason,
        "activations": [[a.annotator, a.block, a.t, a.k] for a in p.activations],
        "has_z": store_z,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(header) + "\n")
        for pt in p.points:
            delta, gamma = pt.delta, pt.gamma
            ad, ag = pt.active_delta, pt.active_gamma
            fh.write(
                _dump(
                    {
                        "t": pt.t,
                        "k": pt.k,
                        "theta": pt.theta,
                        "active_delta": ad,
                        "active_gamma": ag,
                        "gamma": {int(u): gamma[u] for u in ag},
                        "delta": {int(u): delta[u] for u in ad},
                    }
                )
                + "\n"
            )
    if store_z:
        with open(z_sidecar(path), "w", encoding="utf-8") as fh:
            for pt in p.points:
                fh.write(_dump(pt.z) + "\n")


def read_path(path: str | Path) -> LbiPath:
    """Rebuild an :class:`LbiPath`; needs the z sidecar."""
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or not lines[0].get("header"):
        raise InputError(f"{path}: missing path header")
    head, rows = lines[0], lines[1:]
    side = z_sidecar(path)
    if not side.exists():
        raise InputError(f"{path}: no z sidecar ({side.name}); rerun fit with --store-z")
    with open(side, encoding="utf-8") as fh:
        zs = [json.loads(line) for line in fh if line.strip()]
    if len(zs) != len(rows):
        raise InputError(f"{side}: {len(zs)} arrays for {len(rows)} path points")
    config = LbiConfig.from_dict(head["config"])
    n, U, kappa = head["n_items"], head["n_annotators"], head["kappa"]
    points = [
        PathPoint(r["t"], r["k"], np.array(r["theta"], dtype=np.float64), np.array(z, dtype=np.float64), kappa, n, U)
        for r, z in zip(rows, zs)
    ]
    return LbiPath(
        config=config,
        alpha=head["alpha"],
        spectral_norm=head["spectral_norm_XtX"],
        m=head["m"],
        n_items=n,
        n_annotators=U,
        points=points,
        activations=[Activation(int(u), b, float(t), int(k)) for u, b, t, k in head["activations"]],
        n_iterations=head["n_iterations"],
        stop_reason=head["stop_reason"],
        dataset_digest=head["dataset_hash"],
    )
