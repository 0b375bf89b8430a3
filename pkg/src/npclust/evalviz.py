"""Clustering comparison (adjusted Rand index) and plot-ready cluster tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from math import comb
from typing import List, NamedTuple

import numpy as np

from .errors import AlignmentError, ParseError, PreconditionError
from .ingest import layout_columns


@dataclass(frozen=True)
class Labeling:
    """Cluster labels keyed by identifier."""

    ids: List[str]
    labels: np.ndarray

    def __post_init__(self):
        ids = [str(i) for i in self.ids]
        labels = np.asarray(self.labels, dtype=int).ravel()
        if len(ids) != labels.size:
            raise PreconditionError("ids and labels differ in length")
        if len(set(ids)) != len(ids):
            raise PreconditionError("labeling ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    def aligned_to(self, ids):
        index = {g: k for k, g in enumerate(self.ids)}
        return self.labels[[index[g] for g in ids]]


class ARIResult(NamedTuple):
    ari: float
    n: int
    degenerate: bool


def _pair_sum(counts):
    return sum(comb(int(c), 2) for c in counts)


def ari_details(a, b):
    """Adjusted Rand index with bookkeeping.

    Labelings are aligned by identifier. The Hubert-Arabie index is
    evaluated in integer arithmetic up to a single final division. When
    both partitions are trivial the index is 0/0; it is then reported as 1
    for identical partitions and 0 otherwise, with ``degenerate=True``.
    """
    if isinstance(a, Labeling) and isinstance(b, Labeling):
        sa, sb = set(a.ids), set(b.ids)
        if sa != sb:
            only_a, only_b = sorted(sa - sb), sorted(sb - sa)
            raise AlignmentError(
                f"labelings cover different ids; missing from second: {only_a[:5]}, "
                f"missing from first: {only_b[:5]}",
                missing_in_a=only_b, missing_in_b=only_a,
            )
        la, lb = a.labels, b.aligned_to(a.ids)
    else:
        la, lb = np.asarray(a).ravel(), np.asarray(b).ravel()
        if la.size != lb.size:
            raise AlignmentError("label vectors differ in length")
    n = la.size
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    index = _pair_sum(table.ravel())
    sa = _pair_sum(table.sum(axis=1))
    sb = _pair_sum(table.sum(axis=0))
    total = comb(n, 2)
    num = 2 * (total * index - sa * sb)
    den = total * (sa + sb) - 2 * sa * sb
    if den == 0:
        same = bool(np.all((table > 0).sum(axis=1) == 1) and np.all((table > 0).sum(axis=0) == 1))
        return ARIResult(1.0 if same else 0.0, n, True)
    return ARIResult(num / den, n, False)


def ari(a, b):
    """Adjusted Rand index between two labelings."""
    return ari_details(a, b).ari


def read_labeling(path):
    """Read ``gene_id<sep>label`` rows (header optional)."""
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: no data rows")
    delim = "\t" if "\t" in lines[0] else ","
    ids, labels = [], []
    for r, row in enumerate(csv.reader(io.StringIO(text), delimiter=delim), start=1):
        if not row or row[0].startswith("#"):
            continue
        if len(row) < 2:
            raise ParseError(f"{path}: expected id and label", row=r)
        try:
            labels.append(int(row[1]))
        except ValueError:
            if r == 1:
                continue
            raise ParseError(f"{path}: non-integer label {row[1]!r}", row=r, column=2) from None
        ids.append(row[0].strip())
    if not ids:
        raise ParseError(f"{path}: no data rows")
    return Labeling(ids, np.array(labels))


@dataclass
class VizRecord:
    cluster: int
    pi_hat: float
    gene_count: int
    lambdas: np.ndarray  # one per condition


@dataclass
class VizTable:
    conditions: List[str]
    records: List[VizRecord]
    scale: str = "unknown"

    def rows(self):
        for r in self.records:
            for cond, lam in zip(self.conditions, r.lambdas):
                yield r.cluster, cond, float(lam), float(r.pi_hat), r.gene_count


def viz_table(data, result, layout, scale=None):
    """Per-cluster bar data.

    ``lambda[j, k]`` is the share of condition ``j``'s total expression
    (summed over its replicates) held by genes of cluster ``k``; for each
    condition the shares sum to one over clusters. Bar widths are the
    fitted mixing proportions.

    Parameters
    ----------
    data : ExpressionMatrix or array of shape (n, d)
        Expression on the nonnegative scale (FPKM or counts), not logs.
    result : ClusteringResult or tuple of (labels, pi)
        Labels are 1-based, one per row of ``data``.
    layout : sequence of (condition, replicates)
    scale : str, optional
        Recorded in the table; inferred from the provenance when omitted.
    """
    if isinstance(result, tuple):
        labels, pi = result
    else:
        labels, pi = result.labels, result.state.pi
    names = [s.name for s in getattr(data, "provenance", ())]
    if "log_transform" in names:
        raise PreconditionError("viz requires pre-log data (matrix was log-transformed)")
    y = np.asarray(getattr(data, "values", data), dtype=float)
    if np.any(y < 0):
        raise PreconditionError("viz requires pre-log data (found negative values)")
    labels = np.asarray(labels, dtype=int).ravel()
    pi = np.asarray(pi, dtype=float)
    m = len(pi)
    if labels.size != y.shape[0]:
        raise PreconditionError("labels do not match the matrix rows")
    if labels.min() < 1 or labels.max() > m:
        raise PreconditionError(f"labels must lie in 1..{m}")
    cols = layout_columns(layout)
    if sum(len(c) for c in cols) != y.shape[1]:
        raise PreconditionError("layout does not match the matrix columns")

    per_cond = np.stack([y[:, c].sum(axis=1) for c in cols], axis=1)  # (n, J)
    mass = np.zeros((m, len(cols)))
    np.add.at(mass, labels - 1, per_cond)
    cond_total = mass.sum(axis=0)
    safe = np.where(cond_total > 0, cond_total, 1.0)
    lam = mass / safe
    counts = np.bincount(labels - 1, minlength=m)
    if scale is None:
        scale = "fpkm" if "fpkm" in names else "counts"
    records = [VizRecord(k + 1, float(pi[k]), int(counts[k]), lam[k]) for k in range(m)]
    return VizTable([name for name, _ in layout], records, scale)


def write_viz(path, table, meta_path=None):
    with open(path, "w") as fh:
        fh.write("cluster\tcondition\tlambda\tpi_hat\tgene_count\n")
        for k, cond, lam, p, cnt in table.rows():
            fh.write(f"{k}\t{cond}\t{lam!r}\t{p!r}\t{cnt}\n")
    if meta_path is not None:
        meta = {
            "scale": table.scale,
            "conditions": table.conditions,
            "clusters": [
                {"cluster": r.cluster, "pi_hat": r.pi_hat, "gene_count": r.gene_count,
                 "lambda": [float(v) for v in r.lambdas]}
                for r in table.records
            ],
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
