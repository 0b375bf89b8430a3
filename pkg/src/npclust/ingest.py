"""Count-matrix input, normalization, filtering and transformation.

The canonical preprocessing order is::

    cpm_filter -> fpkm -> zero_impute -> log_transform

Each step appends a :class:`Step` to the ``provenance`` of the returned
matrix, so a written matrix always records how it was produced.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DegenerateDataError,
    LayoutError,
    MissingLengthError,
    OrderingError,
    ParseError,
    PreconditionError,
)

Layout = Tuple[Tuple[str, int], ...]

CANONICAL_ORDER = ("cpm_filter", "fpkm", "zero_impute", "log_transform")


@dataclass(frozen=True)
class Step:
    """One applied preprocessing step and its parameters."""

    name: str
    params: Tuple[Tuple[str, object], ...] = ()

    def __str__(self):
        parts = [self.name] + [f"{k}={_fmt_param(v)}" for k, v in self.params]
        return " ".join(parts)

    @classmethod
    def parse(cls, text):
        name, *rest = text.split()
        params = []
        for item in rest:
            key, _, value = item.partition("=")
            params.append((key, _parse_param(value)))
        return cls(name, tuple(params))

    def get(self, key, default=None):
        return dict(self.params).get(key, default)


def _fmt_param(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_param(v):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


@dataclass(frozen=True)
class CountsMatrix:
    """Raw read counts, genes in rows and samples in columns.

    ``lib_sizes`` holds the per-sample read totals. They are computed from
    the column sums when the file is read and are carried unchanged through
    filtering, so CPM/FPKM after filtering still use the sequencing depth
    of the full library.
    """

    gene_ids: List[str]
    samples: List[str]
    counts: np.ndarray
    layout: Layout
    lib_sizes: np.ndarray
    gene_lengths: Optional[np.ndarray] = None
    provenance: Tuple[Step, ...] = ()

    @property
    def shape(self):
        return self.counts.shape

    @property
    def values(self):
        return self.counts


@dataclass(frozen=True)
class ExpressionMatrix:
    """Real-valued expression matrix carrying its preprocessing history."""

    gene_ids: List[str]
    samples: List[str]
    values: np.ndarray
    layout: Layout
    provenance: Tuple[Step, ...] = field(default=())

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values, step):
        return replace(self, values=values, provenance=self.provenance + (step,))


# ---------------------------------------------------------------------------
# layout helpers

def parse_layout(text):
    """Parse ``"lung:2,kidney:2"`` into ``(("lung", 2), ("kidney", 2))``."""
    layout = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, count = item.rpartition(":")
        if not sep or not name:
            raise LayoutError(f"layout entry {item!r} is not of the form name:replicates")
        try:
            reps = int(count)
        except ValueError:
            raise LayoutError(f"replicate count in {item!r} is not an integer") from None
        if reps < 1:
            raise LayoutError(f"condition {name!r} must have at least one replicate")
        layout.append((name, reps))
    if not layout:
        raise LayoutError("empty layout")
    return tuple(layout)


def format_layout(layout):
    return ",".join(f"{name}:{reps}" for name, reps in layout)


def check_layout(layout, d):
    layout = tuple((str(n), int(r)) for n, r in layout)
    total = sum(r for _, r in layout)
    if total != d:
        raise LayoutError(f"layout covers {total} columns but the matrix has {d}")
    if any(r < 1 for _, r in layout):
        raise LayoutError("every condition needs at least one replicate")
    return layout


def layout_columns(layout):
    """Column indices belonging to each condition, in layout order."""
    out, start = [], 0
    for _, reps in layout:
        out.append(list(range(start, start + reps)))
        start += reps
    return out


# ---------------------------------------------------------------------------
# reading and writing

def _sniff_delimiter(header_line):
    return "\t" if "\t" in header_line else ","


def _read_table(path):
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: no data rows")
    delim = _sniff_delimiter(lines[0])
    rows = [r for r in csv.reader(io.StringIO(text), delimiter=delim) if r and any(c.strip() for c in r)]
    header, body = rows[0], rows[1:]
    if not body:
        raise ParseError(f"{path}: no data rows")
    return delim, header, body


def _parse_count(cell, row, col):
    s = cell.strip()
    try:
        v = int(s)
    except ValueError:
        raise ParseError(f"non-integer count {cell!r}", row=row, column=col) from None
    if v < 0:
        raise ParseError(f"negative count {cell!r}", row=row, column=col)
    return v


def read_counts(path, layout=None, lengths_path=None):
    """Read a delimited gene-by-sample count matrix.

    Parameters
    ----------
    path : str or path-like
        Comma- or tab-delimited file; the delimiter is tab when the header
        row contains a tab and comma otherwise. The first column holds gene
        identifiers, the header row holds sample names.
    layout : sequence of (str, int) or str, optional
        Condition names with their replicate counts, in column order.
        Defaults to one condition per column.
    lengths_path : str or path-like, optional
        Two-column file mapping gene identifier to gene length in base pairs.

    Returns
    -------
    CountsMatrix

    Raises
    ------
    ParseError
        For empty files, ragged rows, or cells that are not nonnegative
        integers. Row numbers count the header as row 1.
    LayoutError
        When the layout does not cover exactly the sample columns.
    MissingLengthError
        When ``lengths_path`` is given but lacks a gene.
    """
    _, header, body = _read_table(path)
    samples = [h.strip() for h in header[1:]]
    d = len(samples)
    if d == 0:
        raise ParseError(f"{path}: header has no sample columns", row=1)
    gene_ids, counts = [], []
    for r, row in enumerate(body, start=2):
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, found {len(row)}", row=r)
        gene_ids.append(row[0].strip())
        counts.append([_parse_count(c, r, col) for col, c in enumerate(row[1:], start=2)])
    counts = np.asarray(counts, dtype=np.int64)

    if layout is None:
        layout = tuple((s, 1) for s in samples)
    elif isinstance(layout, str):
        layout = parse_layout(layout)
    layout = check_layout(layout, d)

    lengths = None
    if lengths_path is not None:
        table = read_lengths(lengths_path)
        missing = [g for g in gene_ids if g not in table]
        if missing:
            raise MissingLengthError(
                f"no gene length for {len(missing)} gene(s), first: {missing[0]!r}"
            )
        lengths = np.array([table[g] for g in gene_ids], dtype=np.int64)

    return CountsMatrix(
        gene_ids=gene_ids,
        samples=samples,
        counts=counts,
        layout=layout,
        lib_sizes=counts.sum(axis=0),
        gene_lengths=lengths,
    )


def read_lengths(path):
    """Read a two-column ``gene_id, length`` table into a dict."""
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: no data rows")
    delim = _sniff_delimiter(lines[0])
    table = {}
    for r, row in enumerate(csv.reader(io.StringIO(text), delimiter=delim), start=1):
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) < 2:
            raise ParseError(f"{path}: expected gene_id and length", row=r)
        try:
            length = int(row[1].strip())
        except ValueError:
            if r == 1:  # header
                continue
            raise ParseError(f"{path}: non-integer length {row[1]!r}", row=r, column=2) from None
        if length <= 0:
            raise ParseError(f"{path}: gene length must be positive", row=r, column=2)
        table[row[0].strip()] = length
    return table


def read_expression(path, layout=None):
    """Read an expression matrix written by :func:`write_matrix`.

    The provenance sidecar (``<path>.provenance``) is picked up when present
    and supplies the layout if none is given.
    """
    _, header, body = _read_table(path)
    samples = [h.strip() for h in header[1:]]
    d = len(samples)
    gene_ids, values = [], []
    for r, row in enumerate(body, start=2):
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, found {len(row)}", row=r)
        gene_ids.append(row[0].strip())
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise ParseError("non-numeric value", row=r) from None
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        i, j = np.argwhere(~np.isfinite(values))[0]
        raise ParseError("non-finite value", row=int(i) + 2, column=int(j) + 2)

    provenance, side_layout = (), None
    side = provenance_path(path)
    if os.path.exists(side):
        provenance, side_layout = read_provenance(side)
    if layout is None:
        layout = side_layout
    if layout is None:
        layout = tuple((s, 1) for s in samples)
    elif isinstance(layout, str):
        layout = parse_layout(layout)
    layout = check_layout(layout, d)
    return ExpressionMatrix(gene_ids, samples, values, layout, tuple(provenance))


def _fmt_cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_matrix(path, m, delimiter="\t"):
    """Write a counts or expression matrix plus its provenance sidecar.

    Floats are written with ``repr`` so reading the file back reproduces
    the values bit for bit.
    """
    vals = m.values
    integer = np.issubdtype(vals.dtype, np.integer)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["gene_id"] + list(m.samples))
        for gid, row in zip(m.gene_ids, vals):
            w.writerow([gid] + [str(int(v)) if integer else repr(float(v)) for v in row])
    write_provenance(provenance_path(path), m.provenance, m.layout)


def provenance_path(path):
    return os.fspath(path) + ".provenance"


def write_provenance(path, provenance, layout=None):
    with open(path, "w") as fh:
        if layout is not None:
            fh.write(f"layout={format_layout(layout)}\n")
        for i, step in enumerate(provenance, start=1):
            fh.write(f"step{i}={step}\n")


def read_provenance(path):
    steps, layout = [], None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            if key == "layout":
                layout = parse_layout(value)
            elif key.startswith("step"):
                steps.append((int(key[4:]), Step.parse(value)))
    return [s for _, s in sorted(steps, key=lambda t: t[0])], layout


# ---------------------------------------------------------------------------
# normalization

def _check_lib_sizes(counts):
    lib = np.asarray(counts.lib_sizes, dtype=float)
    bad = np.flatnonzero(lib <= 0)
    if bad.size:
        raise DegenerateDataError(
            f"sample {counts.samples[bad[0]]!r} has zero total reads"
        )
    return lib


def cpm(counts):
    """Counts per million: ``X * 1e6 / N`` with ``N`` the sample total."""
    lib = _check_lib_sizes(counts)
    values = counts.counts.astype(float) * 1e6 / lib
    return ExpressionMatrix(
        list(counts.gene_ids), list(counts.samples), values, counts.layout,
        counts.provenance + (Step("cpm"),),
    )


RETENTION_RULES: Dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "any": lambda c, t: (c >= t).any(axis=1),
    "all": lambda c, t: (c >= t).all(axis=1),
    "mean": lambda c, t: c.mean(axis=1) >= t,
}


def cpm_filter(counts, threshold=1.5, rule="any"):
    """Drop lowly expressed genes.

    A gene is kept when its CPM passes ``threshold`` under ``rule``; the
    default ``"any"`` keeps genes reaching the threshold in at least one
    sample. Library sizes are not recomputed on the retained subset.
    """
    if not threshold > 0:
        raise PreconditionError("CPM threshold must be positive")
    if rule not in RETENTION_RULES:
        raise PreconditionError(f"unknown retention rule {rule!r}")
    keep = RETENTION_RULES[rule](cpm(counts).values, threshold)
    idx = np.flatnonzero(keep)
    return replace(
        counts,
        gene_ids=[counts.gene_ids[i] for i in idx],
        counts=counts.counts[idx],
        gene_lengths=None if counts.gene_lengths is None else counts.gene_lengths[idx],
        provenance=counts.provenance + (Step("cpm_filter", (("threshold", float(threshold)), ("rule", rule))),),
    )


def fpkm(counts):
    """Fragments per kilobase per million: ``X * 1e9 / (N * length)``."""
    if counts.gene_lengths is None:
        raise PreconditionError("FPKM needs gene lengths")
    s = np.asarray(counts.gene_lengths, dtype=float)
    if np.any(s <= 0):
        raise PreconditionError("gene lengths must be positive")
    lib = _check_lib_sizes(counts)
    values = counts.counts.astype(float) * 1e9 / (lib[None, :] * s[:, None])
    return ExpressionMatrix(
        list(counts.gene_ids), list(counts.samples), values, counts.layout,
        counts.provenance + (Step("fpkm"),),
    )


def zero_impute(m: Union[CountsMatrix, ExpressionMatrix], seed: int):
    """Replace zeros by independent draws from ``Uniform(0, A]``.

    ``A`` is the smallest strictly positive entry of the matrix before
    imputation. Imputing a :class:`CountsMatrix` yields float counts.
    """
    vals = np.asarray(m.values)
    pos = vals[vals > 0]
    if pos.size == 0:
        raise DegenerateDataError("cannot impute zeros: matrix has no positive entry")
    a = float(pos.min())
    out = vals.astype(float, copy=True)
    zeros = out == 0
    rng = np.random.default_rng(seed)
    # 1 - U with U in [0, 1) puts draws in (0, 1]
    out[zeros] = a * (1.0 - rng.random(int(zeros.sum())))
    step = Step("zero_impute", (("seed", int(seed)), ("A", a)))
    if isinstance(m, CountsMatrix):
        return replace(m, counts=out, provenance=m.provenance + (step,))
    return m.with_values(out, step)


def log_transform(m):
    """Natural logarithm of every entry; all entries must be positive."""
    vals = np.asarray(m.values, dtype=float)
    bad = np.argwhere(~(vals > 0))
    if bad.size:
        i, j = bad[0]
        raise PreconditionError(
            f"log transform needs positive values; gene {m.gene_ids[i]!r}, "
            f"sample {m.samples[j]!r} is {vals[i, j]!r} (impute zeros first)"
        )
    return m.with_values(np.log(vals), Step("log_transform"))


def check_order(steps: Sequence[str]):
    """Raise :class:`~npclust.errors.OrderingError` unless ``steps`` follow
    the canonical preprocessing order."""
    unknown = [s for s in steps if s not in CANONICAL_ORDER]
    if unknown:
        raise OrderingError(f"unknown pipeline step {unknown[0]!r}")
    if len(set(steps)) != len(steps):
        raise OrderingError("pipeline steps must not repeat")
    pos = [CANONICAL_ORDER.index(s) for s in steps]
    if pos != sorted(pos):
        raise OrderingError(
            "pipeline steps must follow " + " -> ".join(CANONICAL_ORDER)
            + f"; got {' -> '.join(steps)}"
        )
