"""Nonparametric maximum smoothed likelihood (npMSL) mixture clustering.

Model: row ``y_i`` of an ``n x d`` matrix has density
``sum_k pi_k prod_j f_{k, b_j}(y_ij)``, where ``b_j`` maps coordinates onto
blocks of identically distributed coordinates. Each iteration

1. E-step: ``w_ik ∝ pi_k prod_j N f_{k,b_j}(y_ij)``,
2. M-step: ``pi_k = mean_i w_ik``,
3. M-step: ``f_kl`` = weighted KDE of the block-``l`` values with
   weights ``w_ik``.

``N f(y)`` is evaluated at every observation by kernel quadrature over the
grid on which ``f`` is stored, using the same kernel weights as the M-step
density estimate. With that pairing each iteration maximizes a minorizer of
the discretized smoothed log-likelihood, which therefore never decreases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from . import kde
from .errors import (
    EmptyComponentError,
    InitializationError,
    NumericError,
    PreconditionError,
)

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("random_posterior", "kmeans_like", "external_labels")
MIN_COMPONENT_WEIGHT = 1e-12
# Relative log floor. Wherever the clamp binds on a region carrying
# posterior mass the MM step is no longer exact, so it is kept far below
# anything a fitted density reaches in practice; scores are summed in log
# space, so the wider log range cannot underflow.
DEFAULT_FLOOR = 1e-30
_CACHE_ENTRIES = 25_000_000  # above this, kernel weights are rebuilt per use


@dataclass(frozen=True)
class BlockSpec:
    """Block index (1-based) of every coordinate."""

    b: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.b)
        object.__setattr__(self, "b", b)
        if not b:
            raise PreconditionError("block spec is empty")
        present = set(b)
        if present != set(range(1, max(b) + 1)):
            raise PreconditionError("block indices must cover 1..L without gaps")

    @property
    def L(self):
        return max(self.b)

    @property
    def d(self):
        return len(self.b)

    def members(self):
        """0-based coordinate indices of each block, in block order."""
        return [[j for j, bj in enumerate(self.b) if bj == l] for l in range(1, self.L + 1)]

    @classmethod
    def singleton(cls, d):
        return cls(tuple(range(1, d + 1)))

    @classmethod
    def from_layout(cls, layout):
        """Replicates of each condition form one block."""
        b = []
        for l, (_, reps) in enumerate(layout, start=1):
            b.extend([l] * int(reps))
        return cls(tuple(b))


@dataclass
class FitConfig:
    max_iters: int = 500
    tol: float = 1e-8
    seed: int = 0
    init: str = "kmeans_like"
    G: int = kde.DEFAULT_GRID_SIZE
    floor: float = DEFAULT_FLOOR
    h: Optional[float] = None


@dataclass
class MixtureState:
    """Mixing proportions and component densities.

    ``densities[k][l]`` is the density of block ``l`` in component ``k``;
    ``smoothed[k, l]`` caches ``N`` of it on the same grid. ``floor`` is
    relative: each density is clamped at ``floor * max(density)`` before
    taking logs.
    """

    pi: np.ndarray
    densities: List[List[kde.GridDensity]]
    smoothed: np.ndarray
    h: float
    grids: List[kde.Grid]
    floor: float = DEFAULT_FLOOR

    @property
    def m(self):
        return len(self.pi)

    @property
    def L(self):
        return len(self.grids)

    def log_floored(self):
        """``log max(f, floor * max f)`` on each grid, shape ``(m, L, G)``."""
        return np.array(
            [[_log_floor(f.values, self.floor) for f in row] for row in self.densities]
        )


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loglik: float
    max_dpi: float


@dataclass
class FitTrace:
    records: List[TraceRecord] = field(default_factory=list)
    status: str = "running"

    @property
    def loglik(self):
        return np.array([r.loglik for r in self.records])

    def __len__(self):
        return len(self.records)


@dataclass
class ClusteringResult:
    state: MixtureState
    posterior: np.ndarray
    labels: np.ndarray
    trace: FitTrace
    seed: int
    gene_ids: Optional[List[str]] = None


def _values(data):
    y = np.asarray(getattr(data, "values", data), dtype=float)
    if y.ndim != 2:
        raise PreconditionError("data must be a 2-D matrix")
    if not np.all(np.isfinite(y)):
        raise PreconditionError("data contain non-finite values")
    return y


def _log_floor(values, rel_floor):
    values = np.asarray(values, dtype=float)
    return kde.log_floored(values, rel_floor * values.max())


# ---------------------------------------------------------------------------
# kernel-weight designs

class _Cell:
    """Kernel weights of one block: stacked observations ``y_ij`` for the
    block's coordinates (row-major: observation, then coordinate)."""

    def __init__(self, y, cols, grid, h):
        self.cols = list(cols)
        self.r = len(self.cols)
        self.grid = grid
        self.h = h
        self.points = y[:, self.cols].ravel()
        self.c = grid.trapezoid_weights()
        self._a = None
        if self.points.size * grid.size <= _CACHE_ENTRIES:
            self._a = kde.smoothing_weights(self.points, grid, h)
        self.smoother = kde.grid_smoothing_matrix(grid, h)

    def chunks(self):
        if self._a is not None:
            yield 0, self._a
            return
        step = max(self.r, (_CACHE_ENTRIES // 8 // self.grid.size) // self.r * self.r)
        for start in range(0, self.points.size, step):
            yield start, kde.smoothing_weights(self.points[start:start + step], self.grid, self.h)

    def log_smoothed(self, logf):
        """``log N f_k`` at each stacked point; ``logf`` has shape (m, G)."""
        out = np.empty((self.points.size, logf.shape[0]))
        for start, a in self.chunks():
            out[start:start + a.shape[0]] = a @ logf.T
        return out

    def density(self, w):
        """Block density for every component; returns shape (m, G)."""
        acc = np.zeros((self.grid.size, w.shape[1]))
        for start, a in self.chunks():
            rows = np.arange(start, start + a.shape[0]) // self.r
            acc += a.T @ w[rows]
        total = self.r * w.sum(axis=0)
        return (acc / self.c[:, None] / total).T


class _BlockedDesign:
    def __init__(self, y, blocks, grids, h):
        self.n = y.shape[0]
        self.cells = [_Cell(y, cols, g, h) for cols, g in zip(blocks.members(), grids)]

    def scores(self, logf):
        """Sum over coordinates of ``log N f_{k,b_j}(y_ij)``, shape (n, m)."""
        m = logf.shape[0]
        s = np.zeros((self.n, m))
        for l, cell in enumerate(self.cells):
            s += cell.log_smoothed(logf[:, l, :]).reshape(self.n, cell.r, m).sum(axis=1)
        return s

    def densities(self, w):
        return np.stack([cell.density(w) for cell in self.cells], axis=1)


class _UnblockedDesign:
    """One density per coordinate, written directly from the per-coordinate
    update rather than through block pooling."""

    def __init__(self, y, grids, h):
        self.y = y
        self.grids = grids
        self.c = [g.trapezoid_weights() for g in grids]
        self.a = [kde.smoothing_weights(y[:, j], g, h) for j, g in enumerate(grids)]
        self.smoothers = [kde.grid_smoothing_matrix(g, h) for g in grids]

    def scores(self, logf):
        s = np.zeros((self.y.shape[0], logf.shape[0]))
        for j, a in enumerate(self.a):
            s += a @ logf[:, j, :].T
        return s

    def densities(self, w):
        out = []
        for a, c in zip(self.a, self.c):
            out.append(((a.T @ w) / c[:, None] / w.sum(axis=0)).T)
        return np.stack(out, axis=1)


def _make_grids(y, blocks, h, G):
    if blocks is None:
        return [kde.build_grid((col.min(), col.max()), h, G) for col in y.T]
    grids = []
    for cols in blocks.members():
        v = y[:, cols]
        grids.append(kde.build_grid((v.min(), v.max()), h, G))
    return grids


def _design(y, blocks, grids, h):
    if blocks is None:
        if len(grids) != y.shape[1]:
            raise PreconditionError("unblocked fit needs one grid per coordinate")
        return _UnblockedDesign(y, grids, h)
    if blocks.d != y.shape[1]:
        raise PreconditionError(f"block spec covers {blocks.d} coordinates, data have {y.shape[1]}")
    return _BlockedDesign(y, blocks, grids, h)


def _smoothers(design):
    if isinstance(design, _UnblockedDesign):
        return design.smoothers
    return [cell.smoother for cell in design.cells]


def _check_weights(w, iteration=None, trace=None):
    totals = w.sum(axis=0)
    empty = np.flatnonzero(totals <= MIN_COMPONENT_WEIGHT)
    if empty.size:
        raise EmptyComponentError(int(empty[0]) + 1, iteration=iteration, trace=trace)


def _state_from_posterior(design, w, grids, h, floor, iteration=None, trace=None):
    _check_weights(w, iteration, trace)
    pi = m_step_pi(w)
    vals = design.densities(w)
    m, L = vals.shape[:2]
    dens = [[kde.GridDensity(grids[l], vals[k, l]) for l in range(L)] for k in range(m)]
    state = MixtureState(pi, dens, np.empty((m, L, vals.shape[2])), h, grids, floor)
    _refresh_smoothed(state, _smoothers(design))
    return state


def _refresh_smoothed(state, smoothers):
    logf = state.log_floored()
    for l, s in enumerate(smoothers):
        state.smoothed[:, l, :] = np.exp(logf[:, l, :] @ s.T)


def posterior_from_scores(pi, scores):
    """Responsibilities and smoothed log-likelihood from per-component scores.

    ``scores[i, k]`` is ``sum_j log N f_{k,b_j}(y_ij)``. Everything stays in
    log space; rows are normalized with log-sum-exp.

    Returns
    -------
    w : ndarray, shape (n, m)
    loglik : float
    """
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(pi, dtype=float))[None, :] + scores
    lse = logsumexp(logp, axis=1)
    bad = np.flatnonzero(~np.isfinite(lse))
    if bad.size:
        raise NumericError(f"observation {int(bad[0])} has zero likelihood under every component")
    w = np.exp(logp - lse[:, None])
    w /= w.sum(axis=1, keepdims=True)
    return w, float(lse.sum())


def log_smoothed_scores(data, state, blocks):
    """``sum_j log N f_{k,b_j}(y_ij)`` for every observation and component."""
    y = _values(data)
    return _design(y, blocks, state.grids, state.h).scores(state.log_floored())


# ---------------------------------------------------------------------------
# public algorithm steps

def e_step(data, state, blocks):
    """Posterior probabilities ``w_ik`` for the current state."""
    w, _ = posterior_from_scores(state.pi, log_smoothed_scores(data, state, blocks))
    return w


def m_step_pi(w):
    """Mixing proportions: column means of the posterior."""
    pi = np.asarray(w, dtype=float).mean(axis=0)
    return pi / pi.sum()


def m_step_density(data, w, blocks, h, grids):
    """Weighted KDE of every (component, block) pair.

    The points of block ``l`` are all ``y_ij`` with ``b_j = l``; each
    carries weight ``w_ik``. Kernels are the grid-normalized ones of
    :func:`npclust.kde.weighted_kde`.

    Returns
    -------
    list of list of GridDensity, indexed ``[k][l]``
    """
    y = _values(data)
    w = np.asarray(w, dtype=float)
    _check_weights(w)
    vals = _design(y, blocks, grids, h).densities(w)
    return [[kde.GridDensity(grids[l], vals[k, l]) for l in range(vals.shape[1])] for k in range(vals.shape[0])]


def smoothed_loglik(data, state, blocks):
    """``sum_i log sum_k pi_k prod_j N f_{k,b_j}(y_ij)``."""
    _, ll = posterior_from_scores(state.pi, log_smoothed_scores(data, state, blocks))
    return ll


def _hard_posterior(labels, m):
    w = np.zeros((labels.size, m))
    w[np.arange(labels.size), labels] = 1.0
    return w


def _lloyd(y, m, rng, iters=10):
    centers = y[rng.choice(y.shape[0], size=m, replace=False)]
    labels = np.zeros(y.shape[0], dtype=int)
    for _ in range(iters):
        d2 = ((y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        for k in range(m):
            members = labels == k
            if members.any():
                centers[k] = y[members].mean(axis=0)
    return labels


def initial_posterior(y, m, seed, strategy="kmeans_like", labels=None):
    """Starting responsibilities for :func:`init_state`."""
    n = y.shape[0]
    if not 1 <= m <= n:
        raise InitializationError(f"need 1 <= m <= n, got m={m}, n={n}")
    if strategy not in INIT_STRATEGIES:
        raise PreconditionError(f"unknown init strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    if m == 1:
        return np.ones((n, 1))
    if strategy == "random_posterior":
        return rng.dirichlet(np.ones(m), size=n)
    if strategy == "external_labels":
        if labels is None:
            raise PreconditionError("external_labels strategy needs labels")
        lab = np.asarray(labels, dtype=int).ravel()
        if lab.size != n or lab.min() < 1 or lab.max() > m:
            raise PreconditionError(f"labels must be n={n} integers in 1..{m}")
        w = _hard_posterior(lab - 1, m)
        _check_weights(w)
        return w
    for attempt in range(10):
        lab = _lloyd(y, m, rng)
        if np.bincount(lab, minlength=m).min() > 0:
            return _hard_posterior(lab, m)
        logger.debug("k-means init left an empty cluster (attempt %d)", attempt + 1)
    raise InitializationError("k-means initialization left an empty component after 10 re-seeds")


def init_state(data, m, blocks, seed, strategy="kmeans_like", labels=None,
               h=None, G=kde.DEFAULT_GRID_SIZE, floor=DEFAULT_FLOOR):
    """Initial state built by one M-step from a starting posterior.

    Parameters
    ----------
    data : ExpressionMatrix or array of shape (n, d)
    m : int
    blocks : BlockSpec or None
        ``None`` gives one density per coordinate (no pooling).
    seed : int
    strategy : {"random_posterior", "kmeans_like", "external_labels"}
        Uniform-Dirichlet rows, hard labels from a 10-iteration Lloyd pass
        over rows, or hard labels supplied through ``labels`` (1-based).
    h : float, optional
        Bandwidth; Silverman's rule on the pooled matrix when omitted.

    Returns
    -------
    state : MixtureState
    w : ndarray, shape (n, m)
    """
    y = _values(data)
    if h is None:
        h = kde.silverman_bandwidth(y)
    grids = _make_grids(y, blocks, h, G)
    design = _design(y, blocks, grids, h)
    w = initial_posterior(y, m, seed, strategy, labels)
    return _state_from_posterior(design, w, grids, h, floor), w


def fit(data, m, blocks=None, config=None, labels=None, callback=None):
    """Run npMSL to convergence.

    Stops when ``|l_t - l_{t-1}| / (1 + |l_{t-1}|) < tol`` for the smoothed
    log-likelihood ``l`` or after ``max_iters`` E-steps. The returned
    posterior and labels belong to the returned state.

    ``callback(iteration, state, w)``, if given, is called after every
    E-step with the state that produced ``w``.

    Raises
    ------
    EmptyComponentError, NumericError
        With ``trace`` attached and status ``"failed"``.
    """
    cfg = config or FitConfig()
    y = _values(data)
    h = cfg.h if cfg.h is not None else kde.silverman_bandwidth(y)
    grids = _make_grids(y, blocks, h, cfg.G)
    design = _design(y, blocks, grids, h)
    trace = FitTrace()

    try:
        w0 = initial_posterior(y, m, cfg.seed, cfg.init, labels)
        state = _state_from_posterior(design, w0, grids, h, cfg.floor, iteration=0, trace=trace)
        prev_ll, prev_pi, w = None, state.pi, None
        status = "max_iters"
        for it in range(1, cfg.max_iters + 1):
            if it > 1:
                state = _state_from_posterior(design, w, grids, h, cfg.floor, iteration=it, trace=trace)
            try:
                w, ll = posterior_from_scores(state.pi, design.scores(state.log_floored()))
            except NumericError as exc:
                raise NumericError(f"{exc} (iteration {it})", trace=trace) from None
            trace.records.append(TraceRecord(it, ll, float(np.max(np.abs(state.pi - prev_pi)))))
            if callback is not None:
                callback(it, state, w)
            prev_pi = state.pi
            if prev_ll is not None and abs(ll - prev_ll) / (1.0 + abs(prev_ll)) < cfg.tol:
                status = "converged"
                break
            prev_ll = ll
    except NumericError as exc:
        trace.status = "failed"
        exc.trace = trace
        raise
    trace.status = status
    if status != "converged":
        logger.warning("npMSL stopped after %d iterations without converging", cfg.max_iters)
    return ClusteringResult(
        state=state,
        posterior=w,
        labels=np.argmax(w, axis=1) + 1,
        trace=trace,
        seed=cfg.seed,
        gene_ids=list(getattr(data, "gene_ids", [])) or None,
    )


# ---------------------------------------------------------------------------
# serialization

def write_result(result, outdir, gene_ids=None):
    """Write labels, posterior, mixing proportions, densities and trace."""
    out = Path(outdir)
    (out / "densities").mkdir(parents=True, exist_ok=True)
    ids = gene_ids or result.gene_ids or [str(i + 1) for i in range(result.labels.size)]
    with open(out / "labels.tsv", "w") as fh:
        fh.write("gene_id\tlabel\n")
        for gid, lab in zip(ids, result.labels):
            fh.write(f"{gid}\t{int(lab)}\n")
    st = result.state
    with open(out / "posterior.tsv", "w") as fh:
        fh.write("gene_id\t" + "\t".join(f"w{k + 1}" for k in range(st.m)) + "\n")
        for gid, row in zip(ids, result.posterior):
            fh.write(gid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    with open(out / "pi.tsv", "w") as fh:
        fh.write("component\tpi\n")
        for k, p in enumerate(st.pi, start=1):
            fh.write(f"{k}\t{float(p)!r}\n")
    for k in range(st.m):
        for l in range(st.L):
            kde.write_density(out / "densities" / f"density_k{k + 1}_b{l + 1}.tsv", st.densities[k][l], st.h)
    with open(out / "trace.tsv", "w") as fh:
        fh.write("iteration\tloglik\tmax_dpi\n")
        for r in result.trace.records:
            fh.write(f"{r.iteration}\t{r.loglik!r}\t{r.max_dpi!r}\n")
        fh.write(f"# status={result.trace.status}\n")

