"""Gaussian repeated-measures mixture, used only to choose the cluster count.

Component ``k`` gives every coordinate of a row the same normal
distribution ``N(mu_k, sigma2_k)``, so a row's component log-density is
``sum_j log phi(y_ij; mu_k, sigma2_k)``. Fits are started with a small-EM
search and scored by AIC, BIC, CAIC and ICL; the cluster count named by at
least two criteria wins.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import InitializationError, PreconditionError, SelectionError, SingularityError

CRITERIA = ("AIC", "BIC", "CAIC", "ICL")
VARIANCE_FLOOR = 1e-8
_FLOOR_PATIENCE = 3


@dataclass
class RepNormModel:
    m: int
    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    loglik: float
    posterior: np.ndarray
    n_iter: int = 0
    converged: bool = False
    trace: List[float] = field(default_factory=list)
    seed: Optional[int] = None


@dataclass
class SelectionRecord:
    m: int
    loglik: float
    p: int
    AIC: float
    BIC: float
    CAIC: float
    ICL: float
    converged: bool
    seed: Optional[int]
    status: str = "ok"


@dataclass
class SelectionReport:
    records: List[SelectionRecord]
    chosen_m: int
    votes: Dict[str, int]
    no_majority: bool = False

    def summary(self):
        votes = ",".join(f"{c}:{self.votes[c]}" for c in CRITERIA if c in self.votes)
        return f"chosen_m={self.chosen_m} votes={votes} no_majority={str(self.no_majority).lower()}"


def _values(data):
    y = np.asarray(getattr(data, "values", data), dtype=float)
    if y.ndim != 2:
        raise PreconditionError("data must be a 2-D matrix")
    return y


class _Stats:
    """Per-row sufficient statistics of the repeated-measures likelihood."""

    def __init__(self, y):
        self.n, self.d = y.shape
        self.s1 = y.sum(axis=1)
        self.s2 = (y * y).sum(axis=1)
        self.pooled_var = float(y.var())
        self.floor = VARIANCE_FLOOR * self.pooled_var

    def log_dens(self, mu, sigma2):
        """Row log-densities under every component, shape (n, m)."""
        sq = self.s2[:, None] - 2.0 * mu[None, :] * self.s1[:, None] + self.d * mu[None, :] ** 2
        return -0.5 * self.d * np.log(2.0 * math.pi * sigma2)[None, :] - 0.5 * sq / sigma2[None, :]


def _e_step(stats, pi, mu, sigma2):
    with np.errstate(divide="ignore"):
        logp = np.log(pi)[None, :] + stats.log_dens(mu, sigma2)
    lse = logsumexp(logp, axis=1)
    w = np.exp(logp - lse[:, None])
    return w / w.sum(axis=1, keepdims=True), float(lse.sum())


def _m_step(stats, w):
    nk = w.sum(axis=0)
    if np.any(nk <= 1e-12):
        raise SingularityError("a component lost all of its weight")
    pi = nk / stats.n
    mu = (w * stats.s1[:, None]).sum(axis=0) / (stats.d * nk)
    sq = stats.s2[:, None] - 2.0 * mu[None, :] * stats.s1[:, None] + stats.d * mu[None, :] ** 2
    sigma2 = (w * np.maximum(sq, 0.0)).sum(axis=0) / (stats.d * nk)
    return pi / pi.sum(), mu, sigma2


def _random_start(y, m, rng):
    """Binning start: sort all values into ``m`` equal-count bins; draw each
    mean around its bin mean with the bin's spread and each precision as a
    standard-exponential multiple of the bin precision."""
    v = np.sort(y.ravel())
    bins = np.array_split(v, m)
    bmean = np.array([b.mean() for b in bins])
    bvar = np.array([b.var() if b.size > 1 else 0.0 for b in bins])
    bvar = np.where(bvar > 0, bvar, max(float(v.var()), 1e-300))
    mu = rng.normal(bmean, np.sqrt(bvar))
    sigma2 = bvar / rng.standard_exponential(m)
    pi = rng.dirichlet(np.ones(m))
    return pi, mu, sigma2


def repnorm_em(data, m, seed=None, max_iters=1000, tol=1e-8, start=None):
    """EM for the Gaussian repeated-measures mixture.

    Parameters
    ----------
    data : ExpressionMatrix or array of shape (n, d)
    m : int
    seed : int, optional
        Seeds the binning start when ``start`` is not given.
    max_iters, tol : int, float
        Stops when the relative log-likelihood change drops below ``tol``.
    start : tuple of (pi, mu, sigma2), optional

    Returns
    -------
    RepNormModel

    Raises
    ------
    SingularityError
        If a variance sits on the floor for three consecutive iterations.
    """
    y = _values(data)
    n, d = y.shape
    if m < 1 or n * d <= 2 * m:
        raise PreconditionError(f"need m >= 1 and n*d > 2m (m={m}, n*d={n * d})")
    stats = _Stats(y)
    if start is None:
        pi, mu, sigma2 = _random_start(y, m, np.random.default_rng(seed))
    else:
        pi, mu, sigma2 = (np.array(a, dtype=float) for a in start)
    sigma2 = np.maximum(sigma2, stats.floor)

    trace, on_floor, w = [], 0, None
    prev, converged = None, False
    for it in range(1, max_iters + 1):
        if it > 1:
            pi, mu, sigma2 = _m_step(stats, w)
            hit = sigma2 <= stats.floor
            on_floor = on_floor + 1 if hit.any() else 0
            if on_floor >= _FLOOR_PATIENCE:
                raise SingularityError(
                    f"variance of component {int(np.flatnonzero(hit)[0]) + 1} collapsed (m={m})"
                )
            sigma2 = np.maximum(sigma2, stats.floor)
        w, ll = _e_step(stats, pi, mu, sigma2)
        trace.append(ll)
        # a run settling onto the variance floor is singular, not converged
        if on_floor == 0 and prev is not None and abs(ll - prev) / (1.0 + abs(prev)) < tol:
            converged = True
            break
        prev = ll
    return RepNormModel(m, pi, mu, sigma2, ll, w, it, converged, trace, seed)


def _restart_seed(seed, r):
    return int(np.random.SeedSequence([int(seed), int(r)]).generate_state(1)[0])


def small_em_init(data, m, seed, restarts=20, burn_iters=5):
    """Best of ``restarts`` short EM runs from independent binning starts.

    Each restart runs ``burn_iters`` EM updates; restart ``r`` is exactly
    ``repnorm_em(data, m, seed=s_r, max_iters=burn_iters + 1, tol=0)`` with
    ``s_r`` derived from ``(seed, r)``.
    """
    if restarts < 1:
        raise PreconditionError("restarts must be at least 1")
    best = None
    for r in range(restarts):
        try:
            cand = repnorm_em(data, m, seed=_restart_seed(seed, r), max_iters=burn_iters + 1, tol=0.0)
        except SingularityError:
            continue
        if best is None or cand.loglik > best.loglik:
            best = cand
    if best is None:
        raise InitializationError(f"all {restarts} small-EM restarts were singular (m={m})")
    return best


def n_free_params(m):
    return 3 * m - 1


def criteria(model, n):
    """AIC, BIC, CAIC and ICL (smaller is better).

    ``ICL = BIC - 2 sum_ik w_ik log w_ik`` with ``0 log 0 = 0``.
    """
    p = n_free_params(model.m)
    dev = -2.0 * model.loglik
    logn = math.log(n)
    bic = dev + p * logn
    entropy = -float(xlogy(model.posterior, model.posterior).sum())
    return {
        "AIC": dev + 2.0 * p,
        "BIC": bic,
        "CAIC": dev + p * (logn + 1.0),
        "ICL": bic + 2.0 * entropy,
    }


def majority_vote(votes):
    """Cluster count chosen by at least two criteria.

    Returns ``(chosen_m, no_majority)``. A two-two split goes to the pair
    containing BIC's choice; with no value reaching two votes BIC's choice
    is returned and flagged.
    """
    values = list(votes.values())
    counts = {v: values.count(v) for v in values}
    top = max(counts.values())
    if top >= 2:
        winners = sorted(v for v, c in counts.items() if c == top)
        if "BIC" in votes and votes["BIC"] in winners:
            return votes["BIC"], False
        return winners[0], False
    return votes["BIC"], True


def _fit_one(y, m, seed, restarts, burn_iters, max_iters, tol):
    n = y.shape[0]
    try:
        init = small_em_init(y, m, seed, restarts, burn_iters)
        model = repnorm_em(y, m, max_iters=max_iters, tol=tol, start=(init.pi, init.mu, init.sigma2))
        model.seed = init.seed
    except (SingularityError, InitializationError):
        nan = float("nan")
        return SelectionRecord(m, nan, n_free_params(m), nan, nan, nan, nan, False, None, "singular")
    c = criteria(model, n)
    return SelectionRecord(m, model.loglik, n_free_params(m), c["AIC"], c["BIC"], c["CAIC"], c["ICL"],
                           model.converged, model.seed)


def select_m(data, m_range, seed, restarts=20, burn_iters=5, max_iters=1000, tol=1e-8, threads=1):
    """Fit every cluster count in ``m_range`` and vote.

    Candidates that fail with a singularity are reported but take no part
    in the vote. Each candidate's randomness depends only on ``(seed, m)``,
    so results do not depend on ``threads``.
    """
    y = _values(data)
    ms = list(m_range)
    if not ms:
        raise PreconditionError("empty range of cluster counts")
    seeds = [_restart_seed(seed, 10_000 + m) for m in ms]
    args = [(y, m, s, restarts, burn_iters, max_iters, tol) for m, s in zip(ms, seeds)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda a: _fit_one(*a), args))
    else:
        records = [_fit_one(*a) for a in args]

    usable = [r for r in records if r.status == "ok"]
    if not usable:
        raise SelectionError("every candidate cluster count failed")
    votes = {c: min(usable, key=lambda r: (getattr(r, c), r.m)).m for c in CRITERIA}
    chosen, no_majority = majority_vote(votes)
    return SelectionReport(records, chosen, votes, no_majority)


def write_report(path, report, summary_path=None):
    cols = ("m", "loglik", "p", "AIC", "BIC", "CAIC", "ICL", "converged", "seed")
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in report.records:
            row = [str(r.m), repr(r.loglik), str(r.p)] + [repr(getattr(r, c)) for c in CRITERIA]
            row += [str(r.converged).lower(), "" if r.seed is None else str(r.seed)]
            fh.write("\t".join(row) + "\n")
    if summary_path is not None:
        with open(summary_path, "w") as fh:
            fh.write(report.summary() + "\n")
