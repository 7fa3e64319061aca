"""Per-SNP additive logistic regression and p-value threshold filtering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .genotype_io import MISSING, Dataset

OK = "ok"
SEPARATION = "separation"
MONOMORPHIC = "monomorphic"

P_FLOOR = 1e-300


class SingleClass(ValueError):
    pass


class EmptySubset(LookupError):
    """No variant passes the threshold (recoverable)."""


@dataclass
class AssocResult:
    variant_id: str
    beta: float
    se: float
    wald_z: float
    p: float
    n_used: int
    flag: str = OK
    intercept: float = 0.0
    iterations: int = 0
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)


def wald_p(z: float) -> float:
    """Two-sided normal tail probability, floored at 1e-300."""
    return max(math.erfc(abs(z) / math.sqrt(2.0)), P_FLOOR)


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # log sigmoid(eta) = -log1p(exp(-eta)), evaluated stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _separated(x: np.ndarray, y: np.ndarray) -> bool:
    x0, x1 = x[y == 0], x[y == 1]
    return x0.max() <= x1.min() or x1.max() <= x0.min()


def fit_logistic_single(
    dosage,
    y,
    variant_id: str = "",
    tol: float = 1e-8,
    max_iter: int = 25,
    beta_limit: float = 20.0,
) -> AssocResult:
    """Fit logit P(y=1) = b0 + b1 * dosage by iteratively reweighted least squares.

    Samples with a missing dosage are dropped.  Newton steps are halved
    whenever they would lower the log-likelihood, so the trace is
    non-decreasing.  Separable data (and |b1| > ``beta_limit``) are flagged
    ``SEPARATION`` with a NaN p-value; constant dosage is ``MONOMORPHIC``
    with p = 1.
    """
    dosage = np.asarray(dosage, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = (dosage != MISSING) & np.isfinite(dosage) & ((y == 0) | (y == 1))
    x, yy = dosage[keep], y[keep]
    n = int(x.size)
    if n == 0 or yy.min() == yy.max():
        raise SingleClass(f"variant {variant_id!r}: both phenotype classes are needed")
    if x.min() == x.max():
        return AssocResult(variant_id, 0.0, math.inf, 0.0, 1.0, n, MONOMORPHIC)
    nan = math.nan
    if _separated(x, yy):
        return AssocResult(variant_id, nan, nan, nan, nan, n, SEPARATION)

    X = np.column_stack([np.ones(n), x])
    ybar = yy.mean()
    beta = np.array([math.log(ybar / (1 - ybar)), 0.0])
    ll = _loglik(X @ beta, yy)
    trace = [ll]
    it = 0
    for it in range(1, max_iter + 1):
        mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
        w = mu * (1.0 - mu)
        info = X.T @ (X * w[:, None])
        score = X.T @ (yy - mu)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            return AssocResult(variant_id, nan, nan, nan, nan, n, SEPARATION, iterations=it,
                               loglik_trace=tuple(trace))
        new_ll = _loglik(X @ (beta + step), yy)
        halvings = 0
        while new_ll < ll and halvings < 40:
            step /= 2
            new_ll = _loglik(X @ (beta + step), yy)
            halvings += 1
        if new_ll < ll:
            step[:] = 0.0
            new_ll = ll
        beta = beta + step
        ll = new_ll
        trace.append(ll)
        if abs(beta[1]) > beta_limit:
            return AssocResult(variant_id, nan, nan, nan, nan, n, SEPARATION, float(beta[0]),
                               it, tuple(trace))
        if np.max(np.abs(step)) < tol:
            break

    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    w = mu * (1.0 - mu)
    info = X.T @ (X * w[:, None])
    cov = np.linalg.inv(info)
    se = math.sqrt(cov[1, 1])
    z = beta[1] / se
    return AssocResult(variant_id, float(beta[1]), se, float(z), wald_p(z), n, OK,
                       float(beta[0]), it, tuple(trace))


def association_scan(ds: Dataset) -> list[AssocResult]:
    """One fit per variant, in dataset order; flagged fits are kept."""
    if ds.n_variants == 0:
        return []
    y = ds.phenotypes().astype(np.float64)
    y[y < 0] = np.nan
    g = ds.dosages()
    return [fit_logistic_single(g[:, j], y, v.id) for j, v in enumerate(ds.variants)]


def mean_impute(dosages: np.ndarray) -> np.ndarray:
    """Float copy with missing calls replaced by the column mean of observed calls."""
    g = np.asarray(dosages, dtype=np.float64).copy()
    miss = dosages == MISSING
    g[miss] = 0.0
    n_obs = (~miss).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(n_obs > 0, g.sum(axis=0) / np.maximum(n_obs, 1), 0.0)
    g[miss] = np.broadcast_to(means, g.shape)[miss]
    return g


@dataclass
class SnpSubset:
    threshold: float
    variant_ids: list[str]
    design_matrix: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return len(self.variant_ids)


def passing_variants(results: list[AssocResult], threshold: float) -> list[str]:
    """Ids of un-flagged results with p < threshold, ordered by (p, id)."""
    hits = [r for r in results if r.flag == OK and r.p < threshold]
    hits.sort(key=lambda r: (r.p, r.variant_id))
    return [r.variant_id for r in hits]


def threshold_filter(results: list[AssocResult], ds: Dataset, threshold: float) -> SnpSubset:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    ids = passing_variants(results, threshold)
    if not ids:
        raise EmptySubset(f"no variant has p < {threshold:g}")
    col = {v.id: j for j, v in enumerate(ds.variants)}
    design = mean_impute(ds.dosages()[:, [col[i] for i in ids]])
    return SnpSubset(threshold, ids, design)


SCAN_COLUMNS = ("variant_id", "chrom", "pos", "beta", "se", "z", "p", "n_used", "flag")


def write_scan_csv(results: list[AssocResult], ds: Dataset, path: Path | str) -> None:
    meta = {v.id: v for v in ds.variants}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCAN_COLUMNS)
        for r in results:
            v = meta[r.variant_id]
            w.writerow([r.variant_id, v.chromosome, v.position, repr(r.beta), repr(r.se),
                        repr(r.wald_z), repr(r.p), r.n_used, r.flag])


def read_scan_csv(path: Path | str) -> list[AssocResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(AssocResult(row["variant_id"], float(row["beta"]), float(row["se"]),
                                   float(row["z"]), float(row["p"]), int(row["n_used"]), row["flag"]))
    return out
