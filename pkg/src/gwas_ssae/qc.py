"""Two-stage genotype quality control: individuals first, then markers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import chdtrc

from .genotype_io import MISSING, Dataset, Sex, minor_allele_frequencies

logger = logging.getLogger(__name__)

SEX_CHROMOSOMES = frozenset({"X", "Y", "XY", "MT", "M", "23", "24", "25", "26"})
X_CHROMOSOMES = frozenset({"X", "23"})


class QcError(ValueError):
    pass


class EmptyDataset(QcError):
    pass


class InsufficientData(QcError):
    pass


class NoXChromosome(QcError):
    pass


class NoOverlap(QcError):
    pass


class DegenerateMatrix(QcError):
    pass


class SingleClass(QcError):
    pass


class EmptyCounts(QcError):
    pass


@dataclass(frozen=True)
class QcThresholds:
    """Removal thresholds.  ``pc1_min``/``pc2_min`` of ``None`` disable the PCA filter."""

    sample_missing_max: float = 0.02
    het_sd_window: float = 3.0
    sex_homozygosity_low: float = 0.2
    sex_homozygosity_high: float = 0.8
    ibd_max: float = 0.185
    pc1_min: float | None = -0.05
    pc2_min: float | None = 0.00
    diff_missing_p: float = 1e-5
    maf_min: float = 0.01
    variant_call_rate_min: float = 0.98
    hwe_p_min: float = 1e-5
    ibd_max_variants: int = 50_000

    def __post_init__(self):
        for name in ("sample_missing_max", "sex_homozygosity_low", "sex_homozygosity_high",
                     "ibd_max", "maf_min", "variant_call_rate_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a fraction")
        for name in ("diff_missing_p", "hwe_p_min"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} is not a p-value in (0, 1]")
        if self.het_sd_window < 0:
            raise ValueError("het_sd_window must be >= 0")


# Removal reasons, in the order they are applied.
SEX = "sex"
MISSINGNESS = "missingness"
HETEROZYGOSITY = "heterozygosity"
IBD = "ibd"
PCA = "pca"
DIFF_MISSINGNESS = "diff_missingness"
MAF = "maf"
CALL_RATE = "call_rate"
HWE = "hwe"


@dataclass
class QcReport:
    removed_samples: list[tuple[str, str]] = field(default_factory=list)
    removed_variants: list[tuple[str, str]] = field(default_factory=list)
    samples_before: int = 0
    samples_after: int = 0
    variants_before: int = 0
    variants_after: int = 0

    def merge(self, other: "QcReport") -> "QcReport":
        """Combine an individual-QC report with the marker-QC report that followed it."""
        return QcReport(
            removed_samples=self.removed_samples + other.removed_samples,
            removed_variants=self.removed_variants + other.removed_variants,
            samples_before=self.samples_before,
            samples_after=other.samples_after,
            variants_before=self.variants_before,
            variants_after=other.variants_after,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["removed_samples"] = [list(x) for x in self.removed_samples]
        d["removed_variants"] = [list(x) for x in self.removed_variants]
        return d

    def write(self, directory: Path | str) -> None:
        """``qc_report.json`` plus ``removed_samples.csv`` / ``removed_variants.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "qc_report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        for name, rows in (("removed_samples.csv", self.removed_samples),
                           ("removed_variants.csv", self.removed_variants)):
            with open(directory / name, "w") as fh:
                fh.write("id,reason\n")
                for ident, reason in rows:
                    fh.write(f"{ident},{reason}\n")

    @classmethod
    def read(cls, path: Path | str) -> "QcReport":
        d = json.loads(Path(path).read_text())
        d["removed_samples"] = [tuple(x) for x in d["removed_samples"]]
        d["removed_variants"] = [tuple(x) for x in d["removed_variants"]]
        return cls(**d)


def _autosomal(ds: Dataset) -> np.ndarray:
    return np.array([v.chromosome.upper() not in SEX_CHROMOSOMES for v in ds.variants], dtype=bool)


def _x_linked(ds: Dataset) -> np.ndarray:
    return np.array([v.chromosome.upper() in X_CHROMOSOMES for v in ds.variants], dtype=bool)


# -- individual QC ----------------------------------------------------------

def sample_missingness(ds: Dataset) -> np.ndarray:
    """Fraction of missing calls per sample."""
    if ds.n_variants == 0:
        raise EmptyDataset("missingness needs at least one variant")
    return (ds.dosages() == MISSING).mean(axis=1)


def heterozygosity_rates(ds: Dataset) -> np.ndarray:
    """Het calls / non-missing calls over autosomes (NaN when nothing observed)."""
    g = ds.dosages()[:, _autosomal(ds)]
    observed = (g != MISSING).sum(axis=1)
    het = (g == 1).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(observed > 0, het / np.maximum(observed, 1), np.nan)


def flag_outside_window(values: np.ndarray, window_sd: float) -> np.ndarray:
    """Indices whose value lies more than ``window_sd`` population SDs from the mean."""
    finite = np.isfinite(values)
    v = values[finite]
    if v.size < 2:
        raise InsufficientData("need at least two samples with observed calls")
    if np.ptp(v) == 0:
        return np.array([], dtype=np.int64)
    mean, sd = v.mean(), v.std()
    out = np.zeros(values.shape, dtype=bool)
    out[finite] = np.abs(v - mean) > window_sd * sd
    return np.flatnonzero(out)


def heterozygosity_outliers(ds: Dataset, window_sd: float = 3.0) -> np.ndarray:
    return flag_outside_window(heterozygosity_rates(ds), window_sd)


def x_inbreeding(ds: Dataset) -> np.ndarray:
    """X-chromosome inbreeding coefficient F per sample.

    F = (observed homozygous - expected homozygous) / (observed - expected),
    expected from allele frequencies across all samples.  Hemizygous males
    (all X calls homozygous) score 1; outbred females score near 0.
    """
    xmask = _x_linked(ds)
    if not xmask.any():
        raise NoXChromosome("sex check needs X-chromosome variants")
    g = ds.dosages()[:, xmask]
    p = minor_allele_frequencies(g)
    poly = np.isfinite(p) & (p > 0) & (p < 1)
    g, p = g[:, poly], p[poly]
    observed = g != MISSING
    exp_hom = np.where(observed, 1.0 - 2.0 * p * (1.0 - p), 0.0).sum(axis=1)
    obs_hom = (observed & (g != 1)).sum(axis=1)
    n_obs = observed.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_obs > exp_hom, (obs_hom - exp_hom) / (n_obs - exp_hom), np.nan)


def classify_sex(f: np.ndarray, reported: np.ndarray, low: float = 0.2, high: float = 0.8) -> np.ndarray:
    """Boolean mask of ambiguous (``low < F < high``) or sex-discordant samples."""
    f = np.asarray(f, dtype=np.float64)
    reported = np.asarray(reported)
    ambiguous = (f > low) & (f < high)
    discordant = ((reported == Sex.MALE) & (f <= low)) | ((reported == Sex.FEMALE) & (f >= high))
    return ambiguous | discordant


def sex_check(ds: Dataset, low: float = 0.2, high: float = 0.8) -> np.ndarray:
    return np.flatnonzero(classify_sex(x_inbreeding(ds), ds.sexes(), low, high))


def thin_variants(ds: Dataset, max_variants: int = 50_000, autosomal_only: bool = True) -> np.ndarray:
    """Every k-th (autosomal) variant index, k chosen so at most ``max_variants`` remain."""
    idx = np.flatnonzero(_autosomal(ds)) if autosomal_only else np.arange(ds.n_variants)
    if idx.size > max_variants:
        idx = idx[:: math.ceil(idx.size / max_variants)]
    return idx


def ibd_components(g: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Method-of-moments P(IBD=0), P(IBD=1), P(IBD=2) and PI_HAT for every sample pair.

    ``g`` is an ``(N, U)`` dosage matrix.  Observed IBS0/IBS1 counts over the
    variants both samples have called are compared with the counts expected
    from allele frequencies when the pair shares 0 or 1 allele IBD.
    """
    p = minor_allele_frequencies(g)
    keep = np.isfinite(p) & (p > 0) & (p < 1)
    g, p = g[:, keep], p[keep]
    n = g.shape[0]
    q = 1.0 - p
    e_ibs0_ibd0 = 2 * p**2 * q**2
    e_ibs1_ibd0 = 4 * p**3 * q + 4 * p * q**3
    e_ibs1_ibd1 = 2 * p * q

    ibs0 = np.zeros((n, n))
    ibs2 = np.zeros((n, n))
    both = np.zeros((n, n))
    exp00 = np.zeros((n, n))
    exp10 = np.zeros((n, n))
    exp11 = np.zeros((n, n))
    for start in range(0, g.shape[1], chunk):
        blk = g[:, start : start + chunk]
        h0 = (blk == 0).astype(np.float64)
        h1 = (blk == 1).astype(np.float64)
        h2 = (blk == 2).astype(np.float64)
        m = (blk != MISSING).astype(np.float64)
        sl = slice(start, start + chunk)
        cross = h0 @ h2.T
        ibs0 += cross + cross.T
        ibs2 += h0 @ h0.T + h1 @ h1.T + h2 @ h2.T
        both += m @ m.T
        exp00 += (m * e_ibs0_ibd0[sl]) @ m.T
        exp10 += (m * e_ibs1_ibd0[sl]) @ m.T
        exp11 += (m * e_ibs1_ibd1[sl]) @ m.T

    off_diag = ~np.eye(n, dtype=bool)
    if (both[off_diag] == 0).any():
        i, k = np.argwhere((both == 0) & off_diag)[0]
        raise NoOverlap(f"samples {i} and {k} share no called variants")
    ibs1 = both - ibs0 - ibs2
    with np.errstate(invalid="ignore", divide="ignore"):
        z0 = np.where(exp00 > 0, ibs0 / exp00, 1.0)
        z1 = np.where(exp11 > 0, (ibs1 - z0 * exp10) / exp11, 0.0)
    z0 = np.clip(z0, 0.0, 1.0)
    z1 = np.clip(z1, 0.0, 1.0)
    z2 = np.clip(1.0 - z0 - z1, 0.0, 1.0)
    total = z0 + z1 + z2
    z0, z1, z2 = z0 / total, z1 / total, z2 / total
    pi_hat = np.clip(z2 + 0.5 * z1, 0.0, 1.0)
    for z in (z0, z1, z2, pi_hat):
        np.fill_diagonal(z, np.nan)
    np.fill_diagonal(pi_hat, 1.0)
    return z0, z1, z2, pi_hat


def ibd_estimate(ds_pruned: Dataset) -> np.ndarray:
    """Pairwise PI_HAT matrix (diagonal 1)."""
    return ibd_components(ds_pruned.dosages())[3]


def ibd_filter(
    pi_hat: np.ndarray,
    missingness: np.ndarray,
    sample_ids: list[str],
    threshold: float = 0.185,
) -> np.ndarray:
    """Greedily drop one member of every pair with PI_HAT above ``threshold``.

    The member with more missing calls goes (ties: larger individual id).
    Pairs are visited in index order; pairs already broken are skipped.
    """
    pi_hat = np.asarray(pi_hat)
    if not np.allclose(pi_hat, pi_hat.T, equal_nan=True):
        raise ValueError("PI_HAT matrix must be symmetric")
    n = pi_hat.shape[0]
    iu, ku = np.triu_indices(n, k=1)
    related = pi_hat[iu, ku] > threshold
    removed: set[int] = set()
    for i, k in zip(iu[related], ku[related]):
        if i in removed or k in removed:
            continue
        key_i = (missingness[i], sample_ids[i])
        key_k = (missingness[k], sample_ids[k])
        removed.add(int(i) if key_i > key_k else int(k))
    return np.array(sorted(removed), dtype=np.int64)


@dataclass
class PcaResult:
    scores: np.ndarray  # (N, k) unit-norm sample eigenvectors
    eigenvalues: np.ndarray
    loadings: np.ndarray  # (U_used, k)


def _standardize(g: np.ndarray) -> np.ndarray:
    p = minor_allele_frequencies(g)
    sd = np.sqrt(2 * p * (1 - p))
    keep = np.isfinite(sd) & (sd > 0)
    g, p, sd = g[:, keep], p[keep], sd[keep]
    z = (g - 2 * p) / sd
    z[g == MISSING] = 0.0  # column mean after centering
    return z


def pca_ancestry(
    ds_pruned: Dataset,
    k: int = 2,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> PcaResult:
    """Top-``k`` principal components of the standardized genotype matrix.

    Eigenvectors of the sample covariance come from power iteration with
    re-orthogonalisation against the components already found.  Each
    component is signed so its largest-magnitude variant loading is positive.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    z = _standardize(ds_pruned.dosages())
    n = z.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} samples")
    if z.shape[1] == 0:
        raise DegenerateMatrix("no polymorphic variants")
    cov = z @ z.T / z.shape[1]
    if not np.any(np.abs(cov) > 0) or np.allclose(cov, cov[0, 0]):
        raise DegenerateMatrix("genotype covariance has no spread")

    rng = np.random.default_rng(0)
    vecs, vals = [], []
    for _ in range(k):
        v = rng.standard_normal(n)
        for _ in range(max_iter):
            for u in vecs:
                v -= (u @ v) * u
            norm = np.linalg.norm(v)
            if norm == 0:
                raise DegenerateMatrix("covariance rank is below k")
            v /= norm
            w = cov @ v
            for u in vecs:
                w -= (u @ w) * u
            wn = np.linalg.norm(w)
            if wn == 0:
                raise DegenerateMatrix("covariance rank is below k")
            step = np.linalg.norm(w / wn - v)
            v = w / wn
            if step < tol:
                break
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        vecs.append(v)
        vals.append(float(v @ cov @ v))

    order = np.argsort(vals, kind="stable")[::-1]
    scores = np.column_stack([vecs[i] for i in order])
    eigenvalues = np.array([vals[i] for i in order])
    loadings = z.T @ scores
    for c in range(scores.shape[1]):
        if loadings[np.argmax(np.abs(loadings[:, c])), c] < 0:
            scores[:, c] *= -1
            loadings[:, c] *= -1
    return PcaResult(scores, eigenvalues, loadings)


def pca_outlier_filter(scores: np.ndarray, pc1_min: float | None = -0.05, pc2_min: float | None = 0.0) -> np.ndarray:
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("need at least two principal components")
    out = np.zeros(scores.shape[0], dtype=bool)
    if pc1_min is not None:
        out |= scores[:, 0] < pc1_min
    if pc2_min is not None:
        out |= scores[:, 1] < pc2_min
    return np.flatnonzero(out)


def run_individual_qc(ds: Dataset, thresholds: QcThresholds | None = None) -> tuple[Dataset, QcReport]:
    """Sex check, missingness, heterozygosity, relatedness, ancestry; union removed once."""
    thr = thresholds or QcThresholds()
    ids = ds.sample_ids()
    reasons: dict[int, str] = {}

    def flag(indices, reason):
        for i in indices:
            reasons.setdefault(int(i), reason)

    if _x_linked(ds).any():
        flag(sex_check(ds, thr.sex_homozygosity_low, thr.sex_homozygosity_high), SEX)
    else:
        logger.info("no X-chromosome variants; sex check skipped")
    miss = sample_missingness(ds)
    flag(np.flatnonzero(miss >= thr.sample_missing_max), MISSINGNESS)
    flag(heterozygosity_outliers(ds, thr.het_sd_window), HETEROZYGOSITY)

    pruned = ds.subset(variants=thin_variants(ds, thr.ibd_max_variants))
    flag(ibd_filter(ibd_estimate(pruned), miss, ids, thr.ibd_max), IBD)
    if thr.pc1_min is not None or thr.pc2_min is not None:
        pcs = pca_ancestry(pruned, k=2)
        flag(pca_outlier_filter(pcs.scores, thr.pc1_min, thr.pc2_min), PCA)

    removed = sorted(reasons)
    keep = np.setdiff1d(np.arange(ds.n_samples), removed)
    out = ds.subset(samples=keep)
    report = QcReport(
        removed_samples=[(ids[i], reasons[i]) for i in removed],
        samples_before=ds.n_samples,
        samples_after=out.n_samples,
        variants_before=ds.n_variants,
        variants_after=ds.n_variants,
    )
    return out, report


# -- marker QC --------------------------------------------------------------

def hwe_chi2(n_hom_major, n_het, n_hom_minor) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised 1-df Hardy-Weinberg chi-square and p-value."""
    obs = np.stack(np.broadcast_arrays(
        np.asarray(n_hom_major, dtype=np.float64),
        np.asarray(n_het, dtype=np.float64),
        np.asarray(n_hom_minor, dtype=np.float64),
    ))
    n = obs.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = (2 * obs[0] + obs[1]) / (2 * n)
        q = 1.0 - p
        exp = np.stack([n * p * p, 2 * n * p * q, n * q * q])
        terms = np.where(exp > 0, (obs - exp) ** 2 / exp, 0.0)
    chi2 = terms.sum(axis=0)
    return chi2, chdtrc(1, chi2)


def hwe_test(n_hom_major: int, n_het: int, n_hom_minor: int) -> tuple[float, float]:
    if n_hom_major < 0 or n_het < 0 or n_hom_minor < 0:
        raise ValueError("genotype counts must be non-negative")
    if n_hom_major + n_het + n_hom_minor < 1:
        raise EmptyCounts("HWE test needs at least one genotype")
    chi2, p = hwe_chi2(n_hom_major, n_het, n_hom_minor)
    return float(chi2), float(p)


def _chi2_2x2(a, b, c, d) -> np.ndarray:
    """Pearson chi-square p-values for tables [[a, b], [c, d]]; zero margins give p = 1."""
    a, b, c, d = (np.asarray(x, dtype=np.float64) for x in (a, b, c, d))
    n = a + b + c + d
    margins = (a + b) * (c + d) * (a + c) * (b + d)
    with np.errstate(invalid="ignore", divide="ignore"):
        chi2 = np.where(margins > 0, n * (a * d - b * c) ** 2 / margins, 0.0)
    return chdtrc(1, chi2)


def differential_missingness(ds: Dataset) -> np.ndarray:
    """Per-variant p-value for different missing rates in cases vs controls."""
    y = ds.phenotypes()
    case, ctrl = y == 1, y == 0
    if not case.any() or not ctrl.any():
        raise SingleClass("differential missingness needs cases and controls")
    miss = ds.dosages() == MISSING
    m_case = miss[case].sum(axis=0)
    m_ctrl = miss[ctrl].sum(axis=0)
    return _chi2_2x2(m_case, m_ctrl, case.sum() - m_case, ctrl.sum() - m_ctrl)


def control_hwe_pvalues(ds: Dataset) -> np.ndarray:
    """HWE p-values from controls; X-linked variants use female controls only."""
    g = ds.dosages()
    ctrl = ds.phenotypes() == 0
    female_ctrl = ctrl & (ds.sexes() == Sex.FEMALE)
    xmask = _x_linked(ds)
    p = np.ones(ds.n_variants)
    for rows, cols in ((ctrl, ~xmask), (female_ctrl, xmask)):
        if cols.any() and rows.any():
            sub = g[np.ix_(rows, cols)]
            _, p[cols] = hwe_chi2((sub == 0).sum(axis=0), (sub == 1).sum(axis=0), (sub == 2).sum(axis=0))
    return p


def variant_filters(ds: Dataset, thresholds: QcThresholds | None = None) -> QcReport:
    """Flag variants by differential missingness, MAF, call rate then HWE (first reason wins)."""
    thr = thresholds or QcThresholds()
    g = ds.dosages()
    freq = minor_allele_frequencies(g)
    maf = np.minimum(freq, 1 - freq)
    call_rate = (g != MISSING).mean(axis=0) if ds.n_samples else np.zeros(ds.n_variants)
    checks = (
        (DIFF_MISSINGNESS, differential_missingness(ds) < thr.diff_missing_p),
        (MAF, ~(np.nan_to_num(maf, nan=0.0) >= thr.maf_min)),
        (CALL_RATE, call_rate < thr.variant_call_rate_min),
        (HWE, control_hwe_pvalues(ds) < thr.hwe_p_min),
    )
    removed = []
    gone = np.zeros(ds.n_variants, dtype=bool)
    for reason, failed in checks:
        new = failed & ~gone
        removed.extend((ds.variants[j].id, reason) for j in np.flatnonzero(new))
        gone |= new
    order = {v.id: j for j, v in enumerate(ds.variants)}
    removed.sort(key=lambda r: order[r[0]])
    return QcReport(
        removed_variants=removed,
        samples_before=ds.n_samples,
        samples_after=ds.n_samples,
        variants_before=ds.n_variants,
        variants_after=ds.n_variants - len(removed),
    )


def run_variant_qc(ds: Dataset, thresholds: QcThresholds | None = None) -> tuple[Dataset, QcReport]:
    report = variant_filters(ds, thresholds)
    dropped = {vid for vid, _ in report.removed_variants}
    keep = [j for j, v in enumerate(ds.variants) if v.id not in dropped]
    return ds.subset(variants=keep), report


def run_qc(ds: Dataset, thresholds: QcThresholds | None = None) -> tuple[Dataset, QcReport]:
    """Individual QC followed by marker QC on the surviving samples."""
    ds1, r1 = run_individual_qc(ds, thresholds)
    ds2, r2 = run_variant_qc(ds1, thresholds)
    return ds2, r1.merge(r2)
