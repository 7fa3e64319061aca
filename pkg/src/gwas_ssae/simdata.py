"""Synthetic case-control genotypes with planted marginal and epistatic effects."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .genotype_io import (
    MISSING,
    Dataset,
    Phenotype,
    SampleRecord,
    Sex,
    VariantRecord,
    orient_minor_allele,
)

XOR = "xor"
MULTIPLICATIVE = "multiplicative"
THRESHOLD = "threshold"
EPISTASIS_MODELS = (XOR, MULTIPLICATIVE, THRESHOLD)

_PHENO_STREAM = 1 << 32
_SEX_STREAM = (1 << 32) + 1
_LAYOUT_STREAM = (1 << 32) + 2
_DEFECT_STREAM = (1 << 32) + 3


class SpecInvalid(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class SimSpec:
    n_samples: int = 2000
    n_variants: int = 5000
    maf_range: tuple[float, float] = (0.05, 0.5)
    n_marginal: int = 10
    marginal_odds_ratio: float = 1.5
    n_epistatic_pairs: int = 10
    epistasis_model: str = XOR
    epistatic_odds_ratio: float = 3.0
    base_prevalence: float = 0.5
    missing_rate: float = 0.0
    seed: int = 0
    n_x_variants: int = 0

    def validate(self) -> None:
        lo, hi = self.maf_range
        if self.n_samples < 1 or self.n_variants < 0 or self.n_x_variants < 0:
            raise SpecInvalid("sample and variant counts must be non-negative (samples >= 1)")
        if not 0.0 < lo <= hi <= 0.5:
            raise SpecInvalid(f"maf_range {self.maf_range} must satisfy 0 < low <= high <= 0.5")
        if self.n_marginal < 0 or self.n_epistatic_pairs < 0:
            raise SpecInvalid("effect counts must be non-negative")
        if self.n_marginal + 2 * self.n_epistatic_pairs > self.n_variants:
            raise SpecInvalid("more causal variants than variants")
        if self.marginal_odds_ratio <= 0 or self.epistatic_odds_ratio <= 0:
            raise SpecInvalid("odds ratios must be positive")
        if self.epistasis_model not in EPISTASIS_MODELS:
            raise SpecInvalid(f"unknown epistasis model {self.epistasis_model!r}")
        if not 0.0 < self.base_prevalence < 1.0:
            raise SpecInvalid("base prevalence must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise SpecInvalid("missing rate must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        d = dict(d)
        if "maf_range" in d:
            d["maf_range"] = tuple(d["maf_range"])
        return cls(**d)


def _column_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j,)))


def pair_term(model: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Interaction covariate multiplied by log(OR) in the phenotype logit."""
    if model == XOR:
        return ((a >= 1) != (b >= 1)).astype(np.float64)
    if model == MULTIPLICATIVE:
        return a.astype(np.float64) * b
    if model == THRESHOLD:
        return ((a >= 1) & (b >= 1)).astype(np.float64)
    raise SpecInvalid(f"unknown epistasis model {model!r}")


def expected_effect_logit(spec: SimSpec) -> float:
    """Mean of the genetic part of the logit, averaging over the MAF draw."""
    m = np.linspace(*spec.maf_range, 2001)
    carrier = 1.0 - (1.0 - m) ** 2
    dosage = 2.0 * m.mean()
    c1 = carrier.mean()
    if spec.epistasis_model == XOR:
        pair = 2.0 * c1 * (1.0 - c1)
    elif spec.epistasis_model == MULTIPLICATIVE:
        pair = dosage**2
    else:
        pair = c1**2
    return (spec.n_marginal * math.log(spec.marginal_odds_ratio) * dosage
            + spec.n_epistatic_pairs * math.log(spec.epistatic_odds_ratio) * pair)


def balanced_prevalence(spec: SimSpec) -> float:
    """Base prevalence that centres the expected logit at zero (about half cases)."""
    return 1.0 / (1.0 + math.exp(expected_effect_logit(spec)))


def generate(spec: SimSpec) -> tuple[Dataset, dict]:
    """Simulate genotypes under HWE and a liability-logit phenotype.

    Returns the minor-allele-oriented dataset and a ground-truth manifest
    mapping causal variant ids to their role, model and effect size.
    """
    spec.validate()
    n, u, ux = spec.n_samples, spec.n_variants, spec.n_x_variants
    sex_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_SEX_STREAM,)))
    sexes = np.where(sex_rng.random(n) < 0.5, Sex.MALE, Sex.FEMALE)

    genos = np.empty((n, u + ux), dtype=np.int8)
    mafs = np.empty(u + ux)
    missing = np.zeros((n, u + ux), dtype=bool)
    male = sexes == Sex.MALE
    for j in range(u + ux):
        rng = _column_rng(spec.seed, j)
        maf = rng.uniform(*spec.maf_range)
        col = rng.binomial(2, maf, size=n)
        if j >= u:  # X-linked: males carry one copy, called homozygous
            col = np.where(male, 2 * rng.binomial(1, maf, size=n), col)
        mafs[j] = maf
        genos[:, j] = col
        if spec.missing_rate > 0:
            missing[:, j] = rng.random(n) < spec.missing_rate

    layout = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_LAYOUT_STREAM,)))
    causal = layout.choice(u, size=spec.n_marginal + 2 * spec.n_epistatic_pairs, replace=False)
    marginal = causal[: spec.n_marginal]
    pairs = causal[spec.n_marginal :].reshape(-1, 2)

    logit = np.full(n, math.log(spec.base_prevalence / (1 - spec.base_prevalence)))
    log_or_m = math.log(spec.marginal_odds_ratio)
    log_or_e = math.log(spec.epistatic_odds_ratio)
    for j in marginal:
        logit += log_or_m * genos[:, j]
    for a, b in pairs:
        logit += log_or_e * pair_term(spec.epistasis_model, genos[:, a], genos[:, b])
    pheno_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_PHENO_STREAM,)))
    y = (pheno_rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int8)

    dosages = np.where(missing, MISSING, genos).astype(np.int8)
    samples = [
        SampleRecord(f"F{i:05d}", f"S{i:05d}", Sex(int(sexes[i])), Phenotype(int(y[i])))
        for i in range(n)
    ]
    variants = []
    for j in range(u + ux):
        if j < u:
            chrom = str(1 + j * 22 // max(u, 1))
            pos = 1000 * (j + 1)
        else:
            chrom, pos = "X", 1000 * (j - u + 1)
        variants.append(VariantRecord(f"snp{j:06d}", chrom, pos, "A", "G", 0.0))
    ds = orient_minor_allele(Dataset.from_dosages(samples, variants, dosages))

    truth: dict[str, dict] = {}
    for j in marginal:
        truth[variants[j].id] = {"role": "marginal", "model": "additive",
                                 "odds_ratio": spec.marginal_odds_ratio, "maf": float(mafs[j])}
    for k, (a, b) in enumerate(pairs):
        for me, other in ((a, b), (b, a)):
            truth[variants[me].id] = {"role": "epistatic", "model": spec.epistasis_model,
                                      "odds_ratio": spec.epistatic_odds_ratio, "pair": k,
                                      "partner": variants[other].id, "maf": float(mafs[me])}
    manifest = {"spec": asdict(spec), "effect_allele": "G", "causal": truth,
                "drawn_maf": {variants[j].id: float(mafs[j]) for j in range(u + ux)}}
    return ds, manifest


def write_manifest(manifest: dict, path: Path | str) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def split(labels, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified, seeded train/valid/test index split.

    Each class is divided by largest remainder, then leftover units are
    assigned so the split totals match ``round(n * fraction)`` wherever the
    per-class quotas allow.
    """
    if isinstance(labels, Dataset):
        labels = labels.phenotypes()
    y = np.asarray(labels).ravel()
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or (fr < 0).any() or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be non-negative and sum to 1")
    n = y.size
    if n < len(fr):
        raise TooFewSamples(f"{n} samples cannot fill {len(fr)} splits")
    rng = np.random.default_rng(seed)

    def largest_remainder(total: int) -> np.ndarray:
        raw = total * fr
        base = np.floor(raw).astype(int)
        short = total - base.sum()
        base[np.argsort(-(raw - base), kind="stable")[:short]] += 1
        return base

    targets = largest_remainder(n)
    classes = np.unique(y)
    members = {c: rng.permutation(np.flatnonzero(y == c)) for c in classes}
    raw = np.array([len(members[c]) * fr for c in classes])
    alloc = np.floor(raw).astype(int)
    frac = raw - alloc
    need_class = np.array([len(members[c]) for c in classes]) - alloc.sum(axis=1)
    need_split = targets - alloc.sum(axis=0)
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        ci, si = divmod(int(flat), len(fr))
        if need_class[ci] > 0 and need_split[si] > 0:
            alloc[ci, si] += 1
            need_class[ci] -= 1
            need_split[si] -= 1
    for ci in range(len(classes)):  # quotas that could not meet the totals exactly
        while need_class[ci] > 0:
            si = int(np.argmax(frac[ci]))
            alloc[ci, si] += 1
            frac[ci, si] = -1.0
            need_class[ci] -= 1

    parts: list[list[np.ndarray]] = [[] for _ in fr]
    for ci, c in enumerate(classes):
        edges = np.concatenate([[0], np.cumsum(alloc[ci])])
        for si in range(len(fr)):
            parts[si].append(members[c][edges[si] : edges[si + 1]])
    return tuple(np.sort(np.concatenate(p)).astype(np.int64) for p in parts)  # type: ignore[return-value]


def plant_qc_defects(
    ds: Dataset,
    n_duplicates: int = 2,
    n_high_missing: int = 1,
    n_low_maf: int = 5,
    n_hwe: int = 5,
    high_missing_rate: float = 0.05,
    seed: int = 0,
) -> tuple[Dataset, dict]:
    """Append duplicate samples, inflate missingness, and append bad variants.

    Duplicates copy a source sample's calls with a few extra missing calls,
    so the copy (not the source) is the member a relatedness filter drops.
    Low-MAF variants carry 1-3 heterozygotes; HWE variants are 80% het.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_DEFECT_STREAM,)))
    g = ds.dosages()
    n, u = g.shape
    picks = rng.choice(n, size=n_duplicates + n_high_missing, replace=False)
    sources, high = picks[:n_duplicates], picks[n_duplicates:]

    samples = list(ds.samples)
    rows = [g]
    dup_ids = []
    for k, s in enumerate(sources):
        copy = g[s].copy()
        extra = rng.random(u) < 0.004
        copy[extra] = MISSING
        rows.append(copy[None, :])
        src = ds.samples[s]
        dup = SampleRecord(src.family_id, f"{src.individual_id}_dup{k}", src.reported_sex, src.phenotype)
        samples.append(dup)
        dup_ids.append(dup.individual_id)
    g = np.vstack(rows)
    for s in high:
        g[s, rng.random(u) < high_missing_rate] = MISSING

    n_all = g.shape[0]
    new_cols, variants = [], list(ds.variants)
    low_ids, hwe_ids = [], []
    for k in range(n_low_maf):
        col = np.zeros(n_all, dtype=np.int8)
        col[rng.choice(n_all, size=int(rng.integers(1, 4)), replace=False)] = 1
        new_cols.append(col)
        variants.append(VariantRecord(f"lowmaf{k}", "22", 10_000_000 + k, "A", "G"))
        low_ids.append(variants[-1].id)
    for k in range(n_hwe):
        col = rng.choice(np.array([0, 1, 2], dtype=np.int8), size=n_all, p=[0.1, 0.8, 0.1])
        new_cols.append(col)
        variants.append(VariantRecord(f"hwe{k}", "22", 20_000_000 + k, "A", "G"))
        hwe_ids.append(variants[-1].id)
    if new_cols:
        g = np.hstack([g, np.column_stack(new_cols)])
    planted = Dataset.from_dosages(samples, variants, g)
    manifest = {
        "duplicates": dup_ids,
        "high_missing": [ds.samples[s].individual_id for s in high],
        "low_maf": low_ids,
        "hwe": hwe_ids,
    }
    return orient_minor_allele(planted), manifest


def inject_differential_missingness(ds: Dataset, variant_ids, case_missing_rate: float = 0.1, seed: int = 0) -> Dataset:
    """Blank calls in cases only for the named variants."""
    rng = np.random.default_rng(seed)
    g = ds.dosages()
    cases = np.flatnonzero(ds.phenotypes() == 1)
    col = {v.id: j for j, v in enumerate(ds.variants)}
    for vid in variant_ids:
        j = col[vid]
        hit = cases[rng.random(cases.size) < case_missing_rate]
        g[hit, j] = MISSING
    return Dataset.from_dosages(ds.samples, ds.variants, g)
