"""PLINK 1.9 binary genotype I/O and the packed in-memory genotype matrix.

Calls are held two bits per genotype in the same variant-major layout a
``.bed`` body uses, so a dataset costs ``U * ceil(N / 4)`` bytes.  Decoded
dosages count copies of ``allele2``; after :func:`orient_minor_allele`
``allele2`` is the minor allele and dosage 2 is the homozygous-minor call.

Missing calls decode to :data:`MISSING` (-1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MISSING = -1

BED_MAGIC = b"\x6c\x1b"
BED_MODE_VARIANT_MAJOR = 0x01

# 2-bit field -> dosage.  00 hom allele1, 01 missing, 10 het, 11 hom allele2.
_CODE_TO_DOSAGE = np.array([0, MISSING, 1, 2], dtype=np.int8)
# dosage + 1 -> 2-bit field (index 0 is MISSING).
_DOSAGE_TO_CODE = np.array([0b01, 0b00, 0b10, 0b11], dtype=np.uint8)
# Every possible byte decoded into its four calls, sample order = bit order.
_BYTE_TABLE = _CODE_TO_DOSAGE[(np.arange(256)[:, None] >> (2 * np.arange(4))) & 0b11]


class GenotypeIOError(ValueError):
    """Base class for malformed genotype inputs."""


class BadMagic(GenotypeIOError):
    pass


class ModeUnsupported(GenotypeIOError):
    pass


class TruncatedFile(GenotypeIOError):
    pass


class MetadataMismatch(GenotypeIOError):
    pass


class IoFailure(GenotypeIOError):
    pass


class Sex(enum.IntEnum):
    UNKNOWN = 0
    MALE = 1
    FEMALE = 2


class Phenotype(enum.IntEnum):
    MISSING = -1
    CONTROL = 0
    CASE = 1


@dataclass(frozen=True)
class VariantRecord:
    id: str
    chromosome: str
    position: int
    allele1: str
    allele2: str
    genetic_distance: float = 0.0


@dataclass(frozen=True)
class SampleRecord:
    family_id: str
    individual_id: str
    reported_sex: Sex = Sex.UNKNOWN
    phenotype: Phenotype = Phenotype.MISSING


def _bytes_per_variant(n_samples: int) -> int:
    return (n_samples + 3) // 4


def pack_dosages(dosages: np.ndarray) -> np.ndarray:
    """Pack an ``(N, U)`` dosage matrix into ``(U, ceil(N/4))`` bytes."""
    dosages = np.asarray(dosages)
    if dosages.ndim != 2:
        raise ValueError("dosage matrix must be 2-D (samples x variants)")
    n, u = dosages.shape
    valid = (dosages == MISSING) | ((dosages >= 0) & (dosages <= 2))
    if not valid.all():
        raise ValueError("dosages must be 0, 1, 2 or MISSING")
    nb = _bytes_per_variant(n)
    codes = np.zeros((u, nb * 4), dtype=np.uint8)
    codes[:, :n] = _DOSAGE_TO_CODE[dosages.T.astype(np.int64) + 1]
    codes = codes.reshape(u, nb, 4)
    packed = codes[..., 0] | (codes[..., 1] << 2) | (codes[..., 2] << 4) | (codes[..., 3] << 6)
    return packed.astype(np.uint8)


def unpack_dosages(packed: np.ndarray, n_samples: int) -> np.ndarray:
    """Inverse of :func:`pack_dosages`; pad bits are ignored."""
    u = packed.shape[0]
    if u == 0:
        return np.zeros((n_samples, 0), dtype=np.int8)
    calls = _BYTE_TABLE[packed].reshape(u, -1)[:, :n_samples]
    return np.ascontiguousarray(calls.T)


def _clear_pad_bits(packed: np.ndarray, n_samples: int) -> np.ndarray:
    rem = n_samples % 4
    if rem and packed.shape[0]:
        packed = packed.copy()
        packed[:, -1] &= np.uint8((1 << (2 * rem)) - 1)
    return packed


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable genotype dataset: sample and variant metadata plus packed calls."""

    samples: tuple[SampleRecord, ...]
    variants: tuple[VariantRecord, ...]
    packed: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "variants", tuple(self.variants))
        packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        expected = (len(self.variants), _bytes_per_variant(len(self.samples)))
        if packed.shape != expected:
            raise MetadataMismatch(
                f"packed calls have shape {packed.shape}, metadata implies {expected}"
            )
        packed.flags.writeable = False
        object.__setattr__(self, "packed", packed)

    @classmethod
    def from_dosages(
        cls,
        samples: Sequence[SampleRecord],
        variants: Sequence[VariantRecord],
        dosages: np.ndarray,
    ) -> "Dataset":
        dosages = np.asarray(dosages)
        if dosages.shape != (len(samples), len(variants)):
            raise MetadataMismatch(
                f"dosage matrix {dosages.shape} does not match "
                f"{len(samples)} samples x {len(variants)} variants"
            )
        return cls(tuple(samples), tuple(variants), pack_dosages(dosages))

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_variants(self) -> int:
        return len(self.variants)

    def dosages(self) -> np.ndarray:
        """Decoded ``(N, U)`` int8 matrix; missing calls are ``MISSING``."""
        return unpack_dosages(self.packed, self.n_samples)

    def variant_dosages(self, j: int) -> np.ndarray:
        return unpack_dosages(self.packed[j : j + 1], self.n_samples)[:, 0]

    def phenotypes(self) -> np.ndarray:
        """Per-sample 0 (control), 1 (case) or -1 (missing)."""
        return np.array([int(s.phenotype) for s in self.samples], dtype=np.int8)

    def sexes(self) -> np.ndarray:
        return np.array([int(s.reported_sex) for s in self.samples], dtype=np.int8)

    def chromosomes(self) -> np.ndarray:
        return np.array([v.chromosome for v in self.variants], dtype=object)

    def sample_ids(self) -> list[str]:
        return [s.individual_id for s in self.samples]

    def variant_ids(self) -> list[str]:
        return [v.id for v in self.variants]

    def subset(
        self,
        samples: Iterable[int] | np.ndarray | None = None,
        variants: Iterable[int] | np.ndarray | None = None,
    ) -> "Dataset":
        """Dataset restricted to the given sample / variant indices (order kept)."""
        s_idx = np.arange(self.n_samples) if samples is None else np.asarray(list(samples), dtype=np.int64)
        v_idx = np.arange(self.n_variants) if variants is None else np.asarray(list(variants), dtype=np.int64)
        if samples is None:
            packed = self.packed[v_idx]
        else:
            packed = pack_dosages(self.dosages()[np.ix_(s_idx, v_idx)])
        return Dataset(
            tuple(self.samples[i] for i in s_idx),
            tuple(self.variants[j] for j in v_idx),
            packed,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.samples == other.samples
            and self.variants == other.variants
            and np.array_equal(self.packed, other.packed)
        )

    __hash__ = None  # type: ignore[assignment]


def minor_allele_frequencies(dosages: np.ndarray) -> np.ndarray:
    """Frequency of the counted allele per column over non-missing calls (NaN if none)."""
    observed = dosages != MISSING
    n_alleles = 2.0 * observed.sum(axis=0)
    counts = np.where(observed, dosages, 0).sum(axis=0, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_alleles > 0, counts / np.maximum(n_alleles, 1), np.nan)


def orient_minor_allele(ds: Dataset) -> Dataset:
    """Recode columns whose counted allele has frequency above 0.5.

    Swapped columns exchange ``allele1``/``allele2`` and map dosage 0 <-> 2.
    Columns at exactly 0.5 or with no observed calls are left alone, so the
    operation is idempotent.
    """
    if ds.n_variants == 0 or ds.n_samples == 0:
        return ds
    dos = ds.dosages()
    freq = minor_allele_frequencies(dos)
    swap = np.nan_to_num(freq, nan=0.0) > 0.5
    if not swap.any():
        return ds
    cols = dos[:, swap]
    dos[:, swap] = np.where(cols == MISSING, MISSING, 2 - cols)
    variants = tuple(
        replace(v, allele1=v.allele2, allele2=v.allele1) if s else v
        for v, s in zip(ds.variants, swap)
    )
    return Dataset.from_dosages(ds.samples, variants, dos)


def _read_lines(path: Path) -> list[list[str]]:
    try:
        with open(path) as fh:
            return [line.split() for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _parse_sex(token: str) -> Sex:
    return {"1": Sex.MALE, "2": Sex.FEMALE}.get(token, Sex.UNKNOWN)


def _parse_phenotype(token: str) -> Phenotype:
    return {"1": Phenotype.CONTROL, "2": Phenotype.CASE}.get(token, Phenotype.MISSING)


def read_fam(path: Path | str) -> list[SampleRecord]:
    samples = []
    for lineno, cols in enumerate(_read_lines(Path(path)), 1):
        if len(cols) != 6:
            raise MetadataMismatch(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
        samples.append(SampleRecord(cols[0], cols[1], _parse_sex(cols[4]), _parse_phenotype(cols[5])))
    return samples


def read_bim(path: Path | str) -> list[VariantRecord]:
    variants = []
    for lineno, cols in enumerate(_read_lines(Path(path)), 1):
        if len(cols) != 6:
            raise MetadataMismatch(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
        chrom, vid, cm, pos, a1, a2 = cols
        variants.append(VariantRecord(vid, chrom, int(pos), a1, a2, float(cm)))
    return variants


def read_bed_dataset(
    bed_path: Path | str,
    bim_path: Path | str,
    fam_path: Path | str,
    orient: bool = True,
) -> Dataset:
    """Load a variant-major PLINK fileset.

    With ``orient=True`` (default) columns are re-expressed as minor-allele
    dosages via :func:`orient_minor_allele`.
    """
    samples = read_fam(fam_path)
    variants = read_bim(bim_path)
    try:
        raw = Path(bed_path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) < 3 or raw[:2] != BED_MAGIC:
        raise BadMagic(f"{bed_path}: not a PLINK .bed file (header {raw[:3]!r})")
    if raw[2] != BED_MODE_VARIANT_MAJOR:
        raise ModeUnsupported(f"{bed_path}: mode byte {raw[2]:#04x}; only variant-major (0x01) is supported")

    n, u = len(samples), len(variants)
    nb = _bytes_per_variant(n)
    body = np.frombuffer(raw, dtype=np.uint8, offset=3)
    if body.size < u * nb:
        raise TruncatedFile(f"{bed_path}: {body.size} body bytes, need {u * nb} for {u} variants x {n} samples")
    if body.size > u * nb:
        raise MetadataMismatch(
            f"{bed_path}: {body.size} body bytes but .bim/.fam imply {u * nb}"
        )
    packed = _clear_pad_bits(body.reshape(u, nb), n)
    ds = Dataset(tuple(samples), tuple(variants), packed)
    return orient_minor_allele(ds) if orient else ds


def _fmt_float(x: float) -> str:
    return f"{x:.17g}"


def write_bed_dataset(
    ds: Dataset,
    bed_path: Path | str,
    bim_path: Path | str,
    fam_path: Path | str,
) -> None:
    """Write ``ds`` as a variant-major PLINK fileset (pad bits zero)."""
    sex_code = {Sex.MALE: "1", Sex.FEMALE: "2", Sex.UNKNOWN: "0"}
    pheno_code = {Phenotype.CONTROL: "1", Phenotype.CASE: "2", Phenotype.MISSING: "-9"}
    try:
        with open(fam_path, "w") as fh:
            for s in ds.samples:
                fh.write(
                    f"{s.family_id}\t{s.individual_id}\t0\t0\t"
                    f"{sex_code[s.reported_sex]}\t{pheno_code[s.phenotype]}\n"
                )
        with open(bim_path, "w") as fh:
            for v in ds.variants:
                fh.write(
                    f"{v.chromosome}\t{v.id}\t{_fmt_float(v.genetic_distance)}\t"
                    f"{v.position}\t{v.allele1}\t{v.allele2}\n"
                )
        with open(bed_path, "wb") as fh:
            fh.write(BED_MAGIC + bytes([BED_MODE_VARIANT_MAJOR]))
            fh.write(_clear_pad_bits(ds.packed, ds.n_samples).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def fileset_paths(prefix: Path | str) -> tuple[Path, Path, Path]:
    """``prefix.bed``, ``prefix.bim``, ``prefix.fam``."""
    prefix = str(prefix)
    return Path(prefix + ".bed"), Path(prefix + ".bim"), Path(prefix + ".fam")
