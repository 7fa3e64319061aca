"""Plant known defects in a simulated cohort and watch quality control find them.

Run: python3 demos/qc_walkthrough.py
"""

from gwas_ssae import qc
from gwas_ssae import simdata as sd

# A single-population cohort with a block of X-chromosome markers so the
# sex check has something to work with.
spec = sd.SimSpec(n_samples=500, n_variants=19_000, n_x_variants=1000, maf_range=(0.2, 0.5),
                  n_marginal=0, n_epistatic_pairs=0, missing_rate=0.002, seed=0)
cohort, _ = sd.generate(spec)
print(f"simulated {cohort.n_samples} samples x {cohort.n_variants} variants")

# Two duplicated samples, one sample with 5% missing calls, five near-monomorphic
# variants and five variants with far too many heterozygotes.
planted, truth = sd.plant_qc_defects(cohort, seed=0)
for kind, ids in truth.items():
    print(f"  planted {kind:<13} {', '.join(ids)}")

# Fixed PC cut-offs only make sense for real multi-ancestry data.
thresholds = qc.QcThresholds(pc1_min=None, pc2_min=None)
clean, report = qc.run_qc(planted, thresholds)

print("\nremoved samples:")
for ident, reason in report.removed_samples:
    print(f"  {ident:<14} {reason}")
print("removed variants:")
for ident, reason in report.removed_variants:
    print(f"  {ident:<14} {reason}")
print(f"\nkept {clean.n_samples} samples and {clean.n_variants} variants")
