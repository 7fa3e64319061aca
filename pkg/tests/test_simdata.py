import json

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2, kstest

from gwas_ssae import assoc, qc
from gwas_ssae import simdata as sd
from gwas_ssae.genotype_io import MISSING, Sex


@pytest.fixture(scope="module")
def null_data():
    spec = sd.SimSpec(n_samples=2000, n_variants=5000, n_marginal=0, n_epistatic_pairs=0, seed=3)
    return sd.generate(spec)


class TestSpec:
    @pytest.mark.parametrize("bad", [
        dict(n_marginal=10, n_epistatic_pairs=50, n_variants=100),
        dict(maf_range=(0.0, 0.5)),
        dict(maf_range=(0.3, 0.6)),
        dict(base_prevalence=1.0),
        dict(marginal_odds_ratio=0.0),
        dict(epistasis_model="additive"),
        dict(missing_rate=1.0),
    ])
    def test_invalid(self, bad):
        with pytest.raises(sd.SpecInvalid):
            sd.generate(sd.SimSpec(**{"n_samples": 10, "n_variants": 100, **bad}))

    def test_from_dict_round_trip(self):
        spec = sd.SimSpec(maf_range=(0.1, 0.4), seed=9)
        from dataclasses import asdict
        assert sd.SimSpec.from_dict(json.loads(json.dumps(asdict(spec)))) == spec


class TestGenerate:
    def test_deterministic(self):
        spec = sd.SimSpec(n_samples=50, n_variants=200, seed=4, missing_rate=0.01)
        a, ma = sd.generate(spec)
        b, mb = sd.generate(spec)
        assert a == b and ma == mb

    def test_seed_changes_output(self):
        a, _ = sd.generate(sd.SimSpec(n_samples=50, n_variants=200, seed=1))
        b, _ = sd.generate(sd.SimSpec(n_samples=50, n_variants=200, seed=2))
        assert a != b

    def test_no_missing_by_default(self, null_data):
        ds, _ = null_data
        assert not (ds.dosages() == MISSING).any()

    def test_missing_rate(self):
        ds, _ = sd.generate(sd.SimSpec(n_samples=400, n_variants=500, missing_rate=0.05, seed=1))
        assert (ds.dosages() == MISSING).mean() == pytest.approx(0.05, abs=0.005)

    def test_manifest_lists_causal_variants(self):
        spec = sd.SimSpec(n_samples=100, n_variants=300, n_marginal=4, n_epistatic_pairs=3, seed=2)
        ds, man = sd.generate(spec)
        roles = [v["role"] for v in man["causal"].values()]
        assert roles.count("marginal") == 4 and roles.count("epistatic") == 6
        for vid, info in man["causal"].items():
            assert vid in ds.variant_ids()
            if info["role"] == "epistatic":
                assert man["causal"][info["partner"]]["partner"] == vid

    def test_empirical_maf_tracks_drawn_maf(self, null_data):
        ds, man = null_data
        g = ds.dosages()
        emp = g.mean(axis=0) / 2
        drawn = np.array([man["drawn_maf"][v] for v in ds.variant_ids()])
        # orientation may flip a column whose sample frequency crossed 0.5
        err = np.minimum(np.abs(emp - drawn), np.abs(emp - (1 - drawn)))
        # 0.03 is about 3.8 binomial SDs at n=2000, so one stray column in 5000 is expected
        assert np.sum(err >= 0.03) <= 1
        assert err.max() < 0.04

    def test_columns_in_hwe(self, null_data):
        ds, _ = null_data
        g = ds.dosages()
        _, p = qc.hwe_chi2((g == 0).sum(0), (g == 1).sum(0), (g == 2).sum(0))
        assert np.mean(p >= 1e-5) >= 0.99

    def test_x_chromosome_males_hemizygous(self):
        ds, _ = sd.generate(sd.SimSpec(n_samples=200, n_variants=50, n_x_variants=40, seed=0))
        x = ds.dosages()[:, np.array(ds.chromosomes()) == "X"]
        males = ds.sexes() == Sex.MALE
        assert not (x[males] == 1).any()
        assert (x[~males] == 1).any()

    def test_prevalence_centred(self):
        spec = sd.SimSpec(n_samples=4000, n_variants=100, seed=1)
        spec = sd.SimSpec(**{**spec.__dict__, "base_prevalence": sd.balanced_prevalence(spec)})
        ds, _ = sd.generate(spec)
        assert ds.phenotypes().mean() == pytest.approx(0.5, abs=0.05)

    def test_pair_terms(self):
        a = np.array([0, 0, 1, 2, 1])
        b = np.array([0, 1, 0, 2, 2])
        np.testing.assert_array_equal(sd.pair_term(sd.XOR, a, b), [0, 1, 1, 0, 0])
        np.testing.assert_array_equal(sd.pair_term(sd.MULTIPLICATIVE, a, b), [0, 0, 0, 4, 2])
        np.testing.assert_array_equal(sd.pair_term(sd.THRESHOLD, a, b), [0, 0, 0, 1, 1])


class TestSignal:
    def test_null_scan_is_uniform(self, null_data):
        ds, _ = null_data
        p = np.array([r.p for r in assoc.association_scan(ds) if r.flag == assoc.OK])
        assert kstest(p, "uniform").statistic < 0.05

    def test_xor_pairs_hide_from_marginal_scan(self):
        spec = sd.SimSpec(n_samples=2000, n_variants=40, n_marginal=0, n_epistatic_pairs=5,
                          epistatic_odds_ratio=4.0, maf_range=(0.25, 0.5), seed=6)
        spec = sd.SimSpec(**{**spec.__dict__, "base_prevalence": sd.balanced_prevalence(spec)})
        ds, man = sd.generate(spec)
        g, y = ds.dosages(), ds.phenotypes()
        col = {v: j for j, v in enumerate(ds.variant_ids())}
        marginal_p, joint_p = [], []
        for k in range(5):
            a, b = [col[v] for v, info in man["causal"].items() if info.get("pair") == k]
            for j in (a, b):
                marginal_p.append(assoc.fit_logistic_single(g[:, j], y).p)
            da, db = (g[:, a] >= 1).astype(float), (g[:, b] >= 1).astype(float)
            design = sm.add_constant(np.column_stack([da + db, da * db]))
            fit = sm.Logit(y, design).fit(disp=0)
            joint_p.append(chi2.sf(2 * (fit.llf - fit.llnull), 2))
        assert np.median(marginal_p) > 5e-8
        assert max(joint_p) < 5e-8


class TestSplit:
    def test_sizes(self):
        tr, va, te = sd.split(np.repeat([0, 1], 500), seed=0)
        assert (len(tr), len(va), len(te)) == (800, 100, 100)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=3, max_size=300), st.integers(0, 100))
    def test_partition_and_stratification(self, labels, seed):
        y = np.array(labels)
        parts = sd.split(y, seed=seed)
        allidx = np.concatenate(parts)
        assert np.array_equal(np.sort(allidx), np.arange(y.size))
        for part, f in zip(parts, (0.8, 0.1, 0.1)):
            for c in (0, 1):
                assert abs((y[part] == c).sum() - f * (y == c).sum()) <= 1

    def test_deterministic(self):
        y = np.random.default_rng(0).integers(0, 2, 100)
        a = sd.split(y, seed=5)
        b = sd.split(y, seed=5)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_too_few(self):
        with pytest.raises(sd.TooFewSamples):
            sd.split([0, 1])

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            sd.split([0, 1, 0, 1], fractions=(0.5, 0.5, 0.5))


class TestDefects:
    def test_planted_items(self):
        ds, _ = sd.generate(sd.SimSpec(n_samples=100, n_variants=500, maf_range=(0.2, 0.5), seed=1))
        planted, man = sd.plant_qc_defects(ds, seed=1)
        assert planted.n_samples == 102 and planted.n_variants == 510
        ids = planted.sample_ids()
        assert all(d in ids for d in man["duplicates"])
        miss = qc.sample_missingness(planted)
        hi = ids.index(man["high_missing"][0])
        assert miss[hi] >= 0.02
        g = planted.dosages()
        vids = planted.variant_ids()
        for v in man["low_maf"]:
            assert 1 <= g[:, vids.index(v)].sum() <= 3

    def test_injected_differential_missingness_only_in_cases(self):
        ds, _ = sd.generate(sd.SimSpec(n_samples=200, n_variants=40, seed=1))
        out = sd.inject_differential_missingness(ds, ["snp000003"], 0.5, seed=0)
        miss = out.dosages()[:, 3] == MISSING
        assert miss.any() and not miss[out.phenotypes() == 0].any()
