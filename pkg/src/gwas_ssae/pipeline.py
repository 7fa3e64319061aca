"""End-to-end experiment: simulate or load, QC, scan, baseline classifiers, autoencoder stack.

Every stage reads and writes plain files under ``output_dir`` so stages can
be rerun independently::

    data/genotypes.{bed,bim,fam}, data/truth.json
    qc/qc_report.json, qc/clean.{bed,bim,fam}, qc/split.json
    scan/scan.csv, scan/counts.json
    baseline/<threshold>/report.json, roc_valid.csv, roc_test.csv, history.csv, model.bin
    stack/stack.bin, stack/leakage.json, stack/depth_<k>/...
    summary.json, summary.txt
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import assoc, metrics, qc, simdata
from . import autoencoder as ae
from . import neuralnet as nn
from .genotype_io import Dataset, fileset_paths, read_bed_dataset, write_bed_dataset

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (5e-3, 5e-4, 5e-5, 5e-6, 5e-7, 5e-8)
DEFAULT_STACK_SIZES = (2000, 1000, 500, 200, 100, 50)
FIDELITY_FINETUNE_RATES = (1e-3, 1e-3, 1e-4, 1e-5, 1e-5, 1e-6)
METRIC_COLUMNS = ("threshold", "sensitivity", "specificity", "gini", "logloss", "auc", "mse")


class ConfigInvalid(ValueError):
    pass


class NoArtifacts(FileNotFoundError):
    pass


class PipelineBusy(RuntimeError):
    pass


class MissingStage(FileNotFoundError):
    pass


def classifier_train_config() -> nn.TrainConfig:
    # Tuned on held-out simulation seeds; see README for the schedule.
    return nn.TrainConfig(learning_rate=0.1, weight_decay=1e-2, hidden_dropout=0.0,
                          early_stop_patience=30, epochs_max=150)


def autoencoder_train_config() -> nn.TrainConfig:
    return ae.SparseAeConfig(1).base


@dataclass
class PipelineConfig:
    output_dir: str = "gwas_run"
    seed: int = 0
    sim: simdata.SimSpec | None = None
    input_prefix: str | None = None
    qc: qc.QcThresholds | None = field(default_factory=qc.QcThresholds)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    stack_sizes: tuple[int, ...] = DEFAULT_STACK_SIZES
    baseline_head: tuple[int, ...] = (10, 10, 10, 10)
    stack_head: tuple[int, ...] = (10, 10, 10, 10)
    baseline_train: nn.TrainConfig = field(default_factory=classifier_train_config)
    finetune_train: nn.TrainConfig = field(default_factory=classifier_train_config)
    autoencoder_train: nn.TrainConfig = field(default_factory=autoencoder_train_config)
    sparsity_target: float = 0.05
    sparsity_weight: float = 3.0
    standardize_stack: bool = True
    finetune_rates: tuple[float, ...] | None = None
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    per_split_f1: bool = False
    threads: int = 1

    def validate(self) -> None:
        if (self.sim is None) == (self.input_prefix is None):
            raise ConfigInvalid("exactly one of sim or input_prefix is required")
        t = list(self.thresholds)
        if not t or any(not 0 < x <= 1 for x in t) or any(a <= b for a, b in zip(t, t[1:])):
            raise ConfigInvalid("thresholds must be strictly descending p-values in (0, 1]")
        s = list(self.stack_sizes)
        if not s or any(x < 1 for x in s) or any(a <= b for a, b in zip(s, s[1:])):
            raise ConfigInvalid("stack sizes must be strictly decreasing positive integers")
        if self.finetune_rates is not None and len(self.finetune_rates) != len(s):
            raise ConfigInvalid("one fine-tune learning rate per stack depth")
        if any(h < 1 for h in self.baseline_head + self.stack_head):
            raise ConfigInvalid("head layer sizes must be positive")
        if self.threads < 1:
            raise ConfigInvalid("threads must be >= 1")
        if self.sim is not None:
            try:
                self.sim.validate()
            except simdata.SpecInvalid as exc:
                raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def fidelity(cls, **kwargs) -> "PipelineConfig":
        """Reference schedule: small learning rates, dropout 0.5, patience 5, per-split F1."""
        ref = nn.TrainConfig()
        return cls(baseline_train=ref, finetune_train=ref, finetune_rates=FIDELITY_FINETUNE_RATES,
                   per_split_f1=True, standardize_stack=False, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["qc"] = None if self.qc is None else asdict(self.qc)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        try:
            if d.get("sim") is not None:
                d["sim"] = simdata.SimSpec.from_dict(d["sim"])
            if d.get("qc") is not None:
                d["qc"] = qc.QcThresholds(**d["qc"])
            for key in ("baseline_train", "finetune_train", "autoencoder_train"):
                if key in d:
                    base = getattr(cls(), key) if d[key] is not None else None
                    d[key] = replace(base, **d[key])
            for key in ("thresholds", "stack_sizes", "baseline_head", "stack_head", "split_fractions"):
                if key in d:
                    d[key] = tuple(d[key])
            if d.get("finetune_rates") is not None:
                d["finetune_rates"] = tuple(d["finetune_rates"])
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | str) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        return cls.from_dict(d)


def synthetic_config(output_dir: str, seed: int = 0, **sim_overrides) -> PipelineConfig:
    """Default experiment on the planted-epistasis simulation family.

    The base prevalence is centred so about half the samples are cases.
    Ancestry PCA is disabled: the simulation is a single population, and
    fixed PC cut-offs would discard roughly half of it.
    """
    spec = simdata.SimSpec(seed=seed, **sim_overrides)
    if "base_prevalence" not in sim_overrides:
        spec = replace(spec, base_prevalence=simdata.balanced_prevalence(spec))
    return PipelineConfig(output_dir=output_dir, seed=seed, sim=spec,
                          qc=qc.QcThresholds(pc1_min=None, pc2_min=None))


def clip_stack_sizes(sizes, width: int) -> list[int]:
    """Cap sizes below the input width while keeping them strictly decreasing."""
    out = [min(s, width - 1 - k) for k, s in enumerate(sizes)]
    if out[-1] < 1:
        raise ConfigInvalid(f"input width {width} too narrow for a {len(sizes)}-layer stack")
    return out


def threshold_label(t: float) -> str:
    return f"{t:.0e}"


# -- file helpers --------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise MissingStage(f"{path} not found; run the stage that produces it first")
    return json.loads(path.read_text())


class RunLock:
    """Exclusive ownership of an output directory for the duration of a stage."""

    def __init__(self, directory: Path | str):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineBusy(f"{self.path} exists; another run owns this directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# -- stages --------------------------------------------------------------------

def simulate_stage(cfg: PipelineConfig) -> Dataset:
    out = Path(cfg.output_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = simdata.generate(cfg.sim)
    write_bed_dataset(ds, *fileset_paths(out / "genotypes"))
    simdata.write_manifest(truth, out / "truth.json")
    return ds


def load_input(cfg: PipelineConfig) -> Dataset:
    if cfg.input_prefix is not None:
        return read_bed_dataset(*fileset_paths(cfg.input_prefix))
    prefix = Path(cfg.output_dir) / "data" / "genotypes"
    if not fileset_paths(prefix)[0].exists():
        return simulate_stage(cfg)
    return read_bed_dataset(*fileset_paths(prefix))


def qc_stage(cfg: PipelineConfig, ds: Dataset | None = None) -> tuple[Dataset, dict]:
    """QC, then a stratified split of the surviving samples."""
    ds = load_input(cfg) if ds is None else ds
    out = Path(cfg.output_dir) / "qc"
    if cfg.qc is not None:
        clean, report = qc.run_qc(ds, cfg.qc)
    else:
        clean = ds
        report = qc.QcReport([], [], ds.n_samples, ds.n_samples, ds.n_variants, ds.n_variants)
    report.write(out)
    write_bed_dataset(clean, *fileset_paths(out / "clean"))
    tr, va, te = simdata.split(clean.phenotypes(), cfg.split_fractions, cfg.seed)
    ids = clean.sample_ids()
    split = {"seed": cfg.seed, "fractions": list(cfg.split_fractions),
             "train": [ids[i] for i in tr], "valid": [ids[i] for i in va], "test": [ids[i] for i in te]}
    _write_json(out / "split.json", split)
    return clean, split


def _load_clean(cfg: PipelineConfig) -> tuple[Dataset, dict]:
    out = Path(cfg.output_dir) / "qc"
    split = _read_json(out / "split.json")
    return read_bed_dataset(*fileset_paths(out / "clean"), orient=False), split


def _split_indices(ds: Dataset, split: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = {sid: i for i, sid in enumerate(ds.sample_ids())}
    return tuple(np.array([pos[s] for s in split[k]], dtype=np.int64) for k in ("train", "valid", "test"))


def scan_stage(cfg: PipelineConfig, ds: Dataset | None = None, split: dict | None = None) -> list[assoc.AssocResult]:
    """Association scan on the training split only."""
    if ds is None or split is None:
        ds, split = _load_clean(cfg)
    tr, _, _ = _split_indices(ds, split)
    results = assoc.association_scan(ds.subset(samples=tr))
    out = Path(cfg.output_dir) / "scan"
    out.mkdir(parents=True, exist_ok=True)
    assoc.write_scan_csv(results, ds, out / "scan.csv")
    counts = {threshold_label(t): len(assoc.passing_variants(results, t)) for t in cfg.thresholds}
    flags = {f: sum(r.flag == f for r in results) for f in (assoc.OK, assoc.SEPARATION, assoc.MONOMORPHIC)}
    _write_json(out / "counts.json", {"n_train": int(tr.size), "passing": counts, "flags": flags})
    return results


def _evaluate_splits(params, x, y, idx_valid, idx_test, per_split_f1: bool) -> dict:
    p_va = nn.predict(params, x[idx_valid])
    p_te = nn.predict(params, x[idx_test])
    valid = metrics.evaluate(p_va, y[idx_valid])
    test = metrics.evaluate(p_te, y[idx_test], None if per_split_f1 else valid.threshold)
    return {"valid": valid, "test": test}


def _write_eval(directory: Path, reports: dict, history: list[dict], params, train_cfg, extra: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    body = dict(extra)
    for split, rep in reports.items():
        body[split] = rep.metrics()
        metrics.write_roc_csv(rep.roc_points, directory / f"roc_{split}.csv")
    _write_json(directory / "report.json", body)
    nn.write_history_csv(history, directory / "history.csv")
    nn.save_model(directory / "model.bin", params, train_cfg, train_cfg.seed, extra)


def run_baseline(cfg: PipelineConfig, ds: Dataset | None = None, split: dict | None = None,
                 results: list[assoc.AssocResult] | None = None, thresholds=None) -> dict[str, dict]:
    """One classifier per p-value threshold; empty subsets become skipped rows."""
    if ds is None or split is None:
        ds, split = _load_clean(cfg)
    if results is None:
        results = assoc.read_scan_csv(Path(cfg.output_dir) / "scan" / "scan.csv")
    tr, va, te = _split_indices(ds, split)
    y = ds.phenotypes()
    rows: dict[str, dict] = {}
    for t in thresholds or cfg.thresholds:
        label = threshold_label(t)
        out = Path(cfg.output_dir) / "baseline" / label
        try:
            subset = assoc.threshold_filter(results, ds, t)
        except assoc.EmptySubset as exc:
            rows[label] = {"threshold_p": t, "skipped": str(exc)}
            _write_json(out / "report.json", rows[label])
            continue
        x = subset.design_matrix
        train_cfg = replace(cfg.baseline_train, seed=cfg.seed)
        params = nn.init_network(nn.classifier_layers(x.shape[1], cfg.baseline_head), cfg.seed)
        best, history = nn.train(params, (x[tr], y[tr]), (x[va], y[va]), train_cfg)
        reports = _evaluate_splits(best, x, y, va, te, cfg.per_split_f1)
        extra = {"threshold_p": t, "n_snps": subset.width, "variant_ids": subset.variant_ids,
                 "epochs": len(history)}
        _write_eval(out, reports, history, best, train_cfg, extra)
        rows[label] = {**extra, **{k: v.metrics() for k, v in reports.items()}}
        logger.info("baseline %s: %d SNPs, test AUC %.4f", label, subset.width, reports["test"].auc)
    return rows


def run_stack_experiment(cfg: PipelineConfig, ds: Dataset | None = None, split: dict | None = None,
                         results: list[assoc.AssocResult] | None = None, depths=None) -> dict[str, dict]:
    """Greedy stack on the loosest subset (training rows only), then one classifier per depth."""
    if ds is None or split is None:
        ds, split = _load_clean(cfg)
    if results is None:
        results = assoc.read_scan_csv(Path(cfg.output_dir) / "scan" / "scan.csv")
    tr, va, te = _split_indices(ds, split)
    y = ds.phenotypes()
    subset = assoc.threshold_filter(results, ds, max(cfg.thresholds))
    x = subset.design_matrix
    sizes = clip_stack_sizes(cfg.stack_sizes, x.shape[1])
    out = Path(cfg.output_dir) / "stack"
    out.mkdir(parents=True, exist_ok=True)

    ae_cfg = ae.SparseAeConfig(sizes[0], cfg.sparsity_target, cfg.sparsity_weight,
                               replace(cfg.autoencoder_train, seed=cfg.seed))
    stack = ae.stack_train(x[tr], sizes, ae_cfg, standardize=cfg.standardize_stack)
    ae.save_stack(out / "stack.bin", stack)
    leakage = {"autoencoder_rows": tr.tolist(), "train_rows": tr.tolist(),
               "valid_rows": va.tolist(), "test_rows": te.tolist()}
    _write_json(out / "leakage.json", leakage)

    rows: dict[str, dict] = {}
    for depth in depths or range(1, len(sizes) + 1):
        train_cfg = replace(cfg.finetune_train, seed=cfg.seed)
        if cfg.finetune_rates is not None:
            train_cfg = replace(train_cfg, learning_rate=cfg.finetune_rates[depth - 1])
        params = ae.init_classifier_from_stack(stack, depth, tuple(cfg.stack_head) + (2,), cfg.seed)
        best, history = nn.train(params, (x[tr], y[tr]), (x[va], y[va]), train_cfg)
        reports = _evaluate_splits(best, x, y, va, te, cfg.per_split_f1)
        extra = {"depth": depth, "latent_width": sizes[depth - 1], "n_snps": subset.width,
                 "variant_ids": subset.variant_ids,
                 "threshold_p": subset.threshold, "epochs": len(history),
                 "mean_p_hat": float(stack.layers[depth - 1].mean_activation.mean())}
        _write_eval(out / f"depth_{depth}", reports, history, best, train_cfg, extra)
        rows[f"depth_{depth}"] = {**extra, **{k: v.metrics() for k, v in reports.items()}}
        logger.info("stack depth %d (%d units): test AUC %.4f", depth, sizes[depth - 1], reports["test"].auc)
    return rows


def evaluate_model(model_path: Path | str, ds: Dataset, variant_ids: list[str], threshold: float | None = None) -> metrics.EvalReport:
    """Score a saved classifier on a dataset restricted to ``variant_ids``."""
    params, _ = nn.load_model(model_path)
    col = {v: j for j, v in enumerate(ds.variant_ids())}
    missing = [v for v in variant_ids if v not in col]
    if missing:
        raise ConfigInvalid(f"{len(missing)} model variants absent from the dataset, e.g. {missing[0]}")
    x = assoc.mean_impute(ds.dosages()[:, [col[v] for v in variant_ids]])
    y = ds.phenotypes()
    keep = y >= 0
    return metrics.evaluate(nn.predict(params, x[keep]), y[keep], threshold)


def report_bundle(output_dir: Path | str) -> dict:
    """Collate every stage artifact into summary.json and summary.txt."""
    root = Path(output_dir)
    stage_files = {
        "qc": root / "qc" / "qc_report.json",
        "scan": root / "scan" / "counts.json",
    }
    baseline = sorted((root / "baseline").glob("*/report.json"), key=lambda p: -float(p.parent.name))
    stack = sorted((root / "stack").glob("depth_*/report.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    present = [p for p in stage_files.values() if p.exists()] + baseline + stack
    if not present:
        raise NoArtifacts(f"no stage artifacts under {root}")

    summary: dict = {"output_dir": str(root), "rows": []}
    config_path = root / "config.json"
    if config_path.exists():
        summary["config"] = json.loads(config_path.read_text())
        summary["seed"] = summary["config"].get("seed")
    if stage_files["qc"].exists():
        q = json.loads(stage_files["qc"].read_text())
        summary["qc"] = {k: q[k] for k in ("samples_before", "samples_after", "variants_before", "variants_after")}
        summary["qc"]["removed_samples"] = len(q["removed_samples"])
        summary["qc"]["removed_variants"] = len(q["removed_variants"])
    if stage_files["scan"].exists():
        summary["scan"] = json.loads(stage_files["scan"].read_text())
    for path in baseline + stack:
        rep = json.loads(path.read_text())
        row = {"stage": path.parent.parent.name, "name": path.parent.name,
               "source": str(path.relative_to(root))}
        for key in ("threshold_p", "n_snps", "depth", "latent_width", "skipped"):
            if key in rep:
                row[key] = rep[key]
        for split in ("valid", "test"):
            if split in rep:
                row[split] = rep[split]
        summary["rows"].append(row)

    _write_json(root / "summary.json", summary)
    (root / "summary.txt").write_text(format_summary(summary))
    return summary


def format_summary(summary: dict) -> str:
    lines = []
    if "qc" in summary:
        q = summary["qc"]
        lines.append(f"QC: samples {q['samples_before']} -> {q['samples_after']}, "
                     f"variants {q['variants_before']} -> {q['variants_after']}")
    if "scan" in summary:
        passing = ", ".join(f"{k}: {v}" for k, v in summary["scan"]["passing"].items())
        lines.append(f"Scan ({summary['scan']['n_train']} training samples) passing counts: {passing}")
    header = f"{'stage':<9}{'row':<10}{'split':<7}" + "".join(f"{c:>12}" for c in METRIC_COLUMNS)
    lines += ["", header, "-" * len(header)]
    for row in summary["rows"]:
        if "skipped" in row:
            lines.append(f"{row['stage']:<9}{row['name']:<10}skipped: {row['skipped']}")
            continue
        for split in ("valid", "test"):
            vals = "".join(f"{row[split][c]:>12.4f}" for c in METRIC_COLUMNS)
            lines.append(f"{row['stage']:<9}{row['name']:<10}{split:<7}{vals}")
    return "\n".join(lines) + "\n"


def run_all(cfg: PipelineConfig) -> dict:
    """simulate/load -> QC -> scan -> baseline -> stack -> summary."""
    cfg.validate()
    root = Path(cfg.output_dir)
    with RunLock(root):
        _write_json(root / "config.json", cfg.to_dict())
        ds = simulate_stage(cfg) if cfg.sim is not None else load_input(cfg)
        clean, split = qc_stage(cfg, ds)
        results = scan_stage(cfg, clean, split)
        run_baseline(cfg, clean, split, results)
        try:
            run_stack_experiment(cfg, clean, split, results)
        except assoc.EmptySubset as exc:
            logger.warning("stack experiment skipped: %s", exc)
        return report_bundle(root)
