"""Command-line entry point: ``gwas-ssae <subcommand> [options]``.

Exit status is 0 on success, 2 for invalid input or configuration and 3
for failures while running a stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3

SUBCOMMANDS = ("simulate", "qc", "scan", "baseline", "stack", "evaluate", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--output", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gwas-ssae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic PLINK fileset and truth manifest")
    sub.add_parser("qc", parents=[common], help="sample and variant QC, then the train/valid/test split")
    sub.add_parser("scan", parents=[common], help="per-SNP logistic association on the training split")
    p = sub.add_parser("baseline", parents=[common], help="classifiers on p-value filtered SNP subsets")
    p.add_argument("--threshold", type=float, action="append", help="p-value threshold (repeatable)")
    p = sub.add_parser("stack", parents=[common], help="autoencoder stack and stack-initialised classifiers")
    p.add_argument("--depth", type=int, action="append", help="stack depth to fine-tune (repeatable)")
    p = sub.add_parser("evaluate", parents=[common], help="score a saved classifier on a PLINK fileset")
    p.add_argument("--model", required=True, help="model.bin written by baseline or stack")
    p.add_argument("--input", required=True, help="PLINK prefix (prefix.bed/.bim/.fam)")
    p.add_argument("--threshold", type=float, help="decision threshold (default: F1-optimal)")
    sub.add_parser("report", parents=[common], help="collate stage artifacts into summary.json/.txt")
    return parser


def _load_config(args):
    from dataclasses import replace

    from . import pipeline

    if args.config:
        cfg = pipeline.PipelineConfig.load(args.config)
        if args.output:
            cfg = replace(cfg, output_dir=args.output)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
            if cfg.sim is not None:
                cfg = replace(cfg, sim=replace(cfg.sim, seed=args.seed))
    else:
        cfg = pipeline.synthetic_config(args.output or "gwas_run", seed=args.seed or 0)
    cfg = replace(cfg, threads=args.threads)
    cfg.validate()
    return cfg


def _run(args) -> int:
    from pathlib import Path

    from . import pipeline
    from .genotype_io import fileset_paths, read_bed_dataset
    from .neuralnet import load_model

    if args.command == "report":
        out = args.output or (_load_config(args).output_dir)
        summary = pipeline.report_bundle(out)
        print(Path(out, "summary.txt").read_text(), end="")
        return EXIT_OK if summary else EXIT_RUNTIME

    if args.command == "evaluate":
        _, header = load_model(args.model)
        ids = header.get("extra", {}).get("variant_ids")
        if not ids:
            raise pipeline.ConfigInvalid(f"{args.model} does not record its input variants")
        ds = read_bed_dataset(*fileset_paths(args.input))
        rep = pipeline.evaluate_model(args.model, ds, ids, args.threshold)
        print(rep.to_json())
        return EXIT_OK

    cfg = _load_config(args)
    root = Path(cfg.output_dir)
    with pipeline.RunLock(root):
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        if args.command == "simulate":
            if cfg.sim is None:
                raise pipeline.ConfigInvalid("simulate needs a 'sim' section in the config")
            ds = pipeline.simulate_stage(cfg)
            print(f"wrote {ds.n_samples} samples x {ds.n_variants} variants to {root / 'data'}")
        elif args.command == "qc":
            clean, split = pipeline.qc_stage(cfg)
            print(f"QC kept {clean.n_samples} samples, {clean.n_variants} variants; "
                  f"split {len(split['train'])}/{len(split['valid'])}/{len(split['test'])}")
        elif args.command == "scan":
            results = pipeline.scan_stage(cfg)
            counts = json.loads((root / "scan" / "counts.json").read_text())["passing"]
            print(f"scanned {len(results)} variants; passing: {counts}")
        elif args.command == "baseline":
            rows = pipeline.run_baseline(cfg, thresholds=args.threshold)
            for label, row in rows.items():
                print(label, row.get("skipped") or f"test AUC {row['test']['auc']:.4f}")
        elif args.command == "stack":
            rows = pipeline.run_stack_experiment(cfg, depths=args.depth)
            for label, row in rows.items():
                print(label, f"test AUC {row['test']['auc']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    # must precede the numpy import
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import genotype_io, pipeline, qc, simdata

    invalid = (pipeline.ConfigInvalid, simdata.SpecInvalid, qc.QcError, genotype_io.GenotypeIOError)
    try:
        return _run(args)
    except invalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (pipeline.NoArtifacts, pipeline.MissingStage, pipeline.PipelineBusy) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other stage failure is a runtime error
        logging.getLogger(__name__).debug("stage failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
