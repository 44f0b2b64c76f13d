"""Command-line interface.

Subcommands mirror the pipeline stages: `ingest` and `synth` produce
embedding containers, `score` runs the pairwise matrix (plus ranking),
`rank`/`correlate`/`bootstrap` re-derive outputs from a scored run, the
`ablate` family and `diagnose`/`bound` run the analysis suites, reusing
cached checkpoints whenever the config hash matches.

Exit codes: 0 success, 2 config error, 3 data error, 4 training failed for
all pairs, 5 partial (some pairs flagged).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .baselines import SyntheticPoolSpec, gen_synthetic_pool
from .data import import_npy, read_embeddings, write_embeddings
from .errors import ConfigError, DataError, FlowSuffError, TrainingFailure
from .pipeline import AnalysisToggles, RunConfig, load_run_config, run_pipeline, write_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_PARTIAL = 5


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="concurrent pair trainings")
    p.add_argument("--pool", nargs="*", default=None, help="embedding container paths")
    p.add_argument("--ground-truth", type=str, default=None,
                   help="JSON file with supervised scores")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsuff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a .npy matrix into a container")
    p.add_argument("npy", type=str)
    p.add_argument("--model-id", required=True)
    p.add_argument("--corpus", required=True, help="corpus tag shared across the pool")
    p.add_argument("--out", required=True, help="output container path")

    p = sub.add_parser("synth", help="generate a synthetic pool with known ranking")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--latent-dim", type=int, default=3)
    p.add_argument("--dims", type=int, nargs="+", default=[6, 6, 6, 6])
    p.add_argument("--noise", type=float, nargs="+", default=[0.05, 0.3, 1.0, 3.0])

    for name, help_text in (
        ("score", "train the pairwise matrix and rank the pool"),
        ("rank", "rank models from a scored run"),
        ("correlate", "correlations against ground truth"),
        ("bootstrap", "leave-one-out bootstrap over the pool"),
        ("diagnose", "assumption-validation probes"),
        ("bound", "generalization-bound reports per pair"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("ablate", help="evaluation-time ablation suites")
    p.add_argument("kind", choices=["shuffle", "subsample", "aggregation", "cond-only", "perturb"])
    _add_common(p)

    return parser


def _config_from_args(args, toggles: AnalysisToggles) -> RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out, "jobs": args.jobs}
    if args.config:
        cfg = load_run_config(args.config, overrides)
    else:
        cfg = RunConfig()
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
    if args.pool:
        cfg.pool_paths = list(args.pool)
    if args.ground_truth:
        cfg.gt_path = args.ground_truth
    if not cfg.pool_paths:
        raise ConfigError("no pool specified (use --pool or the [run] pool key)")
    cfg.analysis = toggles
    return cfg


_ABLATE_TOGGLES = {
    "shuffle": AnalysisToggles(shuffle=True),
    "subsample": AnalysisToggles(subsample=True),
    "aggregation": AnalysisToggles(aggregation=True),
    "cond-only": AnalysisToggles(cond_only=True),
    "perturb": AnalysisToggles(perturbation=True),
}


def _run_and_write(cfg: RunConfig) -> int:
    run = run_pipeline(cfg)
    files = write_report(run, cfg.out_dir)
    print(f"wrote {len(files)} files to {cfg.out_dir}")
    ranking = run.report.get("ranking")
    if ranking:
        for s in ranking:
            tie = " (tied)" if s.get("tied") else ""
            print(f"  #{s['rank']} {s['model_id']}  score={s['score']:.6g}{tie}")
    if "correlation" in run.report:
        corr = run.report["correlation"]
        print(f"  spearman={corr['spearman']} pearson={corr['pearson']}")
    return run.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            emb = import_npy(args.npy, args.model_id, args.corpus)
            write_embeddings(emb, args.out)
            print(f"wrote {args.out} ({emb.n}x{emb.d}, corpus {emb.corpus_hash})")
            return EXIT_OK
        if args.command == "synth":
            spec = SyntheticPoolSpec(
                latent_dim=args.latent_dim, output_dims=list(args.dims),
                noise_levels=list(args.noise), n=args.n, seed=args.seed,
            )
            pool, gt = gen_synthetic_pool(spec)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for emb in pool:
                write_embeddings(emb, out / f"{emb.model_id}.femb")
            (out / "ground_truth.json").write_text(
                json.dumps({"task": "synthetic", "scores": gt}, indent=2, sort_keys=True)
            )
            print(f"wrote {len(pool)} containers + ground_truth.json to {out}")
            return EXIT_OK

        if args.command == "score":
            toggles = AnalysisToggles(correlations=True)
        elif args.command == "rank":
            toggles = AnalysisToggles()
        elif args.command == "correlate":
            toggles = AnalysisToggles(correlations=True)
        elif args.command == "bootstrap":
            toggles = AnalysisToggles(bootstrap=True)
        elif args.command == "diagnose":
            toggles = AnalysisToggles(diagnostics=True)
        elif args.command == "bound":
            toggles = AnalysisToggles(bounds=True)
        elif args.command == "ablate":
            toggles = _ABLATE_TOGGLES[args.kind]
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command}")
        cfg = _config_from_args(args, toggles)
        return _run_and_write(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFailure as e:
        print(f"training failure: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except FlowSuffError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
