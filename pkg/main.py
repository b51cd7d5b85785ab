#!/usr/bin/env python3
"""
Retina VAE pipeline - Main CLI Entry Point

Synthesizes patient profile vectors for ARMD, CSCR and PCV, trains a
variational autoencoder on them, clusters the latent means with k-means and
reports the cluster characteristics. Every stage reads and writes files, so
any stage can be re-run on its own.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from src.clustering import (
    cluster_latents,
    centroids_to_frame,
    elbow_curve,
    infer_latents,
    latent_matrix,
    latents_to_frame,
    profiles_to_frame,
    read_latents,
    reconstruction_accuracy,
    sample_prior,
)
from src.config import PipelineConfig, apply_overrides, load_pipeline_config, load_settings
from src.datagen import cohort_counts, cohort_to_csv, generate_cohort, read_cohort
from src.error_mapper import ErrorMapper
from src.exceptions import FileSystemError, ShapeMismatchError, ValidationError
from src.logger import build_logger, log_struct, set_run_id
from src.output_handler import OutputHandler, frame_to_csv
from src.reporting import (
    cluster_observations,
    composition_frame,
    export_data_model_figures,
    export_latent_scatter,
    purity_frame,
    purity_stats,
    render_purity,
    render_table,
    summaries_frame,
    summarize_clusters,
)
from src.trainer import compare_latent_dims, history_to_csv, summarize_comparison, train
from src.vae_core import load_params, params_to_json

COMPARE_DIMS = (2, 3, 4)


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command-line arguments.

    Returns:
        Parsed arguments namespace
    """
    parser = argparse.ArgumentParser(
        description="Synthetic retina cohort -> VAE -> latent k-means -> cluster report",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full pipeline with defaults (3000 records, J=3, k=14)
  python main.py --out run generate
  python main.py --out run train --latent-dim 3 --epochs 1000
  python main.py --out run infer
  python main.py --out run cluster --k 14
  python main.py --out run report --format table --weights run/weights.json

  # Training curves for 2, 3 and 4 dimensional latents
  python main.py --out run compare-dims --epochs 200
        """
    )

    parser.add_argument('--config', '-c', help='Pipeline config JSON')
    parser.add_argument('--seed', type=int, help='Seed for every stage (overrides config)')
    parser.add_argument('--out', '-o', help='Output directory (default: config paths.output_dir)')
    parser.add_argument('--env-file', help='Runtime settings .env file (default: ./.env if present)')

    sub = parser.add_subparsers(dest='command', required=True)

    generate = sub.add_parser('generate', help='Synthesize the cohort CSV')
    generate.add_argument('--per-disease', type=int, help='Records per disease')

    train_cmd = sub.add_parser('train', help='Train the VAE on a cohort')
    train_cmd.add_argument('--cohort', help='Cohort CSV (default: paths.cohort)')
    train_cmd.add_argument('--latent-dim', type=int, help='Latent dimension J')
    train_cmd.add_argument('--epochs', type=int, help='Training epochs')
    train_cmd.add_argument(
        '--compare-dims',
        action='store_true',
        help='Train J=2,3,4 and write one history per J',
    )

    compare = sub.add_parser('compare-dims', help='Train J=2,3,4 and compare loss curves')
    compare.add_argument('--cohort', help='Cohort CSV (default: paths.cohort)')
    compare.add_argument('--epochs', type=int, help='Training epochs')

    infer = sub.add_parser('infer', help='Encode the cohort into latent means')
    infer.add_argument('--weights', help='Weights JSON (default: paths.weights)')
    infer.add_argument('--cohort', help='Cohort CSV (default: paths.cohort)')
    infer.add_argument('--latent-dim', type=int, help='Expected latent dimension of the weights')

    cluster = sub.add_parser('cluster', help='k-means on the latent means')
    cluster.add_argument('--latents', help='Latents CSV (default: paths.latents)')
    cluster.add_argument('--k', type=int, help='Number of clusters')

    report = sub.add_parser('report', help='Cluster characteristics, purity and scatter exports')
    report.add_argument('--cohort', help='Cohort CSV (default: paths.cohort)')
    report.add_argument('--latents', help='Clustered latents CSV (default: paths.latents)')
    report.add_argument('--format', choices=['csv', 'table'], default='table', dest='fmt')
    report.add_argument('--weights', help='Weights JSON; adds reconstruction accuracy')

    sample = sub.add_parser('sample', help='Decode profiles drawn from the latent prior')
    sample.add_argument('--weights', help='Weights JSON (default: paths.weights)')
    sample.add_argument('--n', type=int, default=10, help='Number of profiles')

    return parser.parse_args(argv)


def require_file(path: Path, what: str) -> Path:
    """Fail before any work when an input artifact is missing.

    Raises:
        FileSystemError: If path is not an existing file
    """
    if not path.is_file():
        raise FileSystemError(
            f"{what} not found: {path}",
            context={"path": str(path)},
        )
    return path


def input_path(config: PipelineConfig, given: Optional[str], default: str, what: str) -> Path:
    path = Path(given) if given else config.paths.resolve(default)
    return require_file(path, what)


def suffixed(name: str, latent_dim: int) -> str:
    path = Path(name)
    return str(path.with_name(f"{path.stem}_J{latent_dim}{path.suffix}"))


def cmd_generate(args, config: PipelineConfig, logger) -> int:
    """Write the cohort CSV and the data-model figure tables."""
    models = config.data.disease_models()
    handler = OutputHandler(logger, Path(config.paths.output_dir))
    handler.check_writable()

    cohort = generate_cohort(models, config.data.per_disease_count, config.data.seed)
    cohort_path = handler.add_text(config.paths.cohort, cohort_to_csv(cohort), rows=len(cohort))
    figures = Path(config.paths.figures_dir)
    for name, frame in export_data_model_figures(models).items():
        handler.add_frame(figures / f"data_model_{name}.csv", frame)
    handler.flush(labels={"command": "generate"})

    counts = {d.value: n for d, n in cohort_counts(cohort).items()}
    print(f"✅ Cohort written: {cohort_path}")
    print(f"   Records: {len(cohort)} {counts}")
    return 0


def cmd_train(args, config: PipelineConfig, logger) -> int:
    """Train one model, or J=2,3,4 when --compare-dims is set."""
    cohort = read_cohort(input_path(config, args.cohort, config.paths.cohort, "Cohort file"))
    config.train.validate(cohort_size=len(cohort))
    handler = OutputHandler(logger, Path(config.paths.output_dir))
    handler.check_writable()

    if getattr(args, 'compare_dims', False):
        return _compare(cohort, config, handler, logger)

    result = train(cohort, config.train, logger=logger)
    handler.add_text(config.paths.weights, params_to_json(result.params, config.train.age_cap))
    handler.add_text(
        config.paths.history, history_to_csv(result.history), rows=len(result.history)
    )
    handler.flush(labels={"command": "train", "latent_dim": config.train.latent_dim})

    final = result.history.final
    print(f"✅ Trained J={config.train.latent_dim} for {len(result.history)} epochs")
    print(f"   Final loss: total={final.total:.6f} kl={final.kl:.6f} recon={final.recon:.6f}")
    return 0


def _compare(cohort, config: PipelineConfig, handler: OutputHandler, logger) -> int:
    results = compare_latent_dims(cohort, config.train, COMPARE_DIMS, logger=logger)
    for latent_dim, result in results.items():
        handler.add_text(
            suffixed(config.paths.weights, latent_dim),
            params_to_json(result.params, config.train.age_cap),
        )
        handler.add_text(
            suffixed(config.paths.history, latent_dim),
            history_to_csv(result.history),
            rows=len(result.history),
        )
    frame, observations = summarize_comparison(
        {latent_dim: result.history for latent_dim, result in results.items()}
    )
    handler.add_frame(Path(config.paths.history).with_name("latent_dim_comparison.csv"), frame)
    handler.flush(labels={"command": "compare-dims"})

    print(frame.to_string(index=False))
    for note in observations:
        print(f"   {note}")
    return 0


def cmd_compare_dims(args, config: PipelineConfig, logger) -> int:
    args.compare_dims = True
    return cmd_train(args, config, logger)


def cmd_infer(args, config: PipelineConfig, logger) -> int:
    """Write the latents CSV (posterior means, no cluster yet)."""
    weights = input_path(config, args.weights, config.paths.weights, "Weights file")
    cohort = read_cohort(input_path(config, args.cohort, config.paths.cohort, "Cohort file"))
    params, age_cap = load_params(weights)
    if args.latent_dim is not None and args.latent_dim != params.latent_dim:
        raise ShapeMismatchError(
            f"Weights have latent_dim {params.latent_dim}, --latent-dim is {args.latent_dim}",
            context={"weights": str(weights), "expected": args.latent_dim},
        )
    handler = OutputHandler(logger, Path(config.paths.output_dir))
    handler.check_writable()

    points = infer_latents(params, cohort, age_cap or config.data.age_cap)
    path = handler.add_frame(config.paths.latents, latents_to_frame(points))
    handler.flush(labels={"command": "infer", "latent_dim": params.latent_dim})

    print(f"✅ Latents written: {path}")
    print(f"   Points: {len(points)}  J={params.latent_dim}")
    return 0


def cmd_cluster(args, config: PipelineConfig, logger) -> int:
    """Write clustered latents, centroids and the inertia-vs-k curve."""
    points = read_latents(input_path(config, args.latents, config.paths.latents, "Latents file"))
    settings = config.cluster
    handler = OutputHandler(logger, Path(config.paths.output_dir))
    handler.check_writable()

    assigned, result = cluster_latents(
        points,
        k=settings.k,
        seed=settings.seed,
        restarts=settings.restarts,
        max_iter=settings.max_iter,
        tol=settings.tol,
        logger=logger,
    )
    elbow = elbow_curve(
        latent_matrix(points),
        range(1, settings.elbow_k_max + 1),
        settings.seed,
        restarts=settings.restarts,
        max_iter=settings.max_iter,
        tol=settings.tol,
    )
    handler.add_frame(config.paths.latents, latents_to_frame(assigned))
    handler.add_frame(config.paths.centroids, centroids_to_frame(result.centroids))
    handler.add_frame(config.paths.elbow, elbow)
    handler.flush(labels={"command": "cluster", "k": settings.k})

    sizes = np.bincount(result.assignments, minlength=settings.k).tolist()
    print(f"✅ k-means: k={settings.k} inertia={result.inertia:.6f} "
          f"iterations={result.iterations} converged={result.converged}")
    print(f"   Cluster sizes: {sizes}")
    return 0


def cmd_report(args, config: PipelineConfig, logger) -> int:
    """Write cluster characteristics, purity, observations and scatter tables."""
    cohort = read_cohort(input_path(config, args.cohort, config.paths.cohort, "Cohort file"))
    latents = read_latents(input_path(config, args.latents, config.paths.latents, "Latents file"))
    weights = require_file(Path(args.weights), "Weights file") if args.weights else None
    handler = OutputHandler(logger, Path(config.paths.output_dir))
    handler.check_writable()

    summaries = summarize_clusters(cohort, latents, k=config.cluster.k, logger=logger)
    report_dir = Path(config.paths.report_dir)
    outputs: Dict[str, str] = {}

    if args.fmt == 'csv':
        text = frame_to_csv(summaries_frame(summaries))
        handler.add_text(report_dir / "clusters.csv", text, rows=len(summaries))
    else:
        text = render_table(summaries)
        handler.add_text(report_dir / "clusters.txt", text)
    outputs["clusters"] = text

    if summaries:
        purity = purity_stats(summaries)
        observations = cluster_observations(summaries)
        handler.add_frame(report_dir / "purity.csv", purity_frame(purity))
        handler.add_frame(report_dir / "composition.csv", composition_frame(purity))
        purity_text = render_purity(purity, observations)
        handler.add_text(report_dir / "observations.txt", purity_text)
        outputs["purity"] = purity_text

    for name, frame in export_latent_scatter(latents).items():
        handler.add_frame(report_dir / f"scatter_{name}.csv", frame)

    if weights is not None:
        params, age_cap = load_params(weights)
        accuracy = reconstruction_accuracy(params, cohort, age_cap or config.data.age_cap)
        handler.add_json(report_dir / "reconstruction.json", accuracy)
        outputs["reconstruction"] = "".join(
            f"  {name:<7} {value:.4f}\n" for name, value in accuracy.items()
        )

    handler.flush(labels={"command": "report"})

    print(outputs["clusters"], end="")
    if "purity" in outputs:
        print(outputs["purity"], end="")
    if "reconstruction" in outputs:
        print("Reconstruction (posterior mean):")
        print(outputs["reconstruction"], end="")
    return 0


def cmd_sample(args, config: PipelineConfig, logger) -> int:
    """Decode --n draws from the N(0, I) prior into profiles."""
    weights = input_path(config, args.weights, config.paths.weights, "Weights file")
    if args.n < 1:
        raise ValidationError(f"--n must be at least 1, got {args.n}")
    params, age_cap = load_params(weights)
    handler = OutputHandler(logger, Path(config.paths.output_dir))
    handler.check_writable()

    rng = np.random.default_rng(config.data.seed)
    records = sample_prior(params, args.n, rng, age_cap or config.data.age_cap)
    path = handler.add_frame(config.paths.samples, profiles_to_frame(records))
    handler.flush(labels={"command": "sample"})

    print(f"✅ Prior samples written: {path}")
    print(f"   Profiles: {len(records)}")
    return 0


COMMANDS = {
    'generate': cmd_generate,
    'train': cmd_train,
    'compare-dims': cmd_compare_dims,
    'infer': cmd_infer,
    'cluster': cmd_cluster,
    'report': cmd_report,
    'sample': cmd_sample,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = parse_args(argv)

    # Initialize logger (before config to catch config errors)
    logger = build_logger(
        service_name="retina-vae",
        environment="development",
        level="INFO",
    )
    run_id = set_run_id()

    try:
        settings = load_settings(Path(args.env_file) if args.env_file else None)
        logger = build_logger(settings.service_name, settings.environment, settings.log_level)

        config = apply_overrides(
            load_pipeline_config(args.config),
            seed=args.seed,
            per_disease=getattr(args, 'per_disease', None),
            epochs=getattr(args, 'epochs', None),
            latent_dim=getattr(args, 'latent_dim', None) if args.command == 'train' else None,
            k=getattr(args, 'k', None),
            out=args.out,
        )
        config.validate()

        log_struct(
            logger,
            "INFO",
            f"Starting {args.command}",
            labels={"command": args.command},
            fields={
                "output_dir": config.paths.output_dir,
                "config_path": args.config,
                "run_id": run_id,
            }
        )

        code = COMMANDS[args.command](args, config, logger)

        log_struct(
            logger,
            "INFO",
            f"Finished {args.command}",
            labels={"command": args.command},
            fields={"exit_code": code},
        )
        return code

    except Exception as exc:
        # stray library errors get a stable type and exit code
        error = ErrorMapper.map_exception(exc, {"command": args.command})
        log_struct(
            logger,
            "ERROR",
            f"{args.command} failed: {error.message}",
            labels={
                "error_type": error.__class__.__name__,
            },
            fields=error.to_dict(),
        )

        print(f"Error: {error.message}", file=sys.stderr)

        if error.context:
            print(f"Context: {error.context}", file=sys.stderr)

        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
