"""Command line entry points: ``ocreid`` (train/eval/sweep/synth-data/export-metrics) and ``occforge``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .data import SyntheticSpec, generate_synthetic_dataset, load_dataset
from .exceptions import IntegrityError, OCReIDError
from .occlusion import OcclusionConfig, build_occluded_dataset
from .training import TrainConfig, evaluate, export_metrics, grid, run_dir_name, sweep, train


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress at INFO level.")
def main(verbose):
    """Occluded cloth-changing person re-identification toolkit."""
    _setup_logging(verbose)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "dataset_root", default=None, help="Override dataset_root from the config.")
@click.option("--out", "out_root", default="runs", show_default=True, help="Parent of the run directory.")
@click.option("--run-dir", default=None, help="Exact run directory (default: <out>/<timestamp>-seed<seed>).")
@click.option("--seed", type=int, default=None)
def train_cmd(config_path, dataset_root, out_root, run_dir, seed):
    """Train a model and write checkpoint.npz, train_log.csv and summary.json."""
    cfg = TrainConfig.from_json(config_path)
    if dataset_root is not None:
        cfg.dataset_root = dataset_root
    if seed is not None:
        cfg.seed = seed
    run = train(cfg, run_dir=run_dir, out_root=out_root)
    export_metrics(run / "train_log.csv")
    click.echo(str(run))


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--protocol", type=click.Choice(["prcc_cc", "ltcc_cc", "standard"]), default="ltcc_cc", show_default=True)
@click.option("--lambda", "lam", type=float, default=0.35, show_default=True)
@click.option("--data", "dataset_root", default=None, help="Dataset root (default: recorded in the checkpoint).")
@click.option("--layout", default=None)
@click.option("--out", "out_dir", default=None, help="Output directory (default: the checkpoint's directory).")
@click.option("--save-distmat", is_flag=True, help="Also write distmat.bin (uint32 LE shape header + float32 LE).")
def eval_cmd(ckpt, protocol, lam, dataset_root, layout, out_dir, save_distmat):
    """Evaluate a checkpoint and write eval_report.json."""
    report = evaluate(ckpt, protocol, lam, dataset_root, layout, out_dir, save_distmat)
    click.echo(json.dumps(report.to_json_dict(protocol, lam)))


@main.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--param", type=click.Choice(["lambda", "k"]), required=True)
@click.option("--from", "start", type=float, default=None)
@click.option("--to", "stop", type=float, default=None)
@click.option("--step", type=float, default=None)
@click.option("--values", default=None, help="Comma-separated values instead of --from/--to/--step.")
@click.option("--data", "dataset_root", default=None)
@click.option("--out", "out_dir", default=None, help="Output directory (default: runs/sweep-<param>-<timestamp>).")
def sweep_cmd(config_path, param, start, stop, step, values, dataset_root, out_dir):
    """Sensitivity sweep over the screening threshold or stripe count; writes sweep.csv and sweep.png."""
    cfg = TrainConfig.from_json(config_path)
    if dataset_root is not None:
        cfg.dataset_root = dataset_root
    if values:
        vals = [float(v) for v in values.split(",")]
    elif None not in (start, stop, step):
        vals = grid(start, stop, step)
    else:
        raise click.UsageError("give --values or all of --from/--to/--step")
    out_dir = out_dir or str(Path("runs") / f"sweep-{param}-{run_dir_name(cfg.seed)}")
    rows = sweep(param, vals, cfg, out_dir)
    for r in rows:
        click.echo(f"{r['param']}={r['value']}: rank1={r['rank1']} map={r['map']} {r['error']}".rstrip())


@main.command("synth-data")
@click.option("--out", "out_root", required=True)
@click.option("--ids", type=int, default=8, show_default=True)
@click.option("--clothes", type=int, default=2, show_default=True)
@click.option("--images", type=int, default=10, show_default=True)
@click.option("--size", default="64x32", show_default=True, help="Image size HxW.")
@click.option("--occluder-prob", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
def synth_data_cmd(out_root, ids, clothes, images, size, occluder_prob, seed):
    """Generate a synthetic cloth-changing dataset with parsing maps."""
    h, w = (int(v) for v in size.lower().split("x"))
    index = generate_synthetic_dataset(SyntheticSpec(ids, clothes, images, (h, w), occluder_prob), seed, out_root)
    click.echo(f"{len(index)} images, {index.num_identities} identities, {index.num_clothes} outfits -> {out_root}")


@main.command("export-metrics")
@click.argument("log_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None)
def export_metrics_cmd(log_path, out_path):
    """Summarise a train_log.csv into summary.json."""
    click.echo(json.dumps(export_metrics(log_path, out_path), indent=2))


@click.command("occforge")
@click.option("--src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--parsing", required=True, type=click.Path(exists=True, file_okay=False),
              help="Root holding parsing/<relative path>.png maps.")
@click.option("--dst", required=True)
@click.option("--layout", default="manifest", show_default=True)
@click.option("--pool-size", type=int, default=4, show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--label-table", type=click.Choice(["pascal", "lip"]), default="pascal", show_default=True)
@click.option("--splits", default="train,query,gallery", show_default=True, help="Splits to occlude.")
@click.option("-v", "--verbose", is_flag=True)
def occforge(src, parsing, dst, layout, pool_size, threshold, seed, label_table, splits, verbose):
    """Build an occluded copy of a dataset; writes stats.json next to the output manifest."""
    _setup_logging(verbose)
    try:
        index = load_dataset(src, layout)
        cfg = OcclusionConfig(pool_size=pool_size, binarize_threshold=threshold, seed=seed,
                              label_table=label_table, splits=tuple(s for s in splits.split(",") if s))
        stats = build_occluded_dataset(index, parsing, dst, cfg)
    except IntegrityError as exc:
        click.echo(f"integrity error: {exc}", err=True)
        sys.exit(2)
    except OCReIDError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    payload = stats.to_dict()
    (Path(dst) / "stats.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    click.echo(json.dumps({k: v for k, v in payload.items() if k != "errors"}))


if __name__ == "__main__":
    main()
