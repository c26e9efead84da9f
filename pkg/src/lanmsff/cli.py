"""
Command-line entry point.

    lanmsff audit        parameter audit (text + JSON)
    lanmsff metrics      ID / Var from published numbers
    lanmsff data-prepare binary sample cache from a raw dataset
    lanmsff train        train one configuration (optionally one k-fold fold)
    lanmsff eval         metrics and confusion matrices for saved weights
    lanmsff gradcam      heatmaps and colour overlays for selected samples

Every command writes a resolved-config snapshot (``config.json``) into its
output directory, which defaults to ``$LANMSFF_OUTPUT_DIR`` or
``./lanmsff-out``. Exit codes: 0 success, 2 usage or invalid configuration,
3 dataset errors, 4 other failures.
"""

import json
import logging
import sys
from contextlib import ExitStack
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from sqlalchemy.exc import ArgumentError, SQLAlchemyError
from sqlmodel import Session, SQLModel, create_engine

from .core import TrainingLog
from .datasets import (
    SCHEMAS,
    LabelSchema,
    Sample,
    kdef_actor_groups,
    load_samples,
    pose_subset,
    select_split,
    tag_subsets,
    to_arrays,
    write_cache,
)
from .evaluation import evaluate, grad_cam, information_density, pose_variance, save_heatmap, save_overlay
from .exceptions import ConfigurationError, DatasetError, LanmsffError
from .model import LANMSFFConfig, audit_parameters, build_model
from .serialization import load_weights, save_weights
from .training import TrainConfig, fit, kfold_split

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

DATASET_KINDS = ["fer2013", "ferplus", "kdef", "cache"]


class CommandConfig(BaseModel):
    """Resolved settings of one invocation, written to ``config.json``."""

    model_config = ConfigDict(frozen=True, protected_namespaces=())

    subcommand: str
    output_dir: str
    seed: int = 0
    dataset: Optional[str] = None
    dataset_path: Optional[str] = None
    votes_path: Optional[str] = None
    schema_name: Optional[str] = None
    model: Optional[LANMSFFConfig] = None
    train: Optional[TrainConfig] = None
    extra: Dict[str, Any] = {}

    def write(self) -> Path:
        directory = Path(self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.json"
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path


def model_options(func):  # type: ignore[no-untyped-def]
    """Architecture flags shared by audit, train, eval and gradcam."""
    options = [
        click.option("--num-classes", type=int, default=None, help="Output classes (default: from the dataset schema, else 7)."),
        click.option("--input-channels", type=click.Choice(["1", "3"]), default="1", show_default=True),
        click.option("--widths", type=str, default="66,72,78,84", show_default=True, help="Block widths w1,w2,w3,w4."),
        click.option("--no-pwfs", is_flag=True, help="Disable PWFS (fusion of raw block descriptors)."),
        click.option("--no-massatt", is_flag=True, help="Disable MassAtt in blocks 2 and 4."),
        click.option("--dropout", type=float, default=0.25, show_default=True),
        click.option("--input-size", type=int, default=64, show_default=True),
        click.option("--wiring", type=click.Choice(["shared", "independent"]), default="shared", show_default=True),
        click.option("--dtype", type=click.Choice(["float64", "float32"]), default="float64", show_default=True),
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="Read the model config from a config.json snapshot instead."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def output_option(func):  # type: ignore[no-untyped-def]
    return click.option(
        "--output-dir",
        type=click.Path(file_okay=False),
        envvar="LANMSFF_OUTPUT_DIR",
        default="lanmsff-out",
        show_default=True,
        help="Directory for every artifact of the run.",
    )(func)


def dataset_options(func):  # type: ignore[no-untyped-def]
    options = [
        click.option("--dataset", type=click.Choice(DATASET_KINDS), required=True),
        click.option("--data", "data_path", type=click.Path(), required=True,
                     help="FER-2013 CSV, KDEF directory or sample cache."),
        click.option("--votes", "votes_path", type=click.Path(), default=None, help="FERPlus vote CSV."),
        click.option("--schema", "schema_name", type=click.Choice(sorted(SCHEMAS)), default=None,
                     help="Label schema of a sample cache (default: fer2013)."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _parse_widths(text: str) -> Tuple[int, int, int, int]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise click.BadParameter(f"widths must be four integers, got {text!r}", param_hint="--widths")
    if len(values) != 4:
        raise click.BadParameter(f"widths must be four integers, got {text!r}", param_hint="--widths")
    return values  # type: ignore[return-value]


def _schema_for(dataset: Optional[str], schema_name: Optional[str]) -> LabelSchema:
    if schema_name:
        return SCHEMAS[schema_name]
    if dataset in SCHEMAS:
        return SCHEMAS[dataset]  # type: ignore[index]
    return SCHEMAS["fer2013"]


def _model_config(opts: Dict[str, Any], seed: int, default_classes: int = 7) -> LANMSFFConfig:
    if opts.get("config_path"):
        snapshot = json.loads(Path(opts["config_path"]).read_text(encoding="utf-8"))
        return LANMSFFConfig.model_validate(snapshot.get("model", snapshot))
    return LANMSFFConfig(
        input_channels=int(opts["input_channels"]),
        num_classes=opts["num_classes"] or default_classes,
        block_widths=_parse_widths(opts["widths"]),
        enable_pwfs=not opts["no_pwfs"],
        enable_massatt=not opts["no_massatt"],
        dropout_rate=opts["dropout"],
        input_size=opts["input_size"],
        path_wiring=opts["wiring"],
        dtype=opts["dtype"],
        seed=seed,
    )


def _split_model_opts(kwargs: Dict[str, Any]) -> Dict[str, Any]:
    keys = ("num_classes", "input_channels", "widths", "no_pwfs", "no_massatt", "dropout",
            "input_size", "wiring", "dtype", "config_path")
    return {key: kwargs.pop(key) for key in keys}


def _load(dataset: str, data_path: str, votes_path: Optional[str], channels: int) -> List[Sample]:
    samples = load_samples(dataset, data_path, votes_path, channels)  # type: ignore[arg-type]
    if not samples:
        raise DatasetError(f"no samples found in {data_path}")
    return samples


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose: bool) -> None:
    """LANMSFF facial-expression recognition toolkit."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@model_options
@output_option
@click.option("--seed", type=int, default=0, show_default=True)
def audit(output_dir: str, seed: int, **kwargs: Any) -> None:
    """Exact parameter counts per layer and block, and the fusion length."""
    config = _model_config(_split_model_opts(kwargs), seed)
    report = audit_parameters(build_model(config))
    CommandConfig(subcommand="audit", output_dir=output_dir, seed=seed, model=config).write()
    out = Path(output_dir)
    (out / "audit.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "audit.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    click.echo(report.to_text())


@cli.command()
@click.option("--acc", type=float, required=True, help="Overall accuracy in percent.")
@click.option("--params", type=float, required=True, help="Parameter count.")
@click.option("--pose-acc", type=float, multiple=True, help="Per-pose accuracy (repeatable) for Var.")
@output_option
def metrics(acc: float, params: float, pose_acc: Sequence[float], output_dir: str) -> None:
    """ID (and Var, given per-pose accuracies) from published numbers."""
    if params <= 0:
        raise click.BadParameter("must be positive", param_hint="--params")
    result: Dict[str, Any] = {"accuracy": acc, "params": params, "information_density": information_density(acc, params)}
    if pose_acc:
        result["pose_accuracies"] = list(pose_acc)
        result["pose_variance"] = pose_variance(list(pose_acc), acc)
    CommandConfig(subcommand="metrics", output_dir=output_dir, extra=result).write()
    (Path(output_dir) / "metrics.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    click.echo(f"ID {result['information_density']:.1f}")
    if pose_acc:
        click.echo(f"Var {result['pose_variance']:.2f}")


@cli.command("data-prepare")
@dataset_options
@click.option("--input-channels", type=click.Choice(["1", "3"]), default="1", show_default=True)
@click.option("--pose-index", "pose_indexes", type=(click.Path(dir_okay=False), int), multiple=True,
              help="Pose-index file and its threshold in degrees, e.g. --pose-index idx30.txt 30.")
@output_option
def data_prepare(dataset: str, data_path: str, votes_path: Optional[str], schema_name: Optional[str],
                 input_channels: str, pose_indexes: Sequence[Tuple[str, int]], output_dir: str) -> None:
    """Parse a raw dataset into the binary sample cache."""
    samples = _load(dataset, data_path, votes_path, int(input_channels))
    if pose_indexes:
        subsets = [pose_subset(samples, index, threshold) for index, threshold in pose_indexes]
        samples = tag_subsets(samples, subsets)
    out = Path(output_dir)
    CommandConfig(subcommand="data-prepare", output_dir=output_dir, dataset=dataset, dataset_path=data_path,
                  votes_path=votes_path, schema_name=_schema_for(dataset, schema_name).name).write()
    write_cache(samples, out / "samples.bin")
    click.echo(f"cached {len(samples)} samples to {out / 'samples.bin'}")


def _training_log(url: Optional[str], run_id: str, stack: ExitStack) -> TrainingLog:
    """In-memory log, or one backed by the database at ``url``."""
    if url is None:
        return TrainingLog()
    try:
        engine = create_engine(url)
    except (ArgumentError, ImportError) as exc:
        raise ConfigurationError(f"--run-db: {exc}") from exc
    stack.callback(engine.dispose)
    SQLModel.metadata.create_all(engine)
    session = stack.enter_context(Session(engine))
    log = TrainingLog(session=session)
    if log.for_run(run_id):
        raise ConfigurationError(f"run {run_id!r} is already logged in {url}; pick another --run-id")
    logger.info("logging run %s to %s", run_id, url)
    return log


@cli.command()
@dataset_options
@model_options
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=0.001, show_default=True)
@click.option("--patience", type=int, default=8, show_default=True)
@click.option("--decay", type=float, default=0.5, show_default=True)
@click.option("--schedule", type=click.Choice(["patience", "fixed_interval"]), default="patience", show_default=True)
@click.option("--no-augment", is_flag=True, help="Skip the three synthetic images per sample.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--kfold", type=int, default=None, help="Use a k-fold plan instead of the dataset's splits.")
@click.option("--fold", type=int, default=0, show_default=True, help="Fold to validate on with --kfold.")
@click.option("--actor-disjoint", is_flag=True, help="KDEF: keep each actor inside one fold.")
@click.option("--run-db", type=str, default=None, help="Also log epochs to this database URL, e.g. sqlite:///runs.db.")
@click.option("--run-id", type=str, default="train", show_default=True, help="Run name in the training log.")
@click.option("--seed", type=int, default=0, show_default=True)
@output_option
def train(dataset: str, data_path: str, votes_path: Optional[str], schema_name: Optional[str], epochs: int,
          batch_size: int, lr: float, patience: int, decay: float, schedule: str, no_augment: bool,
          workers: int, kfold: Optional[int], fold: int, actor_disjoint: bool, run_db: Optional[str], run_id: str,
          seed: int, output_dir: str, **kwargs: Any) -> None:
    """Train one configuration; writes weights, the training log and config.json."""
    schema = _schema_for(dataset, schema_name)
    model_config = _model_config(_split_model_opts(kwargs), seed, len(schema))
    train_config = TrainConfig(
        batch_size=batch_size, lr0=lr, patience_epochs=patience, decay_factor=decay, max_epochs=epochs,
        seed=seed, schedule_mode=schedule, augment=not no_augment, workers=workers,
    )
    samples = _load(dataset, data_path, votes_path, model_config.input_channels)
    if kfold is None and dataset == "kdef":
        kfold = 5
    if kfold is not None:
        if not 0 <= fold < kfold:
            raise click.BadParameter(f"fold must lie in 0..{kfold - 1}", param_hint="--fold")
        groups = kdef_actor_groups(samples) if actor_disjoint else None
        plan = kfold_split(len(samples), kfold, seed, groups)
        train_samples = [samples[i] for i in plan.train_indices(fold)]
        val_samples = [samples[i] for i in plan.validation_indices(fold)]
    else:
        train_samples = select_split(samples, "train")
        val_samples = select_split(samples, "val") or select_split(samples, "test")

    CommandConfig(subcommand="train", output_dir=output_dir, seed=seed, dataset=dataset, dataset_path=data_path,
                  votes_path=votes_path, schema_name=schema.name, model=model_config, train=train_config,
                  extra={"kfold": kfold, "fold": fold, "actor_disjoint": actor_disjoint, "run_db": run_db,
                         "run_id": run_id}).write()
    model = build_model(model_config)
    with ExitStack() as stack:
        log = _training_log(run_db, run_id, stack)
        result = fit(model, to_arrays(train_samples), to_arrays(val_samples), train_config, log=log, run_id=run_id)
        out = Path(output_dir)
        save_weights(model, out / "weights.bin")
        log.to_csv(result.run_id, str(out / "training_log.csv"))
        log.to_json(result.run_id, str(out / "training_log.json"))
    click.echo(f"best val acc {100 * result.best_val_acc:.2f}% at epoch {result.best_epoch}")


def _restore(weights: str, opts: Dict[str, Any], seed: int, default_classes: int):  # type: ignore[no-untyped-def]
    config = _model_config(opts, seed, default_classes)
    if not Path(weights).exists():
        raise click.BadParameter(f"{weights} does not exist", param_hint="--weights")
    return config, load_weights(weights, config)


@cli.command("eval")
@dataset_options
@model_options
@click.option("--weights", type=click.Path(dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True)
@click.option("--pose-index", "pose_indexes", type=(click.Path(dir_okay=False), int), multiple=True)
@click.option("--seed", type=int, default=0, show_default=True)
@output_option
def eval_command(dataset: str, data_path: str, votes_path: Optional[str], schema_name: Optional[str], weights: str,
                 split: str, pose_indexes: Sequence[Tuple[str, int]], seed: int, output_dir: str,
                 **kwargs: Any) -> None:
    """Accuracy, per-pose breakdown, ID, Var and confusion matrices."""
    schema = _schema_for(dataset, schema_name)
    config, model = _restore(weights, _split_model_opts(kwargs), seed, len(schema))
    samples = _load(dataset, data_path, votes_path, config.input_channels)
    if split != "all":
        samples = select_split(samples, split)  # type: ignore[arg-type]
        if not samples:
            raise DatasetError(f"no samples in the {split!r} split of {data_path}; pass --split all")
    if pose_indexes:
        samples = tag_subsets(samples, [pose_subset(samples, index, threshold) for index, threshold in pose_indexes])
    report, matrices = evaluate(model, samples, schema)

    out = Path(output_dir)
    CommandConfig(subcommand="eval", output_dir=output_dir, seed=seed, dataset=dataset, dataset_path=data_path,
                  votes_path=votes_path, schema_name=schema.name, model=config,
                  extra={"weights": weights, "split": split}).write()
    (out / "metrics.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "confusion.json").write_text(
        json.dumps({group: cm.to_dict() for group, cm in matrices.items()}, indent=2), encoding="utf-8"
    )
    for group, matrix in matrices.items():
        safe = group.replace(">", "gt").replace("-", "m")
        (out / f"confusion_{safe}.txt").write_text(matrix.to_text(), encoding="utf-8")
    click.echo(report.to_text())


@cli.command()
@dataset_options
@model_options
@click.option("--weights", type=click.Path(dir_okay=False), required=True)
@click.option("--sample", "sample_ids", multiple=True, help="source_id to explain (repeatable; default: first sample).")
@click.option("--target-class", type=int, default=None, help="Class to explain (default: the true label).")
@click.option("--layer", default="block4.prepool", show_default=True)
@click.option("--format", "image_format", type=click.Choice(["png", "pgm"]), default="png", show_default=True)
@click.option("--alpha", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True,
              help="Heatmap weight in the colour overlay.")
@click.option("--seed", type=int, default=0, show_default=True)
@output_option
def gradcam(dataset: str, data_path: str, votes_path: Optional[str], schema_name: Optional[str], weights: str,
            sample_ids: Sequence[str], target_class: Optional[int], layer: str, image_format: str, alpha: float,
            seed: int, output_dir: str, **kwargs: Any) -> None:
    """Grad-CAM heatmaps with JSON sidecars and colour overlays."""
    schema = _schema_for(dataset, schema_name)
    config, model = _restore(weights, _split_model_opts(kwargs), seed, len(schema))
    samples = _load(dataset, data_path, votes_path, config.input_channels)
    by_id = {s.source_id: s for s in samples}
    missing = [ident for ident in sample_ids if ident not in by_id]
    if missing:
        raise DatasetError(f"unknown sample ids {missing}")
    chosen = [by_id[ident] for ident in sample_ids] or samples[:1]

    out = Path(output_dir)
    CommandConfig(subcommand="gradcam", output_dir=output_dir, seed=seed, dataset=dataset, dataset_path=data_path,
                  votes_path=votes_path, schema_name=schema.name, model=config,
                  extra={"weights": weights, "layer": layer, "alpha": alpha,
                         "samples": [s.source_id for s in chosen]}).write()
    for sample in chosen:
        target = sample.label if target_class is None else target_class
        heatmap = grad_cam(model, sample.image, target, layer=layer, source_id=sample.source_id)
        stem = f"{sample.source_id}_c{target}"
        path = save_heatmap(heatmap, out / "heatmaps", stem, image_format)
        save_overlay(heatmap, sample.image, out / "heatmaps", stem, alpha)
        click.echo(f"{sample.source_id}: {path}{' (zero gradient)' if heatmap.zero_gradient else ''}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes instead of raising."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="lanmsff", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_RUNTIME
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except (ValidationError, ConfigurationError) as exc:
        click.echo(f"invalid configuration: {exc}", err=True)
        return EXIT_USAGE
    except DatasetError as exc:
        click.echo(f"dataset error: {exc}", err=True)
        return EXIT_DATA
    except LanmsffError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    except (OSError, SQLAlchemyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    sys.exit(run())
