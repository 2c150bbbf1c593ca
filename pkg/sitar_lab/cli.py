"""
Command-line entry point.

    sitar-lab build-dataset   write train/val/test_in/test_ood containers + stats
    sitar-lab train           one training run -> runs/<name>/
    sitar-lab sweep           one run per grid value (and seed), aggregated CSVs
    sitar-lab traverse        latent traversal strips + shortcut scores for a run
    sitar-lab verify-theorem  Monte-Carlo check of the Jacobian-penalty expansion

Exit status: 0 success, 1 usage or configuration error, 2 run failure,
3 inconclusive verification.
"""

from __future__ import annotations

import argparse
import logging
import math
import multiprocessing
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Final, NoReturn, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .config.presets import get_sweep_grid, parse_sweep_value, sweep_override
from .config.settings import (
    ExperimentConfig,
    get_default_preset,
    get_log_level,
    get_runs_dir,
    load_config_file,
    parse_overrides,
    resolve_experiment_config,
)
from .core.checkpoint import load_checkpoint, save_checkpoint
from .core.errors import SitarError
from .core.theory import (
    DEFAULT_ALPHA_GRID,
    ExactnessRow,
    ScalingReport,
    Verdict,
    check_cubic,
    check_linear_consistency,
    make_case,
    verify_scaling,
)
from .core.trainer import evaluate, make_model, train, write_metrics_csv
from .core.traversal import probe_color_dimension, split_weights, traverse_latents, write_pixmap
from .domain.colormnist import ColorMNISTConfig, build_splits
from .domain.container import load_splits, save_splits, write_stats_csv
from .domain.grouped import SplitKind, majority_only_split
from .domain.idx import load_mnist_split
from .domain.metrics import write_rows_csv

logger = logging.getLogger(__name__)

EXIT_OK: Final[int] = 0
EXIT_USAGE: Final[int] = 1
EXIT_RUN_FAILURE: Final[int] = 2
EXIT_INCONCLUSIVE: Final[int] = 3
LOG_FORMAT: Final[str] = "%(levelname)s | %(message)s"
EXACTNESS_RTOL: Final[float] = 0.02
SYNTHETIC_DEFAULT_SIZE: Final[int] = 4096


class RunManifest(BaseModel):
    """What produced a run directory and what it contains."""

    model_config = ConfigDict(extra="forbid")

    command: str
    config: dict[str, Any]
    revision: str
    seed: int
    started_at: str
    finished_at: str | None = None
    outputs: dict[str, str] = Field(default_factory=dict)
    summary: dict[str, Any] = Field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        """Write ``manifest.json``; every listed output must already exist."""
        missing = [name for name, rel in self.outputs.items() if not (directory / rel).exists()]
        if missing:
            raise SitarError(f"manifest lists outputs that were not written: {missing}")
        target = directory / "manifest.json"
        target.write_text(self.model_dump_json(indent=2) + "\n")
        return target


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        return out.stdout.strip() or f"sitar-lab {__version__}"
    except (OSError, subprocess.SubprocessError):
        return f"sitar-lab {__version__}"


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(level=(level or get_log_level()).upper(), format=LOG_FORMAT, force=True)


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


# ------------------------------------------------------------ build-dataset
def cmd_build_dataset(args: argparse.Namespace) -> int:
    started = _now()
    config = ColorMNISTConfig(
        p_d=args.p_d, p_c_in=args.p_c_in, p_c_out=args.p_c_out, seed=args.seed
    )
    if args.synthetic:
        n = args.n if args.n is not None else SYNTHETIC_DEFAULT_SIZE
        n_test = args.n_test if args.n_test is not None else max(n // 4, 1)
        splits = build_splits(n, n_test, config, size=args.image_size)
        source = "synthetic"
    else:
        train_raw = load_mnist_split(args.mnist_dir, "train")
        test_raw = load_mnist_split(args.mnist_dir, "test")
        if args.n is not None:
            train_raw = train_raw.head(args.n)
        if args.n_test is not None:
            test_raw = test_raw.head(args.n_test)
        splits = build_splits(train_raw, test_raw, config)
        source = "mnist"
    if args.majority_only:
        for kind in (SplitKind.TRAIN, SplitKind.VAL):
            splits[kind] = majority_only_split(splits[kind])

    out = Path(args.out)
    written = save_splits(out, splits)
    stats = write_stats_csv(out / "stats.csv", {k.value: v for k, v in splits.items()})
    outputs = {name: path.name for name, path in written.items()}
    outputs["stats"] = stats.name
    RunManifest(
        command="build-dataset",
        config={
            **config.model_dump(),
            "source": source,
            "n": args.n,
            "n_test": args.n_test,
            "majority_only": args.majority_only,
        },
        revision=source_revision(),
        seed=args.seed,
        started_at=started,
        finished_at=_now(),
        outputs=outputs,
    ).write(out)
    logger.info("Dataset written to %s", out)
    return EXIT_OK


# -------------------------------------------------------------------- train
_CONFIG_FIELDS: Final[tuple[str, ...]] = (
    "alpha",
    "beta",
    "lambda_cons",
    "latent_dim",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "isotropic",
    "balanced_correlation",
    "v_momentum",
    "patience",
    "conv_channels",
    "hidden_units",
    "majority_only",
    "dataset_dir",
    "seed",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("experiment configuration")
    group.add_argument("--preset", default=None, help="named hyperparameter preset")
    group.add_argument("--config", default=None, help="flat key=value config file")
    group.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE"
    )
    group.add_argument("--data", dest="dataset_dir", default=None, help="dataset directory")
    group.add_argument("--alpha", type=float, default=None)
    group.add_argument("--beta", type=float, default=None)
    group.add_argument("--lambda", dest="lambda_cons", type=float, default=None)
    group.add_argument("--latent-dim", type=int, default=None)
    group.add_argument("--epochs", type=int, default=None)
    group.add_argument("--batch-size", type=int, default=None)
    group.add_argument("--lr", dest="learning_rate", type=float, default=None)
    group.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    group.add_argument("--v-momentum", type=float, default=None)
    group.add_argument("--patience", type=int, default=None)
    group.add_argument("--conv-channels", default=None, help="comma-separated widths")
    group.add_argument("--hidden-units", type=int, default=None)
    for flag, dest in (
        ("--isotropic", "isotropic"),
        ("--balanced-correlation", "balanced_correlation"),
        ("--majority-only", "majority_only"),
    ):
        group.add_argument(flag, dest=dest, action="store_const", const=True, default=None)


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    file_values: dict[str, Any] = load_config_file(args.config) if args.config else {}
    flags = {field: getattr(args, field, None) for field in _CONFIG_FIELDS}
    flags.update(parse_overrides(args.overrides))
    return resolve_experiment_config(args.preset or get_default_preset(), file_values, flags)


def run_training(config: ExperimentConfig, run_dir: Path, command: str = "train") -> dict[str, Any]:
    """Train one configuration into ``run_dir``; returns the best-checkpoint summary."""
    started = _now()
    splits = load_splits(config.dataset_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    trajectory = run_dir / "v_trajectory.csv"
    trajectory.unlink(missing_ok=True)

    state = train(config, splits, v_trajectory_path=trajectory)
    outputs = {"metrics": "metrics.csv", "checkpoint": "checkpoint.bin"}
    write_metrics_csv(run_dir / "metrics.csv", state.history)
    save_checkpoint(
        run_dir / "checkpoint.bin",
        state.model.state_dict(),
        metadata={"config": config.model_dump_json(), "best_epoch": str(state.best_epoch)},
    )
    if trajectory.exists():
        outputs["v_trajectory"] = trajectory.name

    summary: dict[str, Any] = {"best_epoch": state.best_epoch, "epochs_run": state.epoch}
    if state.best_state is not None:
        summary["val_balanced_acc"] = state.best_metric
    for kind, key in ((SplitKind.TEST_IN, "id"), (SplitKind.TEST_OOD, "ood")):
        if kind in splits:
            metrics = evaluate(state.model, splits[kind])
            summary[f"{key}_acc"] = metrics.micro
            summary[f"{key}_worst_group"] = metrics.worst_group
    RunManifest(
        command=command,
        config=config.model_dump(mode="json"),
        revision=source_revision(),
        seed=config.seed,
        started_at=started,
        finished_at=_now(),
        outputs=outputs,
        summary=summary,
    ).write(run_dir)
    logger.info(
        "Run %s finished: id_acc=%s ood_acc=%s",
        run_dir,
        summary.get("id_acc"),
        summary.get("ood_acc"),
    )
    return summary


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    name = args.name or f"train-seed{config.seed}"
    run_training(config, get_runs_dir() / name)
    return EXIT_OK


# -------------------------------------------------------------------- sweep
def _sweep_point(job: tuple[dict[str, Any], str, str]) -> dict[str, Any]:
    config_data, run_dir, log_level = job
    configure_logging(log_level)
    config = ExperimentConfig.model_validate(config_data)
    try:
        summary = run_training(config, Path(run_dir), command="sweep")
        return {"status": "ok", **summary}
    except (SitarError, OSError, ValueError) as exc:
        logger.warning("Sweep point %s failed: %s", run_dir, exc)
        return {"status": f"failed: {exc}"}


def cmd_sweep(args: argparse.Namespace) -> int:
    base = config_from_args(args)
    axis = args.axis
    values = (
        [parse_sweep_value(axis, raw.strip()) for raw in args.values.split(",") if raw.strip()]
        if args.values
        else list(get_sweep_grid(axis))
    )
    seeds = _int_list(args.seeds) if args.seeds else [base.seed]
    sweep_dir = get_runs_dir() / (args.name or f"sweep-{axis}")
    log_level = (args.log_level or get_log_level()).upper()

    jobs: list[tuple[dict[str, Any], str, str]] = []
    keys: list[tuple[Any, int]] = []
    for value in values:
        for seed in seeds:
            config = base.model_copy(update={**sweep_override(axis, value), "seed": seed})
            ExperimentConfig.model_validate(config.model_dump())
            run_dir = sweep_dir / f"{axis}={value}" / f"seed={seed}"
            jobs.append((config.model_dump(mode="json"), str(run_dir), log_level))
            keys.append((value, seed))

    if args.workers > 1:
        with multiprocessing.get_context("spawn").Pool(args.workers) as pool:
            results = pool.map(_sweep_point, jobs)
    else:
        results = [_sweep_point(job) for job in jobs]

    rows: list[dict[str, Any]] = []
    for (value, seed), result in zip(keys, results):
        rows.append(
            {
                "axis": axis,
                "value": value,
                "seed": seed,
                "status": result.get("status", "failed"),
                "id_acc": result.get("id_acc", math.nan),
                "ood_acc": result.get("ood_acc", math.nan),
                "worst_group": result.get("ood_worst_group", math.nan),
                "val_balanced_acc": result.get("val_balanced_acc", math.nan),
            }
        )
        logger.info("Sweep point %s=%s seed=%d: %s", axis, value, seed, rows[-1]["status"])
    write_rows_csv(sweep_dir / "sweep.csv", rows)
    write_rows_csv(sweep_dir / "sweep_summary.csv", summarise_sweep(rows))
    failures = sum(1 for row in rows if row["status"] != "ok")
    if failures:
        logger.warning("%d of %d sweep points failed", failures, len(rows))
    return EXIT_RUN_FAILURE if failures == len(rows) else EXIT_OK


def summarise_sweep(rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Mean and standard deviation over seeds per grid value (successful runs)."""
    summary: list[dict[str, Any]] = []
    for value in dict.fromkeys(row["value"] for row in rows):
        ok = [r for r in rows if r["value"] == value and r["status"] == "ok"]
        entry: dict[str, Any] = {"value": value, "runs": len(ok)}
        for metric in ("id_acc", "ood_acc", "worst_group"):
            data = np.array([r[metric] for r in ok], dtype=np.float64)
            entry[f"{metric}_mean"] = float(data.mean()) if data.size else math.nan
            entry[f"{metric}_std"] = float(data.std()) if data.size else math.nan
        summary.append(entry)
    return summary


# ----------------------------------------------------------------- traverse
def cmd_traverse(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    checkpoint = run_dir / "checkpoint.bin"
    if not checkpoint.exists():
        raise FileNotFoundError(f"no checkpoint at {checkpoint}")
    tensors, metadata = load_checkpoint(checkpoint)
    config = ExperimentConfig.model_validate_json(metadata["config"])
    splits = load_splits(args.data or config.dataset_dir)
    probe_split = splits.get(SplitKind.TEST_IN, splits[SplitKind.VAL])
    if not 0 <= args.index < len(probe_split):
        logger.error(
            "--index %d is out of range for split %s with %d examples",
            args.index,
            probe_split.split.value,
            len(probe_split),
        )
        return EXIT_USAGE

    model = make_model(config, probe_split.image_shape)
    model.load_state_dict(tensors)
    out = Path(args.out) if args.out else run_dir / "traversals"
    image = probe_split.batch_images(np.array([args.index]))[0]
    for strip in traverse_latents(model, image, k=args.k, steps=args.steps):
        write_pixmap(out / f"dim{strip.dim + 1:02d}.ppm", strip.as_image())

    weights = split_weights(model, splits[SplitKind.TRAIN])
    write_rows_csv(
        out / "v.csv",
        [{"dim": j + 1, "v": float(value)} for j, value in enumerate(weights.v)],
    )
    colour_dim = int(np.argmax(weights.v))
    probes = probe_split.batch_images(np.arange(min(args.probes, len(probe_split))))
    probe = probe_color_dimension(model, probes, colour_dim, k=args.k, steps=args.steps)
    logger.info(
        "Dimension %d has the largest shortcut score %.3f; sweeping it swaps colour in "
        "%.0f%% of %d probes, prediction unchanged in %.0f%%",
        colour_dim + 1,
        weights.v[colour_dim],
        100 * probe.color_flip_rate,
        probe.probes,
        100 * probe.prediction_stable_rate,
    )
    return EXIT_OK


# ----------------------------------------------------------- verify-theorem
def _print_exactness(title: str, rows: Sequence[ExactnessRow]) -> bool:
    print(title)
    print(f"{'alpha':>10} {'estimate':>14} {'expected':>14} {'rel_err':>10}")
    for row in rows:
        print(
            f"{row.alpha:>10.4g} {row.estimate:>14.6e} {row.expected:>14.6e} "
            f"{row.rel_error:>10.3e}"
        )
    return all(row.rel_error <= EXACTNESS_RTOL for row in rows)


def _print_scaling(report: ScalingReport) -> None:
    print(
        f"{'alpha':>8} {'mc':>13} {'penalty':>13} {'curvature':>13} "
        f"{'residual':>11} {'stderr':>10} {'bare_resid':>11} kept"
    )
    for p in report.points:
        print(
            f"{p.alpha:>8.4g} {p.mc_value:>13.6e} {p.penalty:>13.6e} "
            f"{p.curvature:>13.6e} {p.residual:>11.3e} {p.stderr:>10.2e} "
            f"{p.residual_bare:>11.3e} {'y' if p.kept else 'n'}"
        )
    slope = "n/a" if report.slope is None else f"{report.slope:.3f}"
    bare = "n/a" if report.slope_bare is None else f"{report.slope_bare:.3f}"
    print(f"fitted slope {slope} (bare theorem residual slope {bare}): {report.verdict.value}")
    if report.message:
        print(f"  {report.message}")


def cmd_verify_theorem(args: argparse.Namespace) -> int:
    verdicts: list[Verdict] = []
    if args.case == "cubic":
        ok = _print_exactness(
            "cubic map z**3: Monte-Carlo consistency vs Gaussian-moment closed form",
            check_cubic(n_samples=args.samples or 100_000, seed=args.seed),
        )
        verdicts.append(Verdict.PASS if ok else Verdict.FAIL)
    else:
        case = make_case(args.case, seed=args.seed, lambda_cons=args.lambda_cons)
        if args.case == "linear":
            ok = _print_exactness(
                "linear map: consistency term vs alpha^2 sum v_i^2 |A_i|^2",
                check_linear_consistency(case, n_samples=100_000, seed=args.seed),
            )
            verdicts.append(Verdict.PASS if ok else Verdict.FAIL)
        alphas = _float_list(args.alphas) if args.alphas else list(DEFAULT_ALPHA_GRID)
        report = verify_scaling(
            case.f,
            case.z,
            case.y,
            case.v,
            case.lambda_cons,
            alpha_grid=alphas,
            n_samples=args.samples or 1_000_000,
            seed=args.seed,
            workers=args.workers,
        )
        _print_scaling(report)
        verdicts.append(report.verdict)

    if Verdict.FAIL in verdicts:
        logger.info("verify-theorem: FAIL")
        return EXIT_RUN_FAILURE
    if Verdict.INCONCLUSIVE in verdicts:
        logger.warning("verify-theorem: INCONCLUSIVE (Monte-Carlo noise)")
        return EXIT_INCONCLUSIVE
    logger.info("verify-theorem: PASS")
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    description = __doc__.splitlines()[1] if __doc__ else None
    parser = _ArgumentParser(prog="sitar-lab", description=description)
    parser.add_argument("--log-level", default=None, help="overrides SITAR_LOG_LEVEL")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build-dataset", help="build ColorMNIST or synthetic splits")
    source = build.add_mutually_exclusive_group(required=True)
    source.add_argument("--mnist-dir", default=None, help="directory with MNIST IDX files")
    source.add_argument("--synthetic", action="store_true", help="procedural bars/blobs")
    build.add_argument("--n", type=int, default=None, help="training examples to use")
    build.add_argument("--n-test", type=int, default=None)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--p-d", type=float, default=0.25)
    build.add_argument("--p-c-in", type=float, default=0.1)
    build.add_argument("--p-c-out", type=float, default=0.9)
    build.add_argument("--image-size", type=int, default=28)
    build.add_argument("--majority-only", action="store_true")
    build.add_argument("--out", default="data")
    build.set_defaults(handler=cmd_build_dataset)

    tr = sub.add_parser("train", help="train one configuration")
    tr.add_argument("--name", default=None, help="run directory name under the runs dir")
    tr.add_argument("--seed", type=int, default=None)
    _add_config_flags(tr)
    tr.set_defaults(handler=cmd_train)

    sw = sub.add_parser("sweep", help="ablation sweep over one axis")
    sw.add_argument("--axis", required=True, choices=("alpha", "beta", "lambda", "targeting"))
    sw.add_argument("--values", default=None, help="comma-separated grid (default per axis)")
    sw.add_argument("--seeds", default=None, help="comma-separated seeds")
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--name", default=None)
    _add_config_flags(sw)
    sw.set_defaults(handler=cmd_sweep)

    tv = sub.add_parser("traverse", help="latent traversal strips for a trained run")
    tv.add_argument("--run", required=True, help="run directory with checkpoint.bin")
    tv.add_argument("--data", default=None, help="dataset directory (default: the run's)")
    tv.add_argument("--index", type=int, default=0, help="probe example index")
    tv.add_argument("--k", type=float, default=3.0)
    tv.add_argument("--steps", type=int, default=7)
    tv.add_argument("--probes", type=int, default=100)
    tv.add_argument("--out", default=None)
    tv.set_defaults(handler=cmd_traverse)

    vt = sub.add_parser("verify-theorem", help="check the second-order penalty expansion")
    vt.add_argument("--case", choices=("linear", "tanh-mlp", "cubic"), default="tanh-mlp")
    vt.add_argument("--seed", type=int, default=1)
    vt.add_argument("--samples", type=int, default=None)
    vt.add_argument("--alphas", default=None)
    vt.add_argument("--lambda", dest="lambda_cons", type=float, default=1.0)
    vt.add_argument("--workers", type=int, default=1)
    vt.set_defaults(handler=cmd_verify_theorem)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point for console script."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return int(args.handler(args))
    except ValidationError as exc:
        logger.error("Invalid configuration: %s", exc)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, SitarError):
            logger.error("%s", exc)
            return EXIT_RUN_FAILURE
        logger.error("Invalid arguments: %s", exc)
        return EXIT_USAGE
    except (SitarError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
