"""
Command-line interface for the merging pipeline.

Subcommands: synth, prepare, tune, train-gbdt, train-qrf, predict, run,
report. Every command except report writes a manifest.json that can be
passed back as --config to replay it.
"""

import argparse
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src import __version__
from src.config import ModelChoice, derive_seed, load_config_file, settings
from src.data import (
    GridSpec,
    bilinear_regrid,
    load_grid,
    load_stations,
    write_grid,
    write_stations,
)
from src.errors import DataError, InvariantError, UsageError
from src.experiment import (
    ExperimentConfig,
    FoldAccessLog,
    TuningResult,
    gbdt_key,
    predict_models,
    refit,
    run_experiment,
    train_models,
    tune_gbdt,
)
from src.features import (
    SampleTable,
    build_samples,
    read_samples,
    split_folds,
    write_samples,
)
from src.gbdt import GBDTConfig, load_gbdt, save_gbdt
from src.qrf import load_qrf, save_qrf
from src.synthetic import (
    IMERG_GRID,
    PERSIANN_GRID,
    SyntheticConfig,
    generate_synthetic,
    write_truth,
)

# Configure logger
logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class GridsConfig(BaseModel):
    """Grids of the two products and the common target grid."""

    model_config = ConfigDict(frozen=True)

    persiann: GridSpec = PERSIANN_GRID
    imerg: GridSpec = IMERG_GRID
    target: Optional[GridSpec] = None

    @property
    def target_grid(self) -> GridSpec:
        return self.target or self.persiann


class RunConfig(BaseModel):
    """Everything a command needs; one master seed drives all randomness."""

    model_config = ConfigDict(frozen=True)

    seed: int = Field(default_factory=lambda: settings.seed, ge=0)
    synthetic: SyntheticConfig = SyntheticConfig()
    grids: GridsConfig = GridsConfig()
    experiment: ExperimentConfig = ExperimentConfig()

    def synthetic_config(self) -> SyntheticConfig:
        return self.synthetic.model_copy(
            update={
                "seed": self.seed,
                "persiann_grid": self.grids.persiann,
                "imerg_grid": self.grids.imerg,
            }
        )

    def experiment_config(self) -> ExperimentConfig:
        return self.experiment.model_copy(update={"seed": self.seed})


class RunManifest(BaseModel):
    """Record of one command invocation."""

    manifest_version: int = MANIFEST_VERSION
    command: str
    config_path: Optional[str] = None
    seed: int
    seeds: Dict[str, int]
    inputs: Dict[str, Any] = {}
    outputs: List[str] = []
    started_at: str
    finished_at: str
    software_version: str = __version__
    config: Dict[str, Any]


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors reported as exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _parse_taus(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid tau list: {text}") from e


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Read --config (if any) and apply flag overrides; flags win."""
    raw: Dict[str, Any] = {}
    if getattr(args, "config", None):
        raw = load_config_file(args.config)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    experiment = dict(raw.get("experiment", {}))
    if getattr(args, "tau", None):
        experiment["tau_levels"] = args.tau
    if getattr(args, "models", None):
        experiment["models"] = args.models
    raw["experiment"] = experiment
    return RunConfig.model_validate(raw)


def _seeds(run: RunConfig) -> Dict[str, int]:
    n_levels = len(run.experiment.tau_levels)
    seeds = {
        "synthetic": derive_seed(run.seed, "synthetic"),
        "folds": derive_seed(run.seed, "folds"),
        "qrf": derive_seed(run.seed, "qrf"),
    }
    for t in range(n_levels):
        seeds[f"gbdt_{t}"] = derive_seed(run.seed, "gbdt", t)
    return seeds


@contextmanager
def staged_output(out_dir: Path) -> Iterator[Path]:
    """
    Yield a scratch directory whose files move into ``out_dir`` on success.

    On failure the scratch directory is removed and ``out_dir`` is left as
    it was.
    """
    out_dir = Path(out_dir)
    parent = out_dir.parent
    parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".staging-", dir=parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in sorted(scratch.iterdir()):
        shutil.move(str(item), str(out_dir / item.name))
    shutil.rmtree(scratch, ignore_errors=True)


def _write_manifest(
    scratch: Path,
    args: argparse.Namespace,
    run: RunConfig,
    started_at: str,
    inputs: Dict[str, Any],
    outputs: List[str],
) -> None:
    manifest = RunManifest(
        command=args.command,
        config_path=str(args.config) if getattr(args, "config", None) else None,
        seed=run.seed,
        seeds=_seeds(run),
        inputs=inputs,
        outputs=sorted(outputs + ["manifest.json"]),
        started_at=started_at,
        finished_at=_now(),
        config=run.model_dump(mode="json"),
    )
    (scratch / "manifest.json").write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2), encoding="utf-8"
    )


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Write a synthetic station table, product grids and truth quantiles."""
    started = _now()
    dataset = generate_synthetic(run.synthetic_config())
    with staged_output(args.out) as scratch:
        write_stations(dataset.stations, scratch / "stations.csv")
        write_grid(dataset.persiann + dataset.imerg, scratch / "grids.csv")
        write_truth(dataset.truth, scratch / "truth.csv", run.experiment.tau_levels)
        outputs = ["stations.csv", "grids.csv", "truth.csv"]
        _write_manifest(scratch, args, run, started, {}, outputs)
    logger.info(f"Wrote synthetic dataset to {args.out}")
    return outputs


def _load_products(paths: List[str], grids: GridsConfig):
    target = grids.target_grid
    products = {}
    for product_id, spec in (("persiann", grids.persiann), ("imerg", grids.imerg)):
        fields = []
        for path in paths:
            fields.extend(load_grid(path, spec, product_id=product_id))
        if spec != target:
            fields = [bilinear_regrid(f, target) for f in fields]
        products[product_id] = fields
    return products


def cmd_prepare(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Build the sample table with fold assignments."""
    started = _now()
    stations = load_stations(args.stations)
    products = _load_products(args.grids, run.grids)
    samples = build_samples(stations, products["persiann"], products["imerg"])
    folds = split_folds(len(samples), 3, derive_seed(run.seed, "folds"))
    samples.fold_index = folds.fold_index
    print(
        f"samples: {len(samples)}, dropped station-days: {samples.drop_count}, "
        f"fold sizes: {folds.sizes()}",
        file=sys.stderr,
    )
    with staged_output(args.out) as scratch:
        write_samples(samples, scratch / "samples.csv")
        inputs = {
            "stations": str(args.stations),
            "grids": [str(p) for p in args.grids],
            "drop_count": samples.drop_count,
            "fold_sizes": folds.sizes(),
        }
        _write_manifest(scratch, args, run, started, inputs, ["samples.csv"])
    return ["samples.csv"]


def _read_samples(args: argparse.Namespace) -> SampleTable:
    return read_samples(args.samples)


def cmd_tune(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Grid-search boosting configurations and record the choices."""
    started = _now()
    samples = _read_samples(args)
    config = run.experiment_config()
    if config.fixed_params is not None:
        raise UsageError("tune has nothing to do when fixed_params is set")
    results = tune_gbdt(samples, config, FoldAccessLog(), args.threads)
    tuning = {f"{tau:g}": result.summary() for tau, result in results.items()}
    with staged_output(args.out) as scratch:
        (scratch / "tuning.json").write_text(
            json.dumps(tuning, indent=2, sort_keys=True), encoding="utf-8"
        )
        inputs = {"samples": str(args.samples)}
        _write_manifest(scratch, args, run, started, inputs, ["tuning.json"])
    return ["tuning.json"]


def _tuned_from_file(path: str, tau: float) -> TuningResult:
    tuning = json.loads(Path(path).read_text(encoding="utf-8"))
    key = f"{tau:g}"
    if key not in tuning:
        if len(tuning) != 1:
            raise DataError(f"{path} has no configuration for tau={key}")
        key = next(iter(tuning))
    entry = tuning[key]
    config = GBDTConfig(**{**entry["config"], "tau": tau})
    return TuningResult(config, entry["best_iteration"], entry.get("valid_score"), [])


def cmd_train_gbdt(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Train one boosted model per level and save them as JSON."""
    started = _now()
    samples = _read_samples(args)
    config = run.experiment_config().model_copy(update={"models": ModelChoice.GBDT})
    if args.tuning:
        log = FoldAccessLog()
        train = log.take(samples, [0, 1], "training")
        models = {
            gbdt_key(tau): refit(train, _tuned_from_file(args.tuning, tau))
            for tau in config.tau_levels
        }
    else:
        models, _ = train_models(samples, config, n_jobs=args.threads)

    outputs = []
    with staged_output(args.out) as scratch:
        for tau in config.tau_levels:
            name = f"gbdt_tau_{tau:g}.json"
            save_gbdt(models[gbdt_key(tau)], scratch / name)
            outputs.append(name)
        inputs = {"samples": str(args.samples), "tuning": args.tuning}
        _write_manifest(scratch, args, run, started, inputs, outputs)
    return outputs


def cmd_train_qrf(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Train the forest on folds 0 and 1 and save it as JSON."""
    started = _now()
    samples = _read_samples(args)
    config = run.experiment_config().model_copy(update={"models": ModelChoice.QRF})
    models, _ = train_models(samples, config, n_jobs=args.threads)
    with staged_output(args.out) as scratch:
        save_qrf(models["qrf"], scratch / "qrf.json")
        inputs = {"samples": str(args.samples)}
        _write_manifest(scratch, args, run, started, inputs, ["qrf.json"])
    return ["qrf.json"]


def _load_models(model_dir: Path, taus: List[float]) -> Dict[str, Any]:
    models: Dict[str, Any] = {}
    for tau in taus:
        path = model_dir / f"gbdt_tau_{tau:g}.json"
        if path.exists():
            models[gbdt_key(tau)] = load_gbdt(path)
    if (model_dir / "qrf.json").exists():
        models["qrf"] = load_qrf(model_dir / "qrf.json")
    if not models:
        raise FileNotFoundError(f"No saved models in {model_dir}")
    return models


def cmd_predict(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Predict one fold with saved models; one column per model and level."""
    started = _now()
    samples = _read_samples(args)
    taus = run.experiment.tau_levels
    models = _load_models(Path(args.model_dir), taus)
    rows = np.flatnonzero(samples.fold_index == args.fold)
    if rows.size == 0:
        raise DataError(f"fold {args.fold} is empty")
    subset = samples.subset(rows)

    predictions = predict_models(models, subset.features, taus)
    frame = pd.DataFrame(
        {
            "station_id": subset.station_id,
            "date": pd.to_datetime(subset.date).strftime("%Y-%m-%d"),
            "target": subset.target,
        }
    )
    for name, matrix in predictions.items():
        for t, tau in enumerate(taus):
            frame[f"{name}_q{tau:g}"] = matrix[:, t]

    with staged_output(args.out) as scratch:
        frame.to_csv(scratch / "predictions.csv", index=False, float_format="%.17g")
        inputs = {
            "samples": str(args.samples),
            "model_dir": str(args.model_dir),
            "fold": args.fold,
        }
        _write_manifest(scratch, args, run, started, inputs, ["predictions.csv"])
    return ["predictions.csv"]


def _truth_oracle(path: str):
    truth = pd.read_csv(path, dtype={"station_id": str})
    truth["date"] = pd.to_datetime(truth["date"]).dt.strftime("%Y-%m-%d")
    truth = truth.set_index(["station_id", "date"])

    def oracle(test: SampleTable, tau: float) -> np.ndarray:
        column = f"q_{tau:g}"
        if column not in truth.columns:
            raise DataError(f"truth table has no column {column}")
        keys = pd.MultiIndex.from_arrays(
            [test.station_id, pd.to_datetime(test.date).strftime("%Y-%m-%d")]
        )
        rows = truth.index.get_indexer(keys)
        if np.any(rows < 0):
            raise DataError("truth table does not cover every test sample")
        return truth[column].to_numpy(np.float64)[rows]

    return oracle


def cmd_run(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Full protocol: tune, train, test and write the report."""
    started = _now()
    samples = _read_samples(args)
    oracle = _truth_oracle(args.oracle) if args.oracle else None
    report = run_experiment(samples, run.experiment_config(), args.threads, oracle)
    with staged_output(args.out) as scratch:
        outputs = [p.name for p in report.write(scratch)]
        inputs = {"samples": str(args.samples), "oracle": args.oracle}
        _write_manifest(scratch, args, run, started, inputs, outputs)
    return outputs


def cmd_report(args: argparse.Namespace, run: RunConfig) -> List[str]:
    """Print the per-level skill summary of a finished run to standard output."""
    path = Path(args.run_dir) / "scores.csv"
    if not path.exists():
        raise FileNotFoundError(f"No scores.csv in {args.run_dir}")
    scores = pd.read_csv(path)
    shown = scores[scores["stratum"] == args.stratum].drop(columns="stratum")
    print(shown.to_string(index=False))
    return []


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "tune": cmd_tune,
    "train-gbdt": cmd_train_gbdt,
    "train-qrf": cmd_train_qrf,
    "predict": cmd_predict,
    "run": cmd_run,
    "report": cmd_report,
}


def build_parser() -> ArgumentParser:
    """Build the command-line parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="TOML/JSON run config or manifest")
    common.add_argument("--seed", type=int, default=None, help="Master seed")
    common.add_argument(
        "--threads",
        type=int,
        default=settings.threads,
        help="Parallel workers (default: QUANTMERGE_THREADS)",
    )
    common.add_argument(
        "--models",
        choices=[m.value for m in ModelChoice],
        default=None,
        help="Learners to train",
    )
    common.add_argument(
        "--tau", type=_parse_taus, default=None, help="Comma-separated levels"
    )

    parser = ArgumentParser(
        prog="quantmerge",
        description="Quantile merging of satellite precipitation and gauges",
    )
    sub = parser.add_subparsers(
        dest="command", required=True, parser_class=ArgumentParser
    )

    def add(name: str, help_text: str, out: bool = True) -> argparse.ArgumentParser:
        command = sub.add_parser(name, parents=[common], help=help_text)
        if out:
            command.add_argument(
                "--out",
                type=str,
                default=None,
                help="Output dir (default: QUANTMERGE_OUTPUT_DIR/<command>)",
            )
        return command

    add("synth", "Generate a synthetic dataset")

    prepare = add("prepare", "Build the sample table")
    prepare.add_argument("--stations", required=True, help="Station table")
    prepare.add_argument("--grids", nargs="+", required=True, help="Grid table(s)")

    for name, help_text in (
        ("tune", "Grid-search boosting configurations"),
        ("train-gbdt", "Train boosted models"),
        ("train-qrf", "Train the forest"),
        ("predict", "Predict with saved models"),
        ("run", "Run the full protocol"),
    ):
        command = add(name, help_text)
        command.add_argument("--samples", required=True, help="Sample table")
        if name == "train-gbdt":
            command.add_argument("--tuning", default=None, help="tuning.json to reuse")
        if name == "predict":
            command.add_argument("--model-dir", required=True, help="Saved models")
            command.add_argument("--fold", type=int, default=2, help="Fold to predict")
        if name == "run":
            command.add_argument(
                "--oracle", default=None, help="Score truth.csv quantiles instead"
            )

    report = add("report", "Print a run's skill summary", out=False)
    report.add_argument("run_dir", help="Output directory of a run")
    report.add_argument(
        "--stratum", choices=["all", "zero", "positive"], default="all"
    )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    logging.basicConfig(
        level=settings.log_level.value,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "out", "") is None:
            args.out = str(Path(settings.output_dir) / args.command)
        run = load_run_config(args)
        COMMANDS[args.command](args, run)
    except UsageError as e:
        logger.error(f"Usage error: {str(e)}")
        return EXIT_USAGE
    except InvariantError as e:
        logger.error(f"Internal invariant violated: {str(e)}")
        return EXIT_INVARIANT
    except (DataError, ValidationError, ValueError, FileNotFoundError, OSError) as e:
        logger.error(f"Error in {args.command}: {str(e)}")
        return EXIT_DATA
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {str(e)}")
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
