"""
Tuning, training and stratified evaluation on three random folds.

Fold 0 trains and fold 1 validates every grid configuration; the chosen
configuration is refit on folds 0 and 1 and both learners are scored on
fold 2. Fold 2 is never read before the test stage; every fold read is
recorded so the report can show it.
"""

import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.config import ModelChoice, derive_seed
from src.errors import DataError, InvariantError, UndefinedSkillError
from src.features import SampleTable
from src.gbdt import GBDTConfig, GBDTModel, fit_quantile_gbdt
from src.qrf import QRFConfig, fit_qrf, predict_quantiles
from src.scoring import (
    DEFAULT_TAU_LEVELS,
    as_tau,
    frequency_score,
    frequency_skill_score,
    mean_quantile_score,
    pinball_loss,
    quantile_skill_score,
)

# Configure logger
logger = logging.getLogger(__name__)

TUNE_FOLD, VALID_FOLD, TEST_FOLD = 0, 1, 2
STRATA = ("all", "zero", "positive")
CANDIDATE, REFERENCE, ORACLE = "gbdt", "qrf", "oracle"
UNDEFINED = "undefined"

Oracle = Callable[[SampleTable, float], np.ndarray]


class HyperparameterGrid(BaseModel):
    """Value sets searched for the boosted trees."""

    model_config = ConfigDict(frozen=True)

    max_depth: List[int] = [6, 8, 10]
    min_data_in_leaf: List[int] = [20, 100, 200, 500, 1000]
    learning_rate: List[float] = [0.02, 0.05, 0.1]
    num_iterations: List[int] = [400]
    num_leaves: List[int] = [20, 40, 60, 80, 100, 200, 500]

    @field_validator("*")
    @classmethod
    def non_empty(cls, values):
        if not values:
            raise ValueError("every hyperparameter needs at least one value")
        return values


class ExperimentConfig(BaseModel):
    """
    Protocol settings.

    Attributes:
        tau_levels: Quantile levels to train and score
        grid: Boosting hyperparameter grid
        qrf: Forest hyperparameters
        early_stopping_round: Patience during tuning
        n_bins: Histogram bins of the boosted trees
        tune_per_tau: Tune a configuration for every level; otherwise tune
            once at ``tuning_tau`` and reuse it
        tuning_tau: Level used when ``tune_per_tau`` is false
        fixed_params: Boosting parameters used at every level without tuning
        models: Learners to train
        seed: Master seed
    """

    model_config = ConfigDict(frozen=True)

    tau_levels: List[float] = list(DEFAULT_TAU_LEVELS)
    grid: HyperparameterGrid = HyperparameterGrid()
    qrf: QRFConfig = QRFConfig()
    early_stopping_round: int = Field(default=20, ge=0)
    n_bins: int = Field(default=255, ge=2, le=256)
    tune_per_tau: bool = True
    tuning_tau: float = Field(default=0.5, gt=0.0, lt=1.0)
    fixed_params: Optional[Dict[str, Any]] = None
    models: ModelChoice = ModelChoice.BOTH
    seed: int = Field(default=0, ge=0)

    @field_validator("tau_levels")
    @classmethod
    def check_levels(cls, values):
        if not values:
            raise ValueError("tau_levels must not be empty")
        levels = sorted({as_tau(v) for v in values})
        return levels

    def trains(self, model: str) -> bool:
        return self.models == ModelChoice.BOTH or self.models.value == model


@dataclass
class TuningResult:
    """Outcome of one grid search."""

    config: GBDTConfig
    best_iteration: int
    valid_score: Optional[float]
    scores: List[float]

    def summary(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "best_iteration": self.best_iteration,
            "valid_score": self.valid_score,
            "n_configs": len(self.scores),
        }


class FoldAccessLog:
    """Counts fold reads per stage and rejects test-fold reads before testing."""

    def __init__(self):
        self.counts: Counter = Counter()

    def take(self, samples: SampleTable, folds: Sequence[int], stage: str):
        if stage != "test" and TEST_FOLD in folds:
            raise InvariantError(f"stage '{stage}' tried to read the test fold")
        for fold in folds:
            self.counts[(stage, fold)] += 1
        rows = np.flatnonzero(np.isin(samples.fold_index, folds))
        return samples.subset(rows)

    def test_fold_reads_before_testing(self) -> int:
        return sum(
            n
            for (stage, fold), n in self.counts.items()
            if fold == TEST_FOLD and stage != "test"
        )

    def to_dict(self) -> Dict[str, int]:
        items = sorted(self.counts.items())
        return {f"{stage}:{fold}": n for (stage, fold), n in items}


@dataclass
class EvaluationReport:
    """Scores of one run and everything needed to audit it."""

    scores: pd.DataFrame
    stations: pd.DataFrame
    models: List[str]
    tau_levels: List[float]
    fold_sizes: List[int]
    drop_count: int = 0
    tuning: Dict[str, Any] = field(default_factory=dict)
    crossings: Dict[str, int] = field(default_factory=dict)
    fold_access: Dict[str, int] = field(default_factory=dict)
    point_crossings: Optional[pd.DataFrame] = None

    def summary(self) -> Dict[str, Any]:
        return {
            "models": self.models,
            "tau_levels": self.tau_levels,
            "fold_sizes": self.fold_sizes,
            "drop_count": self.drop_count,
            "tuning": self.tuning,
            "crossings": self.crossings,
            "fold_access": self.fold_access,
        }

    def write(self, out_dir) -> List[Path]:
        """
        Write scores.csv, stations.csv and summary.json into ``out_dir``.

        crossings.csv is added when boosted predictions were counted.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "scores.csv", out_dir / "stations.csv"]
        for frame, path in zip([self.scores, self.stations], paths):
            _mark_undefined(frame).to_csv(path, index=False, float_format="%.17g")
        summary_path = out_dir / "summary.json"
        summary_path.write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True), encoding="utf-8"
        )
        paths.append(summary_path)
        if self.point_crossings is not None:
            paths.append(out_dir / "crossings.csv")
            self.point_crossings.to_csv(paths[-1], index=False)
        return paths


def _mark_undefined(frame: pd.DataFrame) -> pd.DataFrame:
    """Replace NaN skill in non-empty groups by the undefined marker."""
    out = frame.copy()
    skill_columns = [c for c in out.columns if c.endswith("skill_score")]
    for column in skill_columns:
        undefined = out[column].isna() & (out["n"] > 0)
        out[column] = out[column].astype(object)
        out.loc[undefined, column] = UNDEFINED
    return out


def enumerate_grid(
    grid: HyperparameterGrid,
    tau: float,
    early_stopping_round: int = 20,
    n_bins: int = 255,
    seed: int = 0,
) -> List[GBDTConfig]:
    """
    All grid combinations with num_leaves <= 2^max_depth.

    Order: max_depth, num_leaves, min_data_in_leaf, learning_rate,
    num_iterations, each ascending as listed.
    """
    configs = []
    for depth, leaves, min_data, rate, rounds in itertools.product(
        grid.max_depth,
        grid.num_leaves,
        grid.min_data_in_leaf,
        grid.learning_rate,
        grid.num_iterations,
    ):
        if leaves > 2**depth:
            continue
        configs.append(
            GBDTConfig(
                tau=tau,
                max_depth=depth,
                num_leaves=leaves,
                min_data_in_leaf=min_data,
                learning_rate=rate,
                num_iterations=rounds,
                early_stopping_round=early_stopping_round,
                n_bins=n_bins,
                seed=seed,
            )
        )
    return configs


def _validation_run(train: SampleTable, valid: SampleTable, config: GBDTConfig):
    model = fit_quantile_gbdt(
        train.features, train.target, config, valid.features, valid.target
    )
    best = model.best_iteration
    return best, model.valid_scores[best]


def grid_search(
    train: SampleTable,
    valid: SampleTable,
    configs: Sequence[GBDTConfig],
    n_jobs: int = 1,
) -> TuningResult:
    """
    Pick the configuration with the lowest validation score.

    Args:
        train: Fold the candidates are trained on
        valid: Fold monitored for early stopping and selection
        configs: Candidates in grid order; earlier wins ties
        n_jobs: Parallel candidates

    Returns:
        TuningResult with the chosen config and its best iteration
    """
    if not configs:
        raise DataError("hyperparameter grid is empty")
    if len(train) == 0 or len(valid) == 0:
        raise DataError("tuning folds must not be empty")

    results = Parallel(n_jobs=n_jobs)(
        delayed(_validation_run)(train, valid, config) for config in configs
    )
    scores = [score for _, score in results]
    best = int(np.argmin(scores))
    logger.info(
        f"Tuned tau={configs[best].tau}: config {best + 1}/{len(configs)}, "
        f"best iteration {results[best][0]}, validation score {scores[best]:.6g}"
    )
    return TuningResult(
        config=configs[best],
        best_iteration=results[best][0],
        valid_score=scores[best],
        scores=scores,
    )


def refit(train: SampleTable, tuned: TuningResult) -> GBDTModel:
    """Retrain a tuned configuration for its best iteration count, no early stopping."""
    rounds = tuned.best_iteration
    config = tuned.config.model_copy(
        update={"num_iterations": max(1, rounds), "early_stopping_round": 0}
    )
    model = fit_quantile_gbdt(train.features, train.target, config)
    if model.best_iteration > rounds:
        model.trees = model.trees[:rounds]
        model.best_iteration = rounds
    return model


def clip_nonnegative(predictions) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(predictions, dtype=np.float64), 0.0)


def _stratum_rows(observations: np.ndarray) -> Dict[str, np.ndarray]:
    return {
        "all": np.arange(observations.size),
        "zero": np.flatnonzero(observations == 0),
        "positive": np.flatnonzero(observations > 0),
    }


def _skill(candidate: float, reference: float, score) -> float:
    try:
        return score(candidate, reference)
    except UndefinedSkillError:
        return np.nan


def _check_predictions(
    predictions: Dict[str, np.ndarray], n: int, n_levels: int
) -> None:
    for name, matrix in predictions.items():
        if matrix.shape != (n, n_levels):
            raise DataError(
                f"{name} predictions have shape {matrix.shape}, "
                f"expected ({n}, {n_levels})"
            )


def evaluate_strata(
    predictions: Dict[str, np.ndarray],
    observations: Sequence[float],
    tau_levels: Sequence[float],
) -> pd.DataFrame:
    """
    Scores per level and stratum (all, zero and positive observations).

    Args:
        predictions: Model name to (n, len(tau_levels)) prediction matrix
        observations: Observed values
        tau_levels: Levels matching the prediction columns

    Returns:
        One row per (tau, stratum) with n, each model's mean quantile score
        and frequency score, and skill of gbdt against qrf when both are
        present (NaN when undefined or the stratum is empty)
    """
    y = np.asarray(observations, dtype=np.float64)
    _check_predictions(predictions, y.size, len(tau_levels))
    both = CANDIDATE in predictions and REFERENCE in predictions
    strata = _stratum_rows(y)

    rows = []
    for t, tau in enumerate(tau_levels):
        for stratum in STRATA:
            idx = strata[stratum]
            row: Dict[str, Any] = {"tau": tau, "stratum": stratum, "n": idx.size}
            for name, matrix in predictions.items():
                if idx.size:
                    row[f"{name}_mean_quantile_score"] = mean_quantile_score(
                        matrix[idx, t], y[idx], tau
                    )
                    row[f"{name}_frequency_score"] = frequency_score(
                        matrix[idx, t], y[idx], tau
                    )
                else:
                    row[f"{name}_mean_quantile_score"] = np.nan
                    row[f"{name}_frequency_score"] = np.nan
            if both:
                row["quantile_skill_score"] = np.nan
                row["frequency_skill_score"] = np.nan
                if idx.size:
                    row["quantile_skill_score"] = _skill(
                        row[f"{CANDIDATE}_mean_quantile_score"],
                        row[f"{REFERENCE}_mean_quantile_score"],
                        quantile_skill_score,
                    )
                    row["frequency_skill_score"] = _skill(
                        row[f"{CANDIDATE}_frequency_score"],
                        row[f"{REFERENCE}_frequency_score"],
                        frequency_skill_score,
                    )
            rows.append(row)
    return pd.DataFrame(rows)


def per_station_scores(
    predictions: Dict[str, np.ndarray],
    observations: Sequence[float],
    station_ids: Sequence[str],
    tau_levels: Sequence[float],
) -> pd.DataFrame:
    """
    Mean quantile scores and skill per station and level.

    Returns:
        One row per (station_id, tau), sorted; ``quantile_skill_score`` is
        NaN exactly where the reference mean score is 0
    """
    y = np.asarray(observations, dtype=np.float64)
    stations = np.asarray(station_ids, dtype=str)
    if stations.size != y.size:
        raise DataError("station_ids and observations differ in length")
    _check_predictions(predictions, y.size, len(tau_levels))

    frames = []
    for t, tau in enumerate(tau_levels):
        frame = pd.DataFrame({"station_id": stations})
        for name, matrix in predictions.items():
            frame[f"{name}_mean_quantile_score"] = pinball_loss(
                matrix[:, t] - y, tau
            )
        grouped = frame.groupby("station_id", sort=True)
        table = grouped.mean()
        table.insert(0, "n", grouped.size())
        table.insert(0, "tau", tau)
        frames.append(table.reset_index())
    result = pd.concat(frames, ignore_index=True)

    if CANDIDATE in predictions and REFERENCE in predictions:
        result["quantile_skill_score"] = [
            _skill(c, r, quantile_skill_score)
            for c, r in zip(
                result[f"{CANDIDATE}_mean_quantile_score"],
                result[f"{REFERENCE}_mean_quantile_score"],
            )
        ]
    return result.sort_values(["station_id", "tau"], kind="stable").reset_index(
        drop=True
    )


def crossings_per_point(predictions: np.ndarray) -> np.ndarray:
    """Crossing pairs (i < j with prediction_i > prediction_j) at each point."""
    m = np.asarray(predictions, dtype=np.float64)
    per_point = np.zeros(m.shape[0], dtype=np.int64)
    for i in range(m.shape[1]):
        for j in range(i + 1, m.shape[1]):
            per_point += m[:, i] > m[:, j]
    return per_point


def count_crossings(predictions: np.ndarray) -> Dict[str, int]:
    """
    Quantile crossings of one model across ascending levels.

    Returns:
        Total crossing pairs, the number of points with at least one, and
        the largest count at a point
    """
    per_point = crossings_per_point(predictions)
    return {
        "pairs": int(per_point.sum()),
        "points": int(np.count_nonzero(per_point)),
        "max_per_point": int(per_point.max()) if per_point.size else 0,
    }


def _point_crossings(predictions: np.ndarray, test: SampleTable) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "station_id": test.station_id,
            "date": pd.to_datetime(test.date).strftime("%Y-%m-%d"),
            "crossing_pairs": crossings_per_point(predictions),
        }
    )


def _check_folds(samples: SampleTable) -> List[int]:
    if samples.fold_index is None:
        raise DataError("samples have no fold_index column")
    sizes = np.bincount(samples.fold_index, minlength=3).tolist()
    if len(sizes) != 3 or min(sizes) == 0:
        raise DataError(f"three non-empty folds are required, got sizes {sizes}")
    return sizes


def tune_gbdt(
    samples: SampleTable,
    config: ExperimentConfig,
    log: FoldAccessLog,
    n_jobs: int = 1,
) -> Dict[float, TuningResult]:
    """Choose boosting configurations for every level (fold 0 fit, fold 1 validate)."""
    if config.fixed_params is not None:
        return {}
    tune_train = log.take(samples, [TUNE_FOLD], "tuning")
    tune_valid = log.take(samples, [VALID_FOLD], "tuning")

    results = {}
    levels = config.tau_levels if config.tune_per_tau else [config.tuning_tau]
    for t, tau in enumerate(levels):
        configs = enumerate_grid(
            config.grid,
            tau,
            early_stopping_round=config.early_stopping_round,
            n_bins=config.n_bins,
            seed=derive_seed(config.seed, "gbdt", t),
        )
        results[tau] = grid_search(tune_train, tune_valid, configs, n_jobs=n_jobs)
    return results


def _tuned_for(tau, t, tuned, config: ExperimentConfig) -> TuningResult:
    seed = derive_seed(config.seed, "gbdt", t)
    if config.fixed_params is not None:
        params = {
            k: v
            for k, v in config.fixed_params.items()
            if k not in ("tau", "seed", "n_bins", "early_stopping_round")
        }
        fixed = GBDTConfig(
            tau=tau, n_bins=config.n_bins, seed=seed, early_stopping_round=0, **params
        )
        return TuningResult(fixed, fixed.num_iterations, None, [])
    result = tuned[tau] if config.tune_per_tau else tuned[config.tuning_tau]
    level_config = result.config.model_copy(update={"tau": tau, "seed": seed})
    return TuningResult(
        level_config, result.best_iteration, result.valid_score, result.scores
    )


def train_models(
    samples: SampleTable,
    config: ExperimentConfig,
    log: Optional[FoldAccessLog] = None,
    n_jobs: int = 1,
) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """
    Tune and train the configured learners on folds 0 and 1.

    Returns:
        Tuple of (models keyed "gbdt@<tau>" and "qrf", tuning summary per tau)
    """
    _check_folds(samples)
    log = log or FoldAccessLog()
    models: Dict[str, Any] = {}
    summary: Dict[str, Any] = {}

    tuned = tune_gbdt(samples, config, log, n_jobs) if config.trains("gbdt") else {}
    train = log.take(samples, [TUNE_FOLD, VALID_FOLD], "training")
    if config.trains("gbdt"):
        for t, tau in enumerate(config.tau_levels):
            choice = _tuned_for(tau, t, tuned, config)
            models[gbdt_key(tau)] = refit(train, choice)
            summary[f"{tau:g}"] = choice.summary()
    if config.trains("qrf"):
        qrf_config = config.qrf.model_copy(
            update={"seed": derive_seed(config.seed, "qrf")}
        )
        models["qrf"] = fit_qrf(train.features, train.target, qrf_config, n_jobs)
    return models, summary


def gbdt_key(tau: float) -> str:
    return f"gbdt@{tau:g}"


def predict_models(
    models: Dict[str, Any],
    features: np.ndarray,
    tau_levels: Sequence[float],
    clip: bool = True,
) -> Dict[str, np.ndarray]:
    """
    Predictions of trained models at every level.

    Boosted predictions are clipped at zero unless ``clip`` is False; forest
    predictions are nonnegative whenever the training targets are.
    """
    out = {}
    if all(gbdt_key(tau) in models for tau in tau_levels):
        raw = np.column_stack(
            [models[gbdt_key(tau)].predict(features) for tau in tau_levels]
        )
        out[CANDIDATE] = clip_nonnegative(raw) if clip else raw
    if "qrf" in models:
        out[REFERENCE] = predict_quantiles(models["qrf"], features, tau_levels)
    return out


def run_experiment(
    samples: SampleTable,
    config: ExperimentConfig,
    n_jobs: int = 1,
    oracle: Optional[Oracle] = None,
) -> EvaluationReport:
    """
    Tune, train and score the learners on a three-fold sample table.

    Args:
        samples: Samples with fold_index in {0, 1, 2}
        config: Protocol settings
        n_jobs: Parallel workers for tuning and forest growth
        oracle: When given, its quantiles are scored instead of trained models

    Returns:
        EvaluationReport
    """
    sizes = _check_folds(samples)
    levels = config.tau_levels
    log = FoldAccessLog()
    models: Dict[str, Any] = {}
    tuning: Dict[str, Any] = {}
    if oracle is None:
        models, tuning = train_models(samples, config, log, n_jobs)

    if log.test_fold_reads_before_testing():
        raise InvariantError("the test fold was read before testing")
    test = log.take(samples, [TEST_FOLD], "test")

    if oracle is not None:
        predictions = {
            ORACLE: np.column_stack([oracle(test, tau) for tau in levels])
        }
    else:
        predictions = predict_models(models, test.features, levels, clip=False)

    crossings = {}
    point_crossings = None
    if CANDIDATE in predictions:
        # Counted before clipping, which ties every negative level at zero
        raw = predictions[CANDIDATE]
        crossings = count_crossings(raw)
        point_crossings = _point_crossings(raw, test)
        logger.info(f"GBDT quantile crossings on the test fold: {crossings}")
        predictions[CANDIDATE] = clip_nonnegative(raw)

    for name, matrix in predictions.items():
        if np.any(matrix < 0):
            raise InvariantError(f"{name} produced negative predictions")

    return EvaluationReport(
        scores=evaluate_strata(predictions, test.target, levels),
        stations=per_station_scores(predictions, test.target, test.station_id, levels),
        models=list(predictions),
        tau_levels=list(levels),
        fold_sizes=sizes,
        drop_count=samples.drop_count,
        tuning=tuning,
        crossings=crossings,
        fold_access=log.to_dict(),
        point_crossings=point_crossings,
    )
