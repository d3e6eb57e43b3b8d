"""Prediction-quality statistics: one-step errors, data-efficiency curves
and k-step-ahead rollout errors with chi-square confidence bands.

Rollout errors assume i.i.d. normal per-step errors when forming the
confidence intervals (the chi-square construction is exact only under that
approximation). All statistics are deterministic given the seeds; rollout
aggregation reduces in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .gp import GpModel, TrainConfig, train
from .ilqg import rollout_model
from .statespace import DfState, RegressionDataset, StateLayout, Trajectory


@dataclass
class ErrorReport:
    """Absolute-error distribution summary with boxplot statistics."""

    errors: np.ndarray
    rmse: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    n_outliers: int

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "whisker_low": self.whisker_low,
            "whisker_high": self.whisker_high,
            "n_outliers": self.n_outliers,
            "n": int(self.errors.size),
        }


def one_step_rmse(predictions, targets) -> ErrorReport:
    """RMSE and boxplot summary of the absolute one-step errors."""
    predictions = np.asarray(predictions, dtype=float).reshape(-1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if predictions.size == 0:
        raise ValueError("empty prediction set")
    if predictions.size != targets.size:
        raise ValueError("predictions and targets must have equal length")
    err = np.abs(targets - predictions)
    rmse = float(np.sqrt(np.mean(err**2)))
    q1, med, q3 = np.percentile(err, [25, 50, 75])
    iqr = q3 - q1
    lo_fence = q1 - 1.5 * iqr
    hi_fence = q3 + 1.5 * iqr
    inside = err[(err >= lo_fence) & (err <= hi_fence)]
    return ErrorReport(
        errors=err,
        rmse=rmse,
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        n_outliers=int(np.sum((err < lo_fence) | (err > hi_fence))),
    )


def data_efficiency_curve(dataset: RegressionDataset, dt: float, model_factory,
                          checkpoints_s, test_X, test_y,
                          train_cfg: TrainConfig) -> list[tuple[float, float]]:
    """RMSE on a fixed test set versus seconds of experience.

    At every checkpoint the model is trained from scratch (fixed seed in the
    training config) on the dataset prefix covering that much experience.
    ``model_factory(X, y)`` returns an untrained GpModel.
    """
    out = []
    for seconds in checkpoints_s:
        n = int(round(seconds / dt))
        if n > len(dataset):
            raise ValueError(
                f"checkpoint {seconds} s needs {n} samples, dataset has {len(dataset)}"
            )
        model = model_factory(dataset.X[:n], dataset.y[:n])
        trained, _ = train(model, train_cfg)
        preds = trained.posterior_mean(test_X)
        out.append((float(seconds), one_step_rmse(preds, test_y).rmse))
    return out


@dataclass
class RolloutEvalConfig:
    n_sim: int = 200
    window: int = 100
    confidence: float = 0.99
    seed: int = 0

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.n_sim < 1:
            raise ValueError("n_sim must be >= 1")
        if not (0 < self.confidence < 1):
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class RolloutRmse:
    k: np.ndarray                  # 1..window
    rmse: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    start_indices: np.ndarray
    target: str
    errors: np.ndarray = field(repr=False, default=None)  # (n_sim, window)

    def to_rows(self) -> np.ndarray:
        return np.column_stack([self.k, self.rmse, self.lower, self.upper])


def rollout_rmse_k(models: dict[str, GpModel], traj: Trajectory,
                   layout: StateLayout, cfg: RolloutEvalConfig,
                   target: str | None = None) -> RolloutRmse:
    """k-step-ahead rollout RMSE over random start indices.

    For each start, the models are iterated ``window`` steps with the
    non-modeled channels replayed from the trajectory; the error at step k
    subtracts the prediction from the realized position. The confidence
    interval per k applies the chi-square quantiles of n_sim degrees of
    freedom to n_sim * RMSE_k^2.
    """
    cfg.validate()
    if target is None:
        if len(models) != 1:
            raise ValueError("target must be named when several models are given")
        target = next(iter(models))
    T = len(traj)
    lo = layout.max_lag
    hi = T - cfg.window - 1
    if hi <= lo:
        raise ValueError(
            f"trajectory too short: need more than {lo + cfg.window + 1} samples"
        )
    rng = np.random.default_rng(cfg.seed)
    starts = np.sort(rng.integers(lo, hi, size=cfg.n_sim))
    states = [DfState.from_trajectory(traj, layout, int(k)) for k in starts]
    exo = {}
    for s in layout.slices:
        if s.var in models:
            continue
        ch = traj[s.var]
        if s.kind == "position":
            exo[s.var] = np.stack([ch[k + 1 : k + 1 + cfg.window] for k in starts])
        else:
            exo[s.var] = np.stack([ch[k : k + cfg.window] for k in starts])
    preds = rollout_model(models, layout, states, exo, cfg.window)[target]
    realized = np.stack(
        [traj[target][k + 1 : k + 1 + cfg.window] for k in starts]
    )
    errors = realized - preds
    rmse = np.sqrt(np.sum(errors**2, axis=0) / cfg.n_sim)
    a = 1.0 - cfg.confidence
    chi_lo = stats.chi2.ppf(a / 2.0, df=cfg.n_sim)
    chi_hi = stats.chi2.ppf(1.0 - a / 2.0, df=cfg.n_sim)
    lower = rmse * np.sqrt(cfg.n_sim / chi_hi)
    upper = rmse * np.sqrt(cfg.n_sim / chi_lo)
    return RolloutRmse(
        k=np.arange(1, cfg.window + 1),
        rmse=rmse,
        lower=lower,
        upper=upper,
        start_indices=starts,
        target=target,
        errors=errors,
    )
