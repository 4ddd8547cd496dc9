"""Forecast accuracy, directional diagnostics, and the Diebold-Mariano test.

All accuracy numbers are in natural-log price units.  Directional labels
compare forecast and realized log-price changes relative to the window's
base price, with a small no-change band around zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import model as M
from . import training as T
from .datasets import SampleSet
from .errors import DegenerateTestError, InvalidArgumentError

PATH_KINDS = ("deployed", "refined")


@dataclass
class ForecastSet:
    predicted: np.ndarray   # (T, N) predicted log prices
    realized: np.ndarray    # (T, N) realized log prices
    base_log_price: np.ndarray  # (T,)
    horizons: tuple[int, ...]
    path_kind: str = "deployed"

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, float)
        self.realized = np.asarray(self.realized, float)
        self.base_log_price = np.asarray(self.base_log_price, float)
        if self.path_kind not in PATH_KINDS:
            raise InvalidArgumentError(f"path_kind must be one of {PATH_KINDS}")
        if self.predicted.shape != self.realized.shape:
            raise InvalidArgumentError("predicted/realized shape mismatch")
        if self.predicted.shape[0] != self.base_log_price.shape[0]:
            raise InvalidArgumentError("base price length mismatch")
        if len(self) == 0:
            raise InvalidArgumentError("empty forecast set")

    def __len__(self) -> int:
        return self.predicted.shape[0]


@dataclass
class DirectionalConfig:
    epsilon_zero: float = 1e-4

    def __post_init__(self):
        if self.epsilon_zero < 0:
            raise InvalidArgumentError("epsilon_zero must be nonnegative")


def forecast_set(samples: SampleSet, bundle: M.ModelBundle,
                 path_kind: str = "deployed",
                 energy_params=None) -> ForecastSet:
    """Run the model over a sample set and package forecasts for scoring."""
    if path_kind == "deployed":
        pred = T.deployed_forward(samples, bundle)
    else:
        from .inference import EnergyParams
        pred, _ = T.refined_forward(samples, bundle,
                                    energy_params or EnergyParams())
    return ForecastSet(predicted=pred, realized=samples.targets,
                       base_log_price=samples.base_log_price,
                       horizons=samples.horizons, path_kind=path_kind)


def accuracy_metrics(f: ForecastSet) -> dict[int, dict[str, float]]:
    """Per-horizon RMSE and MAE."""
    err = f.predicted - f.realized
    out = {}
    for i, tau in enumerate(f.horizons):
        out[tau] = {"rmse": float(np.sqrt(np.mean(err[:, i] ** 2))),
                    "mae": float(np.mean(np.abs(err[:, i])))}
    return out


def directional_metrics(f: ForecastSet,
                        cfg: DirectionalConfig | None = None) -> dict[int, dict[str, float]]:
    """No-change rate, conditional hit rates, MCC, and Brier per horizon.

    Point forecasts give hard direction calls, so the Brier score equals
    the directional error rate on moving days.
    """
    cfg = cfg or DirectionalConfig()
    if f.base_log_price is None:
        raise InvalidArgumentError("directional metrics need base prices")
    out = {}
    for i, tau in enumerate(f.horizons):
        real_move = f.realized[:, i] - f.base_log_price
        pred_move = f.predicted[:, i] - f.base_log_price
        no_change = np.abs(real_move) <= cfg.epsilon_zero
        nc_rate = float(np.mean(no_change))
        moving = ~no_change
        if not np.any(moving):
            raise DegenerateTestError(f"all samples inside the no-change band at tau={tau}")
        real_up = real_move[moving] > 0
        pred_up = pred_move[moving] > 0
        tp = float(np.sum(real_up & pred_up))
        tn = float(np.sum(~real_up & ~pred_up))
        fp = float(np.sum(~real_up & pred_up))
        fn = float(np.sum(real_up & ~pred_up))
        da = (tp + tn) / moving.sum()
        up_hit = tp / real_up.sum() if real_up.any() else float("nan")
        down_hit = tn / (~real_up).sum() if (~real_up).any() else float("nan")
        denom = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        mcc = (tp * tn - fp * fn) / denom if denom > 0 else 0.0
        brier = float(np.mean((pred_up.astype(float) - real_up.astype(float)) ** 2))
        out[tau] = {"nc_rate": nc_rate, "da_excl": float(da), "up_hit": float(up_hit),
                    "down_hit": float(down_hit), "mcc": float(mcc), "brier": brier,
                    "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn}}
    return out


def deployed_vs_refined(deployed: ForecastSet, refined: ForecastSet) -> dict[int, dict[str, float]]:
    """Per-horizon RMSE/MAE deltas (deployed minus refined)."""
    if len(deployed) != len(refined) or deployed.horizons != refined.horizons:
        raise InvalidArgumentError("forecast sets must cover the same dates and horizons")
    acc_d = accuracy_metrics(deployed)
    acc_r = accuracy_metrics(refined)
    return {tau: {"delta_rmse": acc_d[tau]["rmse"] - acc_r[tau]["rmse"],
                  "delta_mae": acc_d[tau]["mae"] - acc_r[tau]["mae"],
                  "deployed_rmse": acc_d[tau]["rmse"],
                  "refined_rmse": acc_r[tau]["rmse"]}
            for tau in deployed.horizons}


def hac_variance(d: np.ndarray, lag: int) -> float:
    """Bartlett-kernel long-run variance of the mean of d."""
    d = np.asarray(d, float)
    n = d.size
    dc = d - d.mean()
    gamma0 = float(dc @ dc) / n
    v = gamma0
    for ell in range(1, min(lag, n - 1) + 1):
        cov = float(dc[ell:] @ dc[:-ell]) / n
        v += 2.0 * (1.0 - ell / (lag + 1.0)) * cov
    return v / n


def dm_test(loss_a: np.ndarray, loss_b: np.ndarray, horizon: int) -> tuple[float, float]:
    """Diebold-Mariano statistic and one-sided p-value (H1: a beats b).

    The loss differential uses a Bartlett HAC variance with truncation lag
    horizon - 1; horizon 1 reduces to the plain variance of the mean.
    """
    loss_a = np.asarray(loss_a, float)
    loss_b = np.asarray(loss_b, float)
    if loss_a.shape != loss_b.shape or loss_a.ndim != 1:
        raise InvalidArgumentError("loss series must be equal-length vectors")
    if horizon < 1:
        raise InvalidArgumentError("horizon must be >= 1")
    d = loss_a - loss_b
    if np.allclose(d, 0.0):
        return 0.0, 0.5
    var = hac_variance(d, horizon - 1)
    if var <= 0:
        raise DegenerateTestError("nonpositive HAC variance")
    statistic = float(d.mean() / np.sqrt(var))
    p = float(stats.norm.cdf(statistic))
    return statistic, p


# ---------------------------------------------------------------------------
# baselines


def persistence_forecast(samples: SampleSet) -> ForecastSet:
    """Forecast every horizon with the last observed log price."""
    pred = np.tile(samples.base_log_price[:, None], (1, len(samples.horizons)))
    return ForecastSet(predicted=pred, realized=samples.targets,
                       base_log_price=samples.base_log_price,
                       horizons=samples.horizons, path_kind="deployed")


@dataclass
class RidgeBaseline:
    alphas: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    coef: np.ndarray | None = field(default=None, repr=False)
    intercept: np.ndarray | None = field(default=None, repr=False)
    chosen_alpha: float | None = None

    def _design(self, samples: SampleSet) -> np.ndarray:
        return samples.features.reshape(len(samples), -1)

    def fit(self, train: SampleSet, val: SampleSet) -> "RidgeBaseline":
        x, y = self._design(train), train.targets
        xv, yv = self._design(val), val.targets
        xm, ym = x.mean(axis=0), y.mean(axis=0)
        xc, yc = x - xm, y - ym
        gram = xc.T @ xc
        best = None
        eye = np.eye(gram.shape[0])
        for alpha in self.alphas:
            coef = np.linalg.solve(gram + alpha * eye, xc.T @ yc)
            rmse = float(np.sqrt(np.mean(((xv - xm) @ coef + ym - yv) ** 2)))
            if best is None or rmse < best[0]:
                best = (rmse, alpha, coef)
        self.chosen_alpha = best[1]
        self.coef = best[2]
        self.intercept = ym - 0.0
        self._xm = xm
        return self

    def forecast(self, samples: SampleSet) -> ForecastSet:
        if self.coef is None:
            raise InvalidArgumentError("fit the baseline first")
        pred = (self._design(samples) - self._xm) @ self.coef + self.intercept
        return ForecastSet(predicted=pred, realized=samples.targets,
                           base_log_price=samples.base_log_price,
                           horizons=samples.horizons, path_kind="deployed")


def baselines(splits: dict[str, SampleSet]) -> dict[str, ForecastSet]:
    """Persistence and validation-tuned ridge forecasts on the test split."""
    test = splits["test"]
    ridge = RidgeBaseline().fit(splits["train"], splits["val"])
    return {"persistence": persistence_forecast(test),
            "ridge": ridge.forecast(test)}
