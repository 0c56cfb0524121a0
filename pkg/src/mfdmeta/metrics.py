"""Flow-prediction metrics and the per-evaluation report."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).reshape(-1)
    yhat = np.asarray(yhat, dtype=float).reshape(-1)
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < 2:
        raise MetricError("need at least two points")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def rrse(y, yhat) -> float:
    """Root relative squared error: error relative to predicting mean(y)."""
    y, yhat = _pair(y, yhat)
    dev = y - y.mean()
    denom = float(np.dot(dev, dev))
    if denom == 0.0:
        raise MetricError("rrse undefined for constant y")
    err = y - yhat
    return float(np.sqrt(np.dot(err, err) / denom))


def correlation(y, yhat) -> float:
    """Pearson correlation between observed and predicted values."""
    y, yhat = _pair(y, yhat)
    dy = y - y.mean()
    dh = yhat - yhat.mean()
    sy = float(np.sqrt(np.dot(dy, dy)))
    sh = float(np.sqrt(np.dot(dh, dh)))
    if sy == 0.0 or sh == 0.0:
        raise MetricError("correlation undefined for a constant series")
    return float(np.clip(np.dot(dy, dh) / (sy * sh), -1.0, 1.0))


@dataclass
class Metrics:
    mse: float
    rrse: float
    r: float


def score(y_norm, yhat_norm, flow_scale: float = 1.0) -> Metrics:
    """MSE in flow units (scaled back), RRSE and r on the normalized values."""
    y, yhat = _pair(y_norm, yhat_norm)
    try:
        r = correlation(y, yhat)
    except MetricError:
        r = float("nan")
    return Metrics(mse(y * flow_scale, yhat * flow_scale), rrse(y, yhat), r)


@dataclass
class FitReport:
    city: str
    metrics: Metrics
    x_cd: float | None = None
    f_max: float | None = None
    x_cd_denorm: float | None = None
    f_max_denorm: float | None = None
    prediction: np.ndarray | None = None
    loss_trace: list = field(default_factory=list)
    steps: int = 0

    def row(self) -> dict:
        d = asdict(self.metrics)
        d.update(city=self.city, x_cd=self.x_cd, f_max=self.f_max, x_cd_denorm=self.x_cd_denorm, f_max_denorm=self.f_max_denorm)
        return d
