"""Bi-parabolic MFD: two downward parabolas sharing a vertex at the critical occupancy.

The critical occupancy is a softmax-weighted average of observed occupancies,
so it always stays inside the data range. Fitting runs on a normalized series.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dataio import MfdSeries

A2_MAX = 100.0
MAX_ANCHORS = 512
VERTEX_BAND = 0.05


@dataclass
class BiParabolicParams:
    anchors: np.ndarray
    logits: np.ndarray
    f_vertex: float
    a2_raw: float
    alpha: float = 1.0
    beta: float = 0.1

    @property
    def weights(self) -> np.ndarray:
        z = np.exp(self.logits - self.logits.max())
        return z / z.sum()

    @property
    def x_cd(self) -> float:
        return float(np.dot(self.weights, self.anchors))

    @property
    def a1(self) -> float:
        return self.f_vertex / self.x_cd**2

    @property
    def a2(self) -> float:
        return a2_transform(self.a2_raw)

    def to_parameter_set(self) -> dc.ParameterSet:
        return dc.ParameterSet({"logits": self.logits, "f_vertex": np.array(self.f_vertex), "a2_raw": np.array(self.a2_raw)})

    def with_values(self, values: dc.ParameterSet) -> BiParabolicParams:
        return BiParabolicParams(
            self.anchors, values["logits"].copy(), float(values["f_vertex"]), float(values["a2_raw"]), self.alpha, self.beta
        )


def a2_transform(raw: float) -> float:
    """Map an unconstrained scalar to a strictly positive congested curvature."""
    s = 0.5 * (1.0 + np.tanh(0.5 * raw))
    return float(max(A2_MAX * s, np.finfo(float).tiny))


def a2_inverse(a2: float) -> float:
    p = np.clip(a2 / A2_MAX, 1e-12, 1 - 1e-12)
    return float(np.log(p / (1 - p)))


def make_anchors(occupancy: np.ndarray, cap: int = MAX_ANCHORS) -> np.ndarray:
    """Deduplicated sorted occupancies, uniformly thinned to at most ``cap``."""
    anchors = np.unique(np.asarray(occupancy, dtype=float))
    if anchors.size > cap:
        anchors = anchors[np.linspace(0, anchors.size - 1, cap).round().astype(int)]
    return anchors


def predict(params: BiParabolicParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x_cd, fv = params.x_cd, params.f_vertex
    a = np.where(x <= x_cd, params.a1, params.a2)
    return fv - a * (x - x_cd) ** 2


def inverse_frequency_weights(congested: np.ndarray) -> np.ndarray:
    """Per-point weights 1/n_regime (0 for an empty regime)."""
    congested = np.asarray(congested, dtype=bool)
    n2 = congested.sum()
    n1 = congested.size - n2
    w = np.zeros(congested.size)
    if n1:
        w[~congested] = 1.0 / n1
    if n2:
        w[congested] = 1.0 / n2
    return w


def vertex_target(x: np.ndarray, y: np.ndarray, x_cd: float, band: float = VERTEX_BAND, q: float = 0.95) -> float:
    """95th percentile of flows observed within ``band`` of ``x_cd`` (10 nearest if none).

    The empirical-CDF quantile is used so that duplicating the data leaves it unchanged.
    """
    near = np.abs(x - x_cd) <= band
    if near.sum() == 0:
        near = np.argsort(np.abs(x - x_cd))[:10]
    return float(np.quantile(y[near], q, method="inverted_cdf"))


@dataclass
class LossParts:
    total: float
    l1: float
    l2: float
    exceed: float
    vertex: float
    empty_regime: bool = False

    def as_dict(self) -> dict:
        return {"total": self.total, "l1": self.l1, "l2": self.l2, "exceed": self.exceed, "vertex": self.vertex}


def _loss_graph(p: dict[str, dc.Node], anchors: np.ndarray, x: np.ndarray, y: np.ndarray, alpha: float, beta: float):
    w = dc.softmax(p["logits"])
    x_cd = (w * anchors).sum()
    fv = p["f_vertex"]
    a1 = fv / dc.square(x_cd)
    a2 = dc.sigmoid(p["a2_raw"]) * A2_MAX
    congested = x > x_cd.value
    weights = inverse_frequency_weights(congested)
    d2 = dc.square(dc.sub(x, x_cd))
    # one weighted sum covers both regimes: sum_r mean_{i in r} residual^2
    curv = a1 * (~congested) + a2 * congested
    resid = dc.sub(y, fv - curv * d2)
    sq = dc.square(resid) * weights
    l1 = (sq * (~congested)).sum()
    l2 = (sq * congested).sum()
    exceed = dc.relu(dc.sub(y, fv)).mean()
    vertex = dc.square(fv - vertex_target(x, y, float(x_cd.value)))
    total = l1 + l2 + exceed * alpha + vertex * beta
    empty = bool(congested.all() or not congested.any())
    return total, (l1, l2, exceed, vertex), empty


def composite_loss(params: BiParabolicParams, series: MfdSeries) -> LossParts:
    leaves = params.to_parameter_set().leaves(requires_grad=False)
    total, parts, empty = _loss_graph(leaves, params.anchors, series.occupancy, series.flow, params.alpha, params.beta)
    return LossParts(float(total.value), *(float(t.value) for t in parts), empty_regime=empty)


def init_params(series: MfdSeries, alpha: float = 1.0, beta: float = 0.1) -> BiParabolicParams:
    anchors = make_anchors(series.occupancy)
    logits = np.zeros(anchors.size)
    x_cd = float(anchors.mean())
    fv = vertex_target(series.occupancy, series.flow, x_cd)
    a2 = fv / (2.0 * x_cd) ** 2
    return BiParabolicParams(anchors, logits, fv, a2_inverse(a2), alpha, beta)


@dataclass
class FitConfig:
    alpha: float = 1.0
    beta: float = 0.1
    lr: float = 0.01
    epochs: int = 2000
    optimizer: str = "adam"  # or "gd"
    patience: int = 200
    rel_tol: float = 1e-8


@dataclass
class BiParabolicFit:
    params: BiParabolicParams
    loss_trace: list[dict] = field(default_factory=list)
    norm: tuple[float, float] | None = None
    band: dict | None = None

    @property
    def x_cd(self) -> float:
        return self.params.x_cd

    @property
    def f_vertex(self) -> float:
        return self.params.f_vertex

    def denormalized(self) -> tuple[float, float]:
        """(x_cd, f_vertex) in the series' original units."""
        if self.norm is None:
            return self.x_cd, self.f_vertex
        flow_scale, occ_scale = self.norm
        return self.x_cd * occ_scale, self.f_vertex * flow_scale

    def predict(self, x) -> np.ndarray:
        return predict(self.params, x)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def fit(series: MfdSeries, config: FitConfig | None = None) -> BiParabolicFit:
    """Fit the shared-vertex bi-parabola by gradient descent on the composite loss."""
    cfg = config or FitConfig()
    if len(series) < 10:
        raise ValueError("need at least 10 points to fit")
    params = init_params(series, cfg.alpha, cfg.beta)
    values = params.to_parameter_set()
    x, y = series.occupancy, series.flow
    state = None
    trace: list[dict] = []
    for epoch in range(cfg.epochs + 1):
        leaves = values.leaves()
        try:
            total, parts, _ = _loss_graph(leaves, params.anchors, x, y, cfg.alpha, cfg.beta)
            g = dc.grad(total, leaves)
        except FloatingPointError as exc:
            raise DivergenceError(f"non-finite loss at epoch {epoch}", trace) from exc
        trace.append({"epoch": epoch, "total": float(total.value), **dict(zip(("l1", "l2", "exceed", "vertex"), (float(t.value) for t in parts)))})
        if epoch == cfg.epochs:
            break
        if len(trace) > cfg.patience:
            old = trace[-cfg.patience - 1]["total"]
            if abs(old - trace[-1]["total"]) <= cfg.rel_tol * max(abs(old), 1e-300):
                break
        if cfg.optimizer == "adam":
            values, state = dc.adam_step(values, g, state, lr=cfg.lr)
        elif cfg.optimizer == "gd":
            values = dc.sgd_step(values, g, cfg.lr)
        else:
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    result = BiParabolicFit(params.with_values(values), trace, series.norm)
    result.band = prediction_interval(result, series)
    return result


def prediction_interval(fit_result: BiParabolicFit, series: MfdSeries, level: float = 0.95, min_points: int = 20) -> dict:
    """Per-regime empirical residual quantiles added to the fitted curve.

    Returns ``{"uncongested": (lo, hi) | None, "congested": (lo, hi) | None}``;
    a regime with fewer than ``min_points`` residuals gets ``None``.
    """
    x, y = series.occupancy, series.flow
    resid = y - fit_result.predict(x)
    congested = x > fit_result.x_cd
    q = ((1 - level) / 2, 1 - (1 - level) / 2)
    band = {}
    for name, mask in (("uncongested", ~congested), ("congested", congested)):
        band[name] = tuple(float(v) for v in np.quantile(resid[mask], q)) if mask.sum() >= min_points else None
    return band


def band_at(fit_result: BiParabolicFit, x) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper band at each ``x`` (NaN where the regime had no band)."""
    x = np.asarray(x, dtype=float)
    pred = fit_result.predict(x)
    band = fit_result.band or {}
    lo = np.full(x.shape, np.nan)
    hi = np.full(x.shape, np.nan)
    congested = x > fit_result.x_cd
    for name, mask in (("uncongested", ~congested), ("congested", congested)):
        if band.get(name) is not None:
            lo[mask] = pred[mask] + band[name][0]
            hi[mask] = pred[mask] + band[name][1]
    return lo, hi


def fit_to_json(fit_result: BiParabolicFit) -> dict:
    p = fit_result.params
    x_cd, fv = fit_result.denormalized()
    return {
        "params": {
            "anchors": p.anchors.tolist(),
            "logits": p.logits.tolist(),
            "f_vertex": p.f_vertex,
            "a2_raw": p.a2_raw,
            "alpha": p.alpha,
            "beta": p.beta,
        },
        "x_cd": fit_result.x_cd,
        "f_vertex": fit_result.f_vertex,
        "a2": p.a2,
        "x_cd_denorm": x_cd,
        "max_flow_denorm": fv,
        "norm": None if fit_result.norm is None else list(fit_result.norm),
        "band": fit_result.band,
        "loss_trace": fit_result.loss_trace,
    }
