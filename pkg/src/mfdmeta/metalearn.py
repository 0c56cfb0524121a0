"""MAML over cities: adapt on a biased support set, score on the full-detector MFD.

A *pool* maps each city to its normalized full-detector series and its biased
replica bundles (normalized with the same city scales). The learner is any
:class:`~mfdmeta.mtpinn.MtpinnModel`; its ``params`` play the role of the
meta-parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import mtpinn as mt
from .dataio import BiasedDatasetBundle, MfdSeries
from .metrics import FitReport, score

log = logging.getLogger(__name__)


class MetaConfigError(ValueError):
    pass


@dataclass
class MetaConfig:
    alpha_inner: float = 0.02
    beta_outer: float = 0.005
    n_ite: int = 5
    meta_iterations: int = 150
    tasks_per_iteration: int = 3
    k_support: int = 150
    m_query: int = 750
    dropout_train: float = 0.0
    dropout_test: float = 0.0
    order: str = "second"
    outer_optimizer: str = "adam"  # or "sgd" for the plain step

    def __post_init__(self):
        if self.k_support * self.n_ite != self.m_query:
            raise MetaConfigError(f"k_support * n_ite must equal m_query ({self.k_support} * {self.n_ite} != {self.m_query})")
        if self.alpha_inner <= 0 or self.beta_outer < 0:
            raise MetaConfigError("alpha_inner must be > 0 and beta_outer >= 0")
        if self.order not in ("second", "first"):
            raise MetaConfigError(f"order must be 'second' or 'first', got {self.order!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise MetaConfigError(f"outer_optimizer must be 'sgd' or 'adam', got {self.outer_optimizer!r}")
        if self.n_ite < 0 or self.meta_iterations < 0 or self.tasks_per_iteration < 1 or self.k_support < 1:
            raise MetaConfigError("counts out of range")

    @classmethod
    def from_dict(cls, d: dict) -> MetaConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class CityData:
    city: str
    full: MfdSeries
    bundles: dict[int, BiasedDatasetBundle] = field(default_factory=dict)


@dataclass
class Task:
    city: str
    support: MfdSeries
    query: MfdSeries
    n_detectors: int
    replica: int = -1

    def __post_init__(self):
        if self.support.city != self.city or self.query.city != self.city:
            raise ValueError("support and query must come from the task's city")


@dataclass
class MetaResult:
    theta: dc.ParameterSet
    learner: mt.MtpinnModel
    inner_loss_trace: list[float] = field(default_factory=list)
    outer_loss_trace: list[float] = field(default_factory=list)
    task_cities: list[list[str]] = field(default_factory=list)
    test_reports: list[FitReport] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "theta": self.theta.to_json(),
            "learner": self.learner.to_json(),
            "inner_loss_trace": self.inner_loss_trace,
            "outer_loss_trace": self.outer_loss_trace,
            "task_cities": self.task_cities,
            "test_reports": [r.row() for r in self.test_reports],
        }


def draw_support(replica: MfdSeries, cfg: MetaConfig, rng: np.random.Generator) -> MfdSeries:
    """``K * N_ite`` points of a replica without replacement, capped at its size."""
    m = min(cfg.k_support * cfg.n_ite, len(replica))
    idx = np.sort(rng.choice(len(replica), size=m, replace=False))
    return replica.take(idx)


def sample_task(pool: dict[str, CityData], n: int, rng: np.random.Generator, cfg: MetaConfig, exclude=()) -> Task:
    """Uniform city, then uniform replica, then the support subsample."""
    cities = sorted(c for c in pool if c not in set(exclude))
    if not cities:
        raise ValueError("empty task pool")
    city = cities[rng.integers(len(cities))]
    data = pool[city]
    bundle = data.bundles[n]
    j = int(rng.integers(len(bundle.replicas)))
    support = draw_support(bundle.replicas[j], cfg, rng)
    return Task(city, support, data.full, n, j)


def support_batches(n_points: int, cfg: MetaConfig) -> list[np.ndarray]:
    """Disjoint consecutive batches of ``K`` support points, one per inner step."""
    if cfg.n_ite == 0:
        return []
    k = cfg.k_support
    if n_points < k * cfg.n_ite:
        log.debug("support has %d points < K*N_ite=%d; batches shrink", n_points, k * cfg.n_ite)
        return [b for b in np.array_split(np.arange(n_points), cfg.n_ite)]
    return [np.arange(i * k, (i + 1) * k) for i in range(cfg.n_ite)]


def _task_loss(learner: mt.MtpinnModel, dropout: float, seed):
    def build(p, x, y, step=0):
        s = None if seed is None else (*seed, step)
        loss, _, _ = mt.loss_graph(p, x, y, learner.config, learner.kind, dropout, s)
        return loss

    return build


def inner_adapt(theta: dc.ParameterSet, task: Task, cfg: MetaConfig, learner: mt.MtpinnModel, dropout: float | None = None, seed=None):
    """Clone ``theta`` and take ``N_ite`` plain gradient steps on disjoint support batches.

    Returns ``(theta_prime, losses)`` with one loss per step.
    """
    rate = cfg.dropout_train if dropout is None else dropout
    build = _task_loss(learner, rate, seed)
    params = theta.clone()
    losses = []
    x, y = task.support.occupancy, task.support.flow
    for step, idx in enumerate(support_batches(len(task.support), cfg)):
        leaves = params.leaves()
        loss = build(leaves, x[idx], y[idx], step)
        losses.append(float(loss.value))
        params = dc.sgd_step(params, dc.grad(loss, leaves), cfg.alpha_inner)
    return params, losses


def task_meta_gradient(theta: dc.ParameterSet, task: Task, cfg: MetaConfig, learner: mt.MtpinnModel, seed=None):
    """Gradient of the query loss after inner adaptation, w.r.t. ``theta``.

    Returns ``(gradient, query_loss, inner_losses)``.
    """
    build = _task_loss(learner, cfg.dropout_train, seed)
    batches = support_batches(len(task.support), cfg)
    xs, ys = task.support.occupancy, task.support.flow
    xq, yq = task.query.occupancy, task.query.flow
    inner_losses: list[float] = []
    query_loss: list[float] = []

    def inner(p, step):
        loss = build(p, xs[batches[step]], ys[batches[step]], step)
        inner_losses.append(float(loss.value))
        return loss

    def outer(p):
        # query is always scored without dropout
        loss, _, _ = mt.loss_graph(p, xq, yq, learner.config, learner.kind, 0.0, None)
        query_loss.append(float(loss.value))
        return loss

    mode = "second_order" if cfg.order == "second" else "first_order"
    g = dc.grad_through_update(outer, theta, cfg.alpha_inner, len(batches), mode, inner)
    return g, query_loss[-1], inner_losses


def meta_train(
    learner: mt.MtpinnModel,
    pool: dict[str, CityData],
    cfg: MetaConfig,
    n: int,
    held_out=(),
    seed: int = 0,
    progress=None,
) -> MetaResult:
    """Run ``meta_iterations`` outer updates (Adam or plain steps at ``beta_outer``) on summed task meta-gradients."""
    held_out = tuple(held_out)
    overlap = [c for c in held_out if c not in pool]
    if overlap:
        raise ValueError(f"held-out cities {overlap} are not in the pool")
    rng = np.random.default_rng([seed, n, 1])
    theta = learner.params.clone()
    result = MetaResult(theta, learner)
    opt_state = None
    for it in range(cfg.meta_iterations):
        total = theta.zeros_like()
        q_losses, i_losses, cities = [], [], []
        for t in range(cfg.tasks_per_iteration):
            task = sample_task(pool, n, rng, cfg, exclude=held_out)
            assert task.city not in held_out
            g, q, inner = task_meta_gradient(theta, task, cfg, learner, seed=(seed, it, t))
            total = dc.ParameterSet({k: total[k] + g[k] for k in total})
            q_losses.append(q)
            i_losses.append(float(np.mean(inner)) if inner else q)
            cities.append(task.city)
        if cfg.outer_optimizer == "adam":
            theta, opt_state = dc.adam_step(theta, total, opt_state, lr=cfg.beta_outer)
        else:
            theta = dc.sgd_step(theta, total, cfg.beta_outer)
        result.outer_loss_trace.append(float(np.sum(q_losses)))
        result.inner_loss_trace.append(float(np.mean(i_losses)))
        result.task_cities.append(cities)
        if progress is not None:
            progress(it, result)
    result.theta = theta
    result.learner = learner.with_params(theta)
    return result


def evaluate(model: mt.MtpinnModel, query: MfdSeries, city: str | None = None, steps: int = 0, trace=None) -> FitReport:
    """Score a model's flow predictions on a (normalized) query series."""
    flow, x_cd, f_max = mt.forward(model, query.occupancy, dropout=0.0)
    flow_scale, occ_scale = query.norm if query.norm is not None else (1.0, 1.0)
    return FitReport(
        city=city or query.city,
        metrics=score(query.flow, flow, flow_scale),
        x_cd=x_cd,
        f_max=f_max,
        x_cd_denorm=None if x_cd is None else x_cd * occ_scale,
        f_max_denorm=None if f_max is None else f_max * flow_scale,
        prediction=flow,
        loss_trace=list(trace or []),
        steps=steps,
    )


def meta_test(theta: dc.ParameterSet, task: Task, cfg: MetaConfig, learner: mt.MtpinnModel, seed=None) -> FitReport:
    """Adapt on the held-out city's support with ``N_ite`` inner steps, score the full query."""
    adapted, losses = inner_adapt(theta, task, cfg, learner, dropout=cfg.dropout_test, seed=seed)
    return evaluate(learner.with_params(adapted), task.query, task.city, steps=len(losses), trace=losses)
