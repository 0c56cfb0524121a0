"""Experiment orchestration: pool construction, paired evaluation, aggregation, plot data.

An experiment is described by one JSON document (see :class:`ExperimentConfig`).
For each repetition a fixed number of cities is held out; for every detector
count ``n`` a meta-learner is trained on the remaining cities and every model
is then scored on the held-out cities' full series after training on the
*same* biased support.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import baselines as bl
from . import biparabolic as bp
from . import metalearn as ml
from . import mtpinn as mt
from .dataio import (
    DETECTOR_COUNTS,
    BiasedDatasetBundle,
    DataError,
    CityMatrix,
    MfdSeries,
    clean_records,
    generate_synthetic_city,
    load_records,
    make_biased_bundles,
    normalize,
    synthetic_pool_specs,
)

log = logging.getLogger(__name__)

MODELS = ("maml", "scratch", "nn", "tc5", "tc1000", "tw5", "tw1000")
METRICS = ("mse", "rrse", "r")
ROW_FIELDS = (
    "model", "n_detectors", "repetition", "city", "seed", "replica",
    "mse", "rrse", "r", "x_cd", "f_max", "x_cd_denorm", "f_max_denorm", "status", "error",
)


@dataclass
class ExperimentConfig:
    """Resolved experiment description; every field round-trips through JSON."""

    name: str = "desk"
    seed: int = 0
    repetitions: int = 5
    held_out: int = 3
    detector_counts: tuple[int, ...] = DETECTOR_COUNTS
    models: tuple[str, ...] = ("maml", "scratch", "tc1000", "tw5", "tw1000")
    replicas: int = 30
    interval_rule: str = "subset"
    # synthetic pool (ignored when records_path is set)
    n_cities: int = 12
    pool_seed: int = 0
    city_overrides: dict = field(default_factory=dict)
    records_path: str | None = None
    mtpinn: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        self.detector_counts = tuple(int(n) for n in self.detector_counts)
        self.models = tuple(self.models)
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ValueError(f"unknown models {unknown}; choose from {MODELS}")
        if self.repetitions < 1 or self.held_out < 1:
            raise ValueError("repetitions and held_out must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def resolved(self) -> dict:
        """The config with every model sub-config expanded to its full defaults."""
        d = asdict(self)
        d["detector_counts"] = list(self.detector_counts)
        d["models"] = list(self.models)
        d["mtpinn"] = _jsonable(asdict(mt.MtpinnConfig.from_dict(self.mtpinn)))
        d["meta"] = asdict(ml.MetaConfig.from_dict(self.meta))
        d["pretrain"] = asdict(bl.PretrainConfig(**self.pretrain))
        return d


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# Data pool
# ---------------------------------------------------------------------------


def build_pool(cfg: ExperimentConfig) -> dict[str, ml.CityData]:
    """Clean, aggregate and normalize every city, with biased bundles for each ``n``.

    Replicas are normalized with their city's full-series scales so that the
    support and the query live in the same units.
    """
    if cfg.records_path:
        records, _ = load_records(cfg.records_path)
    else:
        specs = synthetic_pool_specs(cfg.n_cities, cfg.pool_seed, **cfg.city_overrides)
        records = pd.concat([generate_synthetic_city(s) for s in specs], ignore_index=True)
    kept, _ = clean_records(records)
    pool = {}
    for city in sorted(kept["city"].unique()):
        matrix = CityMatrix.from_records(kept, city)
        try:
            bundles = {
                n: make_biased_bundles(matrix, city, n, cfg.replicas, cfg.pool_seed, interval_rule=cfg.interval_rule)
                for n in cfg.detector_counts
            }
        except DataError as exc:
            log.warning("skipping ineligible city: %s", exc)
            continue
        full = matrix.aggregate()
        for b in bundles.values():
            b.replicas = [normalize(r, full) for r in b.replicas]
        pool[city] = ml.CityData(city, normalize(full), bundles)
    if not pool:
        raise ValueError("no eligible cities in the pool")
    return pool


def write_prepared(records: pd.DataFrame, out_dir: str | Path, detector_counts=DETECTOR_COUNTS, replicas: int = 30,
                   seed: int = 0, interval_rule: str = "subset") -> dict:
    """Clean ``records`` and write raw (unnormalized) series to disk.

    Layout: ``clean.csv``, ``dropped.csv``, ``full/<city>.csv`` and
    ``bundles/<n>/<city>/r<j>.csv``, each series with a JSON sidecar.
    Cities that fail the eligibility rules are skipped and listed in the summary.
    """
    out = Path(out_dir)
    (out / "full").mkdir(parents=True, exist_ok=True)
    kept, dropped = clean_records(records)
    kept.to_csv(out / "clean.csv", index=False, float_format="%.17g")
    dropped.to_csv(out / "dropped.csv", index=False, float_format="%.17g")
    summary = {"cities": [], "skipped": {}, "dropped": int(len(dropped))}
    for city in sorted(kept["city"].unique()):
        matrix = CityMatrix.from_records(kept, city)
        try:
            bundles = {n: make_biased_bundles(matrix, city, n, replicas, seed, interval_rule=interval_rule) for n in detector_counts}
        except ValueError as exc:
            summary["skipped"][city] = str(exc)
            continue
        matrix.aggregate().to_csv(out / "full" / f"{city}.csv")
        for n, b in bundles.items():
            d = out / "bundles" / str(n) / city
            d.mkdir(parents=True, exist_ok=True)
            for j, r in enumerate(b.replicas):
                r.to_csv(d / f"r{j:03d}.csv")
        summary["cities"].append(city)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def read_pool(bundles_dir: str | Path, full_dir: str | Path, detector_counts=None) -> dict[str, ml.CityData]:
    """Inverse of :func:`write_prepared`: normalized pool keyed by city."""
    bundles_dir, full_dir = Path(bundles_dir), Path(full_dir)
    counts = sorted((int(p.name) for p in bundles_dir.iterdir() if p.is_dir() and p.name.isdigit()), reverse=True)
    if detector_counts is not None:
        counts = [n for n in counts if n in set(detector_counts)]
    pool = {}
    for path in sorted(full_dir.glob("*.csv")):
        full = MfdSeries.from_csv(path)
        city = full.city
        nfull = normalize(full)
        bundles = {}
        for n in counts:
            files = sorted((bundles_dir / str(n) / city).glob("r*.csv"))
            if files:
                reps = [normalize(MfdSeries.from_csv(f), full) for f in files]
                bundles[n] = BiasedDatasetBundle(city, n, reps, int(reps[0].meta.get("seed", 0)))
        pool[city] = ml.CityData(city, nfull, bundles)
    if not pool:
        raise ValueError(f"no city series found in {full_dir}")
    return pool


def held_out_cities(cities, k: int, seed: int, repetition: int) -> list[str]:
    cities = sorted(cities)
    if k >= len(cities):
        raise ValueError(f"cannot hold out {k} of {len(cities)} cities")
    rng = np.random.default_rng([seed, repetition, 3])
    return sorted(cities[i] for i in rng.choice(len(cities), size=k, replace=False))


def evaluation_task(pool, city: str, n: int, cfg: ml.MetaConfig, seed: int, repetition: int) -> ml.Task:
    """The held-out city's support, shared by every model in the paired comparison."""
    idx = sorted(pool).index(city)
    rng = np.random.default_rng([seed, repetition, n, idx, 4])
    bundle = pool[city].bundles[n]
    j = int(rng.integers(len(bundle.replicas)))
    return ml.Task(city, ml.draw_support(bundle.replicas[j], cfg, rng), pool[city].full, n, j)


# ---------------------------------------------------------------------------
# One cell: (repetition, n)
# ---------------------------------------------------------------------------


def _row(model: str, n: int, rep: int, task: ml.Task, seed: int, report=None, error: str | None = None) -> dict:
    row = {k: None for k in ROW_FIELDS}
    row.update(model=model, n_detectors=n, repetition=rep, city=task.city, seed=seed, replica=task.replica)
    if report is None:
        row.update(status="failed", error=error)
        return row
    m = report.metrics
    row.update(
        mse=m.mse, rrse=m.rrse, r=None if math.isnan(m.r) else m.r,
        x_cd=report.x_cd, f_max=report.f_max, x_cd_denorm=report.x_cd_denorm, f_max_denorm=report.f_max_denorm,
        status="ok",
    )
    return row


def _scratch_nn(support, base: mt.MtpinnConfig, seed: int) -> mt.MtpinnModel:
    cfg = bl.scratch_config(base)
    model = mt.init_model(cfg, seed=seed, kind="nn")
    model.norm = support.norm
    return mt.fit_params(model, support.occupancy, support.flow, cfg.epochs, cfg.batch_size, cfg.lr, cfg.dropout, seed)


def run_cell(cfg: ExperimentConfig, pool, rep: int, n: int) -> tuple[list[dict], dict]:
    """Meta-train once, then score every model on each held-out city."""
    mcfg = mt.MtpinnConfig.from_dict(cfg.mtpinn)
    meta_cfg = ml.MetaConfig.from_dict(cfg.meta)
    seed = cfg.seed * 1000 + rep
    held = held_out_cities(pool, cfg.held_out, cfg.seed, rep)
    tasks = [evaluation_task(pool, c, n, meta_cfg, cfg.seed, rep) for c in held]
    rows: list[dict] = []
    traces: dict = {}

    meta_result = None
    if "maml" in cfg.models:
        try:
            learner = mt.init_model(mcfg, seed=seed)
            meta_result = ml.meta_train(learner, pool, meta_cfg, n, held_out=held, seed=seed)
            traces = {"inner": meta_result.inner_loss_trace, "outer": meta_result.outer_loss_trace}
        except (FloatingPointError, ValueError) as exc:
            log.warning("meta-training failed (rep %d, n %d): %s", rep, n, exc)
            for t in tasks:
                rows.append(_row("maml", n, rep, t, seed, error=f"meta-train: {exc}"))

    pretrained = None
    transfer_labels = [m for m in cfg.models if m[:2] in ("tc", "tw")]
    if transfer_labels:
        pcfg = bl.PretrainConfig(**{**cfg.pretrain, "seed": seed})
        try:
            series = bl.pretrain_pool(pool, n, held, pcfg)
            pretrained = bl.transfer_pretrain(series, mcfg, pcfg, held_out=held)
        except (FloatingPointError, ValueError) as exc:
            log.warning("pretraining failed (rep %d, n %d): %s", rep, n, exc)
            for label in transfer_labels:
                for t in tasks:
                    rows.append(_row(label, n, rep, t, seed, error=f"pretrain: {exc}"))
            transfer_labels = []

    for i, task in enumerate(tasks):
        tseed = seed * 10 + i
        fitters = {}
        if meta_result is not None:
            fitters["maml"] = lambda: ml.meta_test(meta_result.theta, task, meta_cfg, meta_result.learner, seed=(tseed,))
        if "scratch" in cfg.models:
            fitters["scratch"] = lambda: ml.evaluate(bl.train_scratch_comparison(task.support, bl.scratch_config(mcfg), tseed), task.query)
        if "nn" in cfg.models:
            fitters["nn"] = lambda: ml.evaluate(_scratch_nn(task.support, mcfg, tseed), task.query)
        for label in transfer_labels:
            tcfg = bl.TransferConfig.from_label(label, seed=tseed, **cfg.transfer)
            fitters[label] = lambda tcfg=tcfg: ml.evaluate(bl.transfer_finetune(pretrained, task.support, tcfg), task.query)
        for model in cfg.models:
            if model not in fitters:
                continue
            try:
                rows.append(_row(model, n, rep, task, seed, fitters[model]()))
            except (FloatingPointError, ValueError) as exc:
                log.warning("%s failed on %s (rep %d, n %d): %s", model, task.city, rep, n, exc)
                rows.append(_row(model, n, rep, task, seed, error=str(exc)))
    return rows, traces


def _run_cell_job(args):
    cfg_dict, rep, n = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_cell(cfg, build_pool(cfg), rep, n)


def _order_key(row: dict):
    return (
        -row["n_detectors"], row["repetition"], row["city"],
        MODELS.index(row["model"]),
    )


def run_experiment(config: ExperimentConfig | dict | str | Path, progress=None) -> dict:
    """Run the full protocol and return the report (also written to ``out_dir`` if set)."""
    if isinstance(config, (str, Path)):
        config = ExperimentConfig.load(config)
    elif isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    cells = [(rep, n) for n in config.detector_counts for rep in range(config.repetitions)]
    rows: list[dict] = []
    traces = {}
    if config.workers > 1:
        jobs = [(asdict(config), rep, n) for rep, n in cells]
        with ProcessPoolExecutor(config.workers) as ex:
            results = list(ex.map(_run_cell_job, jobs))
    else:
        pool = build_pool(config)
        results = []
        for rep, n in cells:
            results.append(run_cell(config, pool, rep, n))
            if progress is not None:
                progress(rep, n)
    for (rep, n), (cell_rows, cell_traces) in zip(cells, results):
        rows.extend(cell_rows)
        if cell_traces:
            traces[f"{n}/{rep}"] = cell_traces
    rows.sort(key=_order_key)
    report = {
        "config": config.resolved(),
        "rows": rows,
        "aggregates": aggregate_rows(rows),
        "failures": [r for r in rows if r["status"] != "ok"],
        "meta_traces": traces,
    }
    if config.out_dir:
        write_report(report, config.out_dir)
    return report


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """mean/median/max/min/std (population) of each metric per model x n, successful rows only."""
    groups: dict[tuple[str, int], list[dict]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["model"], r["n_detectors"]), []).append(r)
    out = []
    for (model, n), grp in sorted(groups.items(), key=lambda kv: (MODELS.index(kv[0][0]), -kv[0][1])):
        entry = {"model": model, "n_detectors": n, "count": len(grp)}
        for metric in METRICS:
            vals = np.array([r[metric] for r in grp if r[metric] is not None], dtype=float)
            if vals.size == 0:
                continue
            entry[metric] = {
                "mean": float(vals.mean()),
                "median": float(np.median(vals)),
                "max": float(vals.max()),
                "min": float(vals.min()),
                "std": float(vals.std()),
            }
        out.append(entry)
    return out


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1)


def rows_json(report: dict) -> str:
    return json.dumps(report["rows"], sort_keys=True)


def write_report(report: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report_json(report))
    pd.DataFrame(report["rows"], columns=list(ROW_FIELDS)).to_csv(out / "rows.csv", index=False, float_format="%.17g")
    return path


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def mean_metric(report: dict, model: str, n: int, metric: str = "mse") -> float:
    for a in report["aggregates"]:
        if a["model"] == model and a["n_detectors"] == n and metric in a:
            return a[metric]["mean"]
    raise KeyError(f"no aggregate for {model} at n={n}")


def paired(report: dict, a: str, b: str, n: int, metric: str = "mse") -> list[tuple[float, float]]:
    """(a, b) metric pairs over trials where both models succeeded on the same support."""
    by_key: dict[tuple, dict[str, float]] = {}
    for r in report["rows"]:
        if r["n_detectors"] == n and r["status"] == "ok" and r["model"] in (a, b):
            by_key.setdefault((r["repetition"], r["city"]), {})[r["model"]] = r[metric]
    return [(v[a], v[b]) for _, v in sorted(by_key.items()) if a in v and b in v]


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

PLOT_KINDS = ("curve", "scatter", "loss", "boxplot", "bars")


def _write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
    return path


def _box_stats(values: np.ndarray) -> tuple[float, float, float, float, float, int]:
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    return float(q1), float(med), float(q3), float(inside.min()), float(inside.max()), int(values.size - inside.size)


def emit_plot_data(obj, kind: str, out: str | Path, series=None, grid_points: int = 200, metric: str = "mse") -> Path:
    """Write the CSV behind one figure type.

    * ``curve``: a :class:`~mfdmeta.biparabolic.BiParabolicFit` -> ``x,flow_pred,band_lo,band_hi``
    * ``scatter``: an MfdSeries -> ``occupancy,flow``
    * ``loss``: a meta result (or its JSON) -> one row per meta-iteration
    * ``boxplot``: a report -> quartiles, whiskers and outlier count per model x n
    * ``bars``: a report -> mean of every metric per model x n
    """
    out = Path(out)
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    if kind == "curve":
        if not isinstance(obj, bp.BiParabolicFit):
            raise TypeError("curve needs a bi-parabolic fit")
        hi = float(series.occupancy.max()) if series is not None else max(1.0, 2.0 * obj.x_cd)
        x = np.linspace(0.0, hi, grid_points)
        lo_band, hi_band = bp.band_at(obj, x)
        return _write_csv(out, ["x", "flow_pred", "band_lo", "band_hi"], zip(x.tolist(), obj.predict(x).tolist(), lo_band.tolist(), hi_band.tolist()))
    if kind == "scatter":
        return _write_csv(out, ["occupancy", "flow"], zip(obj.occupancy.tolist(), obj.flow.tolist()))
    if kind == "loss":
        d = obj.to_json() if isinstance(obj, ml.MetaResult) else obj
        inner, outer = d["inner_loss_trace"], d["outer_loss_trace"]
        return _write_csv(out, ["iteration", "inner_loss", "outer_loss"], ((i, float(a), float(b)) for i, (a, b) in enumerate(zip(inner, outer))))
    groups: dict[tuple[str, int], list[float]] = {}
    for r in obj["rows"]:
        if r["status"] == "ok" and r[metric] is not None:
            groups.setdefault((r["model"], r["n_detectors"]), []).append(r[metric])
    keys = sorted(groups, key=lambda k: (MODELS.index(k[0]), -k[1]))
    if kind == "boxplot":
        header = ["model", "n_detectors", "q1", "median", "q3", "whisker_lo", "whisker_hi", "n_outliers"]
        return _write_csv(out, header, ((m, n, *_box_stats(np.array(groups[(m, n)]))) for m, n in keys))
    aggs = {(a["model"], a["n_detectors"]): a for a in obj["aggregates"]}
    rows = []
    for m, n in keys:
        a = aggs[(m, n)]
        rows.append((m, n, *(a[k]["mean"] if k in a else float("nan") for k in METRICS)))
    return _write_csv(out, ["model", "n_detectors", *(f"{k}_mean" for k in METRICS)], rows)
