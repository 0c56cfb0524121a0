"""Command-line entry point: ``mfdmeta <subcommand> ...``.

Logs go to stderr; artifacts go to the paths given with ``--out``. Any hard
error exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import baselines as bl
from . import biparabolic as bp
from . import harness as hs
from . import metalearn as ml
from . import mtpinn as mt
from .dataio import (
    DETECTOR_COUNTS,
    MfdSeries,
    generate_synthetic_city,
    load_records,
    normalize,
    synthetic_pool_specs,
)

log = logging.getLogger("mfdmeta")


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _csv_names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _read_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _write_json(obj, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _normalized(series: MfdSeries, reference: MfdSeries | None = None) -> MfdSeries:
    return series if series.norm is not None else normalize(series, reference)


def _section(cfg: dict, name: str) -> dict:
    """A nested ``{"name": {...}}`` section, or the flat document itself."""
    return cfg.get(name, cfg)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    if args.records:
        records, rejected = load_records(args.records)
        if len(rejected):
            log.warning("%d unparseable rows skipped", len(rejected))
    else:
        specs = synthetic_pool_specs(args.synthetic, args.pool_seed)
        records = pd.concat([generate_synthetic_city(s) for s in specs], ignore_index=True)
    summary = hs.write_prepared(records, args.out, args.detector_counts, args.replicas, args.seed, args.interval_rule)
    log.info("prepared %d cities (%d skipped)", len(summary["cities"]), len(summary["skipped"]))
    return 0


def cmd_fit_biparabolic(args) -> int:
    series = _normalized(MfdSeries.from_csv(args.series))
    cfg = bp.FitConfig(**_read_json(args.config))
    result = bp.fit(series, cfg)
    _write_json(bp.fit_to_json(result), args.out)
    if args.curve:
        hs.emit_plot_data(result, "curve", args.curve, series=series)
    x_cd, fv = result.denormalized()
    log.info("x_cd=%.4f f_vertex=%.1f", x_cd, fv)
    return 0


def cmd_train_mtpinn(args) -> int:
    series = _normalized(MfdSeries.from_csv(args.series))
    cfg = mt.MtpinnConfig.from_dict(_section(_read_json(args.config), "mtpinn"))
    if args.seed is not None:
        cfg = mt.MtpinnConfig.from_dict({**asdict(cfg), "seed": args.seed})
    model = mt.train(mt.init_model(cfg, kind=args.kind), series, cfg)
    model.save(args.out)
    return 0


def cmd_meta_train(args) -> int:
    doc = _read_json(args.config)
    pool = hs.read_pool(args.bundles, args.full)
    n = args.n if args.n is not None else _only_count(pool)
    mcfg = mt.MtpinnConfig.from_dict(doc.get("mtpinn", {}))
    meta_cfg = ml.MetaConfig.from_dict(_section(doc, "meta"))
    held = _csv_names(args.holdout)
    learner = mt.init_model(mcfg, seed=args.seed)
    result = ml.meta_train(learner, pool, meta_cfg, n, held_out=held, seed=args.seed)
    for i, city in enumerate(held):
        task = hs.evaluation_task(pool, city, n, meta_cfg, args.seed, 0)
        result.test_reports.append(ml.meta_test(result.theta, task, meta_cfg, result.learner, seed=(args.seed, i)))
    out = result.to_json()
    out["n_detectors"] = n
    out["held_out"] = list(held)
    _write_json(out, args.out)
    for r in result.test_reports:
        log.info("%s: mse=%.1f rrse=%.3f r=%.3f", r.city, r.metrics.mse, r.metrics.rrse, r.metrics.r)
    return 0


def _only_count(pool) -> int:
    counts = sorted({n for d in pool.values() for n in d.bundles})
    if len(counts) != 1:
        raise ValueError(f"several detector counts available {counts}; pass --n")
    return counts[0]


def cmd_baseline(args) -> int:
    doc = _read_json(args.config)
    mcfg = mt.MtpinnConfig.from_dict(doc.get("mtpinn", {}))
    query_raw = MfdSeries.from_csv(args.query)
    query = _normalized(query_raw)
    support = MfdSeries.from_csv(args.support)
    support = support if support.norm is not None else normalize(support, query_raw)
    kind = args.kind
    if kind == "scratch":
        model = bl.train_scratch_comparison(support, bl.scratch_config(mcfg), args.seed)
    elif kind == "nn":
        model = bl.train_plain_nn(support, mcfg, args.seed)
    else:
        if args.pretrained:
            pretrained = mt.MtpinnModel.load(args.pretrained)
        else:
            if not (args.bundles and args.full and args.n):
                raise ValueError("transfer baselines need --pretrained or --bundles/--full/--n for pretraining")
            pool = hs.read_pool(args.bundles, args.full, [args.n])
            held = _csv_names(args.holdout or "")
            pcfg = bl.PretrainConfig(**{**doc.get("pretrain", {}), "seed": args.seed})
            pretrained = bl.transfer_pretrain(bl.pretrain_pool(pool, args.n, held, pcfg), mcfg, pcfg, held_out=held)
        tcfg = bl.TransferConfig.from_label(kind, seed=args.seed, **doc.get("transfer", {}))
        model = bl.transfer_finetune(pretrained, support, tcfg)
    report = ml.evaluate(model, query)
    out = {"kind": kind, "model": model.to_json(), "report": report.row()}
    _write_json(out, args.out)
    log.info("%s: mse=%.1f rrse=%.3f", kind, report.metrics.mse, report.metrics.rrse)
    return 0


def cmd_run_experiment(args) -> int:
    cfg = hs.ExperimentConfig.from_dict(_read_json(args.config))
    if args.out:
        cfg.out_dir = args.out
    if args.workers:
        cfg.workers = args.workers
    report = hs.run_experiment(cfg, progress=lambda rep, n: log.info("done: n=%d repetition=%d", n, rep))
    if not cfg.out_dir:
        sys.stdout.write(hs.report_json(report) + "\n")
    if report["failures"]:
        log.warning("%d runs failed; see the report's failures list", len(report["failures"]))
    return 0


def cmd_emit_plots(args) -> int:
    if args.kind == "scatter":
        hs.emit_plot_data(MfdSeries.from_csv(args.input), "scatter", args.out)
        return 0
    doc = json.loads(Path(args.input).read_text())
    if args.kind == "curve":
        series = _normalized(MfdSeries.from_csv(args.series)) if args.series else None
        hs.emit_plot_data(_fit_from_json(doc), "curve", args.out, series=series)
    else:
        hs.emit_plot_data(doc, args.kind, args.out, metric=args.metric)
    return 0


def _fit_from_json(doc: dict) -> bp.BiParabolicFit:
    p = doc["params"]
    params = bp.BiParabolicParams(
        np.asarray(p["anchors"], dtype=float), np.asarray(p["logits"], dtype=float), p["f_vertex"], p["a2_raw"], p["alpha"], p["beta"]
    )
    band = doc.get("band")
    if band:
        band = {k: (None if v is None else tuple(v)) for k, v in band.items()}
    return bp.BiParabolicFit(params, doc.get("loss_trace", []), None if doc.get("norm") is None else tuple(doc["norm"]), band)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfdmeta", description="MFD estimation with physics-informed meta-learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="clean records and build biased detector-subset bundles")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--records", help="CSV with city,detector,interval,flow,occupancy")
    src.add_argument("--synthetic", type=int, metavar="N_CITIES", help="generate a synthetic pool instead")
    p.add_argument("--pool-seed", type=int, default=0)
    p.add_argument("--detector-counts", type=_csv_ints, default=DETECTOR_COUNTS)
    p.add_argument("--replicas", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--interval-rule", choices=("subset", "full"), default="subset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("fit-biparabolic", help="fit the shared-vertex bi-parabola to one series")
    p.add_argument("--series", required=True)
    p.add_argument("--config", help="JSON with FitConfig fields")
    p.add_argument("--curve", help="also write curve plot data here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_biparabolic)

    p = sub.add_parser("train-mtpinn", help="train MTPINN (or the plain net) on one series")
    p.add_argument("--series", required=True)
    p.add_argument("--config")
    p.add_argument("--kind", choices=("mtpinn", "nn"), default="mtpinn")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_mtpinn)

    p = sub.add_parser("meta-train", help="meta-train on prepared bundles and test on held-out cities")
    p.add_argument("--bundles", required=True)
    p.add_argument("--full", required=True)
    p.add_argument("--config")
    p.add_argument("--holdout", required=True, help="comma-separated city names")
    p.add_argument("--n", type=int, help="detector count (required if several were prepared)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("baseline", help="train one comparison model on a support series")
    p.add_argument("--kind", choices=("scratch", "nn", "tc5", "tc1000", "tw5", "tw1000"), required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--query", required=True, help="full-detector series of the same city")
    p.add_argument("--config")
    p.add_argument("--pretrained", help="pretrained model JSON for transfer kinds")
    p.add_argument("--bundles")
    p.add_argument("--full")
    p.add_argument("--n", type=int)
    p.add_argument("--holdout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("run-experiment", help="full paired comparison from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("emit-plots", help="write plot data CSV from a fit, meta result or report")
    p.add_argument("--input", required=True, help="fit/meta-result/report JSON, or a series CSV for scatter")
    p.add_argument("--kind", choices=hs.PLOT_KINDS, required=True)
    p.add_argument("--series", help="series CSV (curve range)")
    p.add_argument("--metric", choices=hs.METRICS, default="mse")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
