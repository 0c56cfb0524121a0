import csv
import json

import numpy as np
import pandas as pd
import pytest

from mfdmeta import baselines as bl
from mfdmeta import biparabolic as bp
from mfdmeta import dataio as dio
from mfdmeta import harness as hs
from mfdmeta import metalearn as ml
from conftest import SMALL_POOL, TINY_EXPERIMENT, TINY_META


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        hs.ExperimentConfig.from_dict({"repetitons": 3})


@pytest.mark.parametrize("kw", [dict(models=["maml", "svm"]), dict(repetitions=0), dict(held_out=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        hs.ExperimentConfig(**kw)


def test_resolved_config_round_trips_through_json(tmp_path):
    cfg = hs.ExperimentConfig.from_dict(dict(TINY_EXPERIMENT))
    resolved = cfg.resolved()
    assert resolved["meta"]["n_ite"] == 2 and resolved["meta"]["beta_outer"] == 0.005
    assert resolved["mtpinn"]["hidden_sizes"] == [8, 8]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(resolved))
    again = hs.ExperimentConfig.load(path)
    assert again.resolved() == resolved


# ---------------------------------------------------------------------------
# protocol pieces
# ---------------------------------------------------------------------------


def test_held_out_cities_are_seeded(small_pool):
    a = hs.held_out_cities(small_pool, 3, seed=0, repetition=1)
    assert a == hs.held_out_cities(small_pool, 3, seed=0, repetition=1) and len(set(a)) == 3
    draws = {tuple(hs.held_out_cities(small_pool, 3, seed=0, repetition=r)) for r in range(10)}
    assert len(draws) > 1
    with pytest.raises(ValueError):
        hs.held_out_cities(small_pool, 6, 0, 0)


def test_evaluation_task_is_deterministic(small_pool):
    cfg = ml.MetaConfig(**TINY_META)
    a = hs.evaluation_task(small_pool, "city02", 10, cfg, seed=0, repetition=1)
    b = hs.evaluation_task(small_pool, "city02", 10, cfg, seed=0, repetition=1)
    assert a.replica == b.replica and np.array_equal(a.support.occupancy, b.support.occupancy)
    assert a.query is small_pool["city02"].full


def test_prepared_data_round_trip(tmp_path, small_pool):
    specs = dio.synthetic_pool_specs(6, 0, **SMALL_POOL["city_overrides"])
    records = pd.concat([dio.generate_synthetic_city(s) for s in specs], ignore_index=True)
    summary = hs.write_prepared(records, tmp_path, (10,), replicas=5, seed=0)
    assert summary["cities"] == sorted(small_pool) and summary["skipped"] == {}
    pool = hs.read_pool(tmp_path / "bundles", tmp_path / "full")
    assert sorted(pool) == sorted(small_pool)
    for city, data in pool.items():
        ref = small_pool[city]
        assert np.array_equal(data.full.flow, ref.full.flow) and data.full.norm == ref.full.norm
        for got, want in zip(data.bundles[10].replicas, ref.bundles[10].replicas):
            assert np.array_equal(got.occupancy, want.occupancy) and np.array_equal(got.flow, want.flow)
            assert got.norm == want.norm


def test_read_pool_needs_series(tmp_path):
    (tmp_path / "bundles").mkdir()
    (tmp_path / "full").mkdir()
    with pytest.raises(ValueError):
        hs.read_pool(tmp_path / "bundles", tmp_path / "full")


# ---------------------------------------------------------------------------
# end-to-end report
# ---------------------------------------------------------------------------


def test_every_model_scored_on_each_trial(tiny_report):
    rows = tiny_report["rows"]
    assert tiny_report["failures"] == []
    for model in hs.MODELS:
        mine = [r for r in rows if r["model"] == model]
        assert len(mine) == 6 and all(r["status"] == "ok" for r in mine), model
    assert all(set(r) == set(hs.ROW_FIELDS) for r in rows)


def test_models_share_supports(tiny_report):
    by_trial = {}
    for r in tiny_report["rows"]:
        by_trial.setdefault((r["repetition"], r["city"]), set()).add((r["replica"], r["seed"]))
    assert len(by_trial) == 6 and all(len(v) == 1 for v in by_trial.values())


def test_aggregates_recompute(tiny_report):
    rows = tiny_report["rows"]
    for a in tiny_report["aggregates"]:
        for metric in hs.METRICS:
            vals = np.array([r[metric] for r in rows if r["model"] == a["model"] and r[metric] is not None])
            stats = a[metric]
            assert stats["mean"] == pytest.approx(vals.mean(), rel=1e-12)
            assert stats["median"] == pytest.approx(np.median(vals), rel=1e-12)
            assert stats["std"] == pytest.approx(vals.std(ddof=0), rel=1e-12, abs=1e-15)
            assert (stats["min"], stats["max"]) == (vals.min(), vals.max())
    assert hs.mean_metric(tiny_report, "maml", 10) == next(a for a in tiny_report["aggregates"] if a["model"] == "maml")["mse"]["mean"]
    with pytest.raises(KeyError):
        hs.mean_metric(tiny_report, "maml", 75)


def test_paired_values(tiny_report):
    pairs = hs.paired(tiny_report, "maml", "scratch", 10)
    assert len(pairs) == 6
    maml = sorted(r["mse"] for r in tiny_report["rows"] if r["model"] == "maml")
    assert sorted(a for a, _ in pairs) == maml


def test_meta_traces_recorded(tiny_report):
    traces = tiny_report["meta_traces"]
    assert sorted(traces) == ["10/0", "10/1"]
    assert all(len(t["outer"]) == len(t["inner"]) == 3 for t in traces.values())


def test_rerun_is_identical(tiny_report):
    again = hs.run_experiment(dict(TINY_EXPERIMENT))
    assert hs.rows_json(again) == hs.rows_json(tiny_report)


def test_failed_runs_become_rows(monkeypatch):
    def boom(*args, **kw):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(bl, "train_scratch_comparison", boom)
    cfg = dict(TINY_EXPERIMENT, repetitions=1, models=["scratch", "tw5"])
    report = hs.run_experiment(cfg)
    failed = [r for r in report["rows"] if r["status"] == "failed"]
    assert len(failed) == 3 and all(r["model"] == "scratch" and r["error"] == "diverged" for r in failed)
    assert report["failures"] == failed
    assert [a["model"] for a in report["aggregates"]] == ["tw5"]


def test_report_files(tmp_path, tiny_report):
    path = hs.write_report(tiny_report, tmp_path)
    assert hs.load_report(path) == json.loads(hs.report_json(tiny_report))
    table = pd.read_csv(tmp_path / "rows.csv", float_precision="round_trip")
    assert list(table.columns) == list(hs.ROW_FIELDS) and len(table) == len(tiny_report["rows"])
    assert np.array_equal(table["mse"].to_numpy(), np.array([r["mse"] for r in tiny_report["rows"]]))


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------


def test_boxplot_and_bars_schema(tmp_path, tiny_report):
    box = _read_csv(hs.emit_plot_data(tiny_report, "boxplot", tmp_path / "box.csv"))
    assert box[0] == ["model", "n_detectors", "q1", "median", "q3", "whisker_lo", "whisker_hi", "n_outliers"]
    assert [r[0] for r in box[1:]] == list(hs.MODELS)
    for r in box[1:]:
        q1, med, q3, lo, hi = map(float, r[2:7])
        assert lo <= q1 <= med <= q3 <= hi
    bars = _read_csv(hs.emit_plot_data(tiny_report, "bars", tmp_path / "bars.csv"))
    assert bars[0] == ["model", "n_detectors", "mse_mean", "rrse_mean", "r_mean"]
    maml = next(r for r in bars[1:] if r[0] == "maml")
    assert float(maml[2]) == hs.mean_metric(tiny_report, "maml", 10)


def test_loss_plot_has_one_row_per_iteration(tmp_path, small_pool, tiny_learner):
    cfg = ml.MetaConfig(**TINY_META)
    result = ml.meta_train(tiny_learner, small_pool, cfg, 10, held_out=("city00",))
    rows = _read_csv(hs.emit_plot_data(result, "loss", tmp_path / "loss.csv"))
    assert rows[0] == ["iteration", "inner_loss", "outer_loss"] and len(rows) == 1 + cfg.meta_iterations
    assert [float(r[2]) for r in rows[1:]] == result.outer_loss_trace
    from_json = _read_csv(hs.emit_plot_data(json.loads(json.dumps(result.to_json())), "loss", tmp_path / "l2.csv"))
    assert from_json == rows


def test_scatter_and_curve(tmp_path, small_pool):
    series = small_pool["city03"].full
    scatter = _read_csv(hs.emit_plot_data(series, "scatter", tmp_path / "s.csv"))
    assert scatter[0] == ["occupancy", "flow"] and len(scatter) == 1 + len(series)
    fit = bp.fit(series, bp.FitConfig(epochs=50))
    curve = _read_csv(hs.emit_plot_data(fit, "curve", tmp_path / "c.csv", series=series, grid_points=30))
    assert curve[0] == ["x", "flow_pred", "band_lo", "band_hi"] and len(curve) == 31
    x = np.array([float(r[0]) for r in curve[1:]])
    assert np.allclose(np.array([float(r[1]) for r in curve[1:]]), fit.predict(x), rtol=1e-15, atol=0)
    with pytest.raises(TypeError):
        hs.emit_plot_data(series, "curve", tmp_path / "bad.csv")


def test_unknown_plot_kind(tmp_path, tiny_report):
    with pytest.raises(ValueError):
        hs.emit_plot_data(tiny_report, "pie", tmp_path / "p.csv")


def test_build_pool_skips_ineligible_cities(tmp_path):
    specs = [dio.SyntheticCitySpec(city="big", n_days=2, seed=1), dio.SyntheticCitySpec(city="small", n_detectors=60, n_days=2, seed=2)]
    records = pd.concat([dio.generate_synthetic_city(s) for s in specs], ignore_index=True)
    dio.save_records(records, tmp_path / "records.csv")
    pool = hs.build_pool(hs.ExperimentConfig(records_path=str(tmp_path / "records.csv"), detector_counts=(10,), replicas=2))
    assert list(pool) == ["big"]
    only_small = tmp_path / "small.csv"
    dio.save_records(records[records["city"] == "small"], only_small)
    with pytest.raises(ValueError, match="no eligible cities"):
        hs.build_pool(hs.ExperimentConfig(records_path=str(only_small), detector_counts=(10,), replicas=2))
