import numpy as np
import pytest

from mfdmeta import biparabolic as bp
from mfdmeta import dataio as dio
from mfdmeta import diffcore as dc
from oracles import bi_parabola, central_difference, rel_error


def _random_params(rng):
    anchors = np.sort(rng.uniform(0.01, 1.0, rng.integers(1, 40)))
    return bp.BiParabolicParams(anchors, rng.normal(0, 3, anchors.size), float(rng.uniform(0.05, 3.0)), float(rng.normal(0, 10)))


def test_structural_invariants_over_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = _random_params(rng)
        x_cd, fv = p.x_cd, p.f_vertex
        assert abs(bp.predict(p, 0.0)) <= 1e-12
        assert bp.predict(p, x_cd) == fv
        left = fv - p.a1 * (x_cd - x_cd) ** 2
        right = fv - p.a2 * (x_cd - x_cd) ** 2
        assert left == right == fv
        assert p.a2 > 0
        assert abs(p.weights.sum() - 1.0) <= 1e-12
        assert p.anchors.min() - 1e-15 <= x_cd <= p.anchors.max() + 1e-15


def test_predict_hand_example():
    p = bp.BiParabolicParams(np.array([0.3]), np.zeros(1), 0.9, bp.a2_inverse(5.0))
    assert p.x_cd == 0.3
    assert bp.predict(p, 0.5) == pytest.approx(0.70, abs=1e-12)
    assert bp.predict(p, 0.0) == pytest.approx(0.0, abs=1e-15)


def test_both_branches_open_downward():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = _random_params(rng)
        x = np.linspace(0, 1, 101)
        y = bp.predict(p, x)
        assert np.all(y <= p.f_vertex + 1e-12)


def test_a2_transform_positive_and_invertible():
    for raw in (-800.0, -30.0, 0.0, 3.0, 800.0):
        assert bp.a2_transform(raw) > 0
    for a2 in (0.01, 1.0, 5.0, 60.0):
        assert bp.a2_transform(bp.a2_inverse(a2)) == pytest.approx(a2, rel=1e-10)


def test_predict_matches_independent_oracle():
    p = bp.BiParabolicParams(np.array([0.2, 0.4]), np.array([0.0, 0.0]), 1.2, bp.a2_inverse(3.0))
    x = np.linspace(0, 1, 57)
    assert np.allclose(bp.predict(p, x), bi_parabola(x, 0.3, 1.2, p.a2), rtol=0, atol=1e-13)


# ---------------------------------------------------------------------------
# composite_loss
# ---------------------------------------------------------------------------


def _exact_series(p, n=200, seed=0):
    x = np.random.default_rng(seed).uniform(0.01, 0.9, n)
    return dio.MfdSeries("c", (), x, bp.predict(p, x))


def test_exact_data_has_zero_regime_losses():
    p = bp.BiParabolicParams(np.array([0.3]), np.zeros(1), 0.9, bp.a2_inverse(2.0))
    parts = bp.composite_loss(p, _exact_series(p))
    assert parts.l1 < 1e-25 and parts.l2 < 1e-25
    assert parts.exceed == 0.0
    assert not parts.empty_regime


def test_no_exceedance_when_all_flows_below_vertex():
    p = bp.BiParabolicParams(np.array([0.3]), np.zeros(1), 0.9, bp.a2_inverse(2.0))
    x = np.linspace(0.01, 0.9, 50)
    parts = bp.composite_loss(p, dio.MfdSeries("c", (), x, np.full(50, 0.5)))
    assert parts.exceed == 0.0 and parts.l1 > 0


def test_inverse_frequency_weights():
    congested = np.array([False] * 900 + [True] * 100)
    w = bp.inverse_frequency_weights(congested)
    assert w[~congested][0] == pytest.approx(1 / 900) and w[congested][0] == pytest.approx(1 / 100)
    assert w[congested][0] / w[~congested][0] == pytest.approx(9.0)
    assert w.sum() == pytest.approx(2.0)
    assert np.array_equal(bp.inverse_frequency_weights(np.zeros(4, bool)), np.full(4, 0.25))


def test_empty_regime_is_flagged():
    p = bp.BiParabolicParams(np.array([0.95]), np.zeros(1), 0.9, 0.0)
    x = np.linspace(0.01, 0.5, 30)
    assert bp.composite_loss(p, dio.MfdSeries("c", (), x, 0.5 * x)).empty_regime


def test_loss_decomposes_into_named_parts():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.01, 0.9, 120)
    y = np.clip(bi_parabola(x, 0.35, 0.9, 2.0) + rng.normal(0, 0.05, 120), 0, None)
    p = bp.BiParabolicParams(np.unique(x), rng.normal(0, 1, 120), 0.8, 0.3, alpha=1.0, beta=0.1)
    parts = bp.composite_loss(p, dio.MfdSeries("c", (), x, y))
    # independent numpy evaluation of the same definitions
    x_cd = p.x_cd
    cong = x > x_cd
    pred = bi_parabola(x, x_cd, p.f_vertex, p.a2)
    l1 = np.mean((y[~cong] - pred[~cong]) ** 2)
    l2 = np.mean((y[cong] - pred[cong]) ** 2)
    exceed = np.mean(np.maximum(y - p.f_vertex, 0))
    near = np.abs(x - x_cd) <= bp.VERTEX_BAND
    vertex = (p.f_vertex - np.quantile(y[near], 0.95, method="inverted_cdf")) ** 2
    assert parts.l1 == pytest.approx(l1, rel=1e-12)
    assert parts.l2 == pytest.approx(l2, rel=1e-12)
    assert parts.exceed == pytest.approx(exceed, rel=1e-12)
    assert parts.vertex == pytest.approx(vertex, rel=1e-12)
    assert parts.total == pytest.approx(l1 + l2 + exceed + 0.1 * vertex, rel=1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = np.sort(rng.uniform(0.02, 0.9, 80))
    y = bi_parabola(x, 0.3, 0.9, 2.0) + rng.normal(0, 0.05, 80)
    anchors = bp.make_anchors(x)
    theta = dc.ParameterSet({"logits": rng.normal(0, 0.5, anchors.size), "f_vertex": np.array(0.85), "a2_raw": np.array(-2.0)})

    def loss(p):
        return bp._loss_graph(p, anchors, x, y, 1.0, 0.1)[0]

    leaves = theta.leaves()
    g = dc.grad(loss(leaves), leaves)
    for k in theta:
        fd = central_difference(lambda v, k=k: float(dc.forward(loss, theta.merged({k: v}))), theta[k], 1e-6)
        assert rel_error(g[k], fd) <= 1e-4, k


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _synthetic_series(noise, seed=0, stride=1, bias=0.2):
    spec = dio.SyntheticCitySpec(x_cd=0.3, f_vertex=900.0, width_ratio=2.0, noise_sigma=noise, detector_bias_sigma=bias if noise else 0.0, seed=seed, n_days=2)
    raw = dio.aggregate(dio.clean_records(dio.generate_synthetic_city(spec))[0])
    return dio.normalize(raw.take(np.arange(0, len(raw), stride)))


@pytest.fixture(scope="module")
def noiseless_fit():
    series = _synthetic_series(0.0)
    return series, bp.fit(series)


def test_noiseless_recovery(noiseless_fit):
    _, result = noiseless_fit
    x_cd, fv = result.denormalized()
    assert abs(x_cd - 0.3) <= 0.02
    assert abs(fv / 900.0 - 1) <= 0.01


def test_noiseless_band_is_degenerate():
    p = bp.BiParabolicParams(np.array([0.3]), np.zeros(1), 0.9, bp.a2_inverse(2.0))
    series = _exact_series(p, n=300)
    band = bp.prediction_interval(bp.BiParabolicFit(p), series)
    for lo, hi in band.values():
        assert hi - lo < 1e-9


def test_noisy_fit_loss_drops_90_percent():
    series = _synthetic_series(30.0, seed=1, stride=3)
    result = bp.fit(series, bp.FitConfig(alpha=1.0, beta=0.1, lr=0.01, epochs=2000))
    assert result.loss_trace[-1]["total"] <= 0.1 * result.loss_trace[0]["total"]
    assert set(result.loss_trace[0]) == {"epoch", "total", "l1", "l2", "exceed", "vertex"}


def test_duplicating_points_leaves_fit_unchanged():
    series = _synthetic_series(30.0, seed=2, stride=4)
    cfg = bp.FitConfig(epochs=300)
    a = bp.fit(series, cfg)
    doubled = series.take(np.repeat(np.arange(len(series)), 2))
    b = bp.fit(doubled, cfg)
    assert a.x_cd == pytest.approx(b.x_cd, abs=1e-9)
    assert a.f_vertex == pytest.approx(b.f_vertex, abs=1e-9)
    assert a.params.a2 == pytest.approx(b.params.a2, rel=1e-8)


def test_fit_invariant_to_shuffling():
    series = _synthetic_series(30.0, seed=3, stride=4)
    cfg = bp.FitConfig(epochs=300)
    a = bp.fit(series, cfg)
    b = bp.fit(series.take(np.random.default_rng(0).permutation(len(series))), cfg)
    assert abs(a.x_cd - b.x_cd) <= 1e-6 and abs(a.f_vertex - b.f_vertex) <= 1e-6


def test_fit_is_deterministic():
    series = _synthetic_series(30.0, seed=5, stride=6)
    cfg = bp.FitConfig(epochs=100)
    assert bp.fit(series, cfg).loss_trace == bp.fit(series, cfg).loss_trace


def test_fit_needs_ten_points():
    with pytest.raises(ValueError):
        bp.fit(dio.MfdSeries("c", (), np.linspace(0.1, 0.5, 9), np.linspace(0.1, 0.5, 9)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_trace():
    series = _synthetic_series(30.0, seed=6, stride=6)
    with pytest.raises(bp.DivergenceError) as info:
        bp.fit(series, bp.FitConfig(lr=1e200, optimizer="gd", epochs=50))
    assert len(info.value.trace) >= 1


def test_gd_optimizer_option_runs():
    series = _synthetic_series(30.0, seed=7, stride=6)
    result = bp.fit(series, bp.FitConfig(optimizer="gd", epochs=50))
    assert result.loss_trace[-1]["total"] < result.loss_trace[0]["total"]


def test_anchor_cap():
    anchors = bp.make_anchors(np.random.default_rng(0).uniform(0, 1, 5000))
    assert anchors.size == bp.MAX_ANCHORS and np.all(np.diff(anchors) > 0)


# ---------------------------------------------------------------------------
# prediction interval
# ---------------------------------------------------------------------------


def test_symmetric_residuals_give_symmetric_band():
    p = bp.BiParabolicParams(np.array([0.3]), np.zeros(1), 0.9, bp.a2_inverse(2.0))
    x = np.random.default_rng(0).uniform(0.01, 0.9, 4000)
    noise = np.random.default_rng(1).normal(0, 0.05, 4000)
    series = dio.MfdSeries("c", (), x, bp.predict(p, x) + noise)
    for lo, hi in bp.prediction_interval(bp.BiParabolicFit(p), series).values():
        assert abs(lo + hi) < 0.1 * (hi - lo)


def test_small_regime_band_is_omitted():
    p = bp.BiParabolicParams(np.array([0.3]), np.zeros(1), 0.9, bp.a2_inverse(2.0))
    x = np.concatenate([np.linspace(0.01, 0.29, 50), np.linspace(0.31, 0.5, 5)])
    band = bp.prediction_interval(bp.BiParabolicFit(p), dio.MfdSeries("c", (), x, bp.predict(p, x)))
    assert band["congested"] is None and band["uncongested"] is not None
    lo, hi = bp.band_at(bp.BiParabolicFit(p, band=band), np.array([0.1, 0.4]))
    assert np.isfinite(lo[0]) and np.isnan(lo[1])


def test_band_coverage_on_noisy_synthetic():
    coverage = []
    for seed in range(10):
        series = _synthetic_series(30.0, seed=seed, stride=2)
        result = bp.fit(series, bp.FitConfig(epochs=400))
        lo, hi = bp.band_at(result, series.occupancy)
        coverage.append(np.mean((series.flow >= lo) & (series.flow <= hi)))
    assert np.mean(coverage) >= 0.93


def test_fit_json_contents(noiseless_fit):
    series, result = noiseless_fit
    doc = bp.fit_to_json(result)
    assert doc["x_cd_denorm"] == pytest.approx(result.x_cd * series.norm[1])
    assert doc["max_flow_denorm"] == pytest.approx(result.f_vertex * series.norm[0])
    assert set(doc["band"]) == {"uncongested", "congested"}
