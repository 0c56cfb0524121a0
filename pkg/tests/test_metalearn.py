import numpy as np
import pytest

from mfdmeta import dataio as dio
from mfdmeta import diffcore as dc
from mfdmeta import metalearn as ml
from mfdmeta import mtpinn as mt
from oracles import central_difference

SMALL = dict(k_support=10, n_ite=2, m_query=20, meta_iterations=3, tasks_per_iteration=3)


def _cfg(**kw):
    return ml.MetaConfig(**{**SMALL, **kw})


def _task(pool, city="city00", n=10, replica=0, cfg=None, seed=0):
    cfg = cfg or _cfg()
    support = ml.draw_support(pool[city].bundles[n].replicas[replica], cfg, np.random.default_rng(seed))
    return ml.Task(city, support, pool[city].full, n, replica)


# ---------------------------------------------------------------------------
# configuration and sampling
# ---------------------------------------------------------------------------


def test_default_config_values():
    cfg = ml.MetaConfig()
    assert (cfg.alpha_inner, cfg.beta_outer, cfg.n_ite, cfg.meta_iterations) == (0.02, 0.005, 5, 150)
    assert (cfg.tasks_per_iteration, cfg.k_support, cfg.m_query) == (3, 150, 750)
    assert cfg.order == "second"


@pytest.mark.parametrize(
    "kw",
    [dict(k_support=100), dict(alpha_inner=0.0), dict(beta_outer=-1.0), dict(order="zeroth"), dict(outer_optimizer="rmsprop"), dict(tasks_per_iteration=0)],
)
def test_config_validation(kw):
    with pytest.raises(ml.MetaConfigError):
        _cfg(**kw)


def test_task_requires_same_city(small_pool):
    a, b = small_pool["city00"], small_pool["city01"]
    with pytest.raises(ValueError):
        ml.Task("city00", a.bundles[10].replicas[0], b.full, 10)


def test_sampled_tasks_avoid_held_out(small_pool):
    rng = np.random.default_rng(0)
    held = ("city01", "city04")
    seen = {ml.sample_task(small_pool, 10, rng, _cfg(), exclude=held).city for _ in range(200)}
    assert seen == set(small_pool) - set(held)


def test_sampling_is_seeded(small_pool):
    def sequence(seed):
        rng = np.random.default_rng(seed)
        return [(t.city, t.replica, t.support.occupancy.tolist()) for t in (ml.sample_task(small_pool, 10, rng, _cfg()) for _ in range(5))]

    assert sequence(3) == sequence(3)
    assert sequence(3) != sequence(4)


def test_empty_pool_is_an_error(small_pool):
    with pytest.raises(ValueError):
        ml.sample_task(small_pool, 10, np.random.default_rng(0), _cfg(), exclude=list(small_pool))


def test_support_is_capped_at_replica_size():
    replica = dio.MfdSeries("c", (), np.linspace(0, 1, 400), np.linspace(0, 1, 400))
    support = ml.draw_support(replica, ml.MetaConfig(), np.random.default_rng(0))
    assert len(support) == 400
    assert len(set(support.occupancy.tolist())) == 400


def test_support_draw_without_replacement(small_pool):
    replica = small_pool["city02"].bundles[10].replicas[1]
    support = ml.draw_support(replica, _cfg(k_support=50, n_ite=4, m_query=200), np.random.default_rng(1))
    assert len(support) == 200
    assert len(np.unique(support.intervals)) == 200


def test_support_batches_are_disjoint():
    cfg = ml.MetaConfig()
    batches = ml.support_batches(750, cfg)
    assert len(batches) == 5 and all(b.size == 150 for b in batches)
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(750))
    short = ml.support_batches(400, cfg)
    assert len(short) == 5 and np.array_equal(np.concatenate(short), np.arange(400))
    assert ml.support_batches(10, _cfg(n_ite=0, m_query=0)) == []


# ---------------------------------------------------------------------------
# inner adaptation
# ---------------------------------------------------------------------------


def test_zero_inner_steps_returns_theta(small_pool, tiny_learner):
    cfg = _cfg(n_ite=0, m_query=0)
    theta = tiny_learner.params
    adapted, losses = ml.inner_adapt(theta, _task(small_pool, cfg=_cfg()), cfg, tiny_learner)
    assert adapted.equals(theta) and adapted is not theta and losses == []


def test_five_inner_steps_record_five_losses(small_pool, tiny_learner):
    cfg = ml.MetaConfig()
    task = _task(small_pool, cfg=cfg)
    assert len(task.support) == 576
    _, losses = ml.inner_adapt(tiny_learner.params, task, cfg, tiny_learner)
    assert len(losses) == 5


def test_inner_adapt_does_not_mutate_theta(small_pool, tiny_learner):
    theta = tiny_learner.params
    before = theta.clone()
    ml.inner_adapt(theta, _task(small_pool), _cfg(), tiny_learner)
    assert theta.equals(before)


def test_one_inner_step_matches_finite_difference_update(small_pool, tiny_learner):
    cfg = _cfg(k_support=12, n_ite=1, m_query=12, alpha_inner=0.05)
    task = _task(small_pool, cfg=cfg)
    theta = tiny_learner.params
    adapted, _ = ml.inner_adapt(theta, task, cfg, tiny_learner)
    x, y = task.support.occupancy, task.support.flow
    for k in theta:
        fd = central_difference(lambda v, k=k: mt.total_loss(tiny_learner.with_params(theta.merged({k: v})), x, y), theta[k], 1e-6)
        expected = theta[k] - cfg.alpha_inner * fd
        assert np.allclose(adapted[k], expected, rtol=0, atol=1e-9), k


def test_quadratic_one_step_through_update():
    theta = dc.ParameterSet({"t": np.array([1.5, -0.5])})
    g = dc.grad_through_update(lambda p: dc.sum_(dc.square(p["t"])), theta, 0.1, 1)
    assert np.allclose(g["t"], 1.28 * theta["t"], rtol=1e-14, atol=0)


# ---------------------------------------------------------------------------
# meta-gradient and meta-training
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("order", ["second", "first"])
def test_meta_gradient_without_inner_steps_is_query_gradient(small_pool, tiny_learner, order):
    cfg = _cfg(n_ite=0, m_query=0, order=order)
    task = _task(small_pool)
    g, q, inner = ml.task_meta_gradient(tiny_learner.params, task, cfg, tiny_learner)
    leaves = tiny_learner.params.leaves()
    loss, _, _ = mt.loss_graph(leaves, task.query.occupancy, task.query.flow, tiny_learner.config)
    assert g.equals(dc.grad(loss, leaves))
    assert q == float(loss.value) and inner == []


def test_first_order_gradient_is_query_gradient_at_adapted_params(small_pool, tiny_learner):
    cfg = _cfg(order="first")
    task = _task(small_pool)
    g, _, _ = ml.task_meta_gradient(tiny_learner.params, task, cfg, tiny_learner)
    adapted, _ = ml.inner_adapt(tiny_learner.params, task, cfg, tiny_learner)
    leaves = adapted.leaves()
    loss, _, _ = mt.loss_graph(leaves, task.query.occupancy, task.query.flow, tiny_learner.config)
    assert g.allclose(dc.grad(loss, leaves), rtol=1e-12, atol=1e-15)


def test_outer_step_uses_sum_of_task_gradients(small_pool, tiny_learner):
    cfg = _cfg(meta_iterations=1, outer_optimizer="sgd", beta_outer=0.01)
    held = ("city05",)
    result = ml.meta_train(tiny_learner, small_pool, cfg, 10, held_out=held, seed=4)
    rng = np.random.default_rng([4, 10, 1])
    total = tiny_learner.params.zeros_like()
    for t in range(3):
        task = ml.sample_task(small_pool, 10, rng, cfg, exclude=held)
        g, _, _ = ml.task_meta_gradient(tiny_learner.params, task, cfg, tiny_learner, seed=(4, 0, t))
        total = dc.ParameterSet({k: total[k] + g[k] for k in total})
    expected = dc.sgd_step(tiny_learner.params, total, 0.01)
    assert result.theta.allclose(expected, rtol=1e-13, atol=1e-15)
    assert len(result.task_cities[0]) == 3


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_zero_outer_rate_keeps_theta(small_pool, tiny_learner, optimizer):
    cfg = _cfg(beta_outer=0.0, outer_optimizer=optimizer)
    result = ml.meta_train(tiny_learner, small_pool, cfg, 10, held_out=("city00",), seed=1)
    assert result.theta.equals(tiny_learner.params)


def test_meta_train_is_reproducible_and_excludes_held_out(small_pool, tiny_learner):
    held = ("city02", "city03")
    cfg = _cfg(meta_iterations=4)
    a = ml.meta_train(tiny_learner, small_pool, cfg, 10, held_out=held, seed=7)
    b = ml.meta_train(tiny_learner, small_pool, cfg, 10, held_out=held, seed=7)
    assert a.theta.equals(b.theta)
    assert a.outer_loss_trace == b.outer_loss_trace and a.inner_loss_trace == b.inner_loss_trace
    assert len(a.outer_loss_trace) == len(a.inner_loss_trace) == 4
    assert not {c for it in a.task_cities for c in it} & set(held)
    assert tiny_learner.params.equals(mt.init_model(tiny_learner.config, seed=0).params)


def test_unknown_held_out_city_is_an_error(small_pool, tiny_learner):
    with pytest.raises(ValueError):
        ml.meta_train(tiny_learner, small_pool, _cfg(), 10, held_out=("atlantis",))


def test_meta_test_takes_exactly_n_ite_steps(small_pool, tiny_learner):
    cfg = _cfg()
    report = ml.meta_test(tiny_learner.params, _task(small_pool), cfg, tiny_learner)
    assert report.steps == cfg.n_ite and len(report.loss_trace) == cfg.n_ite
    assert report.city == "city00" and report.prediction.shape == (576,)


def test_evaluate_reports_denormalized_values(small_pool, tiny_learner):
    query = small_pool["city01"].full
    report = ml.evaluate(tiny_learner, query)
    flow_scale, occ_scale = query.norm
    assert report.x_cd_denorm == pytest.approx(report.x_cd * occ_scale, rel=1e-15)
    assert report.f_max_denorm == pytest.approx(report.f_max * flow_scale, rel=1e-15)
    expected = np.mean(((report.prediction - query.flow) * flow_scale) ** 2)
    assert report.metrics.mse == pytest.approx(expected, rel=1e-12)


@pytest.fixture(scope="module")
def meta_run(small_pool):
    """Default MAML settings on the small pool, two cities held out."""
    learner = mt.init_model(mt.MtpinnConfig(), seed=0)
    held = ("city01", "city04")
    return ml.meta_train(learner, small_pool, ml.MetaConfig(), 10, held_out=held, seed=0), held


def test_outer_loss_declines_over_meta_training(meta_run):
    result, _ = meta_run
    trace = result.outer_loss_trace
    assert len(trace) == 150
    assert np.mean(trace[-10:]) < np.mean(trace[:10])


def test_meta_trained_init_beats_random_init_after_adaptation(meta_run, small_pool):
    result, held = meta_run
    cfg = ml.MetaConfig()
    random_theta = mt.init_model(result.learner.config, seed=0).params
    assert not random_theta.equals(result.theta)
    wins, trials = 0, 0
    for city in held:
        for replica in range(5):
            task = _task(small_pool, city=city, replica=replica, cfg=cfg, seed=replica)
            meta = ml.meta_test(result.theta, task, cfg, result.learner)
            random = ml.meta_test(random_theta, task, cfg, result.learner)
            wins += meta.metrics.mse < random.metrics.mse
            trials += 1
    assert wins / trials >= 0.8
