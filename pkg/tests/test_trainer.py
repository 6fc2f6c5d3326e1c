import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpn import autodiff as ad
from gpn import trainer as tr
from gpn.autodiff import Tape
from gpn.bench import BenchSpec, generate
from gpn.checkpoint import dumps_slots
from gpn.encoder import aux_loss
from gpn.memory import PrototypeMemory
from gpn.taxonomy import CategoryGraph, sample_random
from gpn.trainer import (
    TrainConfig,
    TrainingAborted,
    curriculum_aux_prob,
    lambda_schedule,
    lr_at,
    sample_task,
    task_forward,
    train,
)


@pytest.fixture(scope="module")
def small_bench():
    return generate(BenchSpec(depth=4, branching=(2.0, 3.0), feature_dim=6, samples_per_class=30,
                              n_train_classes=12, n_test_classes=3, close_dist_range=(1, 2),
                              far_dist_range=(3, 6), seed=5))


def small_cfg(**kw):
    base = dict(tau_total=30, hidden_dims=(8,), embed_dim=4, heads=2, query_per_class=5,
                aux_batch=16, k_n=2, lr_decay_start=10, lr_decay_interval=5, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedules

def test_curriculum_endpoints():
    assert curriculum_aux_prob(0, 350_000) == 1.0
    assert abs(curriculum_aux_prob(350_000, 350_000) - 0.9 ** 20) < 1e-12
    assert curriculum_aux_prob(20000, 20000) == pytest.approx(0.12157665459056929, abs=1e-15)


@given(st.integers(1, 10_000), st.data())
def test_curriculum_is_monotone(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert curriculum_aux_prob(b, total) <= curriculum_aux_prob(a, total)


def test_lambda_schedule():
    assert lambda_schedule(0, 1000) == 1.0
    assert lambda_schedule(1000, 1000) == 0.0
    assert lambda_schedule(500, 1000) == 0.5


def test_lr_schedule_matches_repeated_decay():
    cfg = TrainConfig(lr=1e-3, lr_decay_factor=0.9, lr_decay_start=20, lr_decay_interval=10)
    lr = cfg.lr
    for tau in range(0, 200):
        if tau > cfg.lr_decay_start and (tau - cfg.lr_decay_start) % cfg.lr_decay_interval == 0:
            lr *= 0.9
        assert lr_at(cfg, tau) == pytest.approx(lr, rel=1e-12)
    assert lr_at(cfg, 45) == 1e-3 * 0.9 ** 2


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau_total=0)
    with pytest.raises(ValueError):
        TrainConfig(n_way=1)
    with pytest.raises(ValueError):
        TrainConfig(sampling_mix="X")
    assert TrainConfig(variant="CC").variant == "C->C"


# ---------------------------------------------------------------------------
# task sampling

def test_random_mix_delegates_to_sample_random(small_bench):
    cfg = small_cfg(sampling_mix="R-S")
    pools = {y: small_bench.pools[y] for y in small_bench.train}
    task = sample_task(small_bench.graph, pools, cfg, np.random.default_rng(9))
    assert task.classes == sample_random(small_bench.graph, 5, np.random.default_rng(9), sorted(pools))
    assert task.sampler == "random"


def test_support_and_query_are_disjoint(small_bench):
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    pools = {y: small_bench.pools[y] for y in small_bench.train}
    for _ in range(1000):
        task = sample_task(small_bench.graph, pools, cfg, rng)
        assert task.support_x.shape == (5, 1, 6) and task.query_x.shape == (5, 5, 6)
        for s, q in zip(task.support_idx, task.query_idx):
            assert not set(s) & set(q)
        assert set(task.classes) <= set(pools)


def test_snowball_mix_keeps_classes_close(small_bench):
    cfg = small_cfg(sampling_mix="S-S", k_n=2)
    g = small_bench.graph
    rng = np.random.default_rng(1)
    pools = {y: small_bench.pools[y] for y in small_bench.train}
    for _ in range(100):
        task = sample_task(g, pools, cfg, rng)
        assert task.sampler == "snowball"
        if task.fallback:
            continue
        for i in range(1, 5):
            d = [g.hop_distance(task.classes[i], p) for p in task.classes[:i]]
            assert min(x for x in d if x is not None) <= 2


def test_small_pools_are_not_eligible():
    g = CategoryGraph(range(6))
    pools = {y: np.zeros((3 if y == 0 else 10, 2)) for y in range(6)}
    cfg = small_cfg(query_per_class=4, sampling_mix="R-S")
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert 0 not in sample_task(g, pools, cfg, rng).classes


# ---------------------------------------------------------------------------
# training loop

def run_small(bench, **kw):
    return train(bench.graph, bench.pools, small_cfg(**kw), bench.train)


def test_single_episode_run_is_reproducible(small_bench):
    a = run_small(small_bench, tau_total=1)
    b = run_small(small_bench, tau_total=1)
    assert len(a.log) == 1 and a.log == b.log


def test_runs_are_bit_identical(small_bench):
    a = run_small(small_bench)
    b = run_small(small_bench)
    assert a.log == b.log
    assert dumps_slots(a.model.store.values) == dumps_slots(b.model.store.values)
    assert a.memory.to_bytes() == b.memory.to_bytes()
    assert {r["branch"] for r in a.log} == {"aux", "episode"}


def test_log_records_schedule_values(small_bench):
    res = run_small(small_bench)
    cfg = res.config
    for rec in res.log:
        tau = rec["episode"]
        assert rec["lambda"] == lambda_schedule(tau, cfg.tau_total)
        assert rec["lr"] == lr_at(cfg, tau)
        assert math.isfinite(rec["loss"])
        assert (rec["branch"] == "episode") == bool(rec["task_classes"])


def test_memory_refreshes_every_m_episodes(small_bench):
    res = run_small(small_bench, tau_total=8, m=3)
    assert set(res.memory.classes()) == set(small_bench.train)
    assert {res.memory.stamp(y) for y in res.memory.classes()} == {6}
    assert not set(res.memory.classes()) & set(small_bench.test["close"])


def test_aux_only_leaves_propagation_parameters_untouched(small_bench):
    res = run_small(small_bench, aux_mode="always")
    init = tr.init_model(res.config, 6, small_bench.train)
    for name, value in init.store.values.items():
        same = res.model.store[name].tobytes() == value.tobytes()
        assert same == name.startswith("prop/"), name
    assert all(r["branch"] == "aux" for r in res.log)


def test_episode_only_leaves_aux_head_untouched(small_bench):
    res = run_small(small_bench, aux_mode="off")
    init = tr.init_model(res.config, 6, small_bench.train)
    for name, value in init.store.values.items():
        same = res.model.store[name].tobytes() == value.tobytes()
        assert same == name.startswith("fc/"), name


def test_gradient_groups_per_branch(small_bench):
    cfg = small_cfg()
    model = tr.init_model(cfg, 6, small_bench.train)
    memory = PrototypeMemory()
    memory.refresh(model.embed_array, {y: small_bench.pools[y] for y in small_bench.train}, 0,
                   np.random.default_rng(0))
    task = sample_task(small_bench.graph, {y: small_bench.pools[y] for y in small_bench.train}, cfg,
                       np.random.default_rng(2))
    model.store.zero_grad()
    tape = Tape()
    tape.backward(task_forward(tape, model, small_bench.graph, task, memory, 0.5).loss)
    touched = {n for n, t in model.store.touched.items() if t}
    assert {n.split("/")[0] for n in touched} == {"enc", "prop"}

    model.store.zero_grad()
    tape = Tape()
    x = small_bench.pools[small_bench.train[0]][:4]
    tape.backward(aux_loss(tape, model.store, model.encoder, x, [0, 0, 0, 0]))
    touched = {n for n, t in model.store.touched.items() if t}
    assert {n.split("/")[0] for n in touched} == {"enc", "fc"}


def test_training_loss_decreases(small_bench):
    res = run_small(small_bench, tau_total=600, aux_mode="off", lr_decay_start=400, lr_decay_interval=100)
    losses = [r["loss"] for r in res.log if r["branch"] == "episode"]
    tenth = len(losses) // 10
    assert np.mean(losses[:tenth]) > np.mean(losses[-tenth:])


def test_non_finite_loss_aborts_with_dump(small_bench, monkeypatch):
    def broken(tape, store, cfg, x, labels):
        return ad.mul(aux_loss(tape, store, cfg, x, labels), float("nan"))

    monkeypatch.setattr(tr, "aux_loss", broken)
    with pytest.raises(TrainingAborted) as info:
        run_small(small_bench, aux_mode="always")
    assert info.value.dump["episode"] == 1
    assert info.value.dump["branch"] == "aux"


def test_unknown_training_class_is_rejected(small_bench):
    with pytest.raises(ValueError):
        train(small_bench.graph, small_bench.pools, small_cfg(), [10_000])
