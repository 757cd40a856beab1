import math
import random
from dataclasses import replace

import numpy as np
import pytest

from compdefense.autotuner import (
    LEARNING_RATE,
    N_FEATURES,
    TunerConfig,
    TunerState,
    dump_tuning_log,
    featurize,
    rank_update,
    tune_model,
    tune_model_grid,
    tune_workload,
    workload_cost,
)
from compdefense.model_ir import build_graph
from compdefense.perfsim import run_inference, total_latency
from compdefense.schedule import (
    Schedule,
    default_assignment,
    default_schedule,
    lower,
    schedule_space,
    workloads_of,
)
from compdefense.zoo import generate_model

from conftest import dense_graph, tile_unroll_space


def only_workload(g):
    (w,) = workloads_of(g).values()
    return w


def counting(fn):
    calls = []

    def oracle(s):
        calls.append(s)
        return fn(s)

    return oracle, calls


def test_featurize_dense64():
    w = only_workload(dense_graph())
    f = featurize(default_schedule(w), w)
    assert f.shape == (N_FEATURES,)
    expected = [4, 4, 4, 0, 0, 0, 0, math.log(524_288), math.log(32_768)]
    assert np.allclose(f, expected)
    assert np.array_equal(f, featurize(default_schedule(w), w))


def test_featurize_injective_on_knobs():
    w = only_workload(dense_graph(8, 8, 8))
    seen = {tuple(featurize(s, w)) for s in schedule_space(w)}
    assert len(seen) == schedule_space(w).size


def zero_state():
    return TunerState(Schedule(), 0.0, 0.0, 1.0, np.zeros(N_FEATURES))


def test_rank_update_from_zero():
    a, b = np.arange(N_FEATURES, dtype=float), np.ones(N_FEATURES)
    st = rank_update(zero_state(), (a, 10.0), (b, 5.0))
    assert np.allclose(st.weights, LEARNING_RATE * (b - a))


def test_rank_update_noop_when_ordered():
    st = zero_state()
    st.weights = np.ones(N_FEATURES)
    cheap, costly = np.full(N_FEATURES, 2.0), np.zeros(N_FEATURES)
    before = st.weights.copy()
    rank_update(st, (cheap, 1.0), (costly, 2.0))
    assert np.array_equal(st.weights, before)
    rank_update(st, (cheap, 3.0), (cheap, 3.0))
    assert np.array_equal(st.weights, before)


def test_rank_update_converges_on_one_pair():
    rng = np.random.default_rng(0)
    st = zero_state()
    st.weights = rng.normal(size=N_FEATURES) * 5
    a, b = rng.normal(size=N_FEATURES), rng.normal(size=N_FEATURES)
    for _ in range(10_000):
        rank_update(st, (a, 1.0), (b, 2.0))
        if st.weights @ a > st.weights @ b:
            break
    assert st.weights @ a > st.weights @ b


def test_zero_trials_is_default():
    w = only_workload(dense_graph())
    oracle, calls = counting(lambda s: s.tile_m)
    best, st = tune_workload(w, oracle, TunerConfig(trials=0))
    assert best == default_schedule(w)
    assert st.history == [] and len(calls) == 1


def test_one_trial():
    w = only_workload(dense_graph())
    cost = lambda s: float(sum(s.to_dict().values()))  # noqa: E731
    oracle, calls = counting(cost)
    best, st = tune_workload(w, oracle, TunerConfig(trials=1, seed=4))
    assert len(calls) == 2 and st.trials_used == 1
    assert st.best_cost == min(cost(calls[0]), cost(calls[1]))
    assert cost(best) == st.best_cost


def test_exhaustive_restricted_space(device):
    # 64 members: tiles only, everything else pinned
    g = dense_graph(8, 8, 8)
    w = only_workload(g)
    space = schedule_space(w).restrict(unroll=1, vector_width=1, split_k=1, fuse_epilogue=False)
    assert space.size == 64
    oracle = lambda s: workload_cost(w, s, device, g)  # noqa: E731
    optimum = min(oracle(s) for s in space)
    for seed in range(3):
        _, st = tune_workload(w, oracle, TunerConfig(trials=256, seed=seed), space=space)
        assert st.best_cost == optimum


def test_exhaustive_tile_unroll_space(device):
    # the dense 8^3 tile space is nearly flat; this one has a unique optimum
    g = dense_graph(256, 256, 256)
    w = only_workload(g)
    space = tile_unroll_space(w)
    assert space.size == 64
    costs = {s: workload_cost(w, s, device, g) for s in space}
    ranked = sorted(costs.values())
    assert ranked[0] < ranked[1] and len(set(ranked)) >= 20
    for seed in range(3):
        best, st = tune_workload(w, costs.__getitem__, TunerConfig(trials=256, seed=seed), space=space)
        assert st.best_cost == ranked[0] and costs[best] == ranked[0]


@pytest.mark.parametrize("seed", range(10))
def test_tuner_invariants(seed, device):
    rng = random.Random(seed)
    family = rng.choice(["resnet_mini", "densenet_mini", "transformer_mini"])
    g = generate_model(family, 1, seed)
    w = rng.choice(list(workloads_of(g).values()))
    space = schedule_space(w)
    oracle, calls = counting(lambda s: workload_cost(w, s, device))
    cfg = TunerConfig(trials=40, seed=seed)
    best, st = tune_workload(w, oracle, cfg)
    assert len(calls) == 1 + cfg.trials == 1 + len(st.history)
    assert all(s in space for s, _ in st.history)
    assert all(a >= b for a, b in zip(st.best_curve, st.best_curve[1:]))
    assert st.best_cost == min([st.baseline_cost] + [c for _, c in st.history])
    again = tune_workload(w, lambda s: workload_cost(w, s, device), cfg)[1]
    assert again.history == st.history and np.array_equal(again.weights, st.weights)


def test_prefix_stability_and_checkpoints(device):
    w = only_workload(dense_graph(32, 64, 16))
    oracle = lambda s: workload_cost(w, s, device)  # noqa: E731
    _, long = tune_workload(w, oracle, TunerConfig(trials=60, seed=2), checkpoints=(0, 10, 60))
    _, short = tune_workload(w, oracle, TunerConfig(trials=10, seed=2))
    assert long.history[:10] == short.history
    assert long.checkpoints[10] == short.best_schedule
    assert long.checkpoints[0] == default_schedule(w)


def test_config_validation():
    for bad in ({"trials": -1}, {"batch_size": 0}, {"cooling_rate": 1.0}, {"initial_temperature": 0}):
        with pytest.raises(ValueError):
            TunerConfig(**bad)


def test_fused_cost_is_marginal(device):
    g = build_graph("r", [("x", [1, 8, 8, 16])], [{"id": "r", "op": "relu", "inputs": ["x"]}])
    w = only_workload(g)
    s = default_schedule(w)
    plain = workload_cost(w, s, device)
    fused = workload_cost(w, replace(s, fuse_epilogue=True), device)
    assert plain >= device.launch_overhead
    assert 0 <= fused < plain - device.launch_overhead + 1


def dedup_graph():
    # 10 nodes, 3 workloads: one conv shape, one relu shape, one bias-add shape
    nodes, prev = [], "x"
    for i in range(10):
        op = ["conv2d", "relu", "add"][i % 3] if i < 9 else "relu"
        rec = {"id": f"n{i}", "op": op, "inputs": [prev]}
        if op == "conv2d":
            rec["attrs"] = {"kernel_hw": [3, 3], "out_channels": 4}
        nodes.append(rec)
        prev = rec["id"]
    return build_graph("dedup", [("x", [1, 8, 8, 4])], nodes)


def test_tune_model_dedup(device):
    g = dedup_graph()
    assert len(g.nodes) == 10
    log = []
    assignment, states = tune_model(g, device, TunerConfig(trials=5), log)
    assert len(states) == len(assignment) == 3
    assert len(log) == 15
    assert {r["workload_key"] for r in log} == set(assignment)


def test_tune_model_zero_trials(device):
    g = generate_model("densenet_mini", 1, 0)
    assignment, _ = tune_model(g, device, TunerConfig(trials=0))
    assert assignment == default_assignment(g)


def test_grid_equals_separate_runs(device):
    g = generate_model("yolo_mini", 1, 0)
    cfg = TunerConfig(seed=7)
    grid = tune_model_grid(g, device, cfg, (0, 3, 12))
    for n in (0, 3, 12):
        log = []
        assignment, _ = tune_model(g, device, replace(cfg, trials=n), log)
        assert grid[n][0] == assignment
        assert dump_tuning_log(grid[n][1]) == dump_tuning_log(log)


def test_tuning_speeds_up_resnet(device):
    g = generate_model("resnet_mini", 2, 0)
    grid = tune_model_grid(g, device, TunerConfig(seed=0), (0, 512))

    def latency(a):
        return total_latency(run_inference(lower(g, a), device))

    assert latency(grid[512][0]) < latency(grid[0][0])
