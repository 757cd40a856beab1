"""Simulated-annealing schedule search guided by an online pairwise ranker.

Accounting follows the usual auto-tuner convention: a *trial* is one measurement
of one candidate schedule. Each round proposes ``batch_size`` one-step
neighbours of the current schedule, ranks them with the surrogate and measures
only the best-ranked one.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from .model_ir import EPILOGUE_OPS, ModelGraph
from .perfsim import DeviceProfile, efficiency, simulate_kernel
from .schedule import (
    Schedule,
    ScheduleSpace,
    Workload,
    default_schedule,
    lower,
    mutate,
    schedule_space,
    workloads_of,
)
from .seeding import derive_seed

N_FEATURES = 9
LEARNING_RATE = 0.1
FEATURE_NAMES = (
    "log2_tile_m",
    "log2_tile_n",
    "log2_tile_k",
    "log2_unroll",
    "log2_vector_width",
    "log2_split_k",
    "fuse_epilogue",
    "ln_flops",
    "ln_ideal_read_bytes",
)


@dataclass(frozen=True)
class TunerConfig:
    trials: int = 0
    batch_size: int = 8
    initial_temperature: float | None = None  # None: 0.25 x baseline cost
    cooling_rate: float = 0.98
    surrogate_warmup: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.trials < 0:
            raise ValueError("trials must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.cooling_rate < 1:
            raise ValueError("cooling_rate must lie in (0, 1)")
        if self.initial_temperature is not None and self.initial_temperature <= 0:
            raise ValueError("initial_temperature must be positive")


@dataclass
class TunerState:
    best_schedule: Schedule
    best_cost: float
    baseline_cost: float
    temperature: float
    weights: np.ndarray
    trials_used: int = 0
    history: list[tuple[Schedule, float]] = field(default_factory=list)
    # best-so-far after each trial, for plotting and monotonicity checks
    best_curve: list[float] = field(default_factory=list)
    # trials budget -> best schedule once that many trials were spent
    checkpoints: dict[int, Schedule] = field(default_factory=dict)


def workload_size(w: Workload) -> tuple[int, int]:
    """(flops, ideal read bytes) of ``w``; both are schedule independent."""
    k = lower(w.as_graph(), {w.key: default_schedule(w)}).kernels[0]
    return k.flops, k.ideal_read_bytes


def featurize(s: Schedule, w: Workload, size: tuple[int, int] | None = None) -> np.ndarray:
    flops, nbytes = size or workload_size(w)
    return np.array(
        [
            math.log2(s.tile_m),
            math.log2(s.tile_n),
            math.log2(s.tile_k),
            math.log2(s.unroll),
            math.log2(s.vector_width),
            math.log2(s.split_k),
            float(s.fuse_epilogue),
            math.log(max(flops, 1)),
            math.log(max(nbytes, 1)),
        ]
    )


def rank_update(
    state: TunerState,
    a: tuple[np.ndarray, float],
    b: tuple[np.ndarray, float],
    learning_rate: float = LEARNING_RATE,
) -> TunerState:
    """Perceptron step on one measured pair; higher score means predicted cheaper."""
    (fa, ca), (fb, cb) = a, b
    if ca == cb:
        return state
    cheap, costly = (fa, fb) if ca < cb else (fb, fa)
    if state.weights @ cheap <= state.weights @ costly:
        state.weights = state.weights + learning_rate * (cheap - costly)
    return state


def tune_workload(
    w: Workload,
    cost_oracle: Callable[[Schedule], float],
    cfg: TunerConfig,
    space: ScheduleSpace | None = None,
    on_trial: Callable[[dict], None] | None = None,
    checkpoints: Iterable[int] = (),
) -> tuple[Schedule, TunerState]:
    """Anneal from the default schedule, spending exactly ``cfg.trials`` measurements.

    The search never looks at the total budget, so the first ``n`` trials of a
    longer run are identical to a run with ``trials = n``; ``checkpoints`` records
    the best schedule at such intermediate budgets.
    """
    marks = {n for n in checkpoints if 0 <= n <= cfg.trials}
    if space is None:
        space = schedule_space(w)
    rng = random.Random(cfg.seed)
    default = default_schedule(w)
    if default not in space:
        default = next(iter(space))
    base = cost_oracle(default)
    temp = cfg.initial_temperature if cfg.initial_temperature is not None else 0.25 * base
    temp = max(temp, 1e-9)
    state = TunerState(default, base, base, temp, np.zeros(N_FEATURES))
    if 0 in marks:
        state.checkpoints[0] = default
    if cfg.trials == 0:
        return default, state

    size = workload_size(w)
    feats: dict[Schedule, np.ndarray] = {}

    def fv(s: Schedule) -> np.ndarray:
        if s not in feats:
            feats[s] = featurize(s, w, size)
        return feats[s]

    measured = {default}
    current, current_cost = default, base
    while state.trials_used < cfg.trials:
        cands = [mutate(current, w, rng, space) for _ in range(cfg.batch_size)]
        if len(state.history) >= cfg.surrogate_warmup:
            scores = [float(state.weights @ fv(c)) for c in cands]
            order = sorted(range(len(cands)), key=lambda i: -scores[i])
            cands = [cands[i] for i in order]
        else:
            rng.shuffle(cands)
        pick = next((c for c in cands if c not in measured), cands[0])
        cost = cost_oracle(pick)
        measured.add(pick)
        state.history.append((pick, cost))
        state.trials_used += 1

        if cost <= current_cost or rng.random() < math.exp(-(cost - current_cost) / state.temperature):
            current, current_cost = pick, cost
        if cost < state.best_cost:
            state.best_schedule, state.best_cost = pick, cost
        state.best_curve.append(state.best_cost)
        if state.trials_used in marks:
            state.checkpoints[state.trials_used] = state.best_schedule
        if on_trial is not None:
            on_trial(
                {
                    "trial_index": state.trials_used - 1,
                    "schedule": pick.to_dict(),
                    "cost_ns": cost,
                    "best_cost_ns": state.best_cost,
                    "temperature": state.temperature,
                }
            )
        if len(state.history) > 1:
            other, other_cost = state.history[rng.randrange(len(state.history) - 1)]
            rank_update(state, (fv(pick), cost), (fv(other), other_cost))
        state.temperature *= cfg.cooling_rate
    return state.best_schedule, state


def workload_cost(w: Workload, s: Schedule, device: DeviceProfile, graph: ModelGraph | None = None) -> float:
    """Noise-free latency of ``w`` lowered on its own under ``s``.

    An epilogue op scheduled for fusion is costed as its marginal work inside the
    producer's kernel: no launch and no round trip of the intermediate tensor.
    """
    graph = graph or w.as_graph()
    compiled = lower(graph, {w.key: s})
    if s.fuse_epilogue and w.op_kind in EPILOGUE_OPS and len(w.input_shapes) == 1:
        (k,) = compiled.kernels
        extra = k.ideal_read_bytes - k.read_streams[0][0]
        busy = max(k.flops / device.peak_flops, extra / device.mem_bandwidth)
        return busy * 1e9 * efficiency(s.unroll, s.vector_width, device)
    return float(sum(simulate_kernel(k, device).duration_ns for k in compiled.kernels))


def tune_model(
    graph: ModelGraph,
    device: DeviceProfile,
    cfg: TunerConfig,
    log: list[dict] | None = None,
    checkpoints: Iterable[int] = (),
) -> tuple[dict[str, Schedule], dict[str, TunerState]]:
    """Tune every distinct workload of ``graph`` independently with ``cfg.trials`` each.

    Each workload gets its own sub-seed derived from ``(cfg.seed, workload key)``,
    so results do not depend on tuning order.
    """
    checkpoints = tuple(checkpoints)
    assignment: dict[str, Schedule] = {}
    states: dict[str, TunerState] = {}
    for key, w in workloads_of(graph).items():
        solo = w.as_graph()
        cache: dict[Schedule, float] = {}

        def oracle(s: Schedule, w=w, solo=solo, cache=cache) -> float:
            if s not in cache:
                cache[s] = workload_cost(w, s, device, solo)
            return cache[s]

        sub = replace(cfg, seed=derive_seed(cfg.seed, "tune", key))
        sink = None
        if log is not None:
            sink = lambda rec, key=key: log.append({"workload_key": key, **rec})  # noqa: E731
        assignment[key], states[key] = tune_workload(
            w, oracle, sub, on_trial=sink, checkpoints=checkpoints
        )
    return assignment, states


def tune_model_grid(
    graph: ModelGraph, device: DeviceProfile, cfg: TunerConfig, grid: Iterable[int]
) -> dict[int, tuple[dict[str, Schedule], list[dict]]]:
    """Assignments and tuning logs for every budget in ``grid`` from one long run.

    Equivalent to calling :func:`tune_model` once per budget.
    """
    grid = sorted(set(grid))
    log: list[dict] = []
    _, states = tune_model(graph, device, replace(cfg, trials=max(grid)), log, checkpoints=grid)
    out = {}
    for n in grid:
        assignment = {key: st.checkpoints[n] for key, st in states.items()}
        out[n] = (assignment, [rec for rec in log if rec["trial_index"] < n])
    return out


def dump_tuning_log(records: Iterable[Mapping]) -> bytes:
    lines = [json.dumps(dict(r), sort_keys=True) for r in records]
    return "".join(line + "\n" for line in lines).encode("utf-8")
