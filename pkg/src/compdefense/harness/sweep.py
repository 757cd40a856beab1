"""The trials sweep: fidelity and latency of every victim over a grid of tuning budgets."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..attack import SignatureDB, build_signature_db_from_traces, corpus_traces
from ..autotuner import dump_tuning_log, tune_model_grid
from ..model_ir import ModelGraph, save_model
from ..perfsim import DeviceProfile, total_latency
from ..schedule import dump_schedules, workloads_of
from ..seeding import derive_seed
from ..sidechannel import export_trace_csv
from ..zoo import CONV_FAMILIES, FAMILIES
from .pipeline import ModelSpec, attack_cell, dump_prediction, profile_cell, tuner_config

log = logging.getLogger(__name__)

DEFAULT_GRID = (0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512)
DEFAULT_SIGMA = 0.05


def default_corpus() -> list[dict[str, Any]]:
    return [
        {"family": f, "scale": s, "seed": r}
        for f in CONV_FAMILIES
        for s in (1, 2, 3)
        for r in (100, 101)
    ]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    models: tuple[ModelSpec, ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    noise_sigma: float | None = None  # None: same as the sweep
    include_victims: bool = False

    @classmethod
    def from_dict(cls, rec: Mapping[str, Any] | None) -> "CorpusSpec":
        rec = dict(rec or {})
        models = tuple(ModelSpec.from_dict(m) for m in rec.get("models", default_corpus()))
        return cls(
            models,
            tuple(int(s) for s in rec.get("seeds", (0, 1, 2))),
            rec.get("noise_sigma"),
            bool(rec.get("include_victims", False)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "models": [m.to_dict() for m in self.models],
            "seeds": list(self.seeds),
            "noise_sigma": self.noise_sigma,
            "include_victims": self.include_victims,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    models: tuple[ModelSpec, ...] = tuple(ModelSpec(f, 2, 0) for f in FAMILIES)
    trial_grid: tuple[int, ...] = DEFAULT_GRID
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    noise_sigma: float = DEFAULT_SIGMA
    device: str | None = None
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec.from_dict(None))
    output_dir: str = "sweep_out"
    tuner: Mapping[str, Any] = field(default_factory=dict)
    workers: int = 1
    keep_tuning_logs: bool = True
    base_dir: str | None = None  # where relative paths resolve; not serialized

    def __post_init__(self):
        grid = list(self.trial_grid)
        if grid != sorted(set(grid)) or not grid or grid[0] != 0:
            raise ConfigError("trial_grid must be strictly ascending and start at 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.models:
            raise ConfigError("models must be non-empty")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        tuner_config(0, 0, self.tuner)

    @classmethod
    def from_dict(cls, rec: Mapping[str, Any], base_dir: str | None = None) -> "ExperimentConfig":
        known = {
            "models", "trial_grid", "seeds", "noise_sigma", "device", "corpus",
            "output_dir", "tuner", "workers", "keep_tuning_logs",
        }
        unknown = set(rec) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {"base_dir": base_dir}
        if "models" in rec:
            kw["models"] = tuple(ModelSpec.from_dict(m) for m in rec["models"])
        if "trial_grid" in rec:
            kw["trial_grid"] = tuple(int(t) for t in rec["trial_grid"])
        if "seeds" in rec:
            kw["seeds"] = tuple(int(s) for s in rec["seeds"])
        for key in ("noise_sigma", "device", "output_dir", "workers", "keep_tuning_logs"):
            if key in rec:
                kw[key] = rec[key]
        if "corpus" in rec:
            kw["corpus"] = CorpusSpec.from_dict(rec["corpus"])
        if "tuner" in rec:
            kw["tuner"] = dict(rec["tuner"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=str(path.parent))

    def to_dict(self) -> dict[str, Any]:
        return {
            "models": [m.to_dict() for m in self.models],
            "trial_grid": list(self.trial_grid),
            "seeds": list(self.seeds),
            "noise_sigma": self.noise_sigma,
            "device": self.device,
            "corpus": self.corpus.to_dict(),
            "output_dir": self.output_dir,
            "tuner": dict(self.tuner),
            "workers": self.workers,
            "keep_tuning_logs": self.keep_tuning_logs,
        }

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if self.base_dir is not None and not p.is_absolute():
            return Path(self.base_dir) / p
        return p

    def load_device(self) -> DeviceProfile:
        return DeviceProfile.load(self.resolve(self.device) if self.device else None)

    def corpus_graphs(self, victims: Sequence[ModelGraph] = ()) -> list[ModelGraph]:
        base = Path(self.base_dir) if self.base_dir else None
        corpus = [m.build(base) for m in self.corpus.models]
        if self.corpus.include_victims:
            names = {c.name for c in corpus}
            corpus += [v for v in victims if v.name not in names]
        return corpus

    def corpus_sigma(self) -> float:
        return self.noise_sigma if self.corpus.noise_sigma is None else self.corpus.noise_sigma

    def victims(self) -> list[ModelGraph]:
        base = Path(self.base_dir) if self.base_dir else None
        graphs = [m.build(base) for m in self.models]
        names = [g.name for g in graphs]
        if len(set(names)) != len(names):
            raise ConfigError(f"victim model names must be unique: {names}")
        return graphs


# --- signature database -----------------------------------------------------


def corpus_seeds(seeds: Sequence[int], graph: ModelGraph) -> list[int]:
    return [derive_seed(s, "corpus", graph.name) for s in seeds]


def build_corpus_db(
    corpus: Sequence[ModelGraph], device: DeviceProfile, noise_sigma: float, seeds: Sequence[int]
) -> SignatureDB:
    samples = []
    for g in corpus:
        samples.extend(corpus_traces([g], device, noise_sigma, corpus_seeds(seeds, g)))
    return build_signature_db_from_traces(samples)


# --- results ------------------------------------------------------------------


def relative_change(baseline: float, value: float) -> float:
    """(value - baseline) / baseline; 0 for an unchanged value, NaN off a zero baseline."""
    if value == baseline:
        return 0.0
    if baseline == 0:
        return math.nan
    return (value - baseline) / baseline


@dataclass(frozen=True)
class SweepRow:
    model: str
    trials: int
    n_seeds: int
    fidelity_mean: float
    fidelity_min: float
    fidelity_max: float
    unknown_fraction_mean: float
    kernels_mean: float
    latency_mean_ns: float
    rel_fidelity_change: float
    rel_latency_change: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    meta: dict[str, Any] = field(default_factory=dict)

    def row(self, model: str, trials: int) -> SweepRow:
        for r in self.rows:
            if r.model == model and r.trials == trials:
                return r
        raise KeyError((model, trials))

    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))


@dataclass(frozen=True)
class CellOutcome:
    model: str
    trials: int
    seed: int
    fidelity: float
    unknown_fraction: float
    kernels: int
    latency_ns: int


class CellError(RuntimeError):
    def __init__(self, model: str, trials: int | None, seed: int, cause: BaseException):
        self.cell = (model, trials, seed)
        super().__init__(f"cell model={model} trials={trials} seed={seed}: {cause}")


def _run_unit(
    graph: ModelGraph,
    seed: int,
    cfg: ExperimentConfig,
    device: DeviceProfile,
    db: SignatureDB,
    out: Path,
) -> list[CellOutcome]:
    """All grid points of one (model, seed): a single long tuning run, checkpointed."""
    try:
        grid = tune_model_grid(graph, device, tuner_config(0, seed, cfg.tuner), cfg.trial_grid)
    except Exception as exc:  # noqa: BLE001
        raise CellError(graph.name, max(cfg.trial_grid), seed, exc) from exc
    unit_dir = out / "cells" / graph.name / f"seed_{seed}"
    if cfg.keep_tuning_logs:
        unit_dir.mkdir(parents=True, exist_ok=True)
        (unit_dir / "tuning_log.jsonl").write_bytes(dump_tuning_log(grid[max(cfg.trial_grid)][1]))
    outcomes = []
    for trials in cfg.trial_grid:
        try:
            assignment, _ = grid[trials]
            trace = profile_cell(graph, assignment, device, cfg.noise_sigma, seed)
            pred, score = attack_cell(trace, db, graph)
        except Exception as exc:  # noqa: BLE001
            raise CellError(graph.name, trials, seed, exc) from exc
        cell_dir = unit_dir / f"trials_{trials}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "schedules.json").write_bytes(dump_schedules(assignment))
        (cell_dir / "trace.csv").write_bytes(export_trace_csv(trace))
        (cell_dir / "prediction.json").write_bytes(dump_prediction(pred, score))
        outcomes.append(
            CellOutcome(
                graph.name,
                trials,
                seed,
                score.value,
                pred.unknown_fraction,
                len(trace.records),
                total_latency(trace),
            )
        )
    return outcomes


def _aggregate(outcomes: Sequence[CellOutcome], graphs: Sequence[ModelGraph], grid) -> list[SweepRow]:
    rows = []
    for g in graphs:
        base_fid = base_lat = None
        for trials in grid:
            cells = [o for o in outcomes if o.model == g.name and o.trials == trials]
            fid = np.array([c.fidelity for c in cells])
            lat = float(np.mean([c.latency_ns for c in cells]))
            if trials == 0:
                base_fid, base_lat = float(fid.mean()), lat
            rows.append(
                SweepRow(
                    g.name,
                    trials,
                    len(cells),
                    float(fid.mean()),
                    float(fid.min()),
                    float(fid.max()),
                    float(np.mean([c.unknown_fraction for c in cells])),
                    float(np.mean([c.kernels for c in cells])),
                    lat,
                    relative_change(base_fid, float(fid.mean())),
                    relative_change(base_lat, lat),
                )
            )
    return rows


def corpus_overlap(victims: Sequence[ModelGraph], corpus: Sequence[ModelGraph]) -> dict[str, Any]:
    corpus_bytes = {save_model(g) for g in corpus}
    corpus_keys = set()
    for g in corpus:
        corpus_keys.update(workloads_of(g))
    report = {}
    for g in victims:
        keys = set(workloads_of(g))
        report[g.name] = {
            "graph_in_corpus": save_model(g) in corpus_bytes,
            "workloads_in_corpus": len(keys & corpus_keys) / len(keys),
        }
    return report


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> SweepResult:
    """Run every (model, trials, seed) cell and write all artifacts under ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    device = cfg.load_device()
    victims = cfg.victims()
    corpus = cfg.corpus_graphs(victims)
    db = build_corpus_db(corpus, device, cfg.corpus_sigma(), cfg.corpus.seeds)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    (out / "device.json").write_text(device.to_json())
    (out / "signature_db.json").write_text(db.to_json())
    for g in victims:
        (out / "models").mkdir(exist_ok=True)
        (out / "models" / f"{g.name}.json").write_bytes(save_model(g))

    units = [(g, seed) for g in victims for seed in cfg.seeds]
    outcomes: list[CellOutcome] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_unit, g, s, cfg, device, db, out) for g, s in units]
            for fut in futures:
                outcomes.extend(fut.result())
    else:
        for g, s in units:
            log.info("sweeping %s seed %d", g.name, s)
            outcomes.extend(_run_unit(g, s, cfg, device, db, out))

    rows = _aggregate(outcomes, victims, cfg.trial_grid)
    meta = {
        "device": device.name,
        "signature_db": {"kinds": list(db.kinds), "tau": db.tau, "prototypes": len(db.prototypes)},
        "corpus": [g.name for g in corpus],
        "overlap": corpus_overlap(victims, corpus),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return SweepResult(rows, meta)
