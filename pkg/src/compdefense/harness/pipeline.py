"""One experiment cell: compile -> profile -> attack, shared by the CLI and the sweep.

Keeping the seed plumbing here is what makes the file-based CLI pipeline and the
in-process sweep produce identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from ..attack import (
    AttackPrediction,
    FidelityScore,
    SignatureDB,
    fidelity,
    predict_architecture,
    prediction_to_dict,
)
from ..autotuner import TunerConfig, tune_model
from ..model_ir import ModelGraph, load_model
from ..perfsim import DeviceProfile, Trace, run_inference
from ..schedule import Schedule, lower
from ..seeding import derive_seed
from ..zoo import generate_model

TUNER_KEYS = ("batch_size", "initial_temperature", "cooling_rate", "surrogate_warmup")


@dataclass(frozen=True)
class ModelSpec:
    family: str | None = None
    scale: int | None = None
    seed: int = 0
    path: str | None = None

    @classmethod
    def from_dict(cls, rec: Mapping[str, Any]) -> "ModelSpec":
        if "path" in rec:
            return cls(path=str(rec["path"]))
        if "family" not in rec:
            raise ValueError(f"model spec needs 'family' or 'path': {dict(rec)}")
        return cls(rec["family"], int(rec.get("scale", 2)), int(rec.get("seed", 0)))

    def to_dict(self) -> dict[str, Any]:
        if self.path is not None:
            return {"path": self.path}
        return {"family": self.family, "scale": self.scale, "seed": self.seed}

    def build(self, base_dir: Path | None = None) -> ModelGraph:
        if self.path is not None:
            p = Path(self.path)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return load_model(p.read_bytes())
        return generate_model(self.family, self.scale, self.seed)


def tuner_config(trials: int, seed: int, overrides: Mapping[str, Any] | None = None) -> TunerConfig:
    extra = {k: v for k, v in (overrides or {}).items() if k in TUNER_KEYS}
    unknown = set(overrides or {}) - set(TUNER_KEYS)
    if unknown:
        raise ValueError(f"unknown tuner options: {sorted(unknown)}")
    return TunerConfig(trials=trials, seed=seed, **extra)


def noise_seed(seed: int, graph: ModelGraph) -> int:
    return derive_seed(seed, "noise", graph.name)


def compile_cell(
    graph: ModelGraph,
    device: DeviceProfile,
    trials: int,
    seed: int,
    tuner: Mapping[str, Any] | None = None,
) -> tuple[dict[str, Schedule], list[dict]]:
    log: list[dict] = []
    assignment, _ = tune_model(graph, device, tuner_config(trials, seed, tuner), log)
    return assignment, log


def profile_cell(
    graph: ModelGraph,
    assignment: Mapping[str, Schedule],
    device: DeviceProfile,
    noise_sigma: float,
    seed: int,
) -> Trace:
    return run_inference(lower(graph, assignment), device, noise_sigma, noise_seed(seed, graph))


def attack_cell(trace: Trace, db: SignatureDB, graph: ModelGraph | None = None) -> tuple[AttackPrediction, FidelityScore | None]:
    pred = predict_architecture(trace, db)
    return pred, (fidelity(pred, graph) if graph is not None else None)


def dump_prediction(pred: AttackPrediction, score: FidelityScore | None) -> bytes:
    return (json.dumps(prediction_to_dict(pred, score), sort_keys=True, indent=1) + "\n").encode()
