"""Tensor-program tuning as a defense against kernel side-channel architecture extraction.

Pipeline: build a victim graph (:mod:`.model_ir`, :mod:`.zoo`), tune per-workload
schedules (:mod:`.autotuner`), lower and simulate inference (:mod:`.schedule`,
:mod:`.perfsim`), export the profiler trace (:mod:`.sidechannel`) and run the
architecture-extraction attack against it (:mod:`.attack`).
"""
from .attack import (
    UNKNOWN,
    AttackPrediction,
    FidelityScore,
    SignatureDB,
    build_signature_db,
    fidelity,
    predict_architecture,
)
from .autotuner import TunerConfig, TunerState, featurize, rank_update, tune_model, tune_workload
from .model_ir import ModelGraph, OperatorNode, TensorShape, infer_shapes, load_model, save_model
from .perfsim import DeviceProfile, KernelRecord, Trace, run_inference, simulate_kernel, total_latency
from .schedule import (
    CompiledModel,
    Kernel,
    Schedule,
    Workload,
    default_schedule,
    lower,
    mutate,
    schedule_space,
)
from .sidechannel import AttackerView, attacker_view, export_trace_csv, parse_trace_csv
from .zoo import generate_model

__version__ = "0.1.0"
