"""Analytical roofline model standing in for device execution plus a profiler.

Latency of a kernel::

    duration_ns = launch_overhead + max(flops / peak_flops, bytes / mem_bandwidth) * eff

where ``eff`` in [0.55, 1.0] drops linearly (in log2 space) as ``unroll`` and
``vector_width`` approach the device sweet spot. Reduction operands whose tiled
footprint exceeds L2 capacity pay a doubled re-read factor.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .schedule import CompiledModel, Kernel

METRICS = ("duration_ns", "l2_read_bytes", "l2_write_bytes", "input_bytes", "output_bytes")
MIN_EFFICIENCY = 0.55


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    peak_flops: float
    mem_bandwidth: float
    launch_overhead: float
    l2_capacity: float
    unroll_sweet_spot: int = 4
    vector_sweet_spot: int = 4

    def __post_init__(self):
        for f in ("peak_flops", "mem_bandwidth", "launch_overhead", "l2_capacity"):
            if not getattr(self, f) > 0:
                raise ValueError(f"device {f} must be strictly positive")
        if self.unroll_sweet_spot < 2 or self.vector_sweet_spot < 2:
            raise ValueError("sweet spots must be at least 2")

    @classmethod
    def from_json(cls, data: bytes | str) -> "DeviceProfile":
        return cls(**json.loads(data))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "DeviceProfile":
        """Read a profile file; ``None`` gives the bundled a100-like profile."""
        if path is None:
            return cls.from_json(
                resources.files("compdefense").joinpath("data/a100_like.json").read_text()
            )
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"


@dataclass(frozen=True)
class KernelRecord:
    index: int
    kernel_name: str
    duration_ns: int
    l2_read_bytes: int
    l2_write_bytes: int
    input_bytes: int
    output_bytes: int

    def metrics(self) -> tuple[int, int, int, int, int]:
        return (
            self.duration_ns,
            self.l2_read_bytes,
            self.l2_write_bytes,
            self.input_bytes,
            self.output_bytes,
        )


@dataclass(frozen=True)
class Trace:
    # provenance does not take part in equality: the CSV interchange format
    # carries records only
    model: str = field(compare=False)
    device: str = field(compare=False)
    noise_sigma: float = field(compare=False)
    seed: int = field(compare=False)
    records: tuple[KernelRecord, ...] = ()

    def __post_init__(self):
        for i, r in enumerate(self.records):
            if r.index != i:
                raise ValueError(f"record indices must be 0..n-1, found {r.index} at {i}")


def efficiency(unroll: int, vector_width: int, device: DeviceProfile) -> float:
    def closeness(value: int, sweet: int) -> float:
        return max(0.0, 1.0 - abs(math.log2(value) - math.log2(sweet)) / math.log2(sweet))

    c = (closeness(unroll, device.unroll_sweet_spot) + closeness(vector_width, device.vector_sweet_spot)) / 2
    return 1.0 - (1.0 - MIN_EFFICIENCY) * c


def actual_reads(k: Kernel, device: DeviceProfile) -> int:
    footprint = k.ideal_read_bytes + k.output_bytes
    penalty = 2 if footprint > device.l2_capacity else 1
    return sum(b * (r * penalty if r > 1 else r) for b, r in k.read_streams)


def simulate_kernel(k: Kernel, device: DeviceProfile, index: int = 0) -> KernelRecord:
    """Noise-free metrics for one kernel."""
    reads = actual_reads(k, device)
    writes = k.write_bytes
    compute_s = k.flops / device.peak_flops
    memory_s = (reads + writes) / device.mem_bandwidth
    busy_ns = max(compute_s, memory_s) * 1e9 * efficiency(k.unroll, k.vector_width, device)
    return KernelRecord(
        index=index,
        kernel_name=k.name,
        duration_ns=math.floor(device.launch_overhead + busy_ns),
        l2_read_bytes=reads,
        l2_write_bytes=writes,
        input_bytes=k.input_bytes,
        output_bytes=k.output_bytes,
    )


def _noise_factors(seed: int, index: int, sigma: float) -> list[float]:
    out = []
    for metric_id in range(len(METRICS)):
        # one independent stream per (seed, kernel, metric): order-free and parallel-safe
        z = np.random.default_rng([seed, index, metric_id]).standard_normal()
        out.append(math.exp(sigma * z))
    return out


def run_inference(
    compiled: CompiledModel, device: DeviceProfile, noise_sigma: float = 0.0, seed: int = 0
) -> Trace:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    records = []
    floor_ns = math.ceil(device.launch_overhead)
    for i, k in enumerate(compiled.kernels):
        rec = simulate_kernel(k, device, i)
        if noise_sigma > 0:
            vals = [round(v * f) for v, f in zip(rec.metrics(), _noise_factors(seed, i, noise_sigma))]
            vals[0] = max(vals[0], floor_ns)
            rec = KernelRecord(i, rec.kernel_name, *vals)
        records.append(rec)
    return Trace(compiled.graph_name, device.name, noise_sigma, seed, tuple(records))


def total_latency(trace: Trace) -> int:
    return sum(r.duration_ns for r in trace.records)
