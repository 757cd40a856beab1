"""Per-workload tuning knobs and lowering of a scheduled graph into kernels.

Lowering is where schedules become observable: tiling changes how often operands
are re-read, split-K adds a partial-sum kernel, and epilogue fusion removes a
kernel boundary together with one write and one read of the intermediate tensor.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
from dataclasses import dataclass, fields, replace
from typing import Any, Iterator, Mapping

from .model_ir import (
    DTYPE_BYTES,
    EPILOGUE_OPS,
    REDUCTION_OPS,
    ModelGraph,
    OperatorNode,
    TensorShape,
    build_graph,
)

MAX_TILE = 64
DEFAULT_TILE = 16
UNROLL_VALUES = (1, 2, 4, 8)
VECTOR_VALUES = (1, 2, 4)
SPLIT_K_VALUES = (1, 2, 4)
FUSE_VALUES = (False, True)


@dataclass(frozen=True)
class Workload:
    """Canonical tuning task: two nodes with equal op, attrs and shapes share one."""

    op_kind: str
    attrs_json: str
    input_shapes: tuple[tuple[int, ...], ...]
    output_shape: tuple[int, ...]

    @classmethod
    def of(cls, graph: ModelGraph, node: OperatorNode) -> "Workload":
        return cls(
            node.op_kind,
            json.dumps(node.attrs, sort_keys=True, separators=(",", ":")),
            tuple(graph.shape_of(s).dims for s in node.inputs),
            node.output_shape.dims,
        )

    @property
    def attrs(self) -> dict[str, Any]:
        return json.loads(self.attrs_json)

    @property
    def key(self) -> str:
        ins = ";".join("x".join(map(str, s)) for s in self.input_shapes)
        out = "x".join(map(str, self.output_shape))
        return f"{self.op_kind}{self.attrs_json}[{ins}]->[{out}]"

    @property
    def is_reduction(self) -> bool:
        return self.op_kind in REDUCTION_OPS

    def extents(self) -> tuple[int, int, int]:
        """Loop extents (M, N, K) of the op's GEMM view; K = 1 without a reduction."""
        out = self.output_shape
        a = self.attrs
        if self.op_kind == "conv2d":
            kh, kw = a["kernel_hw"]
            return math.prod(out[:-1]), out[-1], kh * kw * self.input_shapes[0][-1]
        if self.op_kind == "dense":
            return math.prod(out[:-1]), out[-1], self.input_shapes[0][-1]
        if self.op_kind == "attention_matmul":
            return out[1], out[2], self.input_shapes[0][2]
        return math.prod(out[:-1]), out[-1], 1

    def as_graph(self) -> ModelGraph:
        """A graph holding this workload alone, fed directly by graph inputs."""
        inputs = [(f"in{i}", list(s)) for i, s in enumerate(self.input_shapes)]
        node = {
            "id": "op",
            "op": self.op_kind,
            "attrs": self.attrs,
            "inputs": [iid for iid, _ in inputs],
        }
        return build_graph("workload", inputs, [node])


@dataclass(frozen=True)
class Schedule:
    tile_m: int = 1
    tile_n: int = 1
    tile_k: int = 1
    unroll: int = 1
    vector_width: int = 1
    split_k: int = 1
    fuse_epilogue: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in _KNOB_NAMES}

    @classmethod
    def from_dict(cls, rec: Mapping[str, Any]) -> "Schedule":
        names = {f.name for f in fields(cls)}
        unknown = set(rec) - names
        if unknown:
            raise ValueError(f"unknown schedule knobs: {sorted(unknown)}")
        return cls(**rec)


_KNOB_NAMES = tuple(f.name for f in fields(Schedule))


def _tile_values(extent: int) -> tuple[int, ...]:
    padded = 1 << max(0, extent - 1).bit_length()
    top = min(padded, MAX_TILE)
    return tuple(1 << i for i in range(top.bit_length()))


class ScheduleSpace:
    """Cartesian product of legal knob values for one workload."""

    def __init__(self, knobs: Mapping[str, tuple[Any, ...]]):
        self.knobs = dict(knobs)
        self.movable = tuple(name for name, values in self.knobs.items() if len(values) > 1)

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.knobs.values())

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[Schedule]:
        names = list(self.knobs)
        for values in itertools.product(*self.knobs.values()):
            yield Schedule(**dict(zip(names, values)))

    def __contains__(self, s: Schedule) -> bool:
        rec = s.to_dict()
        for name, value in rec.items():
            legal = self.knobs.get(name)
            if legal is None:
                if value != getattr(Schedule(), name):
                    return False
            elif value not in legal:
                return False
        return True

    def restrict(self, **fixed: Any) -> "ScheduleSpace":
        knobs = dict(self.knobs)
        for name, value in fixed.items():
            if name not in knobs or value not in knobs[name]:
                raise ValueError(f"{name}={value!r} is not a legal value")
            knobs[name] = (value,)
        return ScheduleSpace(knobs)


def schedule_space(w: Workload) -> ScheduleSpace:
    m, n, k = w.extents()
    knobs: dict[str, tuple[Any, ...]] = {"tile_m": _tile_values(m), "tile_n": _tile_values(n)}
    if w.is_reduction:
        knobs["tile_k"] = _tile_values(k)
    knobs["unroll"] = UNROLL_VALUES
    knobs["vector_width"] = VECTOR_VALUES
    if w.is_reduction:
        knobs["split_k"] = SPLIT_K_VALUES
    knobs["fuse_epilogue"] = FUSE_VALUES
    return ScheduleSpace(knobs)


def default_schedule(w: Workload) -> Schedule:
    """Library-default schedule shared by every victim: mid-size tiles, no tricks."""
    space = schedule_space(w)
    tiles = {
        name: max(v for v in space.knobs[name] if v <= DEFAULT_TILE)
        for name in ("tile_m", "tile_n", "tile_k")
        if name in space.knobs
    }
    return Schedule(**tiles)


def mutate(
    s: Schedule, w: Workload, rng: random.Random, space: ScheduleSpace | None = None
) -> Schedule:
    """Move exactly one knob one step along its ordered value list."""
    if space is None:
        space = schedule_space(w)
    if not space.movable:
        return s
    name = space.movable[rng.randrange(len(space.movable))]
    values = space.knobs[name]
    i = values.index(getattr(s, name))
    steps = [j for j in (i - 1, i + 1) if 0 <= j < len(values)]
    j = steps[rng.randrange(len(steps))] if len(steps) > 1 else steps[0]
    return replace(s, **{name: values[j]})


# --- lowering -------------------------------------------------------------


@dataclass(frozen=True)
class Kernel:
    name: str
    op_ids: tuple[str, ...]
    role: str  # "main" | "reduce_partials"
    flops: int
    # (bytes, redundancy) per operand stream; redundancy > 1 only for tiled reductions
    read_streams: tuple[tuple[int, int], ...]
    write_bytes: int
    input_bytes: int
    output_bytes: int
    unroll: int = 1
    vector_width: int = 1

    @property
    def ideal_read_bytes(self) -> int:
        return sum(b for b, _ in self.read_streams)

    @property
    def read_bytes(self) -> int:
        return sum(b * r for b, r in self.read_streams)


@dataclass(frozen=True)
class CompiledModel:
    graph_name: str
    kernels: tuple[Kernel, ...]
    schedules: Mapping[str, Schedule]


class MissingScheduleError(KeyError):
    pass


@dataclass
class _Work:
    flops: int
    streams: list[tuple[int, int]]
    out_bytes: int


def _op_work(node: OperatorNode, ins: list[TensorShape], w: Workload, s: Schedule) -> _Work:
    out = node.output_shape
    elems = out.elements
    op = node.op_kind
    if op in REDUCTION_OPS:
        m, n, k = w.extents()
        if op == "conv2d":
            kh, kw = node.attrs["kernel_hw"]
            lhs = ins[0].nbytes
            rhs = kh * kw * ins[0].dims[-1] * out.dims[-1] * DTYPE_BYTES
            flops = 2 * m * n * k
        elif op == "dense":
            lhs = ins[0].nbytes
            rhs = ins[0].dims[-1] * out.dims[-1] * DTYPE_BYTES
            flops = 2 * m * n * k
        else:
            lhs, rhs = ins[0].nbytes, ins[1].nbytes
            flops = 2 * out.dims[0] * m * n * k
        # the M-side operand is re-read once per N tile and vice versa
        return _Work(
            flops,
            [(lhs, max(1, -(-n // s.tile_n))), (rhs, max(1, -(-m // s.tile_m)))],
            out.nbytes,
        )
    channels = out.dims[-1] * DTYPE_BYTES
    if op == "relu":
        return _Work(elems, [(ins[0].nbytes, 1)], out.nbytes)
    if op == "batch_norm":
        return _Work(2 * elems, [(ins[0].nbytes, 1), (2 * channels, 1)], out.nbytes)
    if op == "add":
        if len(ins) == 1:
            return _Work(elems, [(ins[0].nbytes, 1), (channels, 1)], out.nbytes)
        return _Work(elems, [(ins[0].nbytes, 1), (ins[1].nbytes, 1)], out.nbytes)
    if op == "concat":
        return _Work(0, [(x.nbytes, 1) for x in ins], out.nbytes)
    if op in ("pool_max", "pool_avg"):
        if node.attrs["global"]:
            window = ins[0].dims[1] * ins[0].dims[2]
        else:
            window = math.prod(node.attrs["kernel_hw"])
        return _Work(elems * window, [(ins[0].nbytes, 1)], out.nbytes)
    if op == "softmax":
        # max/sum pass followed by a normalize pass
        return _Work(5 * elems, [(ins[0].nbytes, 2)], out.nbytes)
    if op == "layer_norm":
        # statistics pass followed by a normalize pass
        return _Work(8 * elems, [(ins[0].nbytes, 2), (2 * channels, 1)], out.nbytes)
    if op == "embedding_lookup":
        return _Work(0, [(ins[0].nbytes, 1), (out.nbytes, 1)], out.nbytes)
    raise ValueError(f"no work model for {op}")


def _mangle(parts: list[Any]) -> str:
    digest = hashlib.blake2b(json.dumps(parts, sort_keys=True).encode(), digest_size=8)
    return "k_" + digest.hexdigest()


def _lookup(schedules: Mapping[Any, Schedule], w: Workload) -> Schedule:
    if w.key in schedules:
        return schedules[w.key]
    if w in schedules:
        return schedules[w]
    raise MissingScheduleError(f"no schedule for workload {w.key}")


def workloads_of(graph: ModelGraph) -> dict[str, Workload]:
    """Deduplicated workloads keyed by their canonical key, in first-use order."""
    out: dict[str, Workload] = {}
    for node in graph.nodes:
        w = Workload.of(graph, node)
        out.setdefault(w.key, w)
    return out


def default_assignment(graph: ModelGraph) -> dict[str, Schedule]:
    return {key: default_schedule(w) for key, w in workloads_of(graph).items()}


def lower(graph: ModelGraph, schedules: Mapping[Any, Schedule]) -> CompiledModel:
    """Lower ``graph`` in topological order under the per-workload ``schedules``."""
    consumers = graph.consumers()
    graph_inputs = graph.input_ids()
    groups: list[dict[str, Any]] = []
    group_of: dict[str, int] = {}
    used: dict[str, Schedule] = {}

    for node in graph.nodes:
        w = Workload.of(graph, node)
        s = _lookup(schedules, w)
        used[w.key] = s
        ins = [graph.shape_of(x) for x in node.inputs]
        work = _op_work(node, ins, w, s)

        src = node.inputs[0]
        if (
            node.op_kind in EPILOGUE_OPS
            and len(node.inputs) == 1
            and s.fuse_epilogue
            and src not in graph_inputs
            and consumers[src] == [node.id]
        ):
            g = groups[group_of[src]]
            if g["split_k"] == 1:
                # stream 0 is the intermediate: it never leaves the producer's kernel
                g["ops"].append(node.id)
                g["parts"].append([w.key, s.to_dict()])
                g["flops"] += work.flops
                g["streams"].extend(work.streams[1:])
                g["out_bytes"] = work.out_bytes
                group_of[node.id] = group_of[src]
                continue

        group_of[node.id] = len(groups)
        groups.append(
            {
                "ops": [node.id],
                "parts": [[w.key, s.to_dict()]],
                "flops": work.flops,
                "streams": list(work.streams),
                "out_bytes": work.out_bytes,
                "split_k": s.split_k if w.is_reduction else 1,
                "unroll": s.unroll,
                "vector_width": s.vector_width,
            }
        )

    kernels: list[Kernel] = []
    for g in groups:
        split = g["split_k"]
        partials = g["out_bytes"] * split
        kernels.append(
            Kernel(
                name=_mangle(g["parts"]),
                op_ids=tuple(g["ops"]),
                role="main",
                flops=g["flops"],
                read_streams=tuple(g["streams"]),
                write_bytes=partials,
                input_bytes=sum(b for b, _ in g["streams"]),
                output_bytes=partials,
                unroll=g["unroll"],
                vector_width=g["vector_width"],
            )
        )
        if split > 1:
            kernels.append(
                Kernel(
                    name=_mangle(g["parts"] + ["reduce_partials"]),
                    op_ids=(g["ops"][0],),
                    role="reduce_partials",
                    flops=(g["out_bytes"] // DTYPE_BYTES) * (split - 1),
                    read_streams=((partials, 1),),
                    write_bytes=g["out_bytes"],
                    input_bytes=partials,
                    output_bytes=g["out_bytes"],
                    unroll=g["unroll"],
                    vector_width=g["vector_width"],
                )
            )
    return CompiledModel(graph.name, tuple(kernels), used)


# --- schedule assignment documents -----------------------------------------


def dump_schedules(assignment: Mapping[str, Schedule]) -> bytes:
    doc = {key: s.to_dict() for key, s in assignment.items()}
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def load_schedules(data: bytes | str) -> dict[str, Schedule]:
    doc = json.loads(data)
    if not isinstance(doc, dict):
        raise ValueError("schedule document must map workload keys to knob records")
    return {key: Schedule.from_dict(rec) for key, rec in doc.items()}
