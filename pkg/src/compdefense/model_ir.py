"""Victim model graphs: types, MGF (JSON) load/save, validation and shape inference.

Tensors are NHWC for convolutional models and ``[batch, seq, features]`` for
sequence models. Only shapes are tracked; weights never exist.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

OP_KINDS: tuple[str, ...] = (
    "conv2d",
    "dense",
    "relu",
    "add",
    "concat",
    "pool_max",
    "pool_avg",
    "batch_norm",
    "softmax",
    "layer_norm",
    "attention_matmul",
    "embedding_lookup",
)

REDUCTION_OPS = frozenset({"conv2d", "dense", "attention_matmul"})
# ops that may be absorbed into their producer's kernel
EPILOGUE_OPS = frozenset({"relu", "add", "batch_norm"})

DTYPE_BYTES = 4


class MGFError(ValueError):
    """Base class for graph document errors."""


class ParseError(MGFError):
    pass


class ValidationError(MGFError):
    def __init__(self, node_id: str | None, reason: str):
        self.node_id = node_id
        self.reason = reason
        where = f"node '{node_id}': " if node_id is not None else ""
        super().__init__(f"{where}{reason}")


@dataclass(frozen=True)
class TensorShape:
    dims: tuple[int, ...]
    dtype_bytes: int = DTYPE_BYTES

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 1 for d in self.dims):
            raise ValueError(f"non-positive dimension in {list(self.dims)}")
        if self.dtype_bytes < 1:
            raise ValueError("dtype_bytes must be positive")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def elements(self) -> int:
        return math.prod(self.dims)

    @property
    def nbytes(self) -> int:
        return self.elements * self.dtype_bytes

    def to_list(self) -> list[int]:
        return list(self.dims)


@dataclass(frozen=True)
class OperatorNode:
    id: str
    op_kind: str
    attrs: dict[str, Any]
    inputs: tuple[str, ...]
    output_shape: TensorShape | None = None


@dataclass(frozen=True)
class ModelGraph:
    name: str
    inputs: tuple[tuple[str, TensorShape], ...]
    nodes: tuple[OperatorNode, ...]
    params_count: int = 0

    def node(self, node_id: str) -> OperatorNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def shape_of(self, tensor_id: str) -> TensorShape:
        for iid, shape in self.inputs:
            if iid == tensor_id:
                return shape
        shape = self.node(tensor_id).output_shape
        if shape is None:
            raise ValidationError(tensor_id, "output shape not inferred")
        return shape

    def input_ids(self) -> set[str]:
        return {iid for iid, _ in self.inputs}

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for iid, _ in self.inputs:
            out[iid] = []
        for n in self.nodes:
            for src in n.inputs:
                out[src].append(n.id)
        return out

    def op_sequence(self) -> list[str]:
        return [n.op_kind for n in self.nodes]


# --- attribute schemas ----------------------------------------------------

# name -> (required, default)
_ATTR_SCHEMA: dict[str, dict[str, tuple[bool, Any]]] = {
    "conv2d": {
        "kernel_hw": (True, None),
        "stride": (False, [1, 1]),
        "padding": (False, "same"),
        "in_channels": (False, None),
        "out_channels": (True, None),
    },
    "dense": {"units": (True, None), "in_features": (False, None)},
    "relu": {},
    "add": {},
    "concat": {"axis": (False, -1)},
    "pool_max": {
        "kernel_hw": (False, [2, 2]),
        "stride": (False, None),
        "padding": (False, "valid"),
        "global": (False, False),
    },
    "batch_norm": {},
    "softmax": {"axis": (False, -1)},
    "layer_norm": {},
    "attention_matmul": {"transpose_b": (False, False)},
    "embedding_lookup": {"vocab_size": (True, None), "dim": (True, None)},
}
_ATTR_SCHEMA["pool_avg"] = _ATTR_SCHEMA["pool_max"]

_ARITY: dict[str, tuple[int, int | None]] = {
    "conv2d": (1, 1),
    "dense": (1, 1),
    "relu": (1, 1),
    "add": (1, 2),  # one input: bias add against a constant operand
    "concat": (2, None),
    "pool_max": (1, 1),
    "pool_avg": (1, 1),
    "batch_norm": (1, 1),
    "softmax": (1, 1),
    "layer_norm": (1, 1),
    "attention_matmul": (2, 2),
    "embedding_lookup": (1, 1),
}


def _pair(value: Any, node_id: str, name: str) -> list[int]:
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value, value]
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value)
    ):
        raise ValidationError(node_id, f"illegal attrs: {name} must be a positive int or pair")
    return [int(v) for v in value]


def _positive_int(value: Any, node_id: str, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ValidationError(node_id, f"illegal attrs: {name} must be a positive integer")
    return value


def canonical_attrs(op_kind: str, attrs: dict[str, Any], node_id: str) -> dict[str, Any]:
    """Fill defaults and type-check ``attrs``; unknown keys are rejected."""
    if op_kind not in _ATTR_SCHEMA:
        raise ValidationError(node_id, f"unknown op kind '{op_kind}'")
    schema = _ATTR_SCHEMA[op_kind]
    unknown = sorted(set(attrs) - set(schema))
    if unknown:
        raise ValidationError(node_id, f"illegal attrs for {op_kind}: {', '.join(unknown)}")
    out: dict[str, Any] = {}
    for key, (required, default) in schema.items():
        if key in attrs and attrs[key] is not None:
            out[key] = attrs[key]
        elif required:
            raise ValidationError(node_id, f"illegal attrs: {op_kind} requires '{key}'")
        else:
            out[key] = default

    if op_kind == "conv2d":
        out["kernel_hw"] = _pair(out["kernel_hw"], node_id, "kernel_hw")
        out["stride"] = _pair(out["stride"], node_id, "stride")
        out["out_channels"] = _positive_int(out["out_channels"], node_id, "out_channels")
        if out["in_channels"] is not None:
            out["in_channels"] = _positive_int(out["in_channels"], node_id, "in_channels")
        if out["padding"] not in ("same", "valid"):
            raise ValidationError(node_id, "illegal attrs: padding must be 'same' or 'valid'")
    elif op_kind in ("pool_max", "pool_avg"):
        out["kernel_hw"] = _pair(out["kernel_hw"], node_id, "kernel_hw")
        out["stride"] = _pair(
            out["stride"] if out["stride"] is not None else out["kernel_hw"], node_id, "stride"
        )
        if out["padding"] not in ("same", "valid"):
            raise ValidationError(node_id, "illegal attrs: padding must be 'same' or 'valid'")
        if not isinstance(out["global"], bool):
            raise ValidationError(node_id, "illegal attrs: global must be boolean")
    elif op_kind == "dense":
        out["units"] = _positive_int(out["units"], node_id, "units")
        if out["in_features"] is not None:
            out["in_features"] = _positive_int(out["in_features"], node_id, "in_features")
    elif op_kind in ("concat", "softmax"):
        if not isinstance(out["axis"], int) or isinstance(out["axis"], bool):
            raise ValidationError(node_id, "illegal attrs: axis must be an integer")
    elif op_kind == "attention_matmul":
        if not isinstance(out["transpose_b"], bool):
            raise ValidationError(node_id, "illegal attrs: transpose_b must be boolean")
    elif op_kind == "embedding_lookup":
        out["vocab_size"] = _positive_int(out["vocab_size"], node_id, "vocab_size")
        out["dim"] = _positive_int(out["dim"], node_id, "dim")
    return out


# --- shape rules ----------------------------------------------------------


def _spatial_out(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-size // s)
    return (size - k) // s + 1


def _shape_rule(node: OperatorNode, ins: Sequence[TensorShape]) -> TensorShape:
    op, a, nid = node.op_kind, node.attrs, node.id

    def fail(msg: str) -> ValidationError:
        return ValidationError(nid, f"shape mismatch: {msg}")

    if op == "conv2d":
        (x,) = ins
        if x.rank != 4:
            raise fail(f"conv2d expects NHWC input, got rank {x.rank}")
        n, h, w, c = x.dims
        if a["in_channels"] is not None and a["in_channels"] != c:
            raise fail(f"in_channels {a['in_channels']} != input channels {c}")
        kh, kw = a["kernel_hw"]
        sh, sw = a["stride"]
        oh = _spatial_out(h, kh, sh, a["padding"])
        ow = _spatial_out(w, kw, sw, a["padding"])
        if oh < 1 or ow < 1:
            raise fail("kernel larger than input")
        return TensorShape((n, oh, ow, a["out_channels"]))
    if op in ("pool_max", "pool_avg"):
        (x,) = ins
        if x.rank != 4:
            raise fail(f"{op} expects NHWC input, got rank {x.rank}")
        n, h, w, c = x.dims
        if a["global"]:
            return TensorShape((n, 1, 1, c))
        kh, kw = a["kernel_hw"]
        sh, sw = a["stride"]
        oh = _spatial_out(h, kh, sh, a["padding"])
        ow = _spatial_out(w, kw, sw, a["padding"])
        if oh < 1 or ow < 1:
            raise fail("window larger than input")
        return TensorShape((n, oh, ow, c))
    if op == "dense":
        (x,) = ins
        if a["in_features"] is not None and a["in_features"] != x.dims[-1]:
            raise fail(f"in_features {a['in_features']} != input features {x.dims[-1]}")
        return TensorShape(x.dims[:-1] + (a["units"],))
    if op in ("relu", "batch_norm", "softmax", "layer_norm"):
        (x,) = ins
        if op == "softmax" and not -x.rank <= a["axis"] < x.rank:
            raise fail(f"axis {a['axis']} out of range")
        return TensorShape(x.dims)
    if op == "add":
        if len(ins) == 2 and ins[0].dims != ins[1].dims:
            raise fail(f"add operands differ: {list(ins[0].dims)} vs {list(ins[1].dims)}")
        return TensorShape(ins[0].dims)
    if op == "concat":
        rank = ins[0].rank
        axis = a["axis"]
        if not -rank <= axis < rank:
            raise fail(f"axis {axis} out of range")
        axis %= rank
        for s in ins[1:]:
            if s.rank != rank or any(
                d0 != d1 for i, (d0, d1) in enumerate(zip(ins[0].dims, s.dims)) if i != axis
            ):
                raise fail("concat operands differ off the concat axis")
        dims = list(ins[0].dims)
        dims[axis] = sum(s.dims[axis] for s in ins)
        return TensorShape(dims)
    if op == "attention_matmul":
        x, y = ins
        if x.rank != 3 or y.rank != 3 or x.dims[0] != y.dims[0]:
            raise fail("attention_matmul expects two rank-3 operands with equal batch")
        b, m, k = x.dims
        if a["transpose_b"]:
            _, n, k2 = y.dims
        else:
            _, k2, n = y.dims
        if k != k2:
            raise fail(f"contraction dims differ: {k} vs {k2}")
        return TensorShape((b, m, n))
    if op == "embedding_lookup":
        (x,) = ins
        return TensorShape(x.dims + (a["dim"],))
    raise fail(f"no shape rule for {op}")


def node_params(node: OperatorNode, ins: Sequence[TensorShape]) -> int:
    a = node.attrs
    if node.op_kind == "conv2d":
        kh, kw = a["kernel_hw"]
        return kh * kw * ins[0].dims[-1] * a["out_channels"] + a["out_channels"]
    if node.op_kind == "dense":
        return ins[0].dims[-1] * a["units"] + a["units"]
    if node.op_kind in ("batch_norm", "layer_norm"):
        return 2 * ins[0].dims[-1]
    if node.op_kind == "add" and len(ins) == 1:
        return ins[0].dims[-1]
    if node.op_kind == "embedding_lookup":
        return a["vocab_size"] * a["dim"]
    return 0


# --- graph construction ---------------------------------------------------


def topological_order(
    inputs: Iterable[str], nodes: Sequence[OperatorNode]
) -> list[OperatorNode]:
    """Kahn's algorithm; ties resolved by document order so the result is stable."""
    available = set(inputs)
    index = {n.id: i for i, n in enumerate(nodes)}
    pending = {n.id: sum(1 for s in n.inputs if s not in available) for n in nodes}
    users: dict[str, list[str]] = {n.id: [] for n in nodes}
    for n in nodes:
        for src in n.inputs:
            if src in users:
                users[src].append(n.id)
    heap = [index[nid] for nid, cnt in pending.items() if cnt == 0]
    heapq.heapify(heap)
    order: list[OperatorNode] = []
    while heap:
        node = nodes[heapq.heappop(heap)]
        order.append(node)
        for user in users[node.id]:
            pending[user] -= 1
            if pending[user] == 0:
                heapq.heappush(heap, index[user])
    if len(order) != len(nodes):
        stuck = sorted((index[nid] for nid, cnt in pending.items() if cnt > 0))
        raise ValidationError(nodes[stuck[0]].id, "cycle detected in graph")
    return order


def infer_shapes(graph: ModelGraph) -> ModelGraph:
    """Populate every node's output shape; declared shapes must agree with the rules.

    Idempotent: a fully inferred graph is returned equal to itself.
    """
    shapes: dict[str, TensorShape] = dict(graph.inputs)
    nodes = []
    params = 0
    for node in graph.nodes:
        ins = [shapes[s] for s in node.inputs]
        shape = _shape_rule(node, ins)
        if node.output_shape is not None and node.output_shape.dims != shape.dims:
            raise ValidationError(
                node.id,
                f"shape mismatch: declared {list(node.output_shape.dims)}, "
                f"inferred {list(shape.dims)}",
            )
        shapes[node.id] = shape
        params += node_params(node, ins)
        nodes.append(replace(node, output_shape=shape))
    return replace(graph, nodes=tuple(nodes), params_count=params)


def build_graph(
    name: str,
    inputs: Sequence[tuple[str, Sequence[int]]],
    nodes: Sequence[dict[str, Any]],
) -> ModelGraph:
    """Validate raw node records, sort them topologically and infer shapes."""
    if not isinstance(name, str) or not name:
        raise ValidationError(None, "graph name must be a non-empty string")
    seen: set[str] = set()
    graph_inputs = []
    for iid, dims in inputs:
        if iid in seen:
            raise ValidationError(iid, "duplicate id")
        seen.add(iid)
        try:
            graph_inputs.append((iid, TensorShape(tuple(dims))))
        except (TypeError, ValueError) as exc:
            raise ValidationError(iid, f"bad input shape: {exc}") from None
    if not graph_inputs:
        raise ValidationError(None, "graph has no inputs")

    ops = []
    for rec in nodes:
        nid = rec["id"]
        if not isinstance(nid, str) or not nid:
            raise ValidationError(None, "node id must be a non-empty string")
        if nid in seen:
            raise ValidationError(nid, "duplicate id")
        seen.add(nid)
        op = rec["op"]
        attrs = canonical_attrs(op, dict(rec.get("attrs") or {}), nid)
        srcs = tuple(rec.get("inputs") or ())
        lo, hi = _ARITY[op]
        if len(srcs) < lo or (hi is not None and len(srcs) > hi):
            raise ValidationError(nid, f"illegal attrs: {op} takes {lo}..{hi or 'n'} inputs")
        declared = rec.get("out_shape")
        try:
            out = TensorShape(tuple(declared)) if declared is not None else None
        except (TypeError, ValueError) as exc:
            raise ValidationError(nid, f"bad out_shape: {exc}") from None
        ops.append(OperatorNode(nid, op, attrs, srcs, out))

    known = seen
    for node in ops:
        for src in node.inputs:
            if src not in known:
                raise ValidationError(node.id, f"dangling input '{src}'")
            if src == node.id:
                raise ValidationError(node.id, "cycle: node consumes itself")

    ordered = topological_order((i for i, _ in graph_inputs), ops)
    graph = infer_shapes(ModelGraph(name, tuple(graph_inputs), tuple(ordered)))
    _check_reachable(graph)
    return graph


def _check_reachable(graph: ModelGraph) -> None:
    reached = graph.input_ids()
    for node in graph.nodes:
        if any(s in reached for s in node.inputs):
            reached.add(node.id)
        else:
            raise ValidationError(node.id, "node not reachable from a graph input")


# --- MGF serialization ----------------------------------------------------


def load_model(data: bytes | str) -> ModelGraph:
    """Parse an MGF document and return the validated, shape-inferred graph."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"document is not UTF-8: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    for key in ("name", "inputs", "nodes"):
        if key not in doc:
            raise ParseError(f"missing top-level field '{key}'")
    try:
        inputs = [(rec["id"], rec["shape"]) for rec in doc["inputs"]]
        nodes = []
        for rec in doc["nodes"]:
            nodes.append(
                {
                    "id": rec["id"],
                    "op": rec["op"],
                    "attrs": rec.get("attrs", {}),
                    "inputs": rec.get("inputs", []),
                    "out_shape": rec.get("out_shape"),
                }
            )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed graph record: {exc}") from None
    return build_graph(doc["name"], inputs, nodes)


def model_to_dict(graph: ModelGraph) -> dict[str, Any]:
    return {
        "name": graph.name,
        "inputs": [{"id": iid, "shape": s.to_list()} for iid, s in graph.inputs],
        "nodes": [
            {
                "id": n.id,
                "op": n.op_kind,
                "attrs": n.attrs,
                "inputs": list(n.inputs),
                "out_shape": n.output_shape.to_list() if n.output_shape else None,
            }
            for n in graph.nodes
        ],
    }


def save_model(graph: ModelGraph) -> bytes:
    """Canonical MGF bytes: sorted keys, defaults filled, topological node order."""
    return (json.dumps(model_to_dict(graph), sort_keys=True, indent=1) + "\n").encode("utf-8")
