"""Miniature generators for the four victim families.

Each generator is deterministic in ``(family, scale, seed)``: the seed only picks
channel widths and a few structural choices, never anything time-dependent.
"""
from __future__ import annotations

import random
from typing import Any

from .model_ir import ModelGraph, build_graph

FAMILIES = ("resnet_mini", "densenet_mini", "yolo_mini", "transformer_mini")
CONV_FAMILIES = ("resnet_mini", "densenet_mini", "yolo_mini")
SCALE_RANGE = {family: (1, 3) for family in FAMILIES}


class _Builder:
    def __init__(self, name: str):
        self.name = name
        self.inputs: list[tuple[str, list[int]]] = []
        self.nodes: list[dict[str, Any]] = []
        self._counts: dict[str, int] = {}

    def input(self, iid: str, shape: list[int]) -> str:
        self.inputs.append((iid, shape))
        return iid

    def op(self, op: str, inputs: list[str], **attrs) -> str:
        n = self._counts.get(op, 0)
        self._counts[op] = n + 1
        nid = f"{op}_{n}"
        self.nodes.append({"id": nid, "op": op, "attrs": attrs, "inputs": inputs})
        return nid

    def cbr(self, x: str, out_ch: int, k: int = 3, stride: int = 1, act: bool = True) -> str:
        x = self.op("conv2d", [x], kernel_hw=[k, k], stride=[stride, stride], out_channels=out_ch)
        x = self.op("batch_norm", [x])
        return self.op("relu", [x]) if act else x

    def build(self) -> ModelGraph:
        return build_graph(self.name, self.inputs, self.nodes)


def _resnet(b: _Builder, scale: int, rng: random.Random) -> None:
    width = rng.choice([8, 12, 16])
    x = b.input("image", [1, 32, 32, 3])
    x = b.cbr(x, width)
    x = b.op("pool_max", [x], kernel_hw=[2, 2])
    ch = width
    for stage in range(3):
        for block in range(scale):
            stride = 2 if (stage > 0 and block == 0) else 1
            out_ch = ch * 2 if (stage > 0 and block == 0) else ch
            y = b.cbr(x, out_ch, 3, stride)
            y = b.cbr(y, out_ch, 3, 1, act=False)
            if stride != 1 or out_ch != ch:
                x = b.cbr(x, out_ch, 1, stride, act=False)
            x = b.op("relu", [b.op("add", [y, x])])
            ch = out_ch
    x = b.op("pool_avg", [x], **{"global": True})
    b.op("dense", [x], units=rng.choice([10, 16]))


def _densenet(b: _Builder, scale: int, rng: random.Random) -> None:
    growth = rng.choice([4, 6, 8])
    x = b.input("image", [1, 32, 32, 3])
    x = b.cbr(x, 2 * growth)
    x = b.op("pool_max", [x], kernel_hw=[2, 2])
    ch = 2 * growth
    for block in range(3):
        for _ in range(scale + 1):
            y = b.op("relu", [b.op("batch_norm", [x])])
            y = b.op("conv2d", [y], kernel_hw=[3, 3], out_channels=growth)
            x = b.op("concat", [x, y], axis=3)
            ch += growth
        if block < 2:
            ch //= 2
            y = b.op("relu", [b.op("batch_norm", [x])])
            y = b.op("conv2d", [y], kernel_hw=[1, 1], out_channels=ch)
            x = b.op("pool_avg", [y], kernel_hw=[2, 2])
    x = b.op("relu", [b.op("batch_norm", [x])])
    x = b.op("pool_avg", [x], **{"global": True})
    b.op("dense", [x], units=rng.choice([10, 16]))


def _yolo(b: _Builder, scale: int, rng: random.Random) -> None:
    width = rng.choice([8, 16])
    x = b.input("image", [1, 32, 32, 3])
    x = b.cbr(x, width)
    ch = width
    routes = []
    for stage in range(3):
        ch *= 2
        x = b.cbr(x, ch, 3, 2)
        for _ in range(max(1, scale - stage // 2)):
            y = b.cbr(x, ch // 2, 1)
            y = b.cbr(y, ch, 3)
            x = b.op("add", [x, y])
        routes.append(x)
    # spatial pyramid pooling neck
    x = b.cbr(x, ch // 2, 1)
    pools = [b.op("pool_max", [x], kernel_hw=[k, k], stride=[1, 1], padding="same") for k in (3, 5)]
    x = b.op("concat", [x] + pools, axis=3)
    x = b.cbr(x, ch, 1)
    head_ch = 3 * (5 + rng.choice([2, 4]))
    b.op("conv2d", [x], kernel_hw=[1, 1], out_channels=head_ch)
    # second head on the previous route, downsampled to match
    r = b.cbr(routes[1], ch // 2, 1)
    r = b.cbr(r, ch // 2, 3, 2)
    r = b.op("concat", [r, x], axis=3)
    r = b.cbr(r, ch, 3)
    b.op("conv2d", [r], kernel_hw=[1, 1], out_channels=head_ch)


def _transformer(b: _Builder, scale: int, rng: random.Random) -> None:
    seq = rng.choice([16, 32, 64])
    # wider than any conv-family channel count: at d = 32 or 64 the dense and
    # residual-add kernels coincide with corpus 1x1 convs and adds
    d = rng.choice([96, 128])
    x = b.input("tokens", [1, seq])
    x = b.op("embedding_lookup", [x], vocab_size=rng.choice([500, 1000]), dim=d)
    for _ in range(scale + 1):
        h = b.op("layer_norm", [x])
        q = b.op("dense", [h], units=d)
        k = b.op("dense", [h], units=d)
        v = b.op("dense", [h], units=d)
        s = b.op("attention_matmul", [q, k], transpose_b=True)
        p = b.op("softmax", [s])
        o = b.op("attention_matmul", [p, v])
        o = b.op("dense", [o], units=d)
        x = b.op("add", [x, o])
        h = b.op("layer_norm", [x])
        h = b.op("relu", [b.op("dense", [h], units=4 * d)])
        h = b.op("dense", [h], units=d)
        x = b.op("add", [x, h])
    x = b.op("layer_norm", [x])
    b.op("dense", [x], units=rng.choice([500, 1000]))


_GENERATORS = {
    "resnet_mini": _resnet,
    "densenet_mini": _densenet,
    "yolo_mini": _yolo,
    "transformer_mini": _transformer,
}


def generate_model(family: str, scale: int, seed: int) -> ModelGraph:
    """Build a miniature graph of ``family``; identical arguments give identical graphs."""
    if family not in _GENERATORS:
        raise ValueError(f"unknown family '{family}' (expected one of {', '.join(FAMILIES)})")
    lo, hi = SCALE_RANGE[family]
    if not isinstance(scale, int) or not lo <= scale <= hi:
        raise ValueError(f"scale for {family} must be in [{lo}, {hi}], got {scale!r}")
    rng = random.Random(f"{family}:{scale}:{seed}")
    b = _Builder(f"{family}-s{scale}-r{seed}")
    _GENERATORS[family](b, scale, rng)
    return b.build()
