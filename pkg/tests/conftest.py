import random

import pytest

from compdefense.model_ir import EPILOGUE_OPS, REDUCTION_OPS, build_graph
from compdefense.perfsim import DeviceProfile
from compdefense.schedule import Schedule, ScheduleSpace, Workload, schedule_space, workloads_of


@pytest.fixture(scope="session")
def device():
    return DeviceProfile.load()


@pytest.fixture
def toy_device():
    # round numbers so hand-computed latencies are easy to check
    return DeviceProfile("toy", peak_flops=1e12, mem_bandwidth=1e11, launch_overhead=2000, l2_capacity=1e12)


def conv_relu(fuse=None):
    return build_graph(
        "conv_relu",
        [("x", [1, 8, 8, 3])],
        [
            {"id": "c0", "op": "conv2d", "attrs": {"kernel_hw": [3, 3], "out_channels": 16}, "inputs": ["x"]},
            {"id": "r0", "op": "relu", "inputs": ["c0"]},
        ],
    )


def dense_graph(m=64, n=64, k=64):
    return build_graph(
        f"dense{m}x{n}x{k}",
        [("x", [m, k])],
        [{"id": "d0", "op": "dense", "attrs": {"units": n}, "inputs": ["x"]}],
    )


def tile_unroll_space(w):
    """64-member space over tile_m, tile_n and unroll, with a unique optimum on dense 256^3."""
    base = schedule_space(w).restrict(tile_k=16, vector_width=1, split_k=1, fuse_epilogue=False)
    return ScheduleSpace({**base.knobs, "tile_m": (8, 16, 32, 64), "tile_n": (8, 16, 32, 64)})


def random_graph(rng: random.Random, max_ops: int = 14):
    """Random well-formed NHWC graph mixing reductions, epilogues, joins and pools."""
    hw = rng.choice([4, 8, 16])
    ch = rng.choice([2, 3, 4, 8])
    nodes = []
    shapes = {"x": (hw, ch)}
    live = ["x"]
    counter = 0

    def add(op, inputs, out_hw, out_ch, **attrs):
        nonlocal counter
        nid = f"n{counter}"
        counter += 1
        nodes.append({"id": nid, "op": op, "attrs": attrs, "inputs": inputs})
        shapes[nid] = (out_hw, out_ch)
        live.append(nid)
        return nid

    for _ in range(rng.randint(1, max_ops)):
        src = live[-1] if rng.random() < 0.7 else rng.choice(live)
        s_hw, s_ch = shapes[src]
        r = rng.random()
        if r < 0.3:
            k = rng.choice([1, 3])
            add("conv2d", [src], s_hw, rng.choice([4, 8, 12]), kernel_hw=[k, k], out_channels=None)
            nodes[-1]["attrs"]["out_channels"] = shapes[nodes[-1]["id"]][1]
        elif r < 0.45:
            add("relu", [src], s_hw, s_ch)
        elif r < 0.55:
            add("batch_norm", [src], s_hw, s_ch)
        elif r < 0.62:
            add("add", [src], s_hw, s_ch)
        elif r < 0.72:
            same = [n for n in live if n != src and shapes[n] == shapes[src]]
            if same:
                add("add", [src, rng.choice(same)], s_hw, s_ch)
        elif r < 0.8:
            same = [n for n in live if n != src and shapes[n][0] == s_hw]
            if same:
                other = rng.choice(same)
                add("concat", [src, other], s_hw, s_ch + shapes[other][1])
        elif r < 0.87 and s_hw >= 2:
            add("pool_max", [src], s_hw // 2, s_ch)
        else:
            add("dense", [src], s_hw, rng.choice([4, 8]), units=None)
            nodes[-1]["attrs"]["units"] = shapes[nodes[-1]["id"]][1]
    if not nodes:
        add("relu", ["x"], hw, ch)
    return build_graph("rand", [("x", [1, hw, hw, ch])], nodes)


def fusion_oracle(graph, assignment):
    """Edges a fusing lowering should absorb, derived from the graph alone."""
    users = {}
    for n in graph.nodes:
        for s in n.inputs:
            users.setdefault(s, []).append(n.id)
    split = {}
    fused = []
    for n in graph.nodes:
        s = assignment[Workload.of(graph, n).key]
        src = n.inputs[0]
        owner = split.get(src)
        if (
            n.op_kind in EPILOGUE_OPS
            and len(n.inputs) == 1
            and s.fuse_epilogue
            and src not in graph.input_ids()
            and users[src] == [n.id]
            and owner == 1
        ):
            fused.append(src)
            split[n.id] = owner
        else:
            split[n.id] = s.split_k if n.op_kind in REDUCTION_OPS else 1
    return fused


def random_assignment(graph, rng):
    out = {}
    for key, w in workloads_of(graph).items():
        space = schedule_space(w)
        out[key] = Schedule(**{name: rng.choice(vals) for name, vals in space.knobs.items()})
    return out
