"""Architecture extraction from kernel metrics, and fidelity scoring.

The attacker knows what library-default kernels of each operator look like
(the signature database). For an unseen trace it scores every kernel against
every operator class by z-normalized distance and decodes the most plausible
operator sequence with Viterbi over an operator-transition prior. Kernels far
from every known class are reported as ``UNKNOWN``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model_ir import OP_KINDS, ModelGraph
from .perfsim import DeviceProfile, Trace, run_inference
from .schedule import Workload, default_assignment, lower
from .sidechannel import AttackerView, attacker_view

log = logging.getLogger(__name__)

UNKNOWN = "UNKNOWN"
STD_FLOOR = 1e-6
# keeps exact (zero-noise) matches from tipping over a zero threshold
TAU_FLOOR = 1e-3
TAU_PERCENTILE = 99.0
TRANSITION_WEIGHT = 0.25
FEATURES = ("ln_duration", "ln1p_reads", "ln1p_writes", "ln1p_input", "ln1p_output")


def kernel_features(metrics: Sequence[int]) -> np.ndarray:
    duration, reads, writes, nin, nout = metrics
    return np.array(
        [math.log(max(duration, 1)), math.log1p(reads), math.log1p(writes), math.log1p(nin), math.log1p(nout)]
    )


@dataclass(frozen=True)
class SignatureDB:
    """Per op kind: one prototype per profiled workload plus a pooled spread.

    ``prototypes[p]`` is the mean feature vector of every corpus kernel of one
    workload, ``proto_kind[p]`` indexes ``kinds``. ``stds[k]`` pools the spread
    of op kind ``k``'s samples around their own prototypes, floored at
    ``STD_FLOOR``.
    """

    kinds: tuple[str, ...]  # classes present, in op-kind enum order
    prototypes: np.ndarray  # (P, 5)
    proto_kind: np.ndarray  # (P,)
    stds: np.ndarray  # (len(kinds), 5)
    counts: tuple[int, ...]  # samples per kind
    transition: np.ndarray  # (12, 12) row-stochastic over OP_KINDS
    tau: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignatureDB):
            return NotImplemented
        return (
            self.kinds == other.kinds
            and self.counts == other.counts
            and self.tau == other.tau
            and np.array_equal(self.prototypes, other.prototypes)
            and np.array_equal(self.proto_kind, other.proto_kind)
            and np.array_equal(self.stds, other.stds)
            and np.array_equal(self.transition, other.transition)
        )

    def entry(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """(prototypes, std) of one op kind."""
        k = self.kinds.index(kind)
        return self.prototypes[self.proto_kind == k], self.stds[k]

    def distances(self, x: np.ndarray) -> np.ndarray:
        """Normalized distance of feature rows ``x`` (T, 5) to each class: (T, K).

        The distance to a class is the distance to its nearest prototype.
        """
        z = (x[:, None, :] - self.prototypes[None, :, :]) / self.stds[self.proto_kind][None, :, :]
        d = np.sqrt((z**2).sum(axis=2))
        out = np.empty((len(x), len(self.kinds)))
        for k in range(len(self.kinds)):
            out[:, k] = d[:, self.proto_kind == k].min(axis=1)
        return out

    def to_json(self) -> str:
        doc = {
            "features": list(FEATURES),
            "kinds": list(self.kinds),
            "prototypes": [
                {"kind": self.kinds[int(k)], "mean": row.tolist()}
                for k, row in zip(self.proto_kind, self.prototypes)
            ],
            "stds": self.stds.tolist(),
            "counts": list(self.counts),
            "transition": {"kinds": list(OP_KINDS), "matrix": self.transition.tolist()},
            "tau": self.tau,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, data: bytes | str) -> "SignatureDB":
        doc = json.loads(data)
        if doc["transition"]["kinds"] != list(OP_KINDS):
            raise ValueError("transition matrix is over a different op-kind vocabulary")
        kinds = tuple(doc["kinds"])
        return cls(
            kinds,
            np.array([p["mean"] for p in doc["prototypes"]], dtype=float).reshape(-1, len(FEATURES)),
            np.array([kinds.index(p["kind"]) for p in doc["prototypes"]], dtype=int),
            np.array(doc["stds"], dtype=float),
            tuple(doc["counts"]),
            np.array(doc["transition"]["matrix"], dtype=float),
            float(doc["tau"]),
        )


def transition_prior(graphs: Sequence[ModelGraph]) -> np.ndarray:
    """Add-one smoothed counts of consecutive op kinds in topological order."""
    idx = {k: i for i, k in enumerate(OP_KINDS)}
    counts = np.ones((len(OP_KINDS), len(OP_KINDS)))
    for g in graphs:
        seq = g.op_sequence()
        for a, b in zip(seq, seq[1:]):
            counts[idx[a], idx[b]] += 1
    return counts / counts.sum(axis=1, keepdims=True)


def build_signature_db_from_traces(samples: Sequence[tuple[ModelGraph, Trace]]) -> SignatureDB:
    """Signatures from default-schedule traces: kernel ``i`` is node ``i`` of the graph."""
    if not samples:
        raise ValueError("signature corpus is empty")
    groups: dict[str, dict[str, list[np.ndarray]]] = {}
    for graph, trace in samples:
        if len(graph.nodes) != len(trace.records):
            raise ValueError(
                f"trace of {graph.name} has {len(trace.records)} kernels for {len(graph.nodes)} ops; "
                "signature traces must use default schedules"
            )
        for node, rec in zip(graph.nodes, trace.records):
            key = Workload.of(graph, node).key
            groups.setdefault(node.op_kind, {}).setdefault(key, []).append(
                kernel_features(rec.metrics())
            )

    kinds = tuple(k for k in OP_KINDS if k in groups)
    protos, proto_kind, stds, counts = [], [], [], []
    residuals: list[list[np.ndarray]] = []
    for ki, kind in enumerate(kinds):
        res, n = [], 0
        for key in sorted(groups[kind]):
            x = np.array(groups[kind][key])
            mean = x.mean(axis=0)
            protos.append(mean)
            proto_kind.append(ki)
            res.append(x - mean)
            n += len(x)
        dof = n - len(groups[kind])
        if dof < 1:
            log.warning("op kind %s has too few repeated samples for a spread; floored", kind)
        r = np.concatenate(res)
        stds.append(np.maximum(np.sqrt((r**2).sum(axis=0) / max(dof, 1)), STD_FLOOR))
        counts.append(n)
        residuals.append(res)
    stds_a = np.array(stds)

    within = []
    for ki, res in enumerate(residuals):
        for r in res:
            within.extend(np.sqrt(((r / stds_a[ki]) ** 2).sum(axis=1)))
    tau = max(float(np.percentile(within, TAU_PERCENTILE)), TAU_FLOOR)
    graphs = list({g.name: g for g, _ in samples}.values())
    return SignatureDB(
        kinds,
        np.array(protos),
        np.array(proto_kind, dtype=int),
        stds_a,
        tuple(counts),
        transition_prior(graphs),
        tau,
    )


def corpus_traces(
    corpus: Sequence[ModelGraph],
    device: DeviceProfile,
    noise_sigma: float,
    seeds: Sequence[int],
) -> list[tuple[ModelGraph, Trace]]:
    out = []
    for graph in corpus:
        compiled = lower(graph, default_assignment(graph))
        for seed in seeds:
            out.append((graph, run_inference(compiled, device, noise_sigma, seed)))
    return out


def build_signature_db(
    corpus: Sequence[ModelGraph],
    device: DeviceProfile,
    noise_sigma: float,
    seeds: Sequence[int] = (0,),
) -> SignatureDB:
    """Profile each corpus graph under default schedules once per seed and aggregate."""
    if not corpus:
        raise ValueError("signature corpus is empty")
    return build_signature_db_from_traces(corpus_traces(corpus, device, noise_sigma, seeds))


@dataclass(frozen=True)
class AttackPrediction:
    sequence: tuple[str, ...]
    confidences: tuple[float, ...]

    @property
    def unknown_fraction(self) -> float:
        if not self.sequence:
            return 0.0
        return sum(s == UNKNOWN for s in self.sequence) / len(self.sequence)


def predict_architecture(
    view: AttackerView | Trace, db: SignatureDB, transition_weight: float = TRANSITION_WEIGHT
) -> AttackPrediction:
    if isinstance(view, Trace):
        view = attacker_view(view)
    if not db.kinds:
        raise ValueError("signature database is empty")
    if not view.records:
        return AttackPrediction((), ())
    x = np.array([kernel_features(r.metrics()) for r in view.records])
    dist = db.distances(x)
    emission = -dist
    sel = [OP_KINDS.index(k) for k in db.kinds]
    log_trans = transition_weight * np.log(db.transition[np.ix_(sel, sel)])

    steps, n = dist.shape
    score = emission[0].copy()
    back = np.zeros((steps, n), dtype=int)
    for t in range(1, steps):
        cand = score[:, None] + log_trans  # (prev, next)
        back[t] = np.argmax(cand, axis=0)  # first max: earliest kind in enum order
        score = cand[back[t], np.arange(n)] + emission[t]
    path = [int(np.argmax(score))]
    for t in range(steps - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()

    seq, conf = [], []
    for t, j in enumerate(path):
        seq.append(UNKNOWN if dist[t].min() > db.tau else db.kinds[j])
        conf.append(float(-dist[t, j]))
    return AttackPrediction(tuple(seq), tuple(conf))


@dataclass(frozen=True)
class FidelityScore:
    value: float
    distance: int
    insertions: int  # ops missing from the prediction
    deletions: int  # spurious predicted ops
    substitutions: int


def edit_script(pred: Sequence[str], actual: Sequence[str]) -> tuple[int, int, int, int]:
    """Unit-cost Levenshtein distance from ``pred`` to ``actual`` plus its edit counts.

    ``UNKNOWN`` never matches anything, including another ``UNKNOWN``.
    """
    n, m = len(pred), len(actual)
    d = [[i + j if i == 0 or j == 0 else 0 for j in range(m + 1)] for i in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = pred[i - 1] == actual[j - 1] and pred[i - 1] != UNKNOWN
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (0 if same else 1))
    ins = dels = subs = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = pred[i - 1] == actual[j - 1] and pred[i - 1] != UNKNOWN
            if d[i][j] == d[i - 1][j - 1] + (0 if same else 1):
                subs += not same
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return d[n][m], ins, dels, subs


def fidelity(pred: AttackPrediction | Sequence[str], actual: ModelGraph | Sequence[str]) -> FidelityScore:
    """1 - L / max(|pred|, |actual|) over op-kind sequences in topological order."""
    seq = pred.sequence if isinstance(pred, AttackPrediction) else tuple(pred)
    truth = actual.op_sequence() if isinstance(actual, ModelGraph) else list(actual)
    if not truth:
        raise ValueError("actual architecture is empty")
    dist, ins, dels, subs = edit_script(seq, truth)
    value = 1.0 - dist / max(len(seq), len(truth))
    return FidelityScore(value, dist, ins, dels, subs)


def prediction_to_dict(pred: AttackPrediction, score: FidelityScore | None = None) -> dict:
    doc = {"sequence": list(pred.sequence), "confidences": list(pred.confidences)}
    if score is not None:
        doc["fidelity"] = score.value
        doc["edits"] = {
            "insertions": score.insertions,
            "deletions": score.deletions,
            "substitutions": score.substitutions,
        }
    return doc
