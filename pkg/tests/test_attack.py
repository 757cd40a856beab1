import random
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdefense.attack import (
    TAU_FLOOR,
    UNKNOWN,
    AttackPrediction,
    SignatureDB,
    build_signature_db,
    build_signature_db_from_traces,
    corpus_traces,
    edit_script,
    fidelity,
    kernel_features,
    predict_architecture,
    prediction_to_dict,
    transition_prior,
)
from compdefense.model_ir import OP_KINDS, build_graph
from compdefense.perfsim import KernelRecord, Trace, run_inference
from compdefense.schedule import default_assignment, lower
from compdefense.sidechannel import attacker_view
from compdefense.zoo import CONV_FAMILIES, generate_model

from conftest import conv_relu

ALPHABET = ["conv2d", "relu", "add", "dense", UNKNOWN]


def brute_levenshtein(a, b):
    """Plain recursive definition, memoized on suffix positions."""

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        match = a[i] == b[j] and a[i] != UNKNOWN
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (0 if match else 1))

    return go(0, 0)


def profile(graph, device, sigma=0.0, seed=0):
    return run_inference(lower(graph, default_assignment(graph)), device, sigma, seed)


# --- fidelity ---------------------------------------------------------------


def test_fidelity_examples():
    assert fidelity(["conv2d", "relu"], ["conv2d", "relu"]).value == 1.0
    s = fidelity(["conv2d", "relu"], ["conv2d", "relu", "add"])
    assert s.distance == 1 and s.value == pytest.approx(2 / 3)
    assert round(s.value, 4) == 0.6667
    s = fidelity(["dense"], ["conv2d", "relu", "add"])
    assert s.distance == 3 and s.value == 0.0


def test_fidelity_all_unknown_is_zero():
    truth = ["conv2d", "relu", "add", "relu"]
    assert fidelity([UNKNOWN] * 4, truth).value == 0.0
    assert fidelity([UNKNOWN] * 2, [UNKNOWN] * 2).value == 0.0


def test_fidelity_empty_actual():
    with pytest.raises(ValueError):
        fidelity(["conv2d"], [])
    assert fidelity([], ["relu"]).value == 0.0


def test_fidelity_accepts_graph():
    g = conv_relu()
    assert fidelity(AttackPrediction(("conv2d", "relu"), (0.0, 0.0)), g).value == 1.0


seqs = st.lists(st.sampled_from(ALPHABET), max_size=8)


@settings(max_examples=500, deadline=None)
@given(seqs, seqs.filter(bool))
def test_fidelity_matches_oracle(pred, actual):
    s = fidelity(pred, actual)
    assert s.distance == brute_levenshtein(tuple(pred), tuple(actual))
    assert s.value == 1 - s.distance / max(len(pred), len(actual))
    assert 0.0 <= s.value <= 1.0
    # the edit counts explain the distance and the length change
    assert s.insertions + s.deletions + s.substitutions == s.distance
    assert len(pred) - s.deletions + s.insertions == len(actual)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(OP_KINDS), min_size=1, max_size=10))
def test_fidelity_identity(seq):
    assert fidelity(seq, seq).value == 1.0


def test_edit_script_counts():
    # one deletion of a spurious op, one missing op
    assert edit_script(["conv2d", "relu", "relu"], ["conv2d", "relu"])[0] == 1
    d, ins, dels, subs = edit_script(["conv2d"], ["conv2d", "relu"])
    assert (d, ins, dels, subs) == (1, 1, 0, 0)


# --- signature database -------------------------------------------------------


def test_db_single_graph_exact_means(device):
    g = conv_relu()
    t = profile(g, device)
    db = build_signature_db([g], device, 0.0)
    assert db.kinds == ("conv2d", "relu")
    for kind, rec in zip(("conv2d", "relu"), t.records):
        protos, std = db.entry(kind)
        assert np.array_equal(protos, [kernel_features(rec.metrics())])
    assert db.tau == TAU_FLOOR


def test_transition_prior_counts():
    p = transition_prior([conv_relu()])
    conv, relu = OP_KINDS.index("conv2d"), OP_KINDS.index("relu")
    # add-one smoothing over 12 successors plus the observed conv -> relu
    assert p[conv, relu] == pytest.approx(2 / 13)
    assert p[conv, OP_KINDS.index("dense")] == pytest.approx(1 / 13)
    assert np.allclose(p[relu], 1 / 12)
    assert np.allclose(p.sum(axis=1), 1)


def test_db_deterministic_and_serializable(device):
    corpus = [generate_model("resnet_mini", 1, 100), generate_model("yolo_mini", 1, 100)]
    a = build_signature_db(corpus, device, 0.05, (0, 1, 2))
    b = build_signature_db([generate_model("resnet_mini", 1, 100), generate_model("yolo_mini", 1, 100)], device, 0.05, (0, 1, 2))
    assert a == b
    assert SignatureDB.from_json(a.to_json()) == a
    assert SignatureDB.from_json(a.to_json()).to_json() == a.to_json()


def test_db_rejects_tuned_traces(device):
    g = conv_relu()
    fused = {k: replace(s, fuse_epilogue=True) for k, s in default_assignment(g).items()}
    t = run_inference(lower(g, fused), device)
    with pytest.raises(ValueError, match="default schedules"):
        build_signature_db_from_traces([(g, t)])
    with pytest.raises(ValueError):
        build_signature_db([], device, 0.0)


def test_std_is_pooled_residual(device):
    g = conv_relu()
    samples = corpus_traces([g], device, 0.05, range(6))
    db = build_signature_db_from_traces(samples)
    x = np.array([kernel_features(t.records[0].metrics()) for _, t in samples])
    protos, std = db.entry("conv2d")
    assert np.allclose(protos[0], x.mean(axis=0))
    assert np.allclose(std, np.maximum(x.std(axis=0, ddof=1), 1e-6))


# --- prediction -----------------------------------------------------------------


def test_single_conv_exact(device):
    g = build_graph(
        "c", [("x", [1, 8, 8, 3])],
        [{"id": "c", "op": "conv2d", "attrs": {"kernel_hw": [3, 3], "out_channels": 8}, "inputs": ["x"]}],
    )
    db = build_signature_db([g], device, 0.0)
    pred = predict_architecture(attacker_view(profile(g, device)), db)
    assert pred.sequence == ("conv2d",)
    assert pred.confidences == (0.0,)


def test_fused_kernel_reads_as_producer(device):
    g = conv_relu()
    db = build_signature_db([g], device, 0.05, range(8))
    fused = {k: replace(s, fuse_epilogue=True) for k, s in default_assignment(g).items()}
    pred = predict_architecture(run_inference(lower(g, fused), device), db)
    assert pred.sequence == ("conv2d",)
    score = fidelity(pred, g)
    assert score.insertions == 1 and score.value == 0.5


@pytest.mark.parametrize("family", CONV_FAMILIES)
def test_zero_noise_closed_loop(family, device):
    # the corpus is the victim itself; foreign corpora can hold a different op
    # kind with an identical noise-free signature (a relu and a concat moving
    # the same bytes), which no metric-only attacker can separate
    for scale in (1, 2, 3):
        for seed in range(3):
            g = generate_model(family, scale, seed)
            db = build_signature_db([g], device, 0.0)
            pred = predict_architecture(profile(g, device), db)
            assert fidelity(pred, g).value == 1.0


def test_transformer_mostly_unknown(device):
    corpus = [generate_model(f, s, 100) for f in CONV_FAMILIES for s in (1, 2, 3)]
    db = build_signature_db(corpus, device, 0.05, (0, 1, 2))
    g = generate_model("transformer_mini", 2, 0)
    pred = predict_architecture(profile(g, device, 0.05, 1), db)
    assert pred.unknown_fraction > 0.5
    assert fidelity(pred, g).value <= 0.3


def scaled(trace, c):
    recs = tuple(
        KernelRecord(r.index, r.kernel_name, *(int(v * c) for v in r.metrics())) for r in trace.records
    )
    return replace(trace, records=recs)


def test_uniform_scaling_keeps_argmax(device):
    corpus = [generate_model(f, 2, 100) for f in CONV_FAMILIES]
    samples = corpus_traces(corpus, device, 0.05, (0, 1, 2))
    victim = profile(generate_model("yolo_mini", 2, 0), device, 0.05, 9)
    base = predict_architecture(victim, build_signature_db_from_traces(samples))
    c = 1000.0
    db_c = build_signature_db_from_traces([(g, scaled(t, c)) for g, t in samples])
    assert predict_architecture(scaled(victim, c), db_c).sequence == base.sequence


def test_prediction_deterministic(device):
    db = build_signature_db([generate_model("densenet_mini", 1, 100)], device, 0.05, (0, 1))
    view = attacker_view(profile(generate_model("densenet_mini", 2, 0), device, 0.05, 4))
    assert predict_architecture(view, db) == predict_architecture(view, db)


def test_empty_view(device):
    db = build_signature_db([conv_relu()], device, 0.0)
    assert predict_architecture(Trace("m", "d", 0, 0, ()), db).sequence == ()


def test_prediction_document():
    pred = AttackPrediction(("conv2d", UNKNOWN), (-0.5, -9.0))
    doc = prediction_to_dict(pred)
    assert doc == {"sequence": ["conv2d", UNKNOWN], "confidences": [-0.5, -9.0]}
    doc = prediction_to_dict(pred, fidelity(pred, ["conv2d", "relu"]))
    assert doc["fidelity"] == 0.5


def test_oracle_agrees_on_bulk_random_pairs():
    rng = random.Random(0)
    for _ in range(3000):
        a = [rng.choice(ALPHABET) for _ in range(rng.randint(0, 8))]
        b = [rng.choice(ALPHABET) for _ in range(rng.randint(1, 8))]
        assert edit_script(a, b)[0] == brute_levenshtein(tuple(a), tuple(b))
