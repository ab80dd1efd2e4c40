"""Tests for the associative-recall benchmark and its task generators."""

import numpy as np
import pytest

from ttt_lab.recall_bench import (
    DistractorEntry,
    ForgettingCurve,
    GateTrace,
    RecallTask,
    StateDims,
    StreamConfig,
    UnsupportedRuleCombination,
    compare_rules,
    curves_to_csv,
    gate_trace_to_csv,
    gen_adversarial_task,
    gen_recall_task,
    rule_label,
    run_stream,
    summary_to_csv,
)
from ttt_lab.seeding import derive_seed
from ttt_lab.state_rules import (
    ConfidenceGate,
    ConstantScalar,
    DeltaRule,
    FullAttentionAppend,
    GateVector,
    InputScalarSigmoid,
    LinearAttentionHebbian,
    PerTokenInputSigmoid,
    Ttt3r,
    VanillaSoftmaxRnn,
)

DIMS16 = StateDims(4, 16, 16, 16)


# ---------------------------------------------------------------------------
# seed derivation


def test_derive_seed_is_deterministic_and_label_sensitive():
    a = derive_seed(123, "projections")
    assert a == derive_seed(123, "projections")
    assert a != derive_seed(123, "state-init")
    assert a != derive_seed(124, "projections")
    assert 0 <= a < 2**64


# ---------------------------------------------------------------------------
# key generators


def test_orthonormal_keys_are_exactly_orthonormal():
    task = gen_recall_task(16, DIMS16, "orthonormal", seed=0)
    gram = task.keys @ task.keys.T
    np.testing.assert_allclose(gram, np.eye(16), rtol=0, atol=1e-9)


def test_orthonormal_mode_rejects_overfull_count():
    with pytest.raises(ValueError):
        gen_recall_task(17, DIMS16, "orthonormal", seed=0)


def test_random_unit_keys_have_unit_norm():
    task = gen_recall_task(40, DIMS16, "random_unit", seed=1)
    np.testing.assert_allclose(np.linalg.norm(task.keys, axis=1), 1.0, rtol=0, atol=1e-12)
    assert task.rho is None


def test_correlated_keys_have_requested_overlap():
    task = gen_recall_task(16, DIMS16, "correlated", seed=2, rho=0.9)
    assert task.rho == 0.9
    gram = task.keys @ task.keys.T
    off = gram[~np.eye(16, dtype=bool)]
    assert 0.8 <= float(np.mean(np.abs(off))) <= 0.95


def test_correlated_overlap_concentrates_across_seeds():
    means = []
    for seed in range(100):
        task = gen_recall_task(16, DIMS16, "correlated", seed=seed, rho=0.9)
        gram = task.keys @ task.keys.T
        off = gram[~np.eye(16, dtype=bool)]
        means.append(float(np.mean(np.abs(off))))
    assert min(means) >= 0.8
    assert max(means) <= 0.95


def test_task_generation_is_pure_in_the_seed():
    a = gen_recall_task(8, DIMS16, "random_unit", seed=5)
    b = gen_recall_task(8, DIMS16, "random_unit", seed=5)
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.values, b.values)
    c = gen_recall_task(8, DIMS16, "random_unit", seed=6)
    assert np.any(a.keys != c.keys)


def test_task_validation():
    with pytest.raises(ValueError):
        RecallTask(np.ones((2, 4)), np.ones((2, 4)))  # keys not unit
    with pytest.raises(ValueError):
        RecallTask(np.full((2, 4), 0.5), np.ones((2, 4)), key_mode="orthonormal")
    with pytest.raises(ValueError):
        gen_recall_task(0, DIMS16)
    with pytest.raises(ValueError):
        gen_recall_task(4, DIMS16, "correlated", rho=1.0)
    eye = np.eye(4)
    with pytest.raises(ValueError):
        RecallTask(eye[:2], np.ones((2, 3)),
                   (DistractorEntry(2, np.ones(5), np.ones(3)),))


def test_task_pairs_property():
    task = gen_recall_task(3, DIMS16, "random_unit", seed=0)
    pairs = task.pairs
    assert len(pairs) == 3
    np.testing.assert_array_equal(pairs[1][0], task.keys[1])
    np.testing.assert_array_equal(pairs[1][1], task.values[1])


# ---------------------------------------------------------------------------
# stream assembly


def test_stored_pairs_land_one_per_frame_by_default():
    task = gen_recall_task(6, DIMS16, "orthonormal", seed=0)
    curve, _ = run_stream(task, StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16))
    np.testing.assert_array_equal(curve.positions, np.arange(6))
    assert curve.stream_length == 6


def test_batched_mode_packs_consecutive_pairs():
    task = gen_recall_task(10, DIMS16, "orthonormal", seed=0)
    cfg = StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16, batch_size=4)
    curve, trace = run_stream(task, cfg)
    assert curve.stream_length == 3
    np.testing.assert_array_equal(curve.positions, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2])
    assert [len(g.beta) for g in trace.per_frame_gates] == [4, 4, 2]


def test_distractor_groups_occupy_their_positions():
    eye = np.eye(16)
    d_key = eye[10]
    entries = (DistractorEntry(1, d_key, np.zeros(16)),
               DistractorEntry(1, d_key, np.zeros(16)),
               DistractorEntry(3, d_key, np.zeros(16)))
    task = RecallTask(eye[:2], np.ones((2, 16)), entries)
    curve, trace = run_stream(task, StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16))
    # stream: pair0, distractor pair(x2), pair1, distractor
    assert curve.stream_length == 4
    np.testing.assert_array_equal(curve.positions, [0, 2])
    assert [len(g.beta) for g in trace.per_frame_gates] == [1, 2, 1, 1]


def test_out_of_range_distractor_position_raises():
    eye = np.eye(16)
    # 2 pairs + 1 distractor group = 3 frames, so position 10 is invalid
    task = RecallTask(eye[:2], np.ones((2, 16)),
                      (DistractorEntry(10, eye[10], np.zeros(16)),))
    with pytest.raises(ValueError):
        run_stream(task, StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16))


# ---------------------------------------------------------------------------
# stream config validation and unsupported combinations


def test_stream_config_validation():
    with pytest.raises(ValueError):
        StreamConfig(VanillaSoftmaxRnn(), DIMS16, reset_period=0)
    with pytest.raises(ValueError):
        StreamConfig(VanillaSoftmaxRnn(), DIMS16, softmax_scale=0.0)
    with pytest.raises(ValueError):
        StreamConfig(VanillaSoftmaxRnn(), DIMS16, gate_reduce="max")
    with pytest.raises(ValueError):
        StreamConfig(VanillaSoftmaxRnn(), DIMS16, batch_size=0)
    with pytest.raises(ValueError):
        StreamConfig(VanillaSoftmaxRnn(), StateDims(0, 16, 16, 16))


def test_token_rules_require_matching_state_and_key_width():
    task = gen_recall_task(4, StateDims(2, 8, 16, 16), "orthonormal", seed=0)
    cfg = StreamConfig(VanillaSoftmaxRnn(), StateDims(2, 8, 16, 16))
    with pytest.raises(UnsupportedRuleCombination):
        run_stream(task, cfg)


def test_delta_rule_rejects_state_dependent_gates():
    task = gen_recall_task(4, DIMS16, "orthonormal", seed=0)
    for mode in (ConfidenceGate("sum"), PerTokenInputSigmoid()):
        with pytest.raises(UnsupportedRuleCombination):
            run_stream(task, StreamConfig(DeltaRule(mode), DIMS16))


def test_delta_rule_supports_input_sigmoid_gate():
    task = gen_recall_task(4, DIMS16, "orthonormal", seed=0)
    curve, trace = run_stream(task, StreamConfig(DeltaRule(InputScalarSigmoid()), DIMS16))
    assert len(trace) == 4
    for g in trace.per_frame_gates:
        assert np.all(g.beta > 0.0) and np.all(g.beta < 1.0)


# ---------------------------------------------------------------------------
# gate traces


def test_ungated_rules_return_empty_trace():
    task = gen_recall_task(4, DIMS16, "orthonormal", seed=0)
    for rule in (FullAttentionAppend(), VanillaSoftmaxRnn(), LinearAttentionHebbian()):
        _, trace = run_stream(task, StreamConfig(rule, DIMS16, softmax_scale=1.0))
        assert len(trace) == 0
        assert trace.per_frame_gates == ()


def test_gated_rules_trace_every_frame():
    task = gen_recall_task(5, DIMS16, "orthonormal", seed=0)
    _, trace = run_stream(task, StreamConfig(Ttt3r(ConfidenceGate("sum")), DIMS16))
    assert len(trace) == 5
    for g in trace.per_frame_gates:
        assert isinstance(g, GateVector)
        assert g.beta.shape == (4,)


def test_gate_trace_rejects_non_gate_entries():
    with pytest.raises(TypeError):
        GateTrace("x", (np.ones(3),))


def test_stream_gate_reduce_overrides_rule_mode():
    task = gen_recall_task(6, DIMS16, "orthonormal", seed=0)
    rule = Ttt3r(ConfidenceGate("sum"))
    _, t_sum = run_stream(task, StreamConfig(rule, DIMS16, gate_reduce="sum",
                                             batch_size=3))
    _, t_mean = run_stream(task, StreamConfig(rule, DIMS16, gate_reduce="mean",
                                              batch_size=3))
    a = np.concatenate([g.beta for g in t_sum.per_frame_gates])
    b = np.concatenate([g.beta for g in t_mean.per_frame_gates])
    assert np.any(a != b)


# ---------------------------------------------------------------------------
# reset protocol


def test_reset_every_frame_keeps_only_the_last_frame():
    task = gen_recall_task(8, DIMS16, "orthonormal", seed=3)
    cfg = StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16, reset_period=1)
    curve, _ = run_stream(task, cfg)
    # wiped pairs read back as zero, so their error is exactly ||v||^2
    expect = np.sum(task.values**2, axis=1)
    np.testing.assert_allclose(curve.sq_errors[:-1], expect[:-1], rtol=0, atol=1e-12)
    assert curve.sq_errors[-1] <= 1e-20


def test_reset_longer_than_stream_changes_nothing():
    task = gen_recall_task(8, DIMS16, "orthonormal", seed=3)
    base = StreamConfig(Ttt3r(ConfidenceGate("sum")), DIMS16)
    huge = StreamConfig(Ttt3r(ConfidenceGate("sum")), DIMS16, reset_period=1000)
    a, _ = run_stream(task, base)
    b, _ = run_stream(task, huge)
    np.testing.assert_array_equal(a.sq_errors, b.sq_errors)


def test_reset_restores_the_seeded_initial_state():
    # with P = count, the last window sees only the final pair, so the
    # stream behaves like a fresh one-pair stream for that pair
    task = gen_recall_task(4, DIMS16, "orthonormal", seed=7)
    cfg = StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16, reset_period=3)
    curve, _ = run_stream(task, cfg)
    solo = RecallTask(task.keys[3:], task.values[3:], (), "orthonormal", 7)
    solo_curve, _ = run_stream(solo, StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16))
    assert curve.sq_errors[3] == solo_curve.sq_errors[0]


def test_full_attention_reset_drops_cached_history():
    task = gen_recall_task(8, DIMS16, "orthonormal", seed=3)
    cfg = StreamConfig(FullAttentionAppend(), DIMS16, reset_period=4, softmax_scale=1.0)
    curve, _ = run_stream(task, cfg)
    assert np.all(curve.sq_errors[4:] <= 1e-16)
    assert np.all(curve.sq_errors[:4] > 1e-3)


# ---------------------------------------------------------------------------
# recall quality


def test_delta_rule_is_exact_at_orthonormal_capacity():
    task = gen_recall_task(16, DIMS16, "orthonormal", seed=0)
    curve, _ = run_stream(task, StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16))
    assert curve.worst_sq_error <= 1e-20


def test_hebbian_matches_delta_on_orthonormal_keys():
    task = gen_recall_task(16, DIMS16, "orthonormal", seed=0)
    curve, _ = run_stream(task, StreamConfig(LinearAttentionHebbian(), DIMS16))
    assert curve.worst_sq_error <= 1e-20


def test_full_attention_recall_is_exact_at_unit_scale():
    task = gen_recall_task(16, DIMS16, "orthonormal", seed=0)
    cfg = StreamConfig(FullAttentionAppend(), DIMS16, softmax_scale=1.0)
    curve, _ = run_stream(task, cfg)
    assert curve.worst_sq_error <= 1e-16


def test_random_unit_overload_degrades_delta_recall():
    lo, hi = [], []
    for seed in range(5):
        dims = DIMS16
        small = gen_recall_task(8, dims, "random_unit", seed=seed)
        big = gen_recall_task(64, dims, "random_unit", seed=seed)
        c_small, _ = run_stream(small, StreamConfig(DeltaRule(ConstantScalar(1.0)), dims))
        c_big, _ = run_stream(big, StreamConfig(DeltaRule(ConstantScalar(1.0)), dims))
        lo.append(c_small.mean_sq_error)
        hi.append(c_big.mean_sq_error)
    assert np.mean(hi) > 5.0 * np.mean(lo)


def test_gated_and_ungated_token_rules_coincide_at_unit_gate():
    task = gen_recall_task(12, DIMS16, "orthonormal", seed=4)
    a, _ = run_stream(task, StreamConfig(Ttt3r(ConstantScalar(1.0)), DIMS16))
    b, _ = run_stream(task, StreamConfig(VanillaSoftmaxRnn(), DIMS16))
    np.testing.assert_array_equal(a.sq_errors, b.sq_errors)


def test_run_stream_is_pure():
    task = gen_recall_task(6, DIMS16, "orthonormal", seed=9)
    cfg = StreamConfig(Ttt3r(ConfidenceGate("mean")), DIMS16)
    a, ta = run_stream(task, cfg)
    b, tb = run_stream(task, cfg)
    np.testing.assert_array_equal(a.sq_errors, b.sq_errors)
    for ga, gb in zip(ta.per_frame_gates, tb.per_frame_gates):
        np.testing.assert_array_equal(ga.beta, gb.beta)


# ---------------------------------------------------------------------------
# adversarial task


def test_adversarial_task_shape():
    dims = StateDims(4, 64, 64, 64)
    task = gen_adversarial_task(dims, seed=0)
    assert task.count == 32
    assert len(task.distractors) == 128
    positions = sorted({d.position for d in task.distractors})
    assert positions == list(range(32, 40))
    for d in task.distractors:
        assert np.linalg.norm(d.key) == pytest.approx(1.0, abs=1e-9)
    # distractor directions lean away from the stored keys
    k_mean = task.keys.sum(axis=0)
    for d in task.distractors:
        assert float(d.key @ k_mean) < 0.0


def test_adversarial_task_validation():
    dims = StateDims(4, 64, 64, 64)
    with pytest.raises(ValueError):
        gen_adversarial_task(dims, distractor_count=100, frame_size=16)
    with pytest.raises(ValueError):
        gen_adversarial_task(StateDims(4, 16, 16, 16))  # not enough directions
    with pytest.raises(ValueError):
        gen_adversarial_task(dims, anti=0.0)


# ---------------------------------------------------------------------------
# rule comparison


def test_compare_rules_matches_serial_execution_bitwise():
    task = gen_recall_task(12, DIMS16, "orthonormal", seed=1)
    configs = [
        StreamConfig(FullAttentionAppend(), DIMS16, softmax_scale=1.0),
        StreamConfig(VanillaSoftmaxRnn(), DIMS16),
        StreamConfig(DeltaRule(ConstantScalar(0.5)), DIMS16),
        StreamConfig(Ttt3r(ConfidenceGate("sum")), DIMS16),
    ]
    serial = compare_rules(task, configs, threads=1)
    threaded = compare_rules(task, configs, threads=4)
    assert serial.labels == threaded.labels
    for a, b in zip(serial.curves, threaded.curves):
        np.testing.assert_array_equal(a.sq_errors, b.sq_errors)
    for ta, tb in zip(serial.traces, threaded.traces):
        for ga, gb in zip(ta.per_frame_gates, tb.per_frame_gates):
            np.testing.assert_array_equal(ga.beta, gb.beta)


def test_compare_rules_disambiguates_repeated_labels():
    task = gen_recall_task(4, DIMS16, "orthonormal", seed=1)
    configs = [StreamConfig(VanillaSoftmaxRnn(), DIMS16),
               StreamConfig(VanillaSoftmaxRnn(), DIMS16, softmax_scale=1.0)]
    cmp = compare_rules(task, configs)
    assert cmp.labels == ("vanilla", "vanilla#2")
    assert cmp.curves[1].rule_label == "vanilla#2"


def test_compare_rules_requires_configs():
    task = gen_recall_task(4, DIMS16, "orthonormal", seed=1)
    with pytest.raises(ValueError):
        compare_rules(task, [])


def test_rule_labels():
    assert rule_label(FullAttentionAppend()) == "full"
    assert rule_label(VanillaSoftmaxRnn()) == "vanilla"
    assert rule_label(LinearAttentionHebbian()) == "hebbian"
    assert rule_label(DeltaRule(ConstantScalar(0.5))) == "delta:0.5"
    assert rule_label(Ttt3r(ConfidenceGate("sum"))) == "ttt3r:confidence"
    assert rule_label(Ttt3r(InputScalarSigmoid())) == "ttt3r:input"
    assert rule_label(Ttt3r(PerTokenInputSigmoid())) == "ttt3r:per_token"


# ---------------------------------------------------------------------------
# CSV rendering


def test_curves_csv_schema_and_roundtrip():
    task = gen_recall_task(3, DIMS16, "orthonormal", seed=1)
    curve, _ = run_stream(task, StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16))
    text = curves_to_csv([curve])
    lines = text.strip().split("\n")
    assert lines[0] == "rule,position,sq_error"
    assert len(lines) == 4
    for line, pos, err in zip(lines[1:], curve.positions, curve.sq_errors):
        rule, p, e = line.split(",")
        assert rule == "delta:1"
        assert int(p) == pos
        assert float(e) == err  # repr round-trips float64 exactly


def test_gate_trace_csv_schema():
    task = gen_recall_task(3, DIMS16, "orthonormal", seed=1)
    _, trace = run_stream(task, StreamConfig(Ttt3r(ConfidenceGate("sum")), DIMS16))
    lines = gate_trace_to_csv(trace).strip().split("\n")
    assert lines[0] == "frame,token,beta"
    assert len(lines) == 1 + 3 * 4
    frame, token, beta = lines[1].split(",")
    assert (int(frame), int(token)) == (0, 0)
    assert 0.0 < float(beta) < 1.0


def test_summary_csv_schema():
    task = gen_recall_task(3, DIMS16, "orthonormal", seed=1)
    cmp = compare_rules(task, [StreamConfig(DeltaRule(ConstantScalar(1.0)), DIMS16)])
    lines = summary_to_csv(cmp).strip().split("\n")
    assert lines[0] == "rule,mean_sq_error,worst_sq_error"
    rule, mean, worst = lines[1].split(",")
    assert rule == "delta:1"
    assert float(mean) == cmp.curves[0].mean_sq_error
    assert float(worst) == cmp.curves[0].worst_sq_error


def test_forgetting_curve_validation():
    with pytest.raises(ValueError):
        ForgettingCurve("x", np.arange(3), np.array([1.0, -2.0, 3.0]), 3)
    with pytest.raises(ValueError):
        ForgettingCurve("x", np.arange(3), np.array([1.0, 2.0]), 3)
