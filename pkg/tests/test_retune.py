"""Retune actions: validation, application, event-sourced replay."""

from fractions import Fraction

import numpy as np
import pytest

from confsig.detectors import DetectorConfig, detect_signature_outliers, dump_findings
from confsig.encoder import TokenTable, encode_all
from confsig.errors import (
    KindMismatch,
    ReplayError,
    StaleGeneration,
    UnknownSignature,
)
from confsig.ingest import NetworkSnapshot, parse_config
from confsig.properties import build_reference_graph, extract_properties
from confsig.retune import (
    RetuneAction,
    RetuneLog,
    action_from_dict,
    action_to_dict,
    adjust_threshold,
    apply_retune,
    dump_log,
    load_log,
    merge_signatures,
    recompute,
    replay,
    suppress_finding,
    whitelist_value,
)
from confsig.signatures import MiningParams, dump_set, mine_signatures


def build_bundle(texts, params=None):
    devices = {name: parse_config(text, name) for name, text in sorted(texts.items())}
    snapshot = NetworkSnapshot(devices=devices, snapshot_id="t", ingest_warnings=())
    properties = extract_properties(snapshot)
    graph = build_reference_graph(snapshot, properties)
    table = TokenTable()
    vectors = encode_all(properties, table)
    sset = mine_signatures(vectors, table, params)
    return properties, vectors, sset, graph, table


def vrf_fleet(interface_counts):
    texts = {}
    for index, count in enumerate(interface_counts, start=1):
        name = f"r{index:02d}"
        lines = [f"hostname {name}", ""]
        for i in range(count):
            lines.append(f"interface E{i}")
        lines.append("vrf CORE")
        lines.append("  rd 65000:1")
        for i in range(count):
            lines.append(f"  interface E{i}")
        texts[name] = "\n".join(lines) + "\n"
    return texts


def two_pool_vrf_fleet():
    """Twelve devices sharing the vrf name CORE, split 5 small / 7 large with
    all four numeric features apart, far enough to mine as two signatures."""
    texts = {}
    for index in range(1, 13):
        name = f"r{index:02d}"
        n_if, n_pol = (2, 1) if index <= 5 else (6, 3)
        lines = [f"hostname {name}", ""]
        for i in range(n_if):
            lines.append(f"interface E{i}")
        for i in range(n_pol):
            lines.append(f"routing-policy P{i}")
            lines.append("  set local-pref 100")
            lines.append(f"routing-policy Q{i}")
            lines.append("  set med 50")
        lines.append("vrf CORE")
        lines.append("  rd 65000:1")
        for i in range(n_if):
            lines.append(f"  interface E{i}")
        for i in range(n_pol):
            lines.append(f"  import policy P{i}")
        for i in range(n_pol):
            lines.append(f"  export policy Q{i}")
        texts[name] = "\n".join(lines) + "\n"
    return texts


def shared_acl_fleet(flip_r6=False):
    texts = {}
    for index in range(1, 7):
        rules = ["  permit tcp 10.1.0.0/24 any", "  deny ip any any"]
        if index == 6 and flip_r6:
            rules = list(reversed(rules))
        texts[f"r{index}"] = (
            f"hostname r{index}\n\nacl MGMT\n" + "\n".join(rules) + "\n"
        )
    return texts


def vrf_signature_ids(sset):
    return [s.id for s in sset.signatures if s.kind == "Vrf"]


# --- action validation ----------------------------------------------------


def test_unknown_action_kind_rejected():
    with pytest.raises(ValueError):
        RetuneAction(kind="delete_signature", base_generation=0)


def test_missing_required_field_rejected():
    with pytest.raises(ValueError):
        RetuneAction(kind="adjust_threshold", base_generation=0, signature_id="s")


def test_extraneous_field_rejected():
    with pytest.raises(ValueError):
        RetuneAction(
            kind="whitelist_value",
            base_generation=0,
            signature_id="s",
            feature="f",
            value="v",
            property_id="p",
        )


def test_threshold_must_be_positive_and_finite():
    for bad in (0.0, -1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            adjust_threshold("s", bad, 0)


def test_self_merge_rejected():
    with pytest.raises(ValueError):
        merge_signatures("sig-vrf-000", "sig-vrf-000", 0)


def test_negative_base_generation_rejected():
    with pytest.raises(ValueError):
        suppress_finding("p", "s", -1)


# --- merge ----------------------------------------------------------------


def test_merge_pools_members_and_reassigns():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    assert sset.by_id()[sig_a].member_count == 5
    assert sset.by_id()[sig_b].member_count == 7

    merged_set = apply_retune(sset, merge_signatures(sig_a, sig_b, 0), vectors, table)
    assert merged_set.generation == 1
    assert vrf_signature_ids(merged_set) == ["sig-vrf-g1"]
    merged = merged_set.by_id()["sig-vrf-g1"]
    assert merged.member_count == 12
    vrf_pids = [p.id for p in properties if p.kind == "Vrf"]
    assert all(merged_set.assignment[pid] == "sig-vrf-g1" for pid in vrf_pids)
    # signatures of other kinds are untouched, tuple stays sorted by id
    ids = [s.id for s in merged_set.signatures]
    assert ids == sorted(ids)


def test_merge_stats_equal_remining_the_pool():
    # oracle: a fresh mining run with a merge radius wide enough to fuse the
    # two pools must produce the exact same statistics as the retune merge
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    merged_set = apply_retune(sset, merge_signatures(sig_a, sig_b, 0), vectors, table)
    merged = merged_set.by_id()["sig-vrf-g1"]

    wide = MiningParams(merge_distance=100.0)
    remined = mine_signatures(vectors, table, wide)
    assert len(vrf_signature_ids(remined)) == 1
    fused = remined.by_id()[vrf_signature_ids(remined)[0]]
    assert fused.member_count == merged.member_count
    assert fused.numeric_stats == merged.numeric_stats
    assert fused.categorical_stats == merged.categorical_stats


def test_merge_stats_match_numpy_recomputation():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    merged_set = apply_retune(sset, merge_signatures(sig_a, sig_b, 0), vectors, table)
    merged = merged_set.by_id()["sig-vrf-g1"]

    pool = sorted(
        (v for v in vectors if v.kind == "Vrf"), key=lambda v: v.property_id
    )
    matrix = np.array([v.numeric for v in pool])
    for column, stats in zip(matrix.T, merged.numeric_stats):
        assert stats.median == float(np.median(column))
        assert stats.mad == float(np.median(np.abs(column - np.median(column))))
        assert stats.mean == float(np.mean(column))
        assert stats.stddev == float(np.std(column))


def test_merge_takes_max_threshold_and_unions_exemptions():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    step1 = apply_retune(sset, adjust_threshold(sig_a, 5.0, 0), vectors, table)
    step2 = apply_retune(
        step1, whitelist_value(sig_b, "rd_template_class", "#:#", 1), vectors, table
    )
    step3 = apply_retune(step2, suppress_finding("r01/Vrf/CORE", sig_a, 2), vectors, table)
    merged_set = apply_retune(
        step3, merge_signatures(sig_a, sig_b, 3), vectors, table
    )
    merged = merged_set.by_id()["sig-vrf-g4"]
    assert merged.threshold == 5.0
    assert merged.whitelisted("rd_template_class", "#:#")
    assert "r01/Vrf/CORE" in merged.suppressed


def test_merge_rejects_cross_kind():
    texts = two_pool_vrf_fleet()
    properties, vectors, sset, graph, table = build_bundle(texts)
    vrf_id = vrf_signature_ids(sset)[0]
    policy_id = next(s.id for s in sset.signatures if s.kind == "RoutingPolicy")
    with pytest.raises(KindMismatch):
        apply_retune(sset, merge_signatures(vrf_id, policy_id, 0), vectors, table)


def test_unknown_signature_rejected():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    with pytest.raises(UnknownSignature):
        apply_retune(
            sset, merge_signatures("sig-vrf-000", "sig-vrf-777", 0), vectors, table
        )
    with pytest.raises(UnknownSignature):
        apply_retune(sset, adjust_threshold("sig-acl-000", 4.0, 0), vectors, table)


# --- threshold, whitelist, suppress ---------------------------------------


def test_adjust_threshold_same_value_changes_only_generation():
    properties, vectors, sset, graph, table = build_bundle(
        vrf_fleet([2, 3, 3, 4, 4, 5, 20])
    )
    sig = vrf_signature_ids(sset)[0]
    assert sset.by_id()[sig].threshold == 3.5
    bumped = apply_retune(sset, adjust_threshold(sig, 3.5, 0), vectors, table)
    assert bumped.generation == sset.generation + 1
    assert bumped.signatures == sset.signatures
    assert bumped.assignment == sset.assignment
    assert bumped.params == sset.params


def test_raising_threshold_never_increases_findings():
    properties, vectors, sset, graph, table = build_bundle(
        vrf_fleet([2, 3, 3, 4, 4, 5, 20])
    )
    sig = vrf_signature_ids(sset)[0]
    counts = []
    for theta in (0.5, 3.5, 15.9, 16.1, 40.0):
        tuned = apply_retune(sset, adjust_threshold(sig, theta, 0), vectors, table)
        counts.append(len(recompute(properties, vectors, tuned, graph, table)))
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 0


def test_whitelist_erases_the_categorical_finding():
    properties, vectors, sset, graph, table = build_bundle(shared_acl_fleet(True))
    findings = recompute(properties, vectors, sset, graph, table)
    assert len(findings) == 1
    finding = findings[0]
    feature, observed, _ = finding.deviant_features[0]

    tuned = apply_retune(
        sset,
        whitelist_value(finding.violated_signature, feature, observed, 0),
        vectors,
        table,
    )
    assert recompute(properties, vectors, tuned, graph, table) == []


def test_whitelist_feature_must_exist_on_the_kind():
    properties, vectors, sset, graph, table = build_bundle(shared_acl_fleet(True))
    sig = next(s.id for s in sset.signatures if s.kind == "Acl")
    with pytest.raises(ValueError):
        apply_retune(
            sset, whitelist_value(sig, "entry_count", "3", 0), vectors, table
        )


def test_suppress_removes_exactly_one_finding():
    properties, vectors, sset, graph, table = build_bundle(
        vrf_fleet([2, 3, 3, 4, 4, 5, 19, 26])
    )
    before = recompute(properties, vectors, sset, graph, table)
    assert len(before) == 2
    target, keeper = before[0], before[1]

    tuned = apply_retune(
        sset,
        suppress_finding(target.property_id, target.violated_signature, 0),
        vectors,
        table,
    )
    after = recompute(properties, vectors, tuned, graph, table)
    assert after == [keeper]


def test_suppressing_a_false_positive_lifts_precision():
    # ground truth declared by the test: the 26-interface vrf is a real
    # defect, the 19-interface one is a benign big site
    properties, vectors, sset, graph, table = build_bundle(
        vrf_fleet([2, 3, 3, 4, 4, 5, 19, 26])
    )
    truth = {next(p.id for p in properties if p.device == "r08" and p.kind == "Vrf")}

    def metrics(findings):
        flagged = {f.property_id for f in findings}
        tp = len(flagged & truth)
        precision = Fraction(tp, len(flagged))
        recall = Fraction(tp, len(truth))
        return precision, recall

    before = recompute(properties, vectors, sset, graph, table)
    precision_before, recall_before = metrics(before)
    assert precision_before == Fraction(1, 2)

    false_positive = next(f for f in before if f.property_id not in truth)
    tuned = apply_retune(
        sset,
        suppress_finding(
            false_positive.property_id, false_positive.violated_signature, 0
        ),
        vectors,
        table,
    )
    precision_after, recall_after = metrics(
        recompute(properties, vectors, tuned, graph, table)
    )
    assert precision_after == Fraction(1, 1) > precision_before
    assert recall_after == recall_before == Fraction(1, 1)


# --- copy-on-retune and generations ---------------------------------------


def test_input_set_is_never_mutated():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    before = dump_set(sset)
    apply_retune(sset, merge_signatures(sig_a, sig_b, 0), vectors, table)
    apply_retune(sset, adjust_threshold(sig_a, 9.0, 0), vectors, table)
    apply_retune(sset, whitelist_value(sig_a, "rd_template_class", "x", 0), vectors, table)
    apply_retune(sset, suppress_finding("r01/Vrf/CORE", sig_a, 0), vectors, table)
    assert dump_set(sset) == before
    assert sset.generation == 0


def test_stale_generation_rejected():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    action = adjust_threshold(sig_a, 4.0, 0)
    current = apply_retune(sset, action, vectors, table)
    with pytest.raises(StaleGeneration) as err:
        apply_retune(current, action, vectors, table)
    assert err.value.expected == 1
    assert err.value.actual == 0
    with pytest.raises(StaleGeneration):
        apply_retune(sset, adjust_threshold(sig_a, 4.0, 2), vectors, table)


def test_recompute_unmodified_set_is_byte_identical():
    properties, vectors, sset, graph, table = build_bundle(
        vrf_fleet([2, 3, 3, 4, 4, 5, 20])
    )
    config = DetectorConfig()
    original = dump_findings(
        detect_signature_outliers(properties, vectors, sset, graph, table), config
    )
    again = dump_findings(
        recompute(properties, vectors, sset, graph, table), config
    )
    assert again == original


# --- replay ---------------------------------------------------------------


def test_replay_empty_log_is_identity():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    replayed = replay(RetuneLog(base_generation=0), sset, vectors, table)
    assert replayed.generation == 0
    assert dump_set(replayed) == dump_set(sset)


def test_replay_reproduces_live_session_bytes():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    session = [
        merge_signatures(sig_a, sig_b, 0, timestamp="t0"),
        adjust_threshold("sig-vrf-g1", 4.25, 1, timestamp="t1"),
        suppress_finding("r12/Vrf/CORE", "sig-vrf-g1", 2, timestamp="t2"),
    ]
    live = sset
    log = RetuneLog(base_generation=0)
    for action in session:
        live = apply_retune(live, action, vectors, table)
        log = log.append(action)
    assert live.generation == 3

    replayed = replay(log, sset, vectors, table)
    assert dump_set(replayed) == dump_set(live)

    # and straight through serialization of the log itself
    reloaded = load_log(dump_log(log))
    assert dump_set(replay(reloaded, sset, vectors, table)) == dump_set(live)


def test_replay_wraps_failures_with_the_action_index():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    sig_a, sig_b = vrf_signature_ids(sset)
    log = RetuneLog(
        base_generation=0,
        actions=(
            adjust_threshold(sig_a, 4.0, 0),
            adjust_threshold("sig-vrf-404", 4.0, 1),
        ),
    )
    with pytest.raises(ReplayError) as err:
        replay(log, sset, vectors, table)
    assert err.value.index == 1
    assert isinstance(err.value.cause, UnknownSignature)


def test_replay_checks_base_generation():
    properties, vectors, sset, graph, table = build_bundle(two_pool_vrf_fleet())
    with pytest.raises(StaleGeneration):
        replay(RetuneLog(base_generation=5), sset, vectors, table)


# --- serialization --------------------------------------------------------


def test_action_round_trip_all_kinds():
    actions = [
        merge_signatures("a", "b", 0, author="kim", timestamp="t0", note="same template"),
        adjust_threshold("a", 4.5, 1),
        whitelist_value("a", "rd_template_class", "#:#", 2),
        suppress_finding("r01/Vrf/CORE", "a", 3),
    ]
    for action in actions:
        assert action_from_dict(action_to_dict(action)) == action


def test_action_dict_omits_unused_payload_fields():
    doc = action_to_dict(adjust_threshold("a", 4.5, 1))
    assert "property_id" not in doc
    assert "feature" not in doc
    assert doc["new_threshold"] == 4.5


def test_action_from_dict_rejects_unknown_fields():
    doc = action_to_dict(adjust_threshold("a", 4.5, 1))
    doc["reason_code"] = 7
    with pytest.raises(ValueError):
        action_from_dict(doc)


def test_log_round_trip_and_stable_bytes():
    log = RetuneLog(
        base_generation=2,
        actions=(
            whitelist_value("sig-acl-000", "action_sequence_hash", "h", 2),
            suppress_finding("r6/Acl/MGMT", "sig-acl-000", 3),
        ),
    )
    text = dump_log(log)
    lines = text.splitlines()
    assert len(lines) == 3
    assert text.endswith("\n")
    assert '"format":"retune-log-v1"' in lines[0]
    assert '"base_generation":2' in lines[0]
    reloaded = load_log(text)
    assert reloaded == log
    assert dump_log(reloaded) == text


def test_load_log_rejects_wrong_format_and_empty():
    with pytest.raises(ValueError):
        load_log('{"format":"findings-v1"}\n')
    with pytest.raises(ValueError):
        load_log("\n\n")
