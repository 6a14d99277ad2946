"""Operator retuning of a mined signature set.

A first mining pass is rarely the final word: a noisy signature needs a
higher threshold, a benign minority value keeps tripping the categorical
check, two clusters an operator recognizes as the same template landed as
separate signatures, one finding is a known special case. This module
applies those corrections as an event-sourced log of four action kinds:

* ``merge_signatures`` pools two same-kind signatures and recomputes the
  merged statistics over the union of their members.
* ``adjust_threshold`` replaces one signature's flagging threshold.
* ``whitelist_value`` exempts a (feature, value) pair from categorical
  deviation scoring within one signature.
* ``suppress_finding`` mutes one property within one signature.

Each action is stamped with the generation it was built against, and a
successful application returns a new set at generation + 1; the input set is
never mutated. An action whose base generation does not match the live set
is rejected outright (optimistic concurrency, no last-write-wins), so two
writers cannot silently clobber each other. Because every applied action is
recorded with its base generation, replaying the log over the base set
reproduces the live session exactly, byte for byte on disk.

Timestamps here are opaque ordering labels chosen by the caller, not wall
clock readings; artifacts must serialize identically across runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

from .detectors import Finding, detect_signature_outliers
from .encoder import FeatureVector, TokenTable, feature_schema
from .errors import KindMismatch, ReplayError, StaleGeneration, UnknownSignature
from .properties import Property, ReferenceGraph
from .signatures import (
    _KIND_SLUG,
    Signature,
    SignatureSet,
    compute_cluster_stats,
)

ACTION_KINDS = (
    "merge_signatures",
    "adjust_threshold",
    "whitelist_value",
    "suppress_finding",
)

# payload fields each action kind must carry; all others must stay None
_REQUIRED_FIELDS = {
    "merge_signatures": ("signature_id", "other_signature_id"),
    "adjust_threshold": ("signature_id", "new_threshold"),
    "whitelist_value": ("signature_id", "feature", "value"),
    "suppress_finding": ("signature_id", "property_id"),
}

_PAYLOAD_FIELDS = (
    "signature_id",
    "other_signature_id",
    "new_threshold",
    "feature",
    "value",
    "property_id",
)


@dataclass(frozen=True)
class RetuneAction:
    """One operator decision, validated at construction.

    ``kind`` selects the operation and determines which payload fields must
    be set; the rest must remain None so a mis-built action fails here
    instead of surfacing as a silent no-op during application.
    """

    kind: str
    base_generation: int
    signature_id: str | None = None
    other_signature_id: str | None = None
    new_threshold: float | None = None
    feature: str | None = None
    value: str | None = None
    property_id: str | None = None
    author: str = "operator"
    timestamp: str = ""
    note: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown retune action kind {self.kind!r}")
        if self.base_generation < 0:
            raise ValueError("base_generation must be >= 0")
        required = _REQUIRED_FIELDS[self.kind]
        for name in _PAYLOAD_FIELDS:
            value = getattr(self, name)
            if name in required and value is None:
                raise ValueError(f"{self.kind} requires {name}")
            if name not in required and value is not None:
                raise ValueError(f"{self.kind} does not take {name}")
        if self.new_threshold is not None:
            if not math.isfinite(self.new_threshold) or self.new_threshold <= 0:
                raise ValueError("new_threshold must be finite and > 0")
        if self.kind == "merge_signatures":
            if self.signature_id == self.other_signature_id:
                raise ValueError("cannot merge a signature with itself")


def merge_signatures(
    signature_id: str,
    other_signature_id: str,
    base_generation: int,
    *,
    author: str = "operator",
    timestamp: str = "",
    note: str = "",
) -> RetuneAction:
    return RetuneAction(
        kind="merge_signatures",
        base_generation=base_generation,
        signature_id=signature_id,
        other_signature_id=other_signature_id,
        author=author,
        timestamp=timestamp,
        note=note,
    )


def adjust_threshold(
    signature_id: str,
    new_threshold: float,
    base_generation: int,
    *,
    author: str = "operator",
    timestamp: str = "",
    note: str = "",
) -> RetuneAction:
    return RetuneAction(
        kind="adjust_threshold",
        base_generation=base_generation,
        signature_id=signature_id,
        new_threshold=float(new_threshold),
        author=author,
        timestamp=timestamp,
        note=note,
    )


def whitelist_value(
    signature_id: str,
    feature: str,
    value: str,
    base_generation: int,
    *,
    author: str = "operator",
    timestamp: str = "",
    note: str = "",
) -> RetuneAction:
    return RetuneAction(
        kind="whitelist_value",
        base_generation=base_generation,
        signature_id=signature_id,
        feature=feature,
        value=value,
        author=author,
        timestamp=timestamp,
        note=note,
    )


def suppress_finding(
    property_id: str,
    signature_id: str,
    base_generation: int,
    *,
    author: str = "operator",
    timestamp: str = "",
    note: str = "",
) -> RetuneAction:
    return RetuneAction(
        kind="suppress_finding",
        base_generation=base_generation,
        signature_id=signature_id,
        property_id=property_id,
        author=author,
        timestamp=timestamp,
        note=note,
    )


@dataclass(frozen=True)
class RetuneLog:
    """Ordered action record; replaying it over the base set reproduces the
    live session's final state exactly."""

    base_generation: int
    actions: tuple[RetuneAction, ...] = ()

    def append(self, action: RetuneAction) -> "RetuneLog":
        return RetuneLog(self.base_generation, self.actions + (action,))


def _lookup(sset: SignatureSet, signature_id: str) -> Signature:
    for signature in sset.signatures:
        if signature.id == signature_id:
            return signature
    raise UnknownSignature(signature_id)


def _replace_signature(sset: SignatureSet, updated: Signature) -> tuple[Signature, ...]:
    # id is unchanged, so the sorted-by-id tuple order is preserved
    return tuple(updated if s.id == updated.id else s for s in sset.signatures)


def _apply_merge(
    sset: SignatureSet,
    action: RetuneAction,
    vectors: list[FeatureVector],
    table: TokenTable,
    new_generation: int,
) -> tuple[tuple[Signature, ...], dict[str, str]]:
    sig_a = _lookup(sset, action.signature_id)
    sig_b = _lookup(sset, action.other_signature_id)
    if sig_a.kind != sig_b.kind:
        raise KindMismatch(sig_a.kind, sig_b.kind)
    merged_ids = (sig_a.id, sig_b.id)
    member_pids = sorted(
        pid for pid, sid in sset.assignment.items() if sid in merged_ids
    )
    vector_by_pid = {v.property_id: v for v in vectors}
    try:
        members = [vector_by_pid[pid] for pid in member_pids]
    except KeyError as exc:
        raise ValueError(f"no feature vector for member {exc.args[0]!r}") from exc
    numeric_stats, categorical_stats = compute_cluster_stats(
        members, sig_a.kind, table
    )
    features = sorted(set(sig_a.whitelist) | set(sig_b.whitelist))
    whitelist = {
        name: sig_a.whitelist.get(name, frozenset())
        | sig_b.whitelist.get(name, frozenset())
        for name in features
    }
    merged = Signature(
        id=f"sig-{_KIND_SLUG[sig_a.kind]}-g{new_generation}",
        kind=sig_a.kind,
        member_count=len(members),
        numeric_stats=numeric_stats,
        categorical_stats=categorical_stats,
        threshold=max(sig_a.threshold, sig_b.threshold),
        whitelist=whitelist,
        suppressed=sig_a.suppressed | sig_b.suppressed,
    )
    signatures = tuple(
        sorted(
            [s for s in sset.signatures if s.id not in merged_ids] + [merged],
            key=lambda s: s.id,
        )
    )
    assignment = {
        pid: (merged.id if sid in merged_ids else sid)
        for pid, sid in sset.assignment.items()
    }
    return signatures, assignment


def apply_retune(
    sset: SignatureSet,
    action: RetuneAction,
    vectors: list[FeatureVector],
    table: TokenTable,
) -> SignatureSet:
    """Apply one action, returning a new set at generation + 1.

    ``vectors`` must cover the members of any signatures being merged; the
    merged statistics are recomputed from the pooled member vectors with the
    same routine mining uses, so they equal a fresh mining of the pool.
    Raises StaleGeneration when the action was built against a different
    generation than the live set, UnknownSignature and KindMismatch per the
    obvious preconditions.
    """
    if action.base_generation != sset.generation:
        raise StaleGeneration(sset.generation, action.base_generation)
    new_generation = sset.generation + 1
    if action.kind == "merge_signatures":
        signatures, assignment = _apply_merge(
            sset, action, vectors, table, new_generation
        )
    else:
        target = _lookup(sset, action.signature_id)
        if action.kind == "adjust_threshold":
            updated = replace(target, threshold=action.new_threshold)
        elif action.kind == "whitelist_value":
            names = feature_schema(target.kind).categorical_names()
            if action.feature not in names:
                raise ValueError(
                    f"{action.feature!r} is not a categorical feature of "
                    f"{target.kind}"
                )
            whitelist = dict(target.whitelist)
            whitelist[action.feature] = whitelist.get(
                action.feature, frozenset()
            ) | {action.value}
            updated = replace(target, whitelist=whitelist)
        else:
            updated = replace(
                target, suppressed=target.suppressed | {action.property_id}
            )
        signatures = _replace_signature(sset, updated)
        assignment = dict(sset.assignment)
    return SignatureSet(
        signatures=signatures,
        assignment=assignment,
        params=sset.params,
        generation=new_generation,
        schema_version=sset.schema_version,
        diagnostics=sset.diagnostics,
    )


def recompute(
    properties: list[Property],
    vectors: list[FeatureVector],
    sset: SignatureSet,
    graph: ReferenceGraph,
    table: TokenTable,
) -> list[Finding]:
    """Findings under the current generation.

    Pure delegation to the signature outlier scan: retuning changes the set,
    never the scoring rules, so one routine serves the first pass and every
    later generation alike.
    """
    return detect_signature_outliers(properties, vectors, sset, graph, table)


def replay(
    log: RetuneLog,
    base_set: SignatureSet,
    vectors: list[FeatureVector],
    table: TokenTable,
) -> SignatureSet:
    """Fold the log over the base set; result generation = base + log length.

    A failure applying any action is wrapped in ReplayError carrying the
    zero-based index of the offending action and the original exception.
    """
    if log.base_generation != base_set.generation:
        raise StaleGeneration(base_set.generation, log.base_generation)
    current = base_set
    for index, action in enumerate(log.actions):
        try:
            current = apply_retune(current, action, vectors, table)
        except Exception as exc:
            raise ReplayError(index, exc) from exc
    return current


# --- serialization --------------------------------------------------------

_ALL_FIELDS = frozenset(
    ("kind", "base_generation", "author", "timestamp", "note") + _PAYLOAD_FIELDS
)


def action_to_dict(action: RetuneAction) -> dict:
    doc = {
        "kind": action.kind,
        "base_generation": action.base_generation,
        "author": action.author,
        "timestamp": action.timestamp,
        "note": action.note,
    }
    for name in _PAYLOAD_FIELDS:
        value = getattr(action, name)
        if value is not None:
            doc[name] = value
    return doc


def action_from_dict(doc: dict) -> RetuneAction:
    unknown = sorted(set(doc) - _ALL_FIELDS)
    if unknown:
        raise ValueError(f"unknown retune action fields {unknown}")
    if "kind" not in doc or "base_generation" not in doc:
        raise ValueError("retune action needs kind and base_generation")
    return RetuneAction(**doc)


def dump_log(log: RetuneLog) -> str:
    """JSON lines: a header naming the base generation, then one action per
    line in application order."""
    header = {"format": "retune-log-v1", "base_generation": log.base_generation}
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for action in log.actions:
        lines.append(
            json.dumps(action_to_dict(action), sort_keys=True, separators=(",", ":"))
        )
    return "\n".join(lines) + "\n"


def load_log(text: str) -> RetuneLog:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty retune log")
    header = json.loads(lines[0])
    if header.get("format") != "retune-log-v1":
        raise ValueError(f"unexpected retune log format {header.get('format')!r}")
    actions = tuple(action_from_dict(json.loads(line)) for line in lines[1:])
    return RetuneLog(
        base_generation=int(header["base_generation"]), actions=actions
    )
