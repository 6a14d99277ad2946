"""Mine per-kind signatures and assign vectors to them.

A signature is a cluster prototype: per-feature statistics over its members
plus a deviation threshold. Mining is two-staged: vectors are first grouped
exactly on their name template class, then groups are split or kept whole by
agglomerative merging of identical-vector pools under a prototype distance.
Groups smaller than ``min_cluster_size`` go to the ``unclustered`` bucket and
are never flagged downstream.

The mixed distance used for assignment normalizes each numeric feature by the
signature's own MAD (floored at ``EPS``) and scores a categorical feature 0
when the observed value is common among members (frequency at least
``common_fraction`` of the membership) and 1 otherwise; the total is a
weighted mean. The merge stage instead normalizes numeric features by the
kind-wide population stddev, which stays meaningful when pools are internally
constant (their MAD is 0 by construction).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .encoder import FeatureVector, TokenTable, feature_schema
from .errors import Diagnostic, KindNotMined, TooFewProperties

EPS = 1e-9

UNCLUSTERED = "unclustered"

_KIND_SLUG = {
    "Acl": "acl",
    "RouteFilter": "route-filter",
    "Vrf": "vrf",
    "RoutingPolicy": "routing-policy",
}


@dataclass(frozen=True)
class MiningParams:
    min_cluster_size: int = 3
    merge_distance: float = 1.0
    common_fraction: float = 0.2
    theta: float = 3.5
    numeric_weight: float = 1.0
    categorical_weight: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "min_cluster_size": self.min_cluster_size,
            "merge_distance": self.merge_distance,
            "common_fraction": self.common_fraction,
            "theta": self.theta,
            "numeric_weight": self.numeric_weight,
            "categorical_weight": self.categorical_weight,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MiningParams":
        return cls(**doc)


@dataclass(frozen=True)
class FeatureStats:
    feature: str
    median: float
    mad: float
    mean: float
    stddev: float


@dataclass(frozen=True)
class Signature:
    id: str
    kind: str
    member_count: int
    numeric_stats: tuple[FeatureStats, ...]
    categorical_stats: tuple[tuple[str, dict[str, int]], ...]
    threshold: float
    whitelist: dict[str, frozenset[str]] = field(default_factory=dict)
    suppressed: frozenset[str] = frozenset()

    def whitelisted(self, feature: str, value: str) -> bool:
        return value in self.whitelist.get(feature, frozenset())


@dataclass(frozen=True)
class SignatureSet:
    signatures: tuple[Signature, ...]
    assignment: dict[str, str]
    params: MiningParams
    generation: int
    schema_version: int
    diagnostics: tuple[Diagnostic, ...] = ()

    def by_id(self) -> dict[str, Signature]:
        return {s.id: s for s in self.signatures}

    def of_kind(self, kind: str) -> list[Signature]:
        return [s for s in self.signatures if s.kind == kind]


def compute_cluster_stats(
    members: list[FeatureVector], kind: str, table: TokenTable
) -> tuple[tuple[FeatureStats, ...], tuple[tuple[str, dict[str, int]], ...]]:
    """Per-feature statistics over a cluster's member vectors.

    This is the single stats routine: mining, merge retuning, and the
    stats-consistency checks all call it, so recomputation is exact. Members
    are sorted by property id internally, which makes the result independent
    of caller ordering (mean and stddev are summation-order sensitive).
    """
    members = sorted(members, key=lambda m: m.property_id)
    schema = feature_schema(kind)
    matrix = np.array([m.numeric for m in members], dtype=float)
    numeric_stats = []
    for i, name in enumerate(schema.numeric_names()):
        column = matrix[:, i]
        median = float(np.median(column))
        mad = float(np.median(np.abs(column - median)))
        numeric_stats.append(
            FeatureStats(
                feature=name,
                median=median,
                mad=mad,
                mean=float(np.mean(column)),
                stddev=float(np.std(column)),
            )
        )
    categorical_stats = []
    for j, name in enumerate(schema.categorical_names()):
        counts = Counter(table.token(m.categorical[j]) for m in members)
        categorical_stats.append((name, dict(sorted(counts.items()))))
    return tuple(numeric_stats), tuple(categorical_stats)


def feature_deviations(
    vector: FeatureVector,
    signature: Signature,
    table: TokenTable,
    common_fraction: float,
) -> list[tuple[str, float, str, str]]:
    """Per-feature deviation of a vector from a signature.

    Numeric: ``|x - median| / max(MAD, EPS)``. Categorical: 0 when the value
    is common (frequency >= common_fraction of members), else 1. Returns
    ``(feature, deviation, observed, expected_summary)`` per feature in
    schema order. Whitelists are not applied here; the detector layer owns
    exemption policy.
    """
    schema = feature_schema(vector.kind)
    out: list[tuple[str, float, str, str]] = []
    for i, stats in enumerate(signature.numeric_stats):
        x = vector.numeric[i]
        deviation = abs(x - stats.median) / max(stats.mad, EPS)
        summary = f"median={stats.median:g} mad={stats.mad:g}"
        out.append((stats.feature, deviation, f"{x:g}", summary))
    member_count = signature.member_count
    for j, (name, counts) in enumerate(signature.categorical_stats):
        value = table.token(vector.categorical[j])
        frequency = counts.get(value, 0)
        common = frequency >= common_fraction * member_count
        modal_value, modal_count = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
        summary = f"modal={modal_value} ({modal_count}/{member_count})"
        out.append((name, 0.0 if common else 1.0, value, summary))
    assert len(out) == len(schema.features)
    return out


def mixed_distance(
    vector: FeatureVector,
    signature: Signature,
    table: TokenTable,
    params: MiningParams,
) -> float:
    """Weighted mean of the per-feature deviations (capped per numeric
    feature at 1/EPS via the MAD floor)."""
    deviations = feature_deviations(vector, signature, table, params.common_fraction)
    n_numeric = len(signature.numeric_stats)
    total = 0.0
    weight_sum = 0.0
    for index, (_, deviation, _, _) in enumerate(deviations):
        weight = params.numeric_weight if index < n_numeric else params.categorical_weight
        total += weight * deviation
        weight_sum += weight
    return total / weight_sum if weight_sum else 0.0


def assign(
    vector: FeatureVector, sset: SignatureSet, table: TokenTable
) -> tuple[str, float]:
    """Minimum-distance signature for a vector; ties break to the smaller id."""
    candidates = sset.of_kind(vector.kind)
    if not candidates:
        raise KindNotMined(vector.kind)
    best_id = ""
    best_distance = float("inf")
    for signature in sorted(candidates, key=lambda s: s.id):
        distance = mixed_distance(vector, signature, table, sset.params)
        if distance < best_distance:
            best_id, best_distance = signature.id, distance
    return best_id, best_distance


class _Cluster:
    __slots__ = ("members", "proto_numeric", "proto_categorical", "min_pid")

    def __init__(self, members: list[FeatureVector], table: TokenTable) -> None:
        self.members = members
        self.min_pid = min(m.property_id for m in members)
        self._refresh(table)

    def _refresh(self, table: TokenTable) -> None:
        matrix = np.array([m.numeric for m in self.members], dtype=float)
        self.proto_numeric = np.median(matrix, axis=0)
        proto_cat = []
        for j in range(len(self.members[0].categorical)):
            counts = Counter(table.token(m.categorical[j]) for m in self.members)
            modal = min(v for v, c in counts.items() if c == max(counts.values()))
            proto_cat.append(modal)
        self.proto_categorical = tuple(proto_cat)

    def absorb(self, other: "_Cluster", table: TokenTable) -> None:
        self.members.extend(other.members)
        self.min_pid = min(self.min_pid, other.min_pid)
        self._refresh(table)


def _prototype_distance(
    a: _Cluster, b: _Cluster, scale: np.ndarray, params: MiningParams
) -> float:
    numeric = np.abs(a.proto_numeric - b.proto_numeric) / scale
    total = params.numeric_weight * float(np.sum(numeric))
    total += params.categorical_weight * sum(
        0.0 if x == y else 1.0 for x, y in zip(a.proto_categorical, b.proto_categorical)
    )
    weight_sum = params.numeric_weight * len(numeric) + params.categorical_weight * len(
        a.proto_categorical
    )
    return total / weight_sum if weight_sum else 0.0


def _merge_group(
    pools: list[_Cluster], scale: np.ndarray, params: MiningParams, table: TokenTable
) -> list[_Cluster]:
    clusters = sorted(pools, key=lambda c: c.min_pid)
    while len(clusters) > 1:
        best: tuple[float, str, str] | None = None
        best_pair: tuple[int, int] | None = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                distance = _prototype_distance(clusters[i], clusters[j], scale, params)
                key = (distance, clusters[i].min_pid, clusters[j].min_pid)
                if best is None or key < best:
                    best = key
                    best_pair = (i, j)
        assert best is not None and best_pair is not None
        if best[0] >= params.merge_distance:
            break
        i, j = best_pair
        clusters[i].absorb(clusters[j], table)
        del clusters[j]
        clusters.sort(key=lambda c: c.min_pid)
    return clusters


def mine_signatures(
    vectors: list[FeatureVector], table: TokenTable, params: MiningParams | None = None
) -> SignatureSet:
    """Mine signatures for every kind present in ``vectors``.

    Deterministic for fixed inputs and params: grouping, merge order, and
    tie-breaks are all keyed on template classes and property ids, never on
    hash or dict iteration order.
    """
    params = params or MiningParams()
    diagnostics: list[Diagnostic] = []
    assignment: dict[str, str] = {}
    signatures: list[Signature] = []
    schema_version = vectors[0].schema_version if vectors else 0

    by_kind: dict[str, list[FeatureVector]] = {}
    for vector in vectors:
        by_kind.setdefault(vector.kind, []).append(vector)

    for kind in sorted(by_kind):
        kind_vectors = sorted(by_kind[kind], key=lambda v: v.property_id)
        if len(kind_vectors) < params.min_cluster_size:
            error = TooFewProperties(kind, len(kind_vectors), params.min_cluster_size)
            diagnostics.append(
                Diagnostic(
                    level="warning",
                    file="<mining>",
                    line=0,
                    message=str(error),
                    code="TooFewProperties",
                )
            )
            for vector in kind_vectors:
                assignment[vector.property_id] = UNCLUSTERED
            continue

        schema = feature_schema(kind)
        ntc_index = schema.categorical_names().index("name_template_class")
        matrix = np.array([v.numeric for v in kind_vectors], dtype=float)
        scale = np.maximum(np.std(matrix, axis=0), EPS)

        groups: dict[str, list[FeatureVector]] = {}
        for vector in kind_vectors:
            groups.setdefault(table.token(vector.categorical[ntc_index]), []).append(vector)

        kind_clusters: list[_Cluster] = []
        for template_class in sorted(groups):
            group = groups[template_class]
            if len(group) < params.min_cluster_size:
                for vector in group:
                    assignment[vector.property_id] = UNCLUSTERED
                diagnostics.append(
                    Diagnostic(
                        level="info",
                        file="<mining>",
                        line=0,
                        message=(
                            f"template group {template_class!r} ({kind}) has "
                            f"{len(group)} members, below min_cluster_size; left unclustered"
                        ),
                        code="UnclusteredGroup",
                    )
                )
                continue

            pools: dict[tuple, list[FeatureVector]] = {}
            for vector in group:
                pools.setdefault((vector.numeric, vector.categorical), []).append(vector)
            pool_clusters = [
                _Cluster(members, table)
                for members in (
                    pools[key] for key in sorted(pools, key=lambda k: min(m.property_id for m in pools[k]))
                )
            ]
            merged = _merge_group(pool_clusters, scale, params, table)

            cores = [c for c in merged if len(c.members) >= params.min_cluster_size]
            residuals = [c for c in merged if len(c.members) < params.min_cluster_size]
            if not cores:
                for vector in group:
                    assignment[vector.property_id] = UNCLUSTERED
                diagnostics.append(
                    Diagnostic(
                        level="info",
                        file="<mining>",
                        line=0,
                        message=(
                            f"template group {template_class!r} ({kind}) did not "
                            "produce a cluster of min_cluster_size; left unclustered"
                        ),
                        code="UnclusteredGroup",
                    )
                )
                continue
            for residual in residuals:
                target = min(
                    cores,
                    key=lambda core: (
                        _prototype_distance(residual, core, scale, params),
                        core.min_pid,
                    ),
                )
                target.absorb(residual, table)
            kind_clusters.extend(cores)

        kind_clusters.sort(key=lambda c: c.min_pid)
        slug = _KIND_SLUG[kind]
        for index, cluster in enumerate(kind_clusters):
            signature_id = f"sig-{slug}-{index:03d}"
            numeric_stats, categorical_stats = compute_cluster_stats(
                cluster.members, kind, table
            )
            signatures.append(
                Signature(
                    id=signature_id,
                    kind=kind,
                    member_count=len(cluster.members),
                    numeric_stats=numeric_stats,
                    categorical_stats=categorical_stats,
                    threshold=params.theta,
                )
            )
            for member in cluster.members:
                assignment[member.property_id] = signature_id

    signatures.sort(key=lambda s: s.id)
    return SignatureSet(
        signatures=tuple(signatures),
        assignment=assignment,
        params=params,
        generation=0,
        schema_version=schema_version,
        diagnostics=tuple(diagnostics),
    )


def signature_report(sset: SignatureSet) -> list[dict]:
    """Summary rows for operator inspection, largest signatures first.

    ``top_deviant_features`` ranks features by a contamination proxy
    computable from stats alone: numeric features by ``stddev / max(MAD, EPS)``
    (heavy tails inflate stddev but not MAD), categorical features by their
    count of rare values (frequency below ``common_fraction`` of members).
    Only features scoring above 1 appear, at most three.
    """
    rows = []
    for signature in sset.signatures:
        scored: list[tuple[float, str]] = []
        for stats in signature.numeric_stats:
            scored.append((stats.stddev / max(stats.mad, EPS), stats.feature))
        cutoff = sset.params.common_fraction * signature.member_count
        for name, counts in signature.categorical_stats:
            rare = sum(1 for value, count in counts.items() if count < cutoff)
            scored.append((float(rare), name))
        top = [
            name
            for score, name in sorted(scored, key=lambda sn: (-sn[0], sn[1]))
            if score > 1.0
        ][:3]
        rows.append(
            {
                "signature_id": signature.id,
                "kind": signature.kind,
                "member_count": signature.member_count,
                "threshold": signature.threshold,
                "whitelist_size": sum(len(v) for v in signature.whitelist.values()),
                "suppressed_count": len(signature.suppressed),
                "top_deviant_features": top,
            }
        )
    rows.sort(key=lambda r: (-r["member_count"], r["signature_id"]))
    return rows


# --- serialization --------------------------------------------------------


def signature_to_dict(signature: Signature) -> dict:
    return {
        "id": signature.id,
        "kind": signature.kind,
        "member_count": signature.member_count,
        "threshold": signature.threshold,
        "numeric_stats": [
            {
                "feature": s.feature,
                "median": s.median,
                "mad": s.mad,
                "mean": s.mean,
                "stddev": s.stddev,
            }
            for s in signature.numeric_stats
        ],
        "categorical_stats": [
            {"feature": name, "counts": dict(sorted(counts.items()))}
            for name, counts in signature.categorical_stats
        ],
        "whitelist": {
            feature: sorted(values) for feature, values in sorted(signature.whitelist.items())
        },
        "suppressed": sorted(signature.suppressed),
    }


def signature_from_dict(doc: dict) -> Signature:
    return Signature(
        id=doc["id"],
        kind=doc["kind"],
        member_count=doc["member_count"],
        threshold=doc["threshold"],
        numeric_stats=tuple(
            FeatureStats(
                feature=s["feature"],
                median=s["median"],
                mad=s["mad"],
                mean=s["mean"],
                stddev=s["stddev"],
            )
            for s in doc["numeric_stats"]
        ),
        categorical_stats=tuple(
            (entry["feature"], dict(entry["counts"])) for entry in doc["categorical_stats"]
        ),
        whitelist={
            feature: frozenset(values) for feature, values in doc["whitelist"].items()
        },
        suppressed=frozenset(doc["suppressed"]),
    )


def set_to_dict(sset: SignatureSet) -> dict:
    return {
        "format": "signature-set-v1",
        "schema_version": sset.schema_version,
        "generation": sset.generation,
        "params": sset.params.to_dict(),
        "signatures": [signature_to_dict(s) for s in sset.signatures],
        "assignment": dict(sorted(sset.assignment.items())),
        "diagnostics": [
            {
                "level": d.level,
                "file": d.file,
                "line": d.line,
                "message": d.message,
                "code": d.code,
            }
            for d in sset.diagnostics
        ],
    }


def set_from_dict(doc: dict) -> SignatureSet:
    return SignatureSet(
        signatures=tuple(signature_from_dict(s) for s in doc["signatures"]),
        assignment=dict(doc["assignment"]),
        params=MiningParams.from_dict(doc["params"]),
        generation=doc["generation"],
        schema_version=doc["schema_version"],
        diagnostics=tuple(
            Diagnostic(
                level=d["level"],
                file=d["file"],
                line=d["line"],
                message=d["message"],
                code=d["code"],
            )
            for d in doc["diagnostics"]
        ),
    )


def dump_set(sset: SignatureSet) -> str:
    return json.dumps(set_to_dict(sset), sort_keys=True, indent=2) + "\n"


def load_set(text: str) -> SignatureSet:
    return set_from_dict(json.loads(text))
