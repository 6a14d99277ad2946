"""Outlier detection over encoded properties.

Four methods behind one interface: the signature detector scores each
property against its assigned signature's per-feature statistics, while the
three statistical baselines (Z-score, modified Z-score, diagonal-covariance
GMM) ignore signatures entirely. Baseline protocol: Z and modified-Z score
every numeric feature of every kind as an independent pooled series and flag
a property when any feature exceeds the method threshold; the GMM fits one
mixture per kind on the numeric features plus frequency-encoded categoricals
and flags vectors whose negative log-likelihood lands strictly above the
(100 - percentile)th percentile of the training scores.

A rare categorical value (frequency below common_fraction of the signature's
members, not whitelisted) is a hard violation: its deviation escalates to a
finite sentinel far above any realistic threshold, because a categorical
mismatch against an otherwise uniform population is structural, not a matter
of degree. Serialized outlier scores are clamped to the same sentinel so
infinities never reach disk.
"""

from __future__ import annotations

import ipaddress
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .encoder import FeatureVector, TokenTable, feature_schema
from .errors import GenerationMismatch, SchemaMismatch, SeriesTooShort
from .properties import Property, ReferenceGraph, dangling_property_ids
from .signatures import UNCLUSTERED, SignatureSet, feature_deviations

SCORE_CEILING = 1e9

PROBLEM_TYPES = (
    "UndefinedReference",
    "DeviantAttributeValue",
    "InconsistentAcrossDevices",
    "ShadowedRule",
    "Unknown",
)

_METHODS = ("signature", "zscore", "modified_zscore", "gmm")

_VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class DetectorConfig:
    method: str = "signature"
    zscore_threshold: float = 3.0
    modz_threshold: float = 3.5
    gmm_components: int = 3
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-6
    gmm_outlier_percentile: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ValueError(f"unknown detector method {self.method!r}")
        if self.zscore_threshold <= 0 or self.modz_threshold <= 0:
            raise ValueError("detector thresholds must be positive")
        if self.gmm_components < 1:
            raise ValueError("gmm_components must be >= 1")
        if self.gmm_max_iters < 1:
            raise ValueError("gmm_max_iters must be >= 1")
        if self.gmm_tol <= 0:
            raise ValueError("gmm_tol must be positive")
        if not 0 < self.gmm_outlier_percentile < 50:
            raise ValueError("gmm_outlier_percentile must lie in (0, 50)")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "zscore_threshold": self.zscore_threshold,
            "modz_threshold": self.modz_threshold,
            "gmm_components": self.gmm_components,
            "gmm_max_iters": self.gmm_max_iters,
            "gmm_tol": self.gmm_tol,
            "gmm_outlier_percentile": self.gmm_outlier_percentile,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorConfig":
        return cls(**doc)


@dataclass(frozen=True)
class Finding:
    """One flagged property.

    ``threshold`` echoes the governing threshold at emission (the violated
    signature's theta, or the baseline's configured/derived cutoff) so
    downstream severity scoring never has to re-derive it. ``severity`` and
    ``rank`` stay None until the severity stage fills them in.
    """

    property_id: str
    detector: str
    outlier_score: float
    threshold: float
    violated_signature: str | None
    deviant_features: tuple[tuple[str, str, str], ...]
    problem_type: str
    severity: float | None = None
    rank: int | None = None


def _make_finding(
    property_id: str,
    detector: str,
    outlier_score: float,
    threshold: float,
    violated_signature: str | None,
    deviant_features: list[tuple[str, str, str]],
    problem_type: str,
) -> Finding:
    return Finding(
        property_id=property_id,
        detector=detector,
        outlier_score=min(float(outlier_score), SCORE_CEILING),
        threshold=float(threshold),
        violated_signature=violated_signature,
        deviant_features=tuple(deviant_features),
        problem_type=problem_type,
    )


# --- statistical baselines ------------------------------------------------


def score_zscore(values) -> np.ndarray:
    """|x - mean| / population stddev; a constant series scores all zeros."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise SeriesTooShort(arr.size)
    stddev = float(np.std(arr))
    if stddev == 0.0:
        return np.zeros_like(arr)
    return np.abs(arr - np.mean(arr)) / stddev


def score_modified_zscore(values) -> np.ndarray:
    """0.6745 * |x - median| / MAD.

    When MAD is 0 the score is 0 at the median and +inf elsewhere: a constant
    population with one deviant is exactly the shape worth flagging, and the
    infinity is clamped to a finite sentinel before any finding is emitted.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise SeriesTooShort(arr.size)
    median = float(np.median(arr))
    mad = float(np.median(np.abs(arr - median)))
    if mad == 0.0:
        return np.where(arr == median, 0.0, np.inf)
    return 0.6745 * np.abs(arr - median) / mad


@dataclass(frozen=True)
class GmmModel:
    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    variances: tuple[tuple[float, ...], ...]
    log_likelihood: float
    iterations: int
    trace: tuple[float, ...]


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    peak = np.max(a, axis=1)
    return peak + np.log(np.sum(np.exp(a - peak[:, None]), axis=1))


def _component_log_prob(
    matrix: np.ndarray,
    weights: np.ndarray,
    means: np.ndarray,
    variances: np.ndarray,
) -> np.ndarray:
    # (n, k): log w_c - 0.5 * sum_d [log(2 pi v_cd) + (x_d - m_cd)^2 / v_cd]
    const = -0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)
    quad = -0.5 * np.sum(
        ((matrix[:, None, :] - means[None, :, :]) ** 2) / variances[None, :, :],
        axis=2,
    )
    return np.log(weights)[None, :] + const[None, :] + quad


def _model_arrays(model: GmmModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.asarray(model.weights, dtype=float),
        np.asarray(model.means, dtype=float),
        np.asarray(model.variances, dtype=float),
    )


def _check_width(model: GmmModel, matrix: np.ndarray) -> None:
    expected = len(model.means[0])
    if matrix.ndim != 2 or matrix.shape[1] != expected:
        got = matrix.shape[1] if matrix.ndim == 2 else matrix.ndim
        raise SchemaMismatch(expected, got)


def _init_centers(matrix: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++-style spread: each next center is drawn with
    probability proportional to squared distance from the nearest chosen one."""
    n = matrix.shape[0]
    centers = [matrix[int(rng.integers(n))]]
    # running min distance to the chosen set; one pass per new center
    d2 = np.sum((matrix - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(matrix[idx])
        d2 = np.minimum(d2, np.sum((matrix - matrix[idx]) ** 2, axis=1))
    return np.stack(centers)


def fit_gmm(matrix, config: DetectorConfig) -> GmmModel:
    """EM fit with diagonal covariances and a variance floor.

    If every row is identical and more than one component was requested, the
    fit falls back to a single component with a warning instead of chasing a
    degenerate split.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ValueError("fit_gmm expects a 2-D matrix")
    n = matrix.shape[0]
    k = config.gmm_components
    if n < k:
        raise ValueError(f"{n} rows cannot support {k} components")
    if k > 1 and bool(np.all(matrix == matrix[0])):
        warnings.warn(
            "all rows identical; falling back to a single mixture component",
            stacklevel=2,
        )
        k = 1

    rng = np.random.default_rng(config.seed)
    centers = _init_centers(matrix, k, rng)
    distances = np.sum((matrix[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), np.argmin(distances, axis=1)] = 1.0

    trace: list[float] = []
    ll_old = -np.inf
    for _ in range(config.gmm_max_iters):
        counts = np.maximum(resp.sum(axis=0), 1e-12)
        weights = counts / counts.sum()
        means = (resp.T @ matrix) / counts[:, None]
        second = (resp.T @ (matrix**2)) / counts[:, None]
        variances = np.maximum(second - means**2, _VARIANCE_FLOOR)
        log_prob = _component_log_prob(matrix, weights, means, variances)
        point_ll = _logsumexp_rows(log_prob)
        ll = float(point_ll.sum())
        trace.append(ll)
        resp = np.exp(log_prob - point_ll[:, None])
        if ll - ll_old < config.gmm_tol:
            break
        ll_old = ll

    return GmmModel(
        weights=tuple(float(w) for w in weights),
        means=tuple(tuple(float(x) for x in row) for row in means),
        variances=tuple(tuple(float(x) for x in row) for row in variances),
        log_likelihood=trace[-1],
        iterations=len(trace),
        trace=tuple(trace),
    )


def score_gmm(model: GmmModel, matrix) -> np.ndarray:
    """Negative log-likelihood per row under the fitted mixture."""
    matrix = np.asarray(matrix, dtype=float)
    _check_width(model, matrix)
    log_prob = _component_log_prob(matrix, *_model_arrays(model))
    return -_logsumexp_rows(log_prob)


def gmm_responsibilities(model: GmmModel, matrix) -> np.ndarray:
    """Posterior component membership per row; rows sum to 1."""
    matrix = np.asarray(matrix, dtype=float)
    _check_width(model, matrix)
    log_prob = _component_log_prob(matrix, *_model_arrays(model))
    return np.exp(log_prob - _logsumexp_rows(log_prob)[:, None])


def gmm_outlier_cutoff(scores, percentile: float) -> float:
    return float(np.percentile(np.asarray(scores, dtype=float), 100.0 - percentile))


# --- problem-type classification ------------------------------------------


def _proto_covers(early: str, late: str) -> bool:
    return early == late or early == "ip"


def _prefix_covers(early: str, late: str) -> bool:
    if early == "any":
        return True
    if late == "any":
        return False
    try:
        a = ipaddress.ip_network(early, strict=False)
        b = ipaddress.ip_network(late, strict=False)
    except ValueError:
        return False
    return a == b or a.supernet_of(b)


def shadowed_entries(rules) -> tuple[tuple[int, int], ...]:
    """Index pairs (earlier, later) where the later ACL entry can never match
    because an earlier entry with the opposite action fully covers it."""
    out: list[tuple[int, int]] = []
    for later_index, later in enumerate(rules):
        for earlier_index in range(later_index):
            earlier = rules[earlier_index]
            if earlier[0] == later[0]:
                continue
            if (
                _proto_covers(earlier[1], later[1])
                and _prefix_covers(earlier[2], later[2])
                and _prefix_covers(earlier[3], later[3])
            ):
                out.append((earlier_index, later_index))
                break
    return tuple(out)


def classify_problem(
    prop: Property,
    deviant_feature_names: list[str],
    dangling: frozenset[str],
    peers: list[Property],
    vectors_by_pid: dict[str, FeatureVector],
    table: TokenTable,
) -> str:
    """Most specific problem type first.

    A dangling reference always wins. A deviant categorical on a name held by
    two or more devices without a unanimous value is a cross-device
    inconsistency. An ACL whose rules contain a fully covered opposite-action
    entry is a shadowed rule. Everything else is a deviant attribute value.
    """
    if prop.id in dangling:
        return "UndefinedReference"
    categorical_names = feature_schema(prop.kind).categorical_names()
    deviant_categoricals = [f for f in deviant_feature_names if f in categorical_names]
    if deviant_categoricals and len({p.device for p in peers}) >= 2:
        for feature in deviant_categoricals:
            index = categorical_names.index(feature)
            values = {
                vectors_by_pid[p.id].categorical[index]
                for p in peers
                if p.id in vectors_by_pid
            }
            if len(values) > 1:
                return "InconsistentAcrossDevices"
    if prop.kind == "Acl" and shadowed_entries(prop.attributes.get("rules", ())):
        return "ShadowedRule"
    return "DeviantAttributeValue"


def _classifier_context(
    properties: list[Property], graph: ReferenceGraph
) -> tuple[frozenset[str], dict[tuple[str, str], list[Property]]]:
    peers: dict[tuple[str, str], list[Property]] = {}
    for prop in properties:
        peers.setdefault((prop.kind, prop.name), []).append(prop)
    return dangling_property_ids(graph), peers


# --- detectors ------------------------------------------------------------


def detect_signature_outliers(
    properties: list[Property],
    vectors: list[FeatureVector],
    sset: SignatureSet,
    graph: ReferenceGraph,
    table: TokenTable,
) -> list[Finding]:
    """Flag every assigned property whose worst surviving deviation exceeds
    its signature's threshold.

    Whitelisted (feature, value) pairs are exempt, suppressed properties are
    skipped entirely, and unclustered properties are never flagged. Rare
    categorical values escalate to the hard-violation sentinel.
    """
    for vector in vectors:
        if vector.schema_version != sset.schema_version:
            raise GenerationMismatch(
                f"vectors encoded at schema version {vector.schema_version}, "
                f"signature set expects {sset.schema_version}"
            )
    dangling, peers = _classifier_context(properties, graph)
    props_by_pid = {p.id: p for p in properties}
    vectors_by_pid = {v.property_id: v for v in vectors}
    by_id = sset.by_id()
    params = sset.params

    findings: list[Finding] = []
    for vector in sorted(vectors, key=lambda v: v.property_id):
        signature_id = sset.assignment.get(vector.property_id)
        if signature_id is None or signature_id == UNCLUSTERED:
            continue
        signature = by_id[signature_id]
        if vector.property_id in signature.suppressed:
            continue
        rows = feature_deviations(vector, signature, table, params.common_fraction)
        n_numeric = len(signature.numeric_stats)
        deviant: list[tuple[str, str, str]] = []
        worst = 0.0
        for index, (feature, deviation, observed, expected) in enumerate(rows):
            if signature.whitelisted(feature, observed):
                continue
            if index >= n_numeric and deviation >= 1.0:
                deviation = SCORE_CEILING
            if deviation > signature.threshold:
                deviant.append((feature, observed, expected))
                worst = max(worst, deviation)
        if not deviant:
            continue
        prop = props_by_pid[vector.property_id]
        problem_type = classify_problem(
            prop,
            [f for f, _, _ in deviant],
            dangling,
            peers[(prop.kind, prop.name)],
            vectors_by_pid,
            table,
        )
        findings.append(
            _make_finding(
                property_id=vector.property_id,
                detector="signature",
                outlier_score=worst,
                threshold=signature.threshold,
                violated_signature=signature_id,
                deviant_features=deviant,
                problem_type=problem_type,
            )
        )
    findings.sort(key=lambda f: f.property_id)
    return findings


def _run_series_baseline(
    config: DetectorConfig,
    properties: list[Property],
    vectors: list[FeatureVector],
    graph: ReferenceGraph,
    table: TokenTable,
) -> list[Finding]:
    if config.method == "zscore":
        scorer, threshold = score_zscore, config.zscore_threshold
    else:
        scorer, threshold = score_modified_zscore, config.modz_threshold
    dangling, peers = _classifier_context(properties, graph)
    props_by_pid = {p.id: p for p in properties}
    vectors_by_pid = {v.property_id: v for v in vectors}

    by_kind: dict[str, list[FeatureVector]] = {}
    for vector in vectors:
        by_kind.setdefault(vector.kind, []).append(vector)

    findings: list[Finding] = []
    for kind in sorted(by_kind):
        kind_vectors = sorted(by_kind[kind], key=lambda v: v.property_id)
        if len(kind_vectors) < 2:
            continue
        numeric_names = feature_schema(kind).numeric_names()
        matrix = np.array([v.numeric for v in kind_vectors], dtype=float)
        columns = []
        summaries = []
        for i in range(len(numeric_names)):
            series = matrix[:, i]
            columns.append(scorer(series))
            if config.method == "zscore":
                summaries.append(
                    f"mean={np.mean(series):g} stddev={np.std(series):g}"
                )
            else:
                median = float(np.median(series))
                mad = float(np.median(np.abs(series - median)))
                summaries.append(f"median={median:g} mad={mad:g}")
        scores = np.column_stack(columns)
        for row, vector in enumerate(kind_vectors):
            deviant = [
                (numeric_names[i], f"{matrix[row, i]:g}", summaries[i])
                for i in range(len(numeric_names))
                if scores[row, i] > threshold
            ]
            if not deviant:
                continue
            prop = props_by_pid[vector.property_id]
            problem_type = classify_problem(
                prop,
                [f for f, _, _ in deviant],
                dangling,
                peers[(prop.kind, prop.name)],
                vectors_by_pid,
                table,
            )
            findings.append(
                _make_finding(
                    property_id=vector.property_id,
                    detector=config.method,
                    outlier_score=float(np.max(scores[row])),
                    threshold=threshold,
                    violated_signature=None,
                    deviant_features=deviant,
                    problem_type=problem_type,
                )
            )
    findings.sort(key=lambda f: f.property_id)
    return findings


def _frequency_encoded_matrix(
    kind_vectors: list[FeatureVector], table: TokenTable
) -> np.ndarray:
    """Numeric features as-is, each categorical replaced by the in-kind
    frequency of its value (so rare values land far from the mass at 1)."""
    n = len(kind_vectors)
    numeric = np.array([v.numeric for v in kind_vectors], dtype=float)
    categorical_count = len(kind_vectors[0].categorical)
    frequency_columns = []
    for j in range(categorical_count):
        counts: dict[int, int] = {}
        for vector in kind_vectors:
            counts[vector.categorical[j]] = counts.get(vector.categorical[j], 0) + 1
        frequency_columns.append(
            np.array([counts[v.categorical[j]] / n for v in kind_vectors])
        )
    if not frequency_columns:
        return numeric
    return np.column_stack([numeric] + frequency_columns)


def _run_gmm(
    config: DetectorConfig,
    properties: list[Property],
    vectors: list[FeatureVector],
    graph: ReferenceGraph,
    table: TokenTable,
) -> list[Finding]:
    dangling, peers = _classifier_context(properties, graph)
    props_by_pid = {p.id: p for p in properties}
    vectors_by_pid = {v.property_id: v for v in vectors}

    by_kind: dict[str, list[FeatureVector]] = {}
    for vector in vectors:
        by_kind.setdefault(vector.kind, []).append(vector)

    findings: list[Finding] = []
    for kind in sorted(by_kind):
        kind_vectors = sorted(by_kind[kind], key=lambda v: v.property_id)
        if len(kind_vectors) < 2:
            continue
        matrix = _frequency_encoded_matrix(kind_vectors, table)
        kind_config = config
        if len(kind_vectors) < config.gmm_components:
            kind_config = replace(config, gmm_components=len(kind_vectors))
        model = fit_gmm(matrix, kind_config)
        scores = score_gmm(model, matrix)
        # shift per kind so scores (and the cutoff with them) are
        # non-negative; flags are unchanged
        scores = scores + max(0.0, -float(scores.min()))
        cutoff = gmm_outlier_cutoff(scores, config.gmm_outlier_percentile)
        for row, vector in enumerate(kind_vectors):
            if scores[row] <= cutoff:
                continue
            prop = props_by_pid[vector.property_id]
            # vector-level detector: no per-feature attribution
            problem_type = classify_problem(
                prop, [], dangling, peers[(prop.kind, prop.name)], vectors_by_pid, table
            )
            findings.append(
                _make_finding(
                    property_id=vector.property_id,
                    detector="gmm",
                    outlier_score=float(scores[row]),
                    threshold=cutoff,
                    violated_signature=None,
                    deviant_features=[],
                    problem_type=problem_type,
                )
            )
    findings.sort(key=lambda f: f.property_id)
    return findings


def run_detector(
    config: DetectorConfig,
    properties: list[Property],
    vectors: list[FeatureVector],
    sset: SignatureSet | None,
    graph: ReferenceGraph,
    table: TokenTable,
) -> list[Finding]:
    """Dispatch on config.method; baselines do not need a signature set.

    Kinds with fewer than two vectors are skipped by the baselines (a
    one-member population has nothing to deviate from).
    """
    if config.method == "signature":
        if sset is None:
            raise ValueError("signature method requires a mined signature set")
        return detect_signature_outliers(properties, vectors, sset, graph, table)
    if config.method in ("zscore", "modified_zscore"):
        return _run_series_baseline(config, properties, vectors, graph, table)
    return _run_gmm(config, properties, vectors, graph, table)


# --- serialization --------------------------------------------------------


def finding_to_dict(finding: Finding) -> dict:
    return {
        "property_id": finding.property_id,
        "detector": finding.detector,
        "outlier_score": finding.outlier_score,
        "threshold": finding.threshold,
        "violated_signature": finding.violated_signature,
        "deviant_features": [list(row) for row in finding.deviant_features],
        "problem_type": finding.problem_type,
        "severity": finding.severity,
        "rank": finding.rank,
    }


def finding_from_dict(doc: dict) -> Finding:
    return Finding(
        property_id=doc["property_id"],
        detector=doc["detector"],
        outlier_score=doc["outlier_score"],
        threshold=doc["threshold"],
        violated_signature=doc["violated_signature"],
        deviant_features=tuple(tuple(row) for row in doc["deviant_features"]),
        problem_type=doc["problem_type"],
        severity=doc["severity"],
        rank=doc["rank"],
    )


def dump_findings(findings: list[Finding], config: DetectorConfig) -> str:
    """JSON lines: a header echoing the detector config, then one finding
    per line in stable key order."""
    header = {"format": "findings-v1", "config": config.to_dict()}
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for finding in findings:
        lines.append(
            json.dumps(finding_to_dict(finding), sort_keys=True, separators=(",", ":"))
        )
    return "\n".join(lines) + "\n"


def load_findings(text: str) -> tuple[DetectorConfig, list[Finding]]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty findings document")
    header = json.loads(lines[0])
    if header.get("format") != "findings-v1":
        raise ValueError(f"unexpected findings format {header.get('format')!r}")
    config = DetectorConfig.from_dict(header["config"])
    return config, [finding_from_dict(json.loads(line)) for line in lines[1:]]
