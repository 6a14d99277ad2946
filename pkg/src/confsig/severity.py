"""Severity scoring and ranking of findings.

severity = beta * (outlier_score / governing threshold)
         * problem_type_weight * (1 + alpha * blast_radius)

Scores are normalized by the threshold that emitted them before weighting, so
signature findings and baseline findings land on one comparable scale. The
``outlier`` ranking mode uses that same normalized score, which makes the
degenerate case (all type weights equal, alpha 0) provably identical to the
severity ranking, ties included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .detectors import Finding
from .errors import MissingSeverity
from .properties import ReferenceGraph, blast_radius

DEFAULT_PROBLEM_TYPE_WEIGHTS = {
    "UndefinedReference": 1.0,
    "ShadowedRule": 0.8,
    "InconsistentAcrossDevices": 0.6,
    "DeviantAttributeValue": 0.4,
    "Unknown": 0.2,
}

RANK_MODES = ("outlier", "severity")

# guards division when a derived baseline cutoff lands exactly at 0
_THRESHOLD_FLOOR = 1e-9


@dataclass(frozen=True)
class SeverityWeights:
    problem_type_weight: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_PROBLEM_TYPE_WEIGHTS)
    )
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self) -> None:
        for name, value in self.problem_type_weight.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"weight for {name!r} must be finite and >= 0")
        for label, value in (("alpha", self.alpha), ("beta", self.beta)):
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{label} must be finite and >= 0")

    def weight_of(self, problem_type: str) -> float:
        return self.problem_type_weight.get(problem_type, 0.0)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "problem_type_weight": dict(sorted(self.problem_type_weight.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SeverityWeights":
        return cls(
            problem_type_weight=dict(doc["problem_type_weight"]),
            alpha=doc["alpha"],
            beta=doc["beta"],
        )


def load_weights(text: str) -> SeverityWeights:
    """Parse a small TOML document of weight overrides.

    Top-level ``alpha`` and ``beta`` plus a ``[problem_type_weight]`` table;
    anything omitted keeps its default. Unknown problem types are rejected so
    a typo cannot silently zero a weight.
    """
    doc = tomllib.loads(text)
    weight_map = dict(DEFAULT_PROBLEM_TYPE_WEIGHTS)
    for key, value in doc.get("problem_type_weight", {}).items():
        if key not in DEFAULT_PROBLEM_TYPE_WEIGHTS:
            raise ValueError(f"unknown problem type {key!r} in weights config")
        weight_map[key] = float(value)
    return SeverityWeights(
        problem_type_weight=weight_map,
        alpha=float(doc.get("alpha", 0.1)),
        beta=float(doc.get("beta", 1.0)),
    )


def normalized_score(finding: Finding) -> float:
    return finding.outlier_score / max(finding.threshold, _THRESHOLD_FLOOR)


def compute_severity(
    finding: Finding, graph: ReferenceGraph, weights: SeverityWeights
) -> float:
    radius = blast_radius(graph, finding.property_id)
    return (
        weights.beta
        * normalized_score(finding)
        * weights.weight_of(finding.problem_type)
        * (1.0 + weights.alpha * radius)
    )


def apply_severities(
    findings: list[Finding],
    graph: ReferenceGraph,
    weights: SeverityWeights | None = None,
) -> list[Finding]:
    weights = weights or SeverityWeights()
    return [
        replace(f, severity=compute_severity(f, graph, weights)) for f in findings
    ]


def rank(
    findings: list[Finding],
    mode: str = "severity",
    weights: SeverityWeights | None = None,
) -> list[Finding]:
    """Order findings descending by the mode's score and fill rank 1..n.

    Ties break by problem-type weight (heavier first), then property id.
    """
    if mode not in RANK_MODES:
        raise ValueError(f"unknown rank mode {mode!r}")
    weights = weights or SeverityWeights()
    if mode == "severity":
        for finding in findings:
            if finding.severity is None:
                raise MissingSeverity(finding.property_id)
        score = lambda f: f.severity  # noqa: E731 - tiny local selector
    else:
        score = normalized_score
    ordered = sorted(
        findings,
        key=lambda f: (-score(f), -weights.weight_of(f.problem_type), f.property_id),
    )
    return [replace(f, rank=i) for i, f in enumerate(ordered, start=1)]
