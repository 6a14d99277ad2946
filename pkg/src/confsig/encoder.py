"""Encode properties as fixed-schema feature vectors.

Every property kind has one built-in schema (``docs/features.md`` documents
them; ``SCHEMA_VERSION`` tracks changes). Numeric and set-cardinality
features land in a dense float array; categorical and bag-of-tokens features
are interned into token ids via a shared ``TokenTable``. Hashes use sha1 so
identical structures encode identically across runs and machines.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
from dataclasses import dataclass

from .errors import EncodingOverflow
from .properties import Property

SCHEMA_VERSION = 1

# Counts above this signal pathological input rather than a real config.
MAX_COUNT = 2**32

_NUMERIC_TYPES = ("numeric", "set-cardinality")
_CATEGORICAL_TYPES = ("categorical", "bag-of-tokens")

_DIGIT_RUN_RE = re.compile(r"\d+")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    ftype: str


@dataclass(frozen=True)
class FeatureSchema:
    kind: str
    features: tuple[FeatureSpec, ...]
    version: int = SCHEMA_VERSION

    def numeric_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features if f.ftype in _NUMERIC_TYPES)

    def categorical_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features if f.ftype in _CATEGORICAL_TYPES)


_SCHEMAS: dict[str, FeatureSchema] = {
    "Acl": FeatureSchema(
        kind="Acl",
        features=(
            FeatureSpec("entry_count", "numeric"),
            FeatureSpec("permit_fraction", "numeric"),
            FeatureSpec("distinct_prefix_count", "set-cardinality"),
            FeatureSpec("wildcard_use", "numeric"),
            FeatureSpec("action_sequence_hash", "categorical"),
            FeatureSpec("referenced_object_count", "set-cardinality"),
            FeatureSpec("name_template_class", "categorical"),
        ),
    ),
    "RouteFilter": FeatureSchema(
        kind="RouteFilter",
        features=(
            FeatureSpec("entry_count", "numeric"),
            FeatureSpec("permit_fraction", "numeric"),
            FeatureSpec("distinct_prefix_count", "set-cardinality"),
            FeatureSpec("max_prefix_length_span", "numeric"),
            FeatureSpec("modifier_use", "numeric"),
            FeatureSpec("action_sequence_hash", "categorical"),
            FeatureSpec("name_template_class", "categorical"),
        ),
    ),
    "Vrf": FeatureSchema(
        kind="Vrf",
        features=(
            FeatureSpec("interface_count", "set-cardinality"),
            FeatureSpec("import_policy_count", "set-cardinality"),
            FeatureSpec("export_policy_count", "set-cardinality"),
            FeatureSpec("referenced_object_count", "set-cardinality"),
            FeatureSpec("rd_template_class", "categorical"),
            FeatureSpec("name_template_class", "categorical"),
        ),
    ),
    "RoutingPolicy": FeatureSchema(
        kind="RoutingPolicy",
        features=(
            FeatureSpec("clause_count", "numeric"),
            FeatureSpec("match_count", "numeric"),
            FeatureSpec("set_count", "numeric"),
            FeatureSpec("apply_count", "numeric"),
            FeatureSpec("referenced_object_count", "set-cardinality"),
            FeatureSpec("verb_sequence_hash", "categorical"),
            FeatureSpec("set_attribute_bag", "bag-of-tokens"),
            FeatureSpec("name_template_class", "categorical"),
        ),
    ),
}


def feature_schema(kind: str) -> FeatureSchema:
    return _SCHEMAS[kind]


class TokenTable:
    """Dense string-to-id interning table.

    Thread-safe: concurrent interns of the same token always yield the same
    id, and ids stay dense from 0.
    """

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}
        self._tokens: list[str] = []
        self._lock = threading.Lock()

    def intern(self, token: str) -> int:
        with self._lock:
            existing = self._ids.get(token)
            if existing is not None:
                return existing
            token_id = len(self._tokens)
            self._ids[token] = token_id
            self._tokens.append(token)
            return token_id

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def __len__(self) -> int:
        return len(self._tokens)

    def to_list(self) -> list[str]:
        return list(self._tokens)

    @classmethod
    def from_list(cls, tokens: list[str]) -> "TokenTable":
        table = cls()
        for token in tokens:
            table.intern(token)
        return table


def intern_token(table: TokenTable, token: str) -> int:
    return table.intern(token)


@dataclass(frozen=True)
class FeatureVector:
    property_id: str
    kind: str
    schema_version: int
    numeric: tuple[float, ...]
    categorical: tuple[int, ...]
    provenance: dict[str, tuple[str, ...]]

    def categorical_value(self, table: TokenTable, schema: FeatureSchema, feature: str) -> str:
        index = schema.categorical_names().index(feature)
        return table.token(self.categorical[index])


def name_template_class(name: str) -> str:
    """Collapse every digit run to ``#`` so numbered siblings share a class:
    ``ACL_MGMT_12`` and ``ACL_MGMT_3`` both map to ``ACL_MGMT_#``."""
    return _DIGIT_RUN_RE.sub("#", name)


def _stable_hash(sequence: str) -> str:
    return hashlib.sha1(sequence.encode("utf-8")).hexdigest()[:12]


def _action_sequence(rules) -> str:
    return "".join("P" if rule[0] == "permit" else "D" for rule in rules)


def _prefix_length(token: str) -> int | None:
    if "/" not in token:
        return None
    try:
        return int(token.rsplit("/", 1)[1])
    except ValueError:
        return None


def _try_int(token: str) -> int | None:
    try:
        return int(token)
    except ValueError:
        return None


def _rule_span(rule: tuple[str, ...]) -> tuple[int, bool]:
    """(covered prefix-length span, has any modifier) for one filter rule.

    ``ge G le L`` covers lengths G..L; ``le L`` alone covers base..L; ``ge G``
    alone covers G..32; no modifier covers only the base length.
    """
    base = _prefix_length(rule[1])
    if base is None:
        base = 0
    modifiers = rule[2:]
    ge = le = None
    for i, token in enumerate(modifiers[:-1]):
        if token == "ge":
            ge = _try_int(modifiers[i + 1])
        elif token == "le":
            le = _try_int(modifiers[i + 1])
    has_modifier = ge is not None or le is not None
    lo = ge if ge is not None else base
    hi = le if le is not None else (32 if ge is not None else base)
    return max(hi - lo, 0), has_modifier


def _acl_features(prop: Property) -> dict[str, tuple[object, tuple[str, ...]]]:
    rules = prop.attributes["rules"]
    n = len(rules)
    permits = sum(1 for r in rules if r[0] == "permit")
    prefixes = {tok for r in rules for tok in (r[2], r[3]) if "/" in tok}
    wildcards = sum(1 for r in rules for tok in (r[2], r[3]) if tok == "any")
    referenced = prop.attributes["referenced_names"]
    return {
        "entry_count": (n, ("rules",)),
        "permit_fraction": (permits / n if n else 0.0, ("rules",)),
        "distinct_prefix_count": (len(prefixes), ("rules",)),
        "wildcard_use": (wildcards, ("rules",)),
        "action_sequence_hash": (_stable_hash(_action_sequence(rules)), ("rules",)),
        "referenced_object_count": (len(set(referenced)), ("referenced_names",)),
        "name_template_class": (name_template_class(prop.name), ("name",)),
    }


def _route_filter_features(prop: Property) -> dict[str, tuple[object, tuple[str, ...]]]:
    rules = prop.attributes["rules"]
    n = len(rules)
    permits = sum(1 for r in rules if r[0] == "permit")
    prefixes = {r[1] for r in rules if "/" in r[1]}
    spans = [_rule_span(r) for r in rules]
    return {
        "entry_count": (n, ("rules",)),
        "permit_fraction": (permits / n if n else 0.0, ("rules",)),
        "distinct_prefix_count": (len(prefixes), ("rules",)),
        "max_prefix_length_span": (max((s for s, _ in spans), default=0), ("rules",)),
        "modifier_use": (sum(1 for _, m in spans if m), ("rules",)),
        "action_sequence_hash": (_stable_hash(_action_sequence(rules)), ("rules",)),
        "name_template_class": (name_template_class(prop.name), ("name",)),
    }


def _vrf_features(prop: Property) -> dict[str, tuple[object, tuple[str, ...]]]:
    interfaces = set(prop.attributes["interfaces"])
    imports = set(prop.attributes["import_policies"])
    exports = set(prop.attributes["export_policies"])
    rd = prop.attributes["rd"]
    return {
        "interface_count": (len(interfaces), ("interfaces",)),
        "import_policy_count": (len(imports), ("import_policies",)),
        "export_policy_count": (len(exports), ("export_policies",)),
        "referenced_object_count": (
            len(interfaces) + len(imports) + len(exports),
            ("interfaces", "import_policies", "export_policies"),
        ),
        "rd_template_class": (
            name_template_class(rd) if rd else "missing",
            ("rd",),
        ),
        "name_template_class": (name_template_class(prop.name), ("name",)),
    }


def _routing_policy_features(prop: Property) -> dict[str, tuple[object, tuple[str, ...]]]:
    clauses = prop.attributes["clauses"]
    verbs = "".join(c[0][0] for c in clauses)
    set_attrs = sorted({c[1] for c in clauses if c[0] == "set" and c[1]})
    referenced = prop.attributes["referenced"]
    return {
        "clause_count": (len(clauses), ("clauses",)),
        "match_count": (sum(1 for c in clauses if c[0] == "match"), ("clauses",)),
        "set_count": (sum(1 for c in clauses if c[0] == "set"), ("clauses",)),
        "apply_count": (sum(1 for c in clauses if c[0] == "apply"), ("clauses",)),
        "referenced_object_count": (len(set(referenced)), ("referenced",)),
        "verb_sequence_hash": (_stable_hash(verbs), ("clauses",)),
        "set_attribute_bag": (",".join(set_attrs) if set_attrs else "none", ("clauses",)),
        "name_template_class": (name_template_class(prop.name), ("name",)),
    }


_FEATURE_FUNCS = {
    "Acl": _acl_features,
    "RouteFilter": _route_filter_features,
    "Vrf": _vrf_features,
    "RoutingPolicy": _routing_policy_features,
}


def encode(prop: Property, table: TokenTable) -> FeatureVector:
    """Encode one property against its kind's schema.

    Raises ``EncodingOverflow`` when a count exceeds 2**32; numeric entries
    are guaranteed finite (attributes that cannot produce a value encode as
    an explicit categorical such as ``missing``, never NaN).
    """
    schema = feature_schema(prop.kind)
    computed = _FEATURE_FUNCS[prop.kind](prop)
    numeric: list[float] = []
    categorical: list[int] = []
    provenance: dict[str, tuple[str, ...]] = {}
    for spec in schema.features:
        value, sources = computed[spec.name]
        provenance[spec.name] = sources
        if spec.ftype in _NUMERIC_TYPES:
            as_float = float(value)
            if not math.isfinite(as_float) or as_float > MAX_COUNT:
                raise EncodingOverflow(spec.name, as_float)
            numeric.append(as_float)
        else:
            categorical.append(table.intern(str(value)))
    return FeatureVector(
        property_id=prop.id,
        kind=prop.kind,
        schema_version=schema.version,
        numeric=tuple(numeric),
        categorical=tuple(categorical),
        provenance=provenance,
    )


def encode_all(properties: list[Property], table: TokenTable) -> list[FeatureVector]:
    return [encode(p, table) for p in properties]
