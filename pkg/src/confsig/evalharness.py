"""Labeled synthetic corpora, detector comparison, and flow reporting.

Real enterprise snapshots are proprietary, so evaluation runs on generated
networks with known ground truth. The generator instantiates per-kind
stanza templates across every device with small benign parameter jitter,
then injects bugs of the four problem types at configurable rates and
records exactly which property ids were touched. That gives the harness
labels to score against: precision and recall per detector, a Table-style
side-by-side comparison, and a three-layer flow summary of what kind of
property violated what kind of check for what diagnosed problem.

Template roles follow a fixed pattern per kind:

* template 0 carries a name shared verbatim by every device, which is the
  only place a cross-device inconsistency can be planted;
* template 1 carries a small benign minority variant (a rare but legitimate
  value), the designed source of signature false positives that an operator
  retune session then cleans up;
* the last template (when there are at least three) is a rare extreme: one
  instance per node with far-out numerics, internally tight. Signatures
  model it as its own cluster and stay quiet; pooled per-kind baselines see
  its members as outliers and flag them.

Reference counts are held constant within each kind so that a dangling
reference injection moves an otherwise frozen feature, and every injected
bug perturbs at least one feature far enough to be flaggable against its
own template's statistics.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field

from .detectors import DetectorConfig, Finding, run_detector
from .encoder import FeatureVector, TokenTable, encode_all
from .errors import InfeasibleSpec
from .ingest import NetworkSnapshot, parse_config
from .properties import (
    Property,
    ReferenceGraph,
    STANZA_TO_PROPERTY_KIND,
    build_reference_graph,
    extract_properties,
)
from .retune import RetuneLog, apply_retune, recompute, suppress_finding
from .signatures import MiningParams, SignatureSet, mine_signatures

PROBLEM_RATE_TYPES = (
    "UndefinedReference",
    "DeviantAttributeValue",
    "InconsistentAcrossDevices",
    "ShadowedRule",
)

KIND_ORDER = ("Acl", "RouteFilter", "RoutingPolicy", "Vrf")

_KIND_PREFIX = {"Acl": "ACL", "RouteFilter": "RF", "Vrf": "VRF", "RoutingPolicy": "RP"}

_STANZA_KEYWORD = {kind: kw for kw, kind in STANZA_TO_PROPERTY_KIND.items()}

# benign minority share for template 1 of each kind; must stay under the
# mining common_fraction (0.2) or the minority stops being rare
_MINORITY_RATE = 0.03

_JITTER_LEVELS = (0, 1, 2)
_JITTER_WEIGHTS = (0.4, 0.3, 0.3)


# --- corpus specification -------------------------------------------------


def _default_properties_per_node() -> dict[str, int]:
    return {"Acl": 13, "RouteFilter": 10, "Vrf": 7, "RoutingPolicy": 10}


def _default_template_count() -> dict[str, int]:
    return {"Acl": 6, "RouteFilter": 5, "Vrf": 4, "RoutingPolicy": 5}


def _default_bug_rates() -> dict[str, float]:
    return {
        "UndefinedReference": 0.015,
        "DeviantAttributeValue": 0.015,
        "InconsistentAcrossDevices": 0.01,
        "ShadowedRule": 0.01,
    }


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of a generated network: scale, kind mix, and bug rates."""

    node_count: int = 150
    properties_per_node: dict[str, int] = field(
        default_factory=_default_properties_per_node
    )
    template_count: dict[str, int] = field(default_factory=_default_template_count)
    bug_rates: dict[str, float] = field(default_factory=_default_bug_rates)
    # chance per device and kind of one site-local legacy stanza with a
    # device-unique name shape; such one-offs land in the unclustered bucket
    # for signatures but stretch every pooled baseline's value distributions
    one_off_rate: float = 0.3
    seed: int = 7

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        for kind in self.properties_per_node:
            if kind not in _KIND_PREFIX:
                raise ValueError(f"unknown property kind {kind!r}")
        for kind, count in self.template_count.items():
            if kind not in self.properties_per_node:
                raise ValueError(f"template count for absent kind {kind!r}")
            if count < 1:
                raise ValueError("template_count entries must be >= 1")
        for problem, rate in self.bug_rates.items():
            if problem not in PROBLEM_RATE_TYPES:
                raise ValueError(f"unknown problem type {problem!r}")
            if not 0.0 <= rate <= 1.0:
                raise ValueError("bug rates must lie in [0, 1]")
        if not 0.0 <= self.one_off_rate <= 1.0:
            raise ValueError("one_off_rate must lie in [0, 1]")

    def total_properties(self) -> int:
        return self.node_count * sum(self.properties_per_node.values())

    def to_dict(self) -> dict:
        return {
            "format": "corpus-spec-v1",
            "node_count": self.node_count,
            "properties_per_node": dict(sorted(self.properties_per_node.items())),
            "template_count": dict(sorted(self.template_count.items())),
            "bug_rates": dict(sorted(self.bug_rates.items())),
            "one_off_rate": self.one_off_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusSpec":
        """Build a spec from its dict form; omitted fields keep defaults.

        The format stamp is mandatory and unknown keys are rejected, so a
        typo fails loudly instead of silently running the default corpus.
        """
        if doc.get("format") != "corpus-spec-v1":
            raise ValueError(f"unexpected corpus spec format {doc.get('format')!r}")
        known = {
            "node_count",
            "properties_per_node",
            "template_count",
            "bug_rates",
            "one_off_rate",
            "seed",
        }
        unknown = sorted(set(doc) - known - {"format"})
        if unknown:
            raise ValueError(f"unknown corpus spec fields {unknown}")
        defaults = cls()
        return cls(
            node_count=doc.get("node_count", defaults.node_count),
            properties_per_node=dict(
                doc.get("properties_per_node", defaults.properties_per_node)
            ),
            template_count=dict(doc.get("template_count", defaults.template_count)),
            bug_rates=dict(doc.get("bug_rates", defaults.bug_rates)),
            one_off_rate=doc.get("one_off_rate", defaults.one_off_rate),
            seed=doc.get("seed", defaults.seed),
        )


DEFAULT_SPEC = CorpusSpec()


@dataclass(frozen=True)
class GroundTruth:
    """Injection record: which properties were bugged, and how."""

    labels: dict[str, str]
    injected_count: dict[str, int]

    def __post_init__(self) -> None:
        tally = Counter(self.labels.values())
        nonzero = {k: v for k, v in self.injected_count.items() if v}
        if dict(tally) != nonzero:
            raise ValueError("injected_count does not match label tally")

    def clean(self, pid: str) -> bool:
        return pid not in self.labels

    def to_dict(self) -> dict:
        return {
            "format": "truth-v1",
            "labels": dict(sorted(self.labels.items())),
            "injected_count": dict(sorted(self.injected_count.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        if doc.get("format") != "truth-v1":
            raise ValueError(f"unexpected truth format {doc.get('format')!r}")
        return cls(
            labels=dict(doc["labels"]),
            injected_count=dict(doc["injected_count"]),
        )


def dump_truth(truth: GroundTruth) -> str:
    return json.dumps(truth.to_dict(), sort_keys=True, indent=2) + "\n"


def load_truth(text: str) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(text))


# --- generation -----------------------------------------------------------


def _spread(total: int, buckets: int) -> list[int]:
    base, rem = divmod(total, buckets)
    return [base + (1 if i < rem else 0) for i in range(buckets)]


def _instance_counts(per_node: int, templates: int) -> list[int]:
    # the rare-extreme template (last, when there are >= 3) is pinned to a
    # single instance per node so pooled baselines see it as a thin tail
    if templates >= 3:
        return _spread(per_node - 1, templates - 1) + [1]
    return _spread(per_node, templates)


def _instance_name(kind: str, t: int, node_str: str, i: int) -> str:
    prefix = _KIND_PREFIX[kind] + chr(65 + t)
    if t == 0:
        return f"{prefix}-S-{i}"
    return f"{prefix}-{node_str}-{i}"


def _is_extreme(t: int, templates: int) -> bool:
    return templates >= 3 and t == templates - 1


def _draw_jitter(rng: random.Random) -> int:
    return rng.choices(_JITTER_LEVELS, weights=_JITTER_WEIGHTS)[0]


def _draw_minority(rng: random.Random, t: int, templates: int) -> bool:
    # the draw happens for every template-1 instance so the random stream
    # does not depend on bug placement
    if templates >= 3 and t == 1 and t != templates - 1:
        return rng.random() < _MINORITY_RATE
    return False


def _acl_stanza(
    t: int,
    templates: int,
    name: str,
    node_str: str,
    rng: random.Random,
    bug: tuple | None,
    rf_templates: int,
) -> list[str]:
    base = 58 if _is_extreme(t, templates) else 6 + 4 * t
    jitter = _draw_jitter(rng)
    minority = _draw_minority(rng, t, templates)
    rules = [f"  permit tcp 10.{10 + t}.{r}.0/24 any" for r in range(base)]
    if minority:
        rules.append(f"  permit gre 10.{10 + t}.250.0/24 any")
    if rf_templates:
        rf_name = _instance_name("RouteFilter", t % rf_templates, node_str, 1)
        rules.append(f"  permit tcp 10.{10 + t}.251.0/24 any filter {rf_name}")
    rules.append("  deny ip any any")
    rules.extend(("  deny udp any any", "  deny icmp any any")[:jitter])

    if bug is not None:
        if bug[0] == "UndefinedReference":
            rules.append(f"  permit tcp 10.99.1.0/24 any filter RF-MISSING-{bug[1]}")
        elif bug[0] == "DeviantAttributeValue":
            # collapse K prefixes onto rule zero's: a copy-paste slip that
            # keeps length and action order but guts prefix diversity
            for r in range(1, 1 + min(bug[1], base - 1)):
                rules[r] = f"  permit tcp 10.{10 + t}.0.0/24 any"
        elif bug[0] == "ShadowedRule":
            rules.insert(0, "  deny ip any any")
        elif bug[0] == "InconsistentAcrossDevices":
            rules[0] = f"  deny tcp 10.{10 + t}.0.0/24 any"
    return [f"acl {name}"] + rules


def _route_filter_stanza(
    t: int,
    templates: int,
    name: str,
    rng: random.Random,
    bug: tuple | None,
) -> list[str]:
    base = 55 if _is_extreme(t, templates) else 7 + 4 * t
    jitter = _draw_jitter(rng)
    minority = _draw_minority(rng, t, templates)
    rules = [f"  permit 10.{20 + t}.{r}.0/24" for r in range(base)]
    if t % 2 == 1:
        rules[0] = f"  permit 10.{20 + t}.0.0/24 le 28"
    if minority:
        rules.append(f"  permit 10.{20 + t}.250.0/24 ge 30")
    rules.append("  deny 0.0.0.0/0")
    rules.extend(f"  deny 10.200.{x}.0/24" for x in range(1, jitter + 1))

    if bug is not None:
        if bug[0] == "DeviantAttributeValue":
            # same copy-paste collapse as the acl variant; rule zero keeps
            # its modifier so only prefix diversity moves
            for r in range(1, 1 + min(bug[1], base - 1)):
                rules[r] = f"  permit 10.{20 + t}.0.0/24"
        elif bug[0] == "InconsistentAcrossDevices":
            rules[0] = f"  deny 10.{20 + t}.0.0/24"
    return [f"route-filter {name}"] + rules


def _routing_policy_stanza(
    t: int,
    templates: int,
    name: str,
    node_str: str,
    rng: random.Random,
    bug: tuple | None,
    acl_templates: int,
    rf_templates: int,
) -> list[str]:
    jitter = _draw_jitter(rng)
    minority = _draw_minority(rng, t, templates)
    acl_target = _instance_name("Acl", t % acl_templates, node_str, 1)
    rf_target = _instance_name("RouteFilter", (t + 1) % rf_templates, node_str, 1)
    lines = [f"  match acl {acl_target}", f"  match route-filter {rf_target}"]
    if _is_extreme(t, templates):
        lines.extend([f"  match acl {acl_target}"] * 20)
    else:
        lines.extend(f"  match acl {acl_target}" for _ in range(t))
    if bug is not None and bug[0] == "InconsistentAcrossDevices":
        lines.append("  set weight 100")
    else:
        lines.append("  set local-pref 100")
    if minority:
        lines.append("  set med 50")
    lines.extend("  set community 1" for _ in range(jitter))

    if bug is not None:
        if bug[0] == "UndefinedReference":
            lines.append(f"  match acl ACL-MISSING-{bug[1]}")
        elif bug[0] == "DeviantAttributeValue":
            lines.extend(f"  match acl {acl_target}" for _ in range(bug[1]))
    return [f"routing-policy {name}"] + lines


def _vrf_stanza(
    t: int,
    templates: int,
    name: str,
    node_str: str,
    rng: random.Random,
    bug: tuple | None,
    rp_templates: int,
) -> tuple[list[str], int]:
    """Returns the stanza lines plus the highest interface index used, so the
    device can define enough interface stanzas."""
    base = 30 if _is_extreme(t, templates) else 2 + 2 * t
    jitter = _draw_jitter(rng)
    minority = _draw_minority(rng, t, templates)
    count = base + jitter
    if bug is not None and bug[0] == "DeviantAttributeValue":
        count += bug[1]
    rd = f"65{t}00:1"
    if minority:
        rd = f"CUST-{node_str}:9"
    if bug is not None and bug[0] == "InconsistentAcrossDevices":
        rd = f"RDX:{t + 1}"
    lines = [f"vrf {name}", f"  rd {rd}"]
    lines.extend(f"  interface E{i}" for i in range(count))
    if rp_templates:
        imp = _instance_name("RoutingPolicy", t % rp_templates, node_str, 1)
        exp = _instance_name("RoutingPolicy", (t + 1) % rp_templates, node_str, 1)
        lines.append(f"  import policy {imp}")
        lines.append(f"  export policy {exp}")
    if bug is not None and bug[0] == "UndefinedReference":
        lines.append(f"  import policy RP-MISSING-{bug[1]}")
    return lines, count


# digit-to-letter code keeps each one-off name class unique per device:
# digits collapse in template classes, letters do not
_DIGIT_LETTER = "ABCDEFGHIJ"


def _letter_code(node_str: str) -> str:
    return "".join(_DIGIT_LETTER[int(c)] for c in node_str)


def _one_off_acl(node_str: str, n: int) -> list[str]:
    code = _letter_code(node_str)
    count = 5 + n % 9
    rules = [f"  permit tcp 172.16.{r}.0/24 any" for r in range(count)]
    if n % 2:
        rules.append("  deny ip any any")
    return [f"acl LEGACY-{code}-1"] + rules


def _one_off_route_filter(node_str: str, n: int) -> list[str]:
    code = _letter_code(node_str)
    count = 4 + n % 7
    rules = [f"  permit 172.20.{r}.0/24" for r in range(count)]
    if n % 3 == 0:
        rules.insert(0, "  deny 172.31.0.0/16")
    return [f"route-filter SITE-{code}-1"] + rules


def _one_off_vrf(node_str: str, n: int, rp_templates: int) -> tuple[list[str], int]:
    code = _letter_code(node_str)
    count = 1 + n % 5
    lines = [f"vrf SITEVRF-{code}-1", f"  rd LG{code}:1"]
    lines.extend(f"  interface E{i}" for i in range(count))
    if n % 2 and rp_templates:
        lines.append(
            f"  import policy {_instance_name('RoutingPolicy', 0, node_str, 1)}"
        )
    return lines, count


def _one_off_routing_policy(node_str: str, n: int, acl_templates: int) -> list[str]:
    code = _letter_code(node_str)
    lines = [f"routing-policy SITEPOL-{code}-1"]
    if acl_templates:
        target = _instance_name("Acl", 0, node_str, 1)
        lines.extend(f"  match acl {target}" for _ in range(1 + n % 3))
    sets = (
        "  set origin igp",
        "  set tag 9",
        "  set weight 5",
        "  set metric 30",
    )
    lines.extend(sets[: 1 + n % 4])
    return lines


def _inventory(spec: CorpusSpec) -> list[tuple[str, str, int, int, str, str]]:
    """Every instance slot as (device, kind, template, instance, name, pid)."""
    slots = []
    for n in range(1, spec.node_count + 1):
        node_str = f"{n:03d}"
        device = f"r{node_str}"
        for kind in KIND_ORDER:
            per_node = spec.properties_per_node.get(kind, 0)
            if not per_node:
                continue
            templates = spec.template_count.get(kind, 1)
            counts = _instance_counts(per_node, templates)
            for t, instances in enumerate(counts):
                for i in range(1, instances + 1):
                    name = _instance_name(kind, t, node_str, i)
                    pid = f"{device}/{_STANZA_KEYWORD[kind]}/{name}"
                    slots.append((device, kind, t, i, name, pid))
    return slots


def _assign_bugs(
    spec: CorpusSpec, slots: list[tuple[str, str, int, int, str, str]]
) -> dict[str, tuple]:
    """Pick bug targets per type, one bug per property at most."""
    rng = random.Random(f"{spec.seed}:bugs")
    total = spec.total_properties()
    by_pid = {pid: (kind, t) for _, kind, t, _, _, pid in slots}

    def eligible(problem: str) -> list[str]:
        out = []
        for _, kind, t, _, _, pid in slots:
            templates = spec.template_count.get(kind, 1)
            shared = t == 0
            if problem == "InconsistentAcrossDevices":
                ok = shared and spec.node_count >= 2
            elif problem == "ShadowedRule":
                ok = kind == "Acl" and not shared
            elif problem == "UndefinedReference":
                ok = kind in ("Acl", "Vrf", "RoutingPolicy") and not shared
            else:
                ok = not shared
            del templates
            if ok:
                out.append(pid)
        return sorted(out)

    chosen: dict[str, tuple] = {}
    ur_seq = 0
    for problem in PROBLEM_RATE_TYPES:
        rate = spec.bug_rates.get(problem, 0.0)
        count = round(rate * total)
        if not count:
            continue
        pool = [pid for pid in eligible(problem) if pid not in chosen]
        if count > len(pool):
            raise InfeasibleSpec(
                f"{problem} rate asks for {count} bugs, only "
                f"{len(pool)} eligible properties"
            )
        for pid in rng.sample(pool, count):
            if problem == "UndefinedReference":
                ur_seq += 1
                chosen[pid] = (problem, ur_seq)
            elif problem == "DeviantAttributeValue":
                # big enough to clear a per-template deviation threshold of
                # 3.5 at unit spread even against jitter, small enough to
                # stay inside the pooled per-kind value range
                chosen[pid] = (problem, rng.randint(6, 12))
            else:
                chosen[pid] = (problem,)
    del by_pid
    return chosen


def generate_corpus_texts(spec: CorpusSpec) -> tuple[dict[str, str], GroundTruth]:
    """Device name to config text, plus the injection record.

    Deterministic for a fixed spec: the body jitter and the bug placement
    draw from independent seeded streams, so the same spec always yields the
    same bytes.
    """
    for kind, templates in spec.template_count.items():
        per_node = spec.properties_per_node.get(kind, 0)
        if templates > per_node:
            raise InfeasibleSpec(
                f"{kind}: {templates} templates but only {per_node} "
                "properties per node"
            )
        if templates > 26:
            raise InfeasibleSpec(f"{kind}: template letters exhausted")

    slots = _inventory(spec)
    bugs = _assign_bugs(spec, slots)
    rng = random.Random(f"{spec.seed}:body")

    acl_templates = spec.template_count.get("Acl", 1) if spec.properties_per_node.get("Acl") else 0
    rf_templates = spec.template_count.get("RouteFilter", 1) if spec.properties_per_node.get("RouteFilter") else 0
    rp_templates = spec.template_count.get("RoutingPolicy", 1) if spec.properties_per_node.get("RoutingPolicy") else 0

    by_device: dict[str, list[tuple[str, int, int, str, str]]] = {}
    for device, kind, t, i, name, pid in slots:
        by_device.setdefault(device, []).append((kind, t, i, name, pid))

    texts: dict[str, str] = {}
    for device in sorted(by_device):
        node_str = device[1:]
        node_num = int(node_str)
        sections: dict[str, list[str]] = {kind: [] for kind in KIND_ORDER}
        max_interface = 2
        for kind, t, i, name, pid in by_device[device]:
            templates = spec.template_count.get(kind, 1)
            bug = bugs.get(pid)
            if kind == "Acl":
                lines = _acl_stanza(t, templates, name, node_str, rng, bug, rf_templates)
            elif kind == "RouteFilter":
                lines = _route_filter_stanza(t, templates, name, rng, bug)
            elif kind == "RoutingPolicy":
                lines = _routing_policy_stanza(
                    t, templates, name, node_str, rng, bug, acl_templates, rf_templates
                )
            else:
                lines, used = _vrf_stanza(t, templates, name, node_str, rng, bug, rp_templates)
                max_interface = max(max_interface, used)
            sections[kind].append("\n".join(lines))

        for kind in KIND_ORDER:
            if not spec.properties_per_node.get(kind):
                continue
            if rng.random() >= spec.one_off_rate:
                continue
            if kind == "Acl":
                extra = _one_off_acl(node_str, node_num)
            elif kind == "RouteFilter":
                extra = _one_off_route_filter(node_str, node_num)
            elif kind == "RoutingPolicy":
                extra = _one_off_routing_policy(node_str, node_num, acl_templates)
            else:
                extra, used = _one_off_vrf(node_str, node_num, rp_templates)
                max_interface = max(max_interface, used)
            sections[kind].append("\n".join(extra))

        interface_lines = []
        for idx in range(max_interface):
            entry = [f"interface E{idx}"]
            if idx == 0 and acl_templates:
                entry.append(f"  ip access-group {_instance_name('Acl', 0, node_str, 1)}")
            if idx == 1 and spec.properties_per_node.get("Vrf"):
                entry.append(f"  vrf {_instance_name('Vrf', 0, node_str, 1)}")
            interface_lines.append("\n".join(entry))

        blocks = [f"hostname {device}"] + interface_lines
        for kind in KIND_ORDER:
            blocks.extend(sections[kind])
        texts[device] = "\n\n".join(blocks) + "\n"

    tally = Counter(bugs[pid][0] for pid in bugs)
    truth = GroundTruth(
        labels={pid: bug[0] for pid, bug in sorted(bugs.items())},
        injected_count=dict(sorted(tally.items())),
    )
    return texts, truth


def generate_corpus(spec: CorpusSpec) -> tuple[NetworkSnapshot, GroundTruth]:
    texts, truth = generate_corpus_texts(spec)
    devices = {
        name: parse_config(text, name, source_path=f"{name}.cfg")
        for name, text in texts.items()
    }
    snapshot = NetworkSnapshot(
        devices=devices,
        snapshot_id=f"corpus-seed{spec.seed}",
        ingest_warnings=(),
    )
    return snapshot, truth


# --- analysis bundle ------------------------------------------------------


@dataclass(frozen=True)
class Bundle:
    """Everything a detector run needs, derived once from a snapshot."""

    properties: list[Property]
    vectors: list[FeatureVector]
    sset: SignatureSet
    graph: ReferenceGraph
    table: TokenTable


def analysis_bundle(snapshot: NetworkSnapshot, params: MiningParams | None = None) -> Bundle:
    """Derive properties, vectors, graph, and signatures in one pass.

    Without explicit params, min_cluster_size scales to a third of the fleet,
    rounded up (never below the library default). A legitimate template shows
    up on most devices; a tight knot of near-identical stanzas on a minority
    of them is more likely a repeated mistake than a signature, so it gets
    absorbed into the nearest real cluster and judged against that cluster's
    statistics.
    """
    if params is None:
        floor = MiningParams().min_cluster_size
        fleet_third = -(-len(snapshot.devices) // 3)
        params = MiningParams(min_cluster_size=max(floor, fleet_third))
    properties = extract_properties(snapshot)
    graph = build_reference_graph(snapshot, properties)
    table = TokenTable()
    vectors = encode_all(properties, table)
    sset = mine_signatures(vectors, table, params)
    return Bundle(
        properties=properties, vectors=vectors, sset=sset, graph=graph, table=table
    )


# --- metrics --------------------------------------------------------------


@dataclass(frozen=True)
class EvalMetrics:
    """Precision and recall over labeled findings.

    A zero denominator leaves the metric as None (undefined), never NaN:
    a detector that emits nothing has no precision, and a clean corpus has
    no recall.
    """

    tp: int
    fp: int
    fn: int
    emitted_findings: int
    precision: float | None
    recall: float | None

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, emitted: int | None = None) -> "EvalMetrics":
        return cls(
            tp=tp,
            fp=fp,
            fn=fn,
            emitted_findings=tp + fp if emitted is None else emitted,
            precision=tp / (tp + fp) if tp + fp else None,
            recall=tp / (tp + fn) if tp + fn else None,
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "emitted_findings": self.emitted_findings,
            "precision": self.precision,
            "recall": self.recall,
        }


def compute_metrics(findings: list[Finding], truth: GroundTruth) -> EvalMetrics:
    flagged = {f.property_id for f in findings}
    buggy = set(truth.labels)
    tp = len(flagged & buggy)
    return EvalMetrics.from_counts(
        tp=tp,
        fp=len(flagged - buggy),
        fn=len(buggy - flagged),
        emitted=len(findings),
    )


# --- scripted retune ------------------------------------------------------


def scripted_retune(
    bundle: Bundle, truth: GroundTruth
) -> tuple[SignatureSet, RetuneLog, list[EvalMetrics]]:
    """Suppress every clean-labeled finding, one action at a time.

    This is the desk-scale stand-in for an operator pass over the finding
    list: each suppression removes one false positive and can never touch a
    true positive, so precision climbs monotonically while recall stays
    fixed. Returns the final set, the replayable action log, and the metric
    trajectory (one entry before any action, then one after each).
    """
    current = bundle.sset
    log = RetuneLog(base_generation=current.generation)
    findings = recompute(
        bundle.properties, bundle.vectors, current, bundle.graph, bundle.table
    )
    trajectory = [compute_metrics(findings, truth)]
    clean = sorted(
        (f for f in findings if truth.clean(f.property_id)),
        key=lambda f: f.property_id,
    )
    for finding in clean:
        action = suppress_finding(
            finding.property_id,
            finding.violated_signature,
            current.generation,
            note="scripted session",
        )
        current = apply_retune(current, action, bundle.vectors, bundle.table)
        log = log.append(action)
        findings = recompute(
            bundle.properties, bundle.vectors, current, bundle.graph, bundle.table
        )
        trajectory.append(compute_metrics(findings, truth))
    return current, log, trajectory


# --- detector comparison --------------------------------------------------

SCRIPTED_RETUNE = "scripted-retune"

DEFAULT_COMPARISON: tuple[tuple[str, object], ...] = (
    ("zscore", DetectorConfig(method="zscore")),
    ("modified_zscore", DetectorConfig(method="modified_zscore")),
    ("gmm", DetectorConfig(method="gmm")),
    ("signature", DetectorConfig(method="signature")),
    ("signature_retuned", SCRIPTED_RETUNE),
)


def compare_detectors(
    bundle: Bundle,
    truth: GroundTruth,
    configs: tuple[tuple[str, object], ...] = DEFAULT_COMPARISON,
) -> list[dict]:
    """One metrics row per detector over the same bundle.

    A config may be a DetectorConfig or the SCRIPTED_RETUNE marker, which
    runs the signature detector followed by the scripted suppression
    session. A detector that raises gets its row marked failed instead of
    aborting the table.
    """
    if len(configs) < 2:
        raise ValueError("compare_detectors needs at least two configs")
    rows = []
    for label, config in configs:
        try:
            if config == SCRIPTED_RETUNE:
                _, _, trajectory = scripted_retune(bundle, truth)
                metrics = trajectory[-1]
            else:
                findings = run_detector(
                    config,
                    bundle.properties,
                    bundle.vectors,
                    bundle.sset,
                    bundle.graph,
                    bundle.table,
                )
                metrics = compute_metrics(findings, truth)
        except Exception as exc:
            rows.append({"detector": label, "error": str(exc)})
            continue
        row = {"detector": label, "error": None}
        row.update(metrics.to_dict())
        rows.append(row)
    return rows


def render_comparison(rows: list[dict]) -> str:
    """Aligned text table, one detector per row."""
    header = ("detector", "tp", "fp", "fn", "precision", "recall", "findings")

    def fmt(value) -> str:
        if value is None:
            return "n/a"
        if isinstance(value, float):
            return f"{value:.3f}"
        return str(value)

    body = []
    for row in rows:
        if row.get("error"):
            body.append((row["detector"], "failed: " + row["error"], "", "", "", "", ""))
            continue
        body.append(
            (
                row["detector"],
                fmt(row["tp"]),
                fmt(row["fp"]),
                fmt(row["fn"]),
                fmt(row["precision"]),
                fmt(row["recall"]),
                fmt(row["emitted_findings"]),
            )
        )
    widths = [
        max(len(header[c]), *(len(line[c]) for line in body)) if body else len(header[c])
        for c in range(len(header))
    ]
    lines = [
        "  ".join(header[c].ljust(widths[c]) for c in range(len(header))).rstrip()
    ]
    lines.append("  ".join("-" * widths[c] for c in range(len(header))))
    for line in body:
        lines.append(
            "  ".join(line[c].ljust(widths[c]) for c in range(len(header))).rstrip()
        )
    return "\n".join(lines) + "\n"


# --- sankey ---------------------------------------------------------------

DEVIATION_CATEGORIES = (
    "missing-reference",
    "order-anomaly",
    "categorical-deviation",
    "numeric-deviation",
)

_PLAIN_CATEGORICAL = ("rd_template_class", "name_template_class", "set_attribute_bag")

# features whose value is the size of a reference list; aggregate counts can
# hide a single extra edge behind benign size noise, so the per-list counts
# carry the cue too
_REFERENCE_COUNTS = (
    "referenced_object_count",
    "import_policy_count",
    "export_policy_count",
)


def deviation_category(finding: Finding) -> str:
    """Middle Sankey layer: what sort of check the finding tripped.

    Precedence mirrors diagnostic value: a moved reference count means a
    missing or extra reference, an action or verb sequence change is an
    ordering anomaly, any other categorical mismatch is a categorical
    deviation, and everything else is numeric.
    """
    names = [name for name, _, _ in finding.deviant_features]
    if any(name in _REFERENCE_COUNTS for name in names):
        return "missing-reference"
    if any(name.endswith("_sequence_hash") for name in names):
        return "order-anomaly"
    if any(name in _PLAIN_CATEGORICAL for name in names):
        return "categorical-deviation"
    return "numeric-deviation"


def _finding_kind(finding: Finding) -> str:
    stanza_kind = finding.property_id.split("/", 2)[1]
    return STANZA_TO_PROPERTY_KIND.get(stanza_kind, stanza_kind)


def build_sankey(findings: list[Finding]) -> dict:
    """Three-layer flow: property kind, deviation category, problem type.

    Each finding contributes weight 1 to exactly one link per adjacent layer
    pair, so per-layer totals are conserved and equal the finding count.
    """
    kind_to_category: Counter = Counter()
    category_to_problem: Counter = Counter()
    for finding in findings:
        kind = _finding_kind(finding)
        category = deviation_category(finding)
        kind_to_category[(kind, category)] += 1
        category_to_problem[(category, finding.problem_type)] += 1

    nodes: dict[str, int] = {}
    for (kind, category), _ in kind_to_category.items():
        nodes[f"kind:{kind}"] = 0
        nodes[f"deviation:{category}"] = 1
    for (category, problem), _ in category_to_problem.items():
        nodes[f"deviation:{category}"] = 1
        nodes[f"problem:{problem}"] = 2

    node_rows = [
        {"id": node_id, "label": node_id.split(":", 1)[1], "layer": layer}
        for node_id, layer in sorted(nodes.items(), key=lambda kv: (kv[1], kv[0]))
    ]
    links = [
        {"source": f"kind:{kind}", "target": f"deviation:{category}", "value": count}
        for (kind, category), count in sorted(kind_to_category.items())
    ] + [
        {"source": f"deviation:{category}", "target": f"problem:{problem}", "value": count}
        for (category, problem), count in sorted(category_to_problem.items())
    ]
    return {"nodes": node_rows, "links": links}
