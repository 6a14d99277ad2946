"""Extract typed properties from a snapshot and build the reference graph.

Properties are the unit of outlier analysis: one per acl / route-filter /
vrf / routing-policy stanza. Interfaces and BGP neighbors are not properties
but participate in the reference graph as nodes, because references from
them determine a property's blast radius.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .errors import UnknownProperty
from .ingest import DeviceConfig, NetworkSnapshot, Stanza

PROPERTY_KINDS = ("Acl", "RouteFilter", "Vrf", "RoutingPolicy")

STANZA_TO_PROPERTY_KIND = {
    "acl": "Acl",
    "route-filter": "RouteFilter",
    "vrf": "Vrf",
    "routing-policy": "RoutingPolicy",
}

# Names of these kinds may be defined once and referenced fleet-wide; all
# other references resolve on the referencing device only.
_GLOBAL_SCOPE_KINDS = frozenset({"route-filter", "routing-policy"})

_RULE_KEYS = frozenset({"permit", "deny"})


@dataclass(frozen=True)
class Property:
    id: str
    kind: str
    device: str
    name: str
    attributes: dict[str, object]
    source: tuple[str, tuple[int, int]]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    site: str


@dataclass(frozen=True)
class ReferenceGraph:
    nodes: frozenset[str]
    edges: tuple[Edge, ...]
    dangling: tuple[tuple[str, str, str], ...]


def property_id(device: str, stanza_kind: str, name: str) -> str:
    return f"{device}/{stanza_kind}/{name}"


def _acl_attributes(stanza: Stanza) -> dict[str, object]:
    rules = []
    referenced = []
    for entry in stanza.entries:
        if entry.key not in _RULE_KEYS:
            continue
        proto = entry.operator or "ip"
        src = entry.values[0] if len(entry.values) > 0 else "any"
        dst = entry.values[1] if len(entry.values) > 1 else "any"
        rules.append((entry.key, proto, src, dst))
        values = list(entry.values)
        for i, tok in enumerate(values[:-1]):
            if tok == "filter":
                referenced.append(values[i + 1])
    return {
        "name": stanza.name,
        "rules": tuple(rules),
        "referenced_names": tuple(referenced),
    }


def _route_filter_attributes(stanza: Stanza) -> dict[str, object]:
    rules = []
    for entry in stanza.entries:
        if entry.key not in _RULE_KEYS:
            continue
        prefix = entry.values[0] if entry.values else "0.0.0.0/0"
        rules.append((entry.key, prefix) + tuple(entry.values[1:]))
    return {"name": stanza.name, "rules": tuple(rules)}


def _vrf_attributes(stanza: Stanza) -> dict[str, object]:
    rd = ""
    interfaces = []
    imports = []
    exports = []
    for entry in stanza.entries:
        if entry.key == "rd" and entry.values:
            if not rd:
                rd = entry.values[0]
        elif entry.key == "interface" and entry.values:
            interfaces.append(entry.values[0])
        elif entry.key == "import" and entry.operator == "policy" and entry.values:
            imports.append(entry.values[0])
        elif entry.key == "export" and entry.operator == "policy" and entry.values:
            exports.append(entry.values[0])
    return {
        "name": stanza.name,
        "rd": rd,
        "interfaces": tuple(interfaces),
        "import_policies": tuple(imports),
        "export_policies": tuple(exports),
    }


def _routing_policy_attributes(stanza: Stanza) -> dict[str, object]:
    clauses = []
    referenced = []
    for entry in stanza.entries:
        if entry.key in ("match", "apply") and entry.values:
            clauses.append((entry.key, entry.operator, entry.values[0]))
            if entry.operator in ("acl", "route-filter"):
                referenced.append((entry.operator, entry.values[0]))
        elif entry.key == "set":
            attr = entry.operator
            value = entry.values[0] if entry.values else ""
            clauses.append(("set", attr, value))
    return {
        "name": stanza.name,
        "clauses": tuple(clauses),
        "referenced": tuple(referenced),
    }


_EXTRACTORS = {
    "acl": _acl_attributes,
    "route-filter": _route_filter_attributes,
    "vrf": _vrf_attributes,
    "routing-policy": _routing_policy_attributes,
}


def extract_properties(snapshot: NetworkSnapshot) -> list[Property]:
    """One Property per acl/route-filter/vrf/routing-policy stanza, in
    (device, file order)."""
    out: list[Property] = []
    for device_name, device in snapshot.devices.items():
        for stanza in device.stanzas:
            kind = STANZA_TO_PROPERTY_KIND.get(stanza.kind)
            if kind is None:
                continue
            span = device.line_index.get((stanza.kind, stanza.name), (0, 0))
            out.append(
                Property(
                    id=property_id(device_name, stanza.kind, stanza.name),
                    kind=kind,
                    device=device_name,
                    name=stanza.name,
                    attributes=_EXTRACTORS[stanza.kind](stanza),
                    source=(device.source_path, span),
                )
            )
    return out


def _reference_sites(device: DeviceConfig) -> list[tuple[str, str, str, str]]:
    """Yield (from_node, target_stanza_kind, target_name, site) for every
    reference this device's stanzas make."""
    refs: list[tuple[str, str, str, str]] = []
    dev = device.device_name
    for stanza in device.stanzas:
        node = property_id(dev, stanza.kind, stanza.name)
        if stanza.kind == "acl":
            rule_idx = -1
            for entry in stanza.entries:
                if entry.key not in _RULE_KEYS:
                    continue
                rule_idx += 1
                values = list(entry.values)
                for i, tok in enumerate(values[:-1]):
                    if tok == "filter":
                        refs.append(
                            (node, "route-filter", values[i + 1], f"rule[{rule_idx}].filter")
                        )
        elif stanza.kind == "vrf":
            counters = {"import": 0, "export": 0, "interface": 0}
            for entry in stanza.entries:
                if entry.key in ("import", "export") and entry.operator == "policy" and entry.values:
                    refs.append(
                        (node, "routing-policy", entry.values[0], f"{entry.key}[{counters[entry.key]}]")
                    )
                    counters[entry.key] += 1
                elif entry.key == "interface" and entry.values:
                    refs.append(
                        (node, "interface", entry.values[0], f"interface[{counters['interface']}]")
                    )
                    counters["interface"] += 1
        elif stanza.kind == "routing-policy":
            clause_idx = -1
            for entry in stanza.entries:
                if entry.key not in ("match", "apply", "set"):
                    continue
                clause_idx += 1
                if entry.key in ("match", "apply") and entry.operator in ("acl", "route-filter") and entry.values:
                    refs.append(
                        (node, entry.operator, entry.values[0], f"clause[{clause_idx}].{entry.key}")
                    )
        elif stanza.kind == "interface":
            for entry in stanza.entries:
                if entry.key == "ip" and entry.operator == "access-group" and entry.values:
                    refs.append((node, "acl", entry.values[0], "access-group"))
                elif entry.key == "vrf" and entry.values:
                    refs.append((node, "vrf", entry.values[0], "vrf"))
        elif stanza.kind == "bgp-neighbor":
            for entry in stanza.entries:
                if entry.key in ("import", "export") and entry.operator == "policy" and entry.values:
                    refs.append((node, "routing-policy", entry.values[0], entry.key))
                elif entry.key == "update-source" and entry.values:
                    refs.append((node, "interface", entry.values[0], "update-source"))
    return refs


def build_reference_graph(
    snapshot: NetworkSnapshot, properties: list[Property]
) -> ReferenceGraph:
    """Resolve every reference site to a definition.

    Names resolve on the referencing device first; route-filter and
    routing-policy names additionally resolve snapshot-wide (smallest device
    name wins, deterministically). Unresolvable references land in
    ``dangling``.
    """
    nodes: set[str] = {p.id for p in properties}
    local_defs: set[tuple[str, str, str]] = set()
    global_defs: dict[tuple[str, str], str] = {}

    for device_name in sorted(snapshot.devices):
        device = snapshot.devices[device_name]
        for stanza in device.stanzas:
            node = property_id(device_name, stanza.kind, stanza.name)
            if stanza.kind in ("interface", "bgp-neighbor"):
                nodes.add(node)
            local_defs.add((device_name, stanza.kind, stanza.name))
            if stanza.kind in _GLOBAL_SCOPE_KINDS:
                global_defs.setdefault((stanza.kind, stanza.name), device_name)

    edges: list[Edge] = []
    dangling: list[tuple[str, str, str]] = []
    for device_name, device in snapshot.devices.items():
        for from_node, target_kind, target_name, site in _reference_sites(device):
            if (device_name, target_kind, target_name) in local_defs:
                edges.append(
                    Edge(from_node, property_id(device_name, target_kind, target_name), site)
                )
                continue
            owner = (
                global_defs.get((target_kind, target_name))
                if target_kind in _GLOBAL_SCOPE_KINDS
                else None
            )
            if owner is not None:
                edges.append(
                    Edge(from_node, property_id(owner, target_kind, target_name), site)
                )
            else:
                dangling.append((from_node, target_name, site))

    return ReferenceGraph(
        nodes=frozenset(nodes), edges=tuple(edges), dangling=tuple(dangling)
    )


def blast_radius(graph: ReferenceGraph, node_id: str) -> int:
    """Number of distinct nodes that transitively use ``node_id`` (reverse
    reachability, excluding the node itself)."""
    if node_id not in graph.nodes:
        raise UnknownProperty(node_id)
    reverse: dict[str, set[str]] = {}
    for edge in graph.edges:
        reverse.setdefault(edge.dst, set()).add(edge.src)
    seen: set[str] = set()
    queue = deque(reverse.get(node_id, ()))
    while queue:
        current = queue.popleft()
        if current in seen or current == node_id:
            continue
        seen.add(current)
        queue.extend(reverse.get(current, ()))
    return len(seen)


def dangling_property_ids(graph: ReferenceGraph) -> frozenset[str]:
    """Ids of nodes that hold at least one dangling reference."""
    return frozenset(src for src, _, _ in graph.dangling)
