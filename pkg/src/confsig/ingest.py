"""Parse device configuration files into a typed network snapshot.

The accepted line grammar is documented in ``docs/config-grammar.md``; the
equivalent JSON intake format is described by ``docs/snapshot-schema.json``.
Both forms produce the same structures, so everything downstream is agnostic
to which one a device arrived in.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
import re

from .errors import (
    Diagnostic,
    DuplicateDeviceName,
    DuplicateStanzaName,
    EmptySnapshot,
    IoError,
    MalformedStanza,
)

STANZA_KINDS = (
    "acl",
    "route-filter",
    "vrf",
    "routing-policy",
    "interface",
    "bgp-neighbor",
)

# Second token of an entry line is an operator only when it looks like a
# bare keyword; addresses, prefixes, and numbers stay in the value list.
_OPERATOR_RE = re.compile(r"[a-z][a-z-]*\Z")

_COMMENT_PREFIXES = ("!", "#")


@dataclass(frozen=True)
class Entry:
    """One line inside a stanza, split into key / operator / value tokens."""

    key: str
    operator: str
    values: tuple[str, ...]

    def tokens(self) -> tuple[str, ...]:
        if self.operator:
            return (self.key, self.operator) + self.values
        return (self.key,) + self.values


@dataclass(frozen=True)
class Stanza:
    kind: str
    name: str
    entries: tuple[Entry, ...]
    raw_text: str

    def structural_key(self) -> tuple:
        """Identity used by the parse-print-parse fixpoint check."""
        return (
            self.kind,
            self.name,
            tuple((e.key, e.operator, e.values) for e in self.entries),
        )


@dataclass(frozen=True)
class DeviceConfig:
    device_name: str
    stanzas: tuple[Stanza, ...]
    source_path: str
    # (kind, name) -> (start_line, end_line), 1-based inclusive over the
    # original text. Unique per device because duplicate stanza names are
    # rejected at parse time.
    line_index: dict[tuple[str, str], tuple[int, int]] = field(default_factory=dict)

    def structural_key(self) -> tuple:
        return (self.device_name, tuple(s.structural_key() for s in self.stanzas))


@dataclass(frozen=True)
class NetworkSnapshot:
    devices: dict[str, DeviceConfig]
    snapshot_id: str
    ingest_warnings: tuple[Diagnostic, ...]


def _entry_from_tokens(tokens: list[str]) -> Entry:
    if len(tokens) >= 3 and _OPERATOR_RE.fullmatch(tokens[1]):
        return Entry(key=tokens[0], operator=tokens[1], values=tuple(tokens[2:]))
    return Entry(key=tokens[0], operator="", values=tuple(tokens[1:]))


def parse_config(
    text: str,
    device_name: str,
    source_path: str = "<memory>",
    warnings: list[Diagnostic] | None = None,
) -> DeviceConfig:
    """Parse one device's config text.

    Non-indented lines open stanzas (or the ``hostname`` directive); indented
    lines are entries of the open stanza. Unknown stanza kinds are skipped and
    reported into ``warnings`` when a sink list is given. Raises
    ``MalformedStanza`` for unparseable headers or orphan entry lines and
    ``DuplicateStanzaName`` when one device defines two stanzas of the same
    kind and name.
    """
    if not device_name:
        raise ValueError("device_name must be non-empty")
    sink = warnings if warnings is not None else []

    stanzas: list[Stanza] = []
    line_index: dict[tuple[str, str], tuple[int, int]] = {}
    final_name = device_name
    hostname_seen = False

    open_key: tuple[str, str] | None = None
    open_entries: list[Entry] = []
    open_lines: list[str] = []
    open_start = 0
    open_end = 0
    skipping_unknown = False

    def close_open() -> None:
        nonlocal open_key
        if open_key is None:
            return
        kind, name = open_key
        stanzas.append(
            Stanza(
                kind=kind,
                name=name,
                entries=tuple(open_entries),
                raw_text="\n".join(open_lines),
            )
        )
        line_index[open_key] = (open_start, open_end)
        open_key = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith(_COMMENT_PREFIXES):
            continue
        if raw[0] in " \t":
            if skipping_unknown:
                continue
            if open_key is None:
                raise MalformedStanza(lineno, raw)
            open_entries.append(_entry_from_tokens(stripped.split()))
            open_lines.append(raw)
            open_end = lineno
            continue

        # Non-indented: directive or stanza header.
        close_open()
        skipping_unknown = False
        tokens = stripped.split()
        head = tokens[0]
        if head == "hostname":
            if len(tokens) != 2:
                raise MalformedStanza(lineno, raw)
            if hostname_seen:
                sink.append(
                    Diagnostic(
                        level="warning",
                        file=source_path,
                        line=lineno,
                        message="duplicate hostname directive ignored",
                        code="DuplicateHostname",
                    )
                )
            else:
                final_name = tokens[1]
                hostname_seen = True
            continue
        if head not in STANZA_KINDS:
            sink.append(
                Diagnostic(
                    level="warning",
                    file=source_path,
                    line=lineno,
                    message=f"unknown stanza kind {head!r} skipped",
                    code="UnknownStanzaKind",
                )
            )
            skipping_unknown = True
            continue
        if len(tokens) != 2:
            raise MalformedStanza(lineno, raw)
        kind, name = tokens[0], tokens[1]
        if (kind, name) in line_index:
            raise DuplicateStanzaName(kind, name)
        open_key = (kind, name)
        open_entries = []
        open_lines = [raw]
        open_start = lineno
        open_end = lineno

    close_open()
    return DeviceConfig(
        device_name=final_name,
        stanzas=tuple(stanzas),
        source_path=source_path,
        line_index=line_index,
    )


def print_config(device: DeviceConfig) -> str:
    """Serialize a device back to the line grammar (canonical two-space indent)."""
    lines = [f"hostname {device.device_name}", ""]
    for stanza in device.stanzas:
        lines.append(f"{stanza.kind} {stanza.name}")
        for entry in stanza.entries:
            lines.append("  " + " ".join(entry.tokens()))
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def _device_from_json(
    text: str, stem: str, source_path: str, warnings: list[Diagnostic]
) -> DeviceConfig:
    """Build a device from the JSON intake form by round-tripping through the
    line grammar, so both intake paths satisfy identical invariants."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedStanza(exc.lineno, f"invalid JSON device file: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("stanzas", []), list):
        raise MalformedStanza(0, "JSON device file must be an object with a stanza list")
    name = doc.get("device_name", stem)
    lines = [f"hostname {name}", ""]
    for stanza in doc.get("stanzas", []):
        lines.append(f"{stanza.get('kind', '?')} {stanza.get('name', '?')}")
        for entry in stanza.get("entries", []):
            tokens = [entry.get("key", "?")]
            if entry.get("operator"):
                tokens.append(entry["operator"])
            tokens.extend(str(v) for v in entry.get("values", []))
            lines.append("  " + " ".join(tokens))
        lines.append("")
    return parse_config("\n".join(lines), name, source_path, warnings)


def load_snapshot(directory: str | Path) -> NetworkSnapshot:
    """Load every ``*.cfg`` and ``*.json`` device file under ``directory``.

    Device order is lexicographic by filename; the snapshot id is a content
    hash, so re-loading identical files yields an identical snapshot.
    """
    root = Path(directory)
    try:
        candidates = sorted(p for p in root.iterdir() if p.suffix in (".cfg", ".json"))
    except OSError as exc:
        raise IoError(str(root), str(exc)) from exc
    if not candidates:
        raise EmptySnapshot(str(root))

    warnings: list[Diagnostic] = []
    devices: dict[str, DeviceConfig] = {}
    hasher = hashlib.sha256()
    for path in candidates:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IoError(str(path), str(exc)) from exc
        if path.suffix == ".cfg":
            device = parse_config(text, path.stem, str(path), warnings)
        else:
            device = _device_from_json(text, path.stem, str(path), warnings)
        if device.device_name in devices:
            raise DuplicateDeviceName(device.device_name, str(path))
        devices[device.device_name] = device
        hasher.update(device.device_name.encode("utf-8"))
        hasher.update(b"\x00")
        hasher.update(text.encode("utf-8"))
        hasher.update(b"\x00")
    return NetworkSnapshot(
        devices=devices,
        snapshot_id=hasher.hexdigest()[:16],
        ingest_warnings=tuple(warnings),
    )


def validate_snapshot(snapshot: NetworkSnapshot) -> list[Diagnostic]:
    """Structural diagnostics over a loaded snapshot; never mutates it."""
    diags: list[Diagnostic] = []
    for name, device in snapshot.devices.items():
        if not device.stanzas:
            diags.append(
                Diagnostic(
                    level="warning",
                    file=device.source_path,
                    line=0,
                    message=f"device {name} has no stanzas",
                    code="EmptyDevice",
                )
            )
    printed = {name: print_config(dev) for name, dev in snapshot.devices.items()}
    names = sorted(printed)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            # Compare the canonical print minus the hostname line, so two
            # devices with identical bodies are caught as copy-paste twins.
            body_a = printed[a].split("\n", 1)[1]
            body_b = printed[b].split("\n", 1)[1]
            if body_a == body_b and body_a.strip():
                diags.append(
                    Diagnostic(
                        level="info",
                        file=snapshot.devices[a].source_path,
                        line=0,
                        message=f"devices {a} and {b} have byte-identical configs",
                        code="DuplicateConfig",
                    )
                )
    return diags
