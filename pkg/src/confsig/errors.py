"""Shared exception types and the diagnostic record used across the toolkit."""

from __future__ import annotations

from dataclasses import dataclass


class ConfsigError(Exception):
    """Base class for every error this package raises deliberately."""


# --- ingest ---------------------------------------------------------------


class MalformedStanza(ConfsigError):
    def __init__(self, line: int, text: str) -> None:
        super().__init__(f"line {line}: cannot parse stanza header: {text!r}")
        self.line = line
        self.text = text


class DuplicateStanzaName(ConfsigError):
    def __init__(self, kind: str, name: str) -> None:
        super().__init__(f"duplicate {kind} stanza named {name!r} on one device")
        self.kind = kind
        self.name = name


class DuplicateDeviceName(ConfsigError):
    def __init__(self, device_name: str, path: str) -> None:
        super().__init__(f"device name {device_name!r} from {path} already taken")
        self.device_name = device_name
        self.path = path


class EmptySnapshot(ConfsigError):
    def __init__(self, directory: str) -> None:
        super().__init__(f"no *.cfg or *.json device files in {directory}")
        self.directory = directory


class IoError(ConfsigError):
    def __init__(self, path: str, reason: str = "") -> None:
        detail = f": {reason}" if reason else ""
        super().__init__(f"cannot read {path}{detail}")
        self.path = path
        self.reason = reason


# --- properties -----------------------------------------------------------


class UnknownProperty(ConfsigError):
    def __init__(self, property_id: str) -> None:
        super().__init__(f"unknown property {property_id!r}")
        self.property_id = property_id


# --- encoder --------------------------------------------------------------


class EncodingOverflow(ConfsigError):
    def __init__(self, feature: str, value: float) -> None:
        super().__init__(f"feature {feature!r} value {value} exceeds 2**32")
        self.feature = feature
        self.value = value


# --- signatures -----------------------------------------------------------


class TooFewProperties(ConfsigError):
    def __init__(self, kind: str, count: int, needed: int) -> None:
        super().__init__(
            f"kind {kind}: {count} vectors, need {needed} to mine signatures"
        )
        self.kind = kind
        self.count = count
        self.needed = needed


class KindNotMined(ConfsigError):
    def __init__(self, kind: str) -> None:
        super().__init__(f"no signatures mined for kind {kind}")
        self.kind = kind


# --- detectors ------------------------------------------------------------


class SeriesTooShort(ConfsigError):
    def __init__(self, length: int) -> None:
        super().__init__(f"series of length {length} is too short to score")
        self.length = length


class DegenerateComponent(ConfsigError):
    def __init__(self, detail: str) -> None:
        super().__init__(detail)


class SchemaMismatch(ConfsigError):
    def __init__(self, expected: int, got: int) -> None:
        super().__init__(f"model fitted on {expected} columns, got {got}")
        self.expected = expected
        self.got = got


class GenerationMismatch(ConfsigError):
    def __init__(self, detail: str) -> None:
        super().__init__(detail)


# --- severity -------------------------------------------------------------


class MissingSeverity(ConfsigError):
    def __init__(self, property_id: str) -> None:
        super().__init__(f"finding {property_id!r} has no severity score")
        self.property_id = property_id


# --- retune ---------------------------------------------------------------


class UnknownSignature(ConfsigError):
    def __init__(self, signature_id: str) -> None:
        super().__init__(f"unknown signature {signature_id!r}")
        self.signature_id = signature_id


class KindMismatch(ConfsigError):
    def __init__(self, a: str, b: str) -> None:
        super().__init__(f"signatures are of different kinds: {a} vs {b}")
        self.a = a
        self.b = b


class StaleGeneration(ConfsigError):
    def __init__(self, expected: int, actual: int) -> None:
        super().__init__(
            f"action built against generation {actual}, set is at {expected}"
        )
        self.expected = expected
        self.actual = actual


class ReplayError(ConfsigError):
    def __init__(self, index: int, cause: Exception) -> None:
        super().__init__(f"replay failed at action {index}: {cause}")
        self.index = index
        self.cause = cause


# --- evalharness ----------------------------------------------------------


class InfeasibleSpec(ConfsigError):
    def __init__(self, detail: str) -> None:
        super().__init__(detail)


@dataclass(frozen=True)
class Diagnostic:
    """One structured message destined for standard error.

    Rendered as ``LEVEL file:line message``; ``code`` is a stable machine
    label (``EmptyDevice``, ``DuplicateConfig``, ...) so tests and tools do
    not have to pattern-match prose.
    """

    level: str
    file: str
    line: int
    message: str
    code: str = ""

    def render(self) -> str:
        return f"{self.level.upper()} {self.file}:{self.line} {self.message}"
