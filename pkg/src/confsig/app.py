"""Command line entry points and the HTTP service over analysis state.

State is a plain directory, diff-able and replayable:

    configs/<device>.cfg   normalized snapshot copy (self-contained state)
    signatures.json        current signature set (generation G)
    findings.jsonl         findings for generation G, severity-ranked
    retune.jsonl           action log; base set + log replays to generation G
    truth.json             optional labels; enables /api/metrics
    run-manifest.json      config / seed / schema version / generation echo

Everything downstream of the snapshot is a pure function of it, so the
analyze, replay, and serve paths share one derivation routine and their
outputs are byte-identical for identical inputs. The manifest carries no
timestamps for the same reason.

The service holds the whole session in one immutable state object. Readers
grab the current reference; the single mutating endpoint builds a complete
replacement under a lock, persists it, then swaps the reference, so a reader
sees one generation or the next, never a mix.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
from dataclasses import dataclass
from pathlib import Path

from .detectors import (
    DetectorConfig,
    Finding,
    dump_findings,
    finding_to_dict,
    load_findings,
    run_detector,
)
from .encoder import SCHEMA_VERSION, FeatureVector, TokenTable, encode_all
from .errors import ConfsigError, KindMismatch, StaleGeneration, UnknownSignature
from .evalharness import (
    DEFAULT_COMPARISON,
    SCRIPTED_RETUNE,
    Bundle,
    CorpusSpec,
    analysis_bundle,
    build_sankey,
    compare_detectors,
    compute_metrics,
    generate_corpus_texts,
    load_truth,
    render_comparison,
)
from .ingest import NetworkSnapshot, load_snapshot, print_config
from .properties import Property, ReferenceGraph, extract_properties
from .retune import (
    RetuneLog,
    action_from_dict,
    apply_retune,
    dump_log,
    load_log,
    recompute,
    replay,
)
from .severity import RANK_MODES, apply_severities, rank
from .signatures import SignatureSet, dump_set, load_set, signature_report, signature_to_dict

STATE_ENV = "CONFSIG_STATE"
DEFAULT_STATE_DIR = "confsig-state"
MANIFEST_FORMAT = "run-manifest-v1"

_BASELINE_LABELS = {
    "zscore": DetectorConfig(method="zscore"),
    "modified_zscore": DetectorConfig(method="modified_zscore"),
    "gmm": DetectorConfig(method="gmm"),
    "signature": DetectorConfig(method="signature"),
    "signature_retuned": SCRIPTED_RETUNE,
}


# --- state directory ------------------------------------------------------


def _state_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(STATE_ENV) or DEFAULT_STATE_DIR)


def _write(path: Path, text: str) -> None:
    # tmp + rename so a crashed run never leaves a half-written artifact
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_manifest(
    out: Path, command: str, config: dict, seed: int | None, generation: int | None
) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "config": config,
        "seed": seed,
        "schema_version": SCHEMA_VERSION,
        "generation": generation,
    }
    _write(out / "run-manifest.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _ranked_findings(bundle_like: "SessionState | Bundle", sset: SignatureSet) -> list[Finding]:
    findings = recompute(
        bundle_like.properties,
        bundle_like.vectors,
        sset,
        bundle_like.graph,
        bundle_like.table,
    )
    return rank(apply_severities(findings, bundle_like.graph), "severity")


def _persist(
    out: Path,
    command: str,
    snapshot: NetworkSnapshot | None,
    sset: SignatureSet,
    findings: list[Finding],
    config: DetectorConfig,
    log: RetuneLog,
) -> None:
    if snapshot is not None:
        configs = out / "configs"
        configs.mkdir(parents=True, exist_ok=True)
        for name in sorted(snapshot.devices):
            _write(configs / f"{name}.cfg", print_config(snapshot.devices[name]))
    _write(out / "signatures.json", dump_set(sset))
    _write(out / "findings.jsonl", dump_findings(findings, config))
    _write(out / "retune.jsonl", dump_log(log))
    _write_manifest(out, command, config.to_dict(), config.seed, sset.generation)


# --- subcommands ----------------------------------------------------------


def _cmd_analyze(args: argparse.Namespace) -> int:
    config = DetectorConfig(method=args.detector)
    snapshot = load_snapshot(args.snapshot_dir)
    bundle = analysis_bundle(snapshot)
    findings = run_detector(
        config, bundle.properties, bundle.vectors, bundle.sset, bundle.graph, bundle.table
    )
    findings = rank(apply_severities(findings, bundle.graph), "severity")
    out = _state_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = RetuneLog(base_generation=bundle.sset.generation)
    _persist(out, "analyze", snapshot, bundle.sset, findings, config, log)
    if args.truth:
        _write(out / "truth.json", Path(args.truth).read_text(encoding="utf-8"))
    print(f"analyzed {len(snapshot.devices)} devices: {len(findings)} findings, "
          f"{len(bundle.sset.signatures)} signatures -> {out}")
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    spec = CorpusSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    texts, truth = generate_corpus_texts(spec)
    out = Path(args.out)
    configs = out / "configs"
    configs.mkdir(parents=True, exist_ok=True)
    for name in sorted(texts):
        _write(configs / f"{name}.cfg", texts[name])
    _write(out / "truth.json", json.dumps(truth.to_dict(), sort_keys=True, indent=2) + "\n")
    _write_manifest(out, "generate", spec.to_dict(), spec.seed, None)
    print(f"generated {len(texts)} device configs, "
          f"{sum(truth.injected_count.values())} injected problems -> {out}")
    return 0


def _eval_configs(selector: str) -> tuple[tuple[str, object], ...]:
    if selector == "all":
        return DEFAULT_COMPARISON
    picked = []
    for label in selector.split(","):
        label = label.strip()
        if label not in _BASELINE_LABELS:
            raise ValueError(f"unknown detector {label!r}")
        picked.append((label, _BASELINE_LABELS[label]))
    return tuple(picked)


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        configs = _eval_configs(args.detectors)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    snapshot = load_snapshot(args.snapshot)
    truth = load_truth(Path(args.truth).read_text(encoding="utf-8"))
    bundle = analysis_bundle(snapshot)
    rows = compare_detectors(bundle, truth, configs)
    sys.stdout.write(render_comparison(rows))
    out = _state_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "comparison.json",
           json.dumps({"format": "comparison-v1", "rows": rows}, sort_keys=True, indent=2) + "\n")
    _write_manifest(out, "eval", {"detectors": [label for label, _ in configs]},
                    None, bundle.sset.generation)
    return 0


def _cmd_retune_apply(args: argparse.Namespace) -> int:
    state = _state_dir(args.state)
    log = load_log(Path(args.log).read_text(encoding="utf-8"))
    snapshot = load_snapshot(state / "configs")
    stored = load_set((state / "signatures.json").read_text(encoding="utf-8"))
    config, _ = load_findings((state / "findings.jsonl").read_text(encoding="utf-8"))
    # rebuild the base set from the snapshot, then fold the log over it;
    # stored params pin the mining, so base generation is always 0
    bundle = analysis_bundle(snapshot, stored.params)
    final = replay(log, bundle.sset, bundle.vectors, bundle.table)
    findings = _ranked_findings(bundle, final)
    _persist(state, "retune", None, final, findings, config, log)
    print(f"replayed {len(log.actions)} actions -> generation {final.generation}")
    return 0


def _cmd_properties_dump(args: argparse.Namespace) -> int:
    snapshot = load_snapshot(args.snapshot_dir)
    for prop in extract_properties(snapshot):
        # field order is part of the contract; no sort_keys here
        doc = {
            "id": prop.id,
            "kind": prop.kind,
            "device": prop.device,
            "name": prop.name,
            "attributes": prop.attributes,
            "source": [prop.source[0], list(prop.source[1])],
        }
        sys.stdout.write(json.dumps(doc, separators=(",", ":")) + "\n")
    return 0


def _cmd_encode_dump(args: argparse.Namespace) -> int:
    snapshot = load_snapshot(args.snapshot_dir)
    table = TokenTable()
    vectors = encode_all(extract_properties(snapshot), table)
    header = {"format": "vectors-v1", "schema_version": SCHEMA_VERSION}
    sys.stdout.write(json.dumps(header, separators=(",", ":")) + "\n")
    for vector in vectors:
        doc = {
            "property_id": vector.property_id,
            "kind": vector.kind,
            "numeric": list(vector.numeric),
            "categorical": [table.token(t) for t in vector.categorical],
        }
        sys.stdout.write(json.dumps(doc, separators=(",", ":")) + "\n")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    state = _state_dir(args.state)
    _, findings = load_findings((state / "findings.jsonl").read_text(encoding="utf-8"))
    if args.sankey:
        sys.stdout.write(
            json.dumps(build_sankey(findings), sort_keys=True, indent=2) + "\n"
        )
        return 0
    ranked = rank(findings, args.rank)
    header = f"{'rank':>4}  {'severity':>9}  {'score':>10}  {'problem':<26}  property"
    lines = [header, "-" * len(header)]
    for f in ranked:
        lines.append(
            f"{f.rank:>4}  {f.severity:>9.3f}  {f.outlier_score:>10.3f}  "
            f"{f.problem_type:<26}  {f.property_id}"
        )
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    app = create_app(_state_dir(args.state), ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# --- service --------------------------------------------------------------


@dataclass(frozen=True)
class SessionState:
    """One generation's worth of everything the endpoints read."""

    snapshot: NetworkSnapshot
    properties: list[Property]
    graph: ReferenceGraph
    table: TokenTable
    vectors: list[FeatureVector]
    sset: SignatureSet
    findings: list[Finding]
    log: RetuneLog
    config: DetectorConfig
    truth: object | None


def _load_state(state_dir: Path) -> SessionState:
    snapshot = load_snapshot(state_dir / "configs")
    sset = load_set((state_dir / "signatures.json").read_text(encoding="utf-8"))
    config, _ = load_findings((state_dir / "findings.jsonl").read_text(encoding="utf-8"))
    if config.method != "signature":
        raise ConfsigError(
            f"state was analyzed with method {config.method!r}; "
            "the retune service needs signature findings"
        )
    log_path = state_dir / "retune.jsonl"
    log = (
        load_log(log_path.read_text(encoding="utf-8"))
        if log_path.exists()
        else RetuneLog(base_generation=sset.generation)
    )
    if log.base_generation + len(log.actions) != sset.generation:
        raise ConfsigError(
            f"retune log ends at generation {log.base_generation + len(log.actions)} "
            f"but signatures.json is at {sset.generation}"
        )
    bundle = analysis_bundle(snapshot, sset.params)
    findings = _ranked_findings(bundle, sset)
    truth_path = state_dir / "truth.json"
    truth = (
        load_truth(truth_path.read_text(encoding="utf-8"))
        if truth_path.exists()
        else None
    )
    return SessionState(
        snapshot=snapshot,
        properties=bundle.properties,
        graph=bundle.graph,
        table=bundle.table,
        vectors=bundle.vectors,
        sset=sset,
        findings=findings,
        log=log,
        config=config,
        truth=truth,
    )


def create_app(state_dir: str | Path, ui_dir: str | Path | None = None):
    from fastapi import Body, FastAPI, HTTPException
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    state_dir = Path(state_dir)
    app = FastAPI(title="confsig", docs_url=None, redoc_url=None)
    holder = {"state": _load_state(state_dir)}
    write_lock = threading.Lock()

    def _bad_request(request, exc):
        return JSONResponse({"detail": str(exc)}, status_code=400)

    app.add_exception_handler(RequestValidationError, _bad_request)

    @app.get("/api/generation")
    def generation() -> dict:
        return {"generation": holder["state"].sset.generation}

    @app.get("/api/signatures")
    def signatures() -> dict:
        state = holder["state"]
        return {
            "generation": state.sset.generation,
            "report": signature_report(state.sset),
            "signatures": [signature_to_dict(s) for s in state.sset.signatures],
        }

    @app.get("/api/findings")
    def findings(rank: str = "severity", offset: int = 0, limit: int = 100) -> dict:
        if rank not in RANK_MODES:
            raise HTTPException(400, f"rank must be one of {RANK_MODES}")
        if offset < 0:
            raise HTTPException(400, "offset must be >= 0")
        if not 1 <= limit <= 1000:
            raise HTTPException(400, "limit must lie in 1..1000")
        state = holder["state"]
        ranked = state.findings if rank == "severity" else _rerank(state.findings)
        page = ranked[offset : offset + limit]
        return {
            "generation": state.sset.generation,
            "rank": rank,
            "offset": offset,
            "limit": limit,
            "total": len(ranked),
            "findings": [finding_to_dict(f) for f in page],
        }

    @app.get("/api/findings/{property_id:path}")
    def finding_detail(property_id: str) -> dict:
        state = holder["state"]
        match = next(
            (f for f in state.findings if f.property_id == property_id), None
        )
        if match is None:
            raise HTTPException(404, f"no finding for {property_id!r}")
        prop = next(p for p in state.properties if p.id == property_id)
        source_path, (start, end) = prop.source
        device = state.snapshot.devices[prop.device]
        stanza_kind = property_id.split("/", 2)[1]
        stanza = next(
            s for s in device.stanzas if s.kind == stanza_kind and s.name == prop.name
        )
        doc = finding_to_dict(match)
        doc["provenance"] = {
            "device": prop.device,
            "kind": prop.kind,
            "name": prop.name,
            "source_path": source_path,
            "source_lines": [start, end],
            "raw_text": stanza.raw_text,
        }
        return {"generation": state.sset.generation, "finding": doc}

    @app.get("/api/sankey")
    def sankey() -> dict:
        state = holder["state"]
        doc = build_sankey(state.findings)
        doc["generation"] = state.sset.generation
        return doc

    @app.get("/api/metrics")
    def metrics() -> dict:
        state = holder["state"]
        if state.truth is None:
            raise HTTPException(404, "no truth labels loaded for this state")
        result = compute_metrics(state.findings, state.truth)
        return {"generation": state.sset.generation, **result.to_dict()}

    @app.post("/api/retune")
    def retune(action: dict = Body(...)) -> JSONResponse:
        with write_lock:
            state = holder["state"]
            try:
                parsed = action_from_dict(action)
            except (TypeError, ValueError) as exc:
                raise HTTPException(400, str(exc)) from exc
            if parsed.kind == "suppress_finding" and not any(
                p.id == parsed.property_id for p in state.properties
            ):
                raise HTTPException(404, f"unknown property {parsed.property_id!r}")
            try:
                new_set = apply_retune(state.sset, parsed, state.vectors, state.table)
            except StaleGeneration as exc:
                return JSONResponse(
                    {"detail": str(exc), "generation": state.sset.generation},
                    status_code=409,
                )
            except UnknownSignature as exc:
                raise HTTPException(404, str(exc)) from exc
            except (KindMismatch, ValueError) as exc:
                raise HTTPException(400, str(exc)) from exc
            findings = _ranked_findings(state, new_set)
            log = state.log.append(parsed)
            _persist(state_dir, "retune", None, new_set, findings, state.config, log)
            holder["state"] = SessionState(
                snapshot=state.snapshot,
                properties=state.properties,
                graph=state.graph,
                table=state.table,
                vectors=state.vectors,
                sset=new_set,
                findings=findings,
                log=log,
                config=state.config,
                truth=state.truth,
            )
            return JSONResponse({"generation": new_set.generation})

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def _rerank(findings: list[Finding]) -> list[Finding]:
    return rank(list(findings), "outlier")


# --- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confsig",
        description="mine per-role config signatures and flag deviants",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="mine signatures and findings from a snapshot")
    p.add_argument("snapshot_dir")
    p.add_argument("--detector", default="signature",
                   choices=("signature", "zscore", "modified_zscore", "gmm"))
    p.add_argument("--truth", default=None,
                   help="optional truth labels to copy into the state dir")
    p.add_argument("--out", default=None,
                   help=f"state directory (default ${STATE_ENV} or {DEFAULT_STATE_DIR})")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("generate", help="synthesize a labeled corpus")
    p.add_argument("--spec", required=True, help="corpus spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval", help="score detectors against truth labels")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--detectors", default="all",
                   help="'all' or comma-separated detector labels")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p_retune = sub.add_parser("retune", help="retune log operations")
    retune_sub = p_retune.add_subparsers(dest="retune_command", required=True)
    p = retune_sub.add_parser("apply", help="replay an action log over the state dir")
    p.add_argument("--log", required=True)
    p.add_argument("--state", default=None)
    p.set_defaults(func=_cmd_retune_apply)

    p_props = sub.add_parser("properties", help="property extraction utilities")
    props_sub = p_props.add_subparsers(dest="properties_command", required=True)
    p = props_sub.add_parser("dump", help="emit extracted properties as JSON lines")
    p.add_argument("snapshot_dir")
    p.set_defaults(func=_cmd_properties_dump)

    p_enc = sub.add_parser("encode", help="feature encoding utilities")
    enc_sub = p_enc.add_subparsers(dest="encode_command", required=True)
    p = enc_sub.add_parser("dump", help="emit feature vectors as JSON lines")
    p.add_argument("snapshot_dir")
    p.set_defaults(func=_cmd_encode_dump)

    p = sub.add_parser("report", help="print ranked findings or the sankey document")
    p.add_argument("--sankey", action="store_true")
    p.add_argument("--rank", default="severity", choices=RANK_MODES)
    p.add_argument("--state", default=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("serve", help="serve the analysis state over HTTP")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--state", default=None)
    p.add_argument("--ui", default=None, help="directory of built UI assets")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfsigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
