/**
 * render.ts - state to DOM, one pass, no retained widgets.
 *
 * Rendering is a pure function of the store state into innerHTML, with
 * event wiring done by delegation in main.ts. The findings table preserves
 * the exact order the service returned; there is deliberately no
 * client-side sort anywhere in this file.
 */

import { Finding, FindingDetail, Metrics, SignatureReportRow } from "./api.js";
import { renderSankey } from "./sankey.js";
import { AppState } from "./store.js";

function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function score(finding: Finding, rank: "outlier" | "severity"): string {
  if (rank === "severity" && finding.severity !== null) {
    return finding.severity.toFixed(3);
  }
  return finding.outlier_score >= 1e9 ? "ceiling" : finding.outlier_score.toFixed(3);
}

function findingRow(finding: Finding, rank: "outlier" | "severity"): string {
  const sig = finding.violated_signature ?? "";
  return (
    `<tr data-testid="finding-row" data-property="${esc(finding.property_id)}"` +
    ` data-signature="${esc(sig)}">` +
    `<td class="rank">${finding.rank ?? ""}</td>` +
    `<td class="pid"><a href="#" data-action="select">${esc(finding.property_id)}</a></td>` +
    `<td>${esc(finding.problem_type)}</td>` +
    `<td class="score">${score(finding, rank)}</td>` +
    `<td><button data-action="suppress" ${sig ? "" : "disabled"}>suppress</button></td>` +
    `</tr>`
  );
}

function findingsPanel(state: AppState): string {
  const page = state.page;
  if (!page) return '<p class="empty">loading...</p>';
  const rows = page.findings.map((f) => findingRow(f, state.rank)).join("");
  const body =
    page.total === 0
      ? '<p class="empty" data-testid="no-findings">no findings</p>'
      : page.findings.length === 0
        ? '<p class="empty" data-testid="empty-page">nothing on this page</p>'
        : `<table><thead><tr><th>#</th><th>property</th><th>problem</th>` +
          `<th>${state.rank}</th><th></th></tr></thead><tbody>${rows}</tbody></table>`;
  const last = page.offset + page.findings.length;
  return (
    `<div class="panel-head"><h2>findings</h2>` +
    `<span data-testid="finding-total">${page.total} total</span>` +
    `<label><input type="radio" name="rank" value="outlier"` +
    `${state.rank === "outlier" ? " checked" : ""}> outlier</label>` +
    `<label><input type="radio" name="rank" value="severity"` +
    `${state.rank === "severity" ? " checked" : ""}> severity</label>` +
    `</div>` +
    body +
    `<div class="pager">` +
    `<button data-action="prev" ${page.offset === 0 ? "disabled" : ""}>prev</button>` +
    `<span>${page.total === 0 ? 0 : page.offset + 1}–${last}</span>` +
    `<button data-action="next" ${last >= page.total ? "disabled" : ""}>next</button>` +
    `</div>`
  );
}

function detailPanel(detail: FindingDetail | null): string {
  if (!detail) return '<p class="empty">select a finding</p>';
  const f = detail.finding;
  const features = f.deviant_features
    .map(
      ([name, observed, expected]) =>
        `<tr><td>${esc(name)}</td><td>${esc(observed)}</td><td>${esc(expected)}</td></tr>`,
    )
    .join("");
  const p = f.provenance;
  return (
    `<h2>${esc(f.property_id)}</h2>` +
    `<p>${esc(f.problem_type)} · signature ${esc(f.violated_signature ?? "none")}` +
    ` · threshold ${f.threshold}</p>` +
    `<table><thead><tr><th>feature</th><th>observed</th><th>expected</th></tr></thead>` +
    `<tbody>${features}</tbody></table>` +
    `<p class="prov">${esc(p.source_path)} lines ${p.source_lines[0]}–${p.source_lines[1]}</p>` +
    `<pre data-testid="raw-text">${esc(p.raw_text)}</pre>`
  );
}

function signatureRow(row: SignatureReportRow): string {
  return (
    `<tr data-testid="signature-row" data-signature="${esc(row.signature_id)}">` +
    `<td>${esc(row.signature_id)}</td><td>${esc(row.kind)}</td>` +
    `<td data-testid="member-count">${row.member_count}</td>` +
    `<td data-testid="sig-threshold">${row.threshold}</td>` +
    `<td>${row.whitelist_size}</td><td>${row.suppressed_count}</td>` +
    `<td>${row.top_deviant_features.map(esc).join(", ")}</td>` +
    `<td><input data-field="threshold" type="number" step="0.1" min="0.1"` +
    ` placeholder="new θ">` +
    `<button data-action="adjust">set</button></td>` +
    `<td><input data-field="feature" placeholder="feature">` +
    `<input data-field="value" placeholder="value">` +
    `<button data-action="whitelist">allow</button></td>` +
    `</tr>`
  );
}

function signaturesPanel(state: AppState): string {
  if (!state.signatures) return "";
  const rows = state.signatures.report.map(signatureRow).join("");
  return (
    `<h2>signatures</h2>` +
    `<table><thead><tr><th>id</th><th>kind</th><th>members</th><th>θ</th>` +
    `<th>whitelisted</th><th>suppressed</th><th>loudest features</th>` +
    `<th>adjust θ</th><th>whitelist</th></tr></thead><tbody>${rows}</tbody></table>`
  );
}

function metricsPanel(metrics: Metrics | null): string {
  if (!metrics) return "";
  const fmt = (v: number | null) => (v === null ? "n/a" : v.toFixed(3));
  return (
    `<h2>metrics</h2>` +
    `<p data-testid="metrics">precision <strong>${fmt(metrics.precision)}</strong>` +
    ` · recall <strong>${fmt(metrics.recall)}</strong>` +
    ` · ${metrics.tp} tp / ${metrics.fp} fp / ${metrics.fn} fn</p>`
  );
}

function historyPanel(state: AppState): string {
  if (state.history.length === 0) return "<h2>session history</h2><p class=\"empty\">none yet</p>";
  const items = state.history
    .map((entry) => {
      const a = entry.action as Record<string, unknown>;
      const what =
        a.kind === "suppress_finding"
          ? `suppress ${a.property_id}`
          : a.kind === "adjust_threshold"
            ? `${a.signature_id}: θ → ${a.new_threshold}`
            : `${a.signature_id}: allow ${a.feature}=${a.value}`;
      return `<li data-testid="history-entry">gen ${entry.generation}: ${esc(String(what))}</li>`;
    })
    .join("");
  return `<h2>session history</h2><ol>${items}</ol>`;
}

export function render(root: HTMLElement, state: AppState): void {
  const banner = state.errorBanner
    ? `<div class="banner error" data-testid="error-banner">${esc(state.errorBanner)}</div>`
    : "";
  const stale = state.staleNotice
    ? `<div class="banner stale" data-testid="stale-notice">${esc(state.staleNotice)}</div>`
    : "";
  root.innerHTML =
    `<header><h1>confsig review</h1>` +
    `<span class="gen" data-testid="generation">generation ${state.generation}</span>` +
    `</header>` +
    banner +
    stale +
    `<section id="findings">${findingsPanel(state)}</section>` +
    `<section id="detail">${detailPanel(state.detail)}</section>` +
    `<section id="metrics">${metricsPanel(state.metrics)}</section>` +
    `<section id="sankey"><h2>flow</h2>${state.sankey ? renderSankey(state.sankey) : ""}</section>` +
    `<section id="signatures">${signaturesPanel(state)}</section>` +
    `<section id="history">${historyPanel(state)}</section>`;
  const buttons = root.querySelectorAll("button, input");
  if (state.busy) {
    buttons.forEach((el) => el.setAttribute("disabled", "disabled"));
  }
}
