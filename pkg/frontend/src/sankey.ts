/**
 * sankey.ts - three-layer flow rendering.
 *
 * Layers: property kind, deviation category, problem type. Band thickness
 * is proportional to link value. The footer states each layer's total,
 * which the flow model guarantees are equal (every finding contributes
 * weight one per layer pair); showing both totals makes a conservation
 * bug visible instead of silent.
 */

import { SankeyDoc, SankeyLink, SankeyNode } from "./api.js";

const WIDTH = 640;
const HEIGHT = 320;
const NODE_WIDTH = 12;
const NODE_GAP = 8;
const LAYER_X = [0, (WIDTH - NODE_WIDTH) / 2, WIDTH - NODE_WIDTH];

interface PlacedNode extends SankeyNode {
  y: number;
  height: number;
  inOffset: number;
  outOffset: number;
}

function layerTotal(links: SankeyLink[], layer: 0 | 1): number {
  const prefix = layer === 0 ? "kind:" : "deviation:";
  return links
    .filter((link) => link.source.startsWith(prefix))
    .reduce((sum, link) => sum + link.value, 0);
}

function place(doc: SankeyDoc): Map<string, PlacedNode> {
  // node size = max(inflow, outflow); middle nodes have both equal
  const inflow = new Map<string, number>();
  const outflow = new Map<string, number>();
  for (const link of doc.links) {
    outflow.set(link.source, (outflow.get(link.source) ?? 0) + link.value);
    inflow.set(link.target, (inflow.get(link.target) ?? 0) + link.value);
  }
  const total = Math.max(1, layerTotal(doc.links, 0));
  const placed = new Map<string, PlacedNode>();
  for (const layer of [0, 1, 2] as const) {
    const nodes = doc.nodes.filter((n) => n.layer === layer);
    const gaps = NODE_GAP * Math.max(0, nodes.length - 1);
    const scale = (HEIGHT - gaps) / total;
    let y = 0;
    for (const node of nodes) {
      const size = Math.max(inflow.get(node.id) ?? 0, outflow.get(node.id) ?? 0);
      const height = Math.max(2, size * scale);
      placed.set(node.id, { ...node, y, height, inOffset: 0, outOffset: 0 });
      y += height + NODE_GAP;
    }
  }
  return placed;
}

function bandPath(
  from: PlacedNode,
  to: PlacedNode,
  thicknessFrom: number,
  thicknessTo: number,
): string {
  const x0 = LAYER_X[from.layer] + NODE_WIDTH;
  const x1 = LAYER_X[to.layer];
  const y0 = from.y + from.outOffset;
  const y1 = to.y + to.inOffset;
  const mid = (x0 + x1) / 2;
  return (
    `M ${x0} ${y0} C ${mid} ${y0}, ${mid} ${y1}, ${x1} ${y1} ` +
    `L ${x1} ${y1 + thicknessTo} C ${mid} ${y1 + thicknessTo}, ` +
    `${mid} ${y0 + thicknessFrom}, ${x0} ${y0 + thicknessFrom} Z`
  );
}

export function renderSankey(doc: SankeyDoc): string {
  if (doc.links.length === 0) {
    return '<p class="empty" data-testid="sankey-empty">no flow to display</p>';
  }
  const placed = place(doc);
  const total = layerTotal(doc.links, 0);
  const scale =
    (HEIGHT -
      NODE_GAP *
        Math.max(0, doc.nodes.filter((n) => n.layer === 0).length - 1)) /
    Math.max(1, total);
  const bands: string[] = [];
  for (const link of doc.links) {
    const from = placed.get(link.source);
    const to = placed.get(link.target);
    if (!from || !to) continue;
    const thickness = link.value * scale;
    bands.push(
      `<path class="band" d="${bandPath(from, to, thickness, thickness)}"` +
        ` data-value="${link.value}"><title>${link.source} → ` +
        `${link.target}: ${link.value}</title></path>`,
    );
    from.outOffset += thickness;
    to.inOffset += thickness;
  }
  const rects = [...placed.values()].map(
    (node) =>
      `<g><rect class="node layer-${node.layer}" x="${LAYER_X[node.layer]}"` +
      ` y="${node.y}" width="${NODE_WIDTH}" height="${node.height}"></rect>` +
      `<text x="${LAYER_X[node.layer] + (node.layer === 2 ? -4 : NODE_WIDTH + 4)}"` +
      ` y="${node.y + node.height / 2 + 4}"` +
      ` text-anchor="${node.layer === 2 ? "end" : "start"}">${node.label}</text></g>`,
  );
  const totals = [layerTotal(doc.links, 0), layerTotal(doc.links, 1)];
  return (
    `<svg viewBox="0 0 ${WIDTH} ${HEIGHT}" preserveAspectRatio="xMidYMid meet">` +
    bands.join("") +
    rects.join("") +
    `</svg>` +
    `<p class="sankey-totals" data-testid="sankey-totals">` +
    `kind→deviation total ${totals[0]}, deviation→problem total ${totals[1]}</p>`
  );
}
