/** DOM renderers, one per visualizer kind. Everything draws into plain
 * SVG/HTML so the same code runs in a browser and under jsdom in tests.
 * Rendering is a pure projection of panel state; it never mutates it. */

import type { PanelState, Point, SeriesState } from "./panel.js";
import { effectiveKind, panelClosed, renderableSeries, visiblePoints } from "./panel.js";
import type { Value, VisualizerKind } from "./types.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const W = 600;
const H = 220;
const PAD = 28;

export const SERIES_COLORS = [
  "#2a7de1",
  "#e1662a",
  "#27a35c",
  "#9441d6",
  "#d63a6c",
  "#777777",
];

function svgEl(tag: string, attrs: Record<string, string | number>): SVGElement {
  const el = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) {
    el.setAttribute(k, String(v));
  }
  return el;
}

function htmlEl(tag: string, className?: string, text?: string): HTMLElement {
  const el = document.createElement(tag);
  if (className) el.className = className;
  if (text !== undefined) el.textContent = text;
  return el;
}

interface Scale {
  lo: number;
  hi: number;
  map(v: number): number;
}

function makeScale(lo: number, hi: number, outLo: number, outHi: number): Scale {
  if (!Number.isFinite(lo) || !Number.isFinite(hi)) {
    lo = 0;
    hi = 1;
  }
  if (lo === hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  const k = (outHi - outLo) / (hi - lo);
  return { lo, hi, map: (v: number) => outLo + (v - lo) * k };
}

function finite(values: number[]): number[] {
  return values.filter((v) => Number.isFinite(v));
}

function color(i: number): string {
  return SERIES_COLORS[i % SERIES_COLORS.length];
}

// --- per-kind drawing ---------------------------------------------------

function numericPoints(series: SeriesState): Point[] {
  return visiblePoints(series).filter((p) => typeof p.value === "number");
}

function drawLine(svg: SVGElement, panel: PanelState): number {
  const series = renderableSeries(panel);
  const allSeq: number[] = [];
  const allVal: number[] = [];
  for (const s of series) {
    for (const p of numericPoints(s)) {
      allSeq.push(p.seq);
      allVal.push(p.value as number);
    }
  }
  if (!allSeq.length) return 0;
  const x = makeScale(Math.min(...allSeq), Math.max(...allSeq), PAD, W - PAD);
  const ys = finite(allVal);
  const y = makeScale(Math.min(...ys), Math.max(...ys), H - PAD, PAD);
  let drawn = 0;
  series.forEach((s, i) => {
    const pts = numericPoints(s);
    if (!pts.length) return;
    const coords = pts
      .map((p) => `${x.map(p.seq).toFixed(1)},${y.map(p.value as number).toFixed(1)}`)
      .join(" ");
    svg.appendChild(
      svgEl("polyline", {
        points: coords,
        fill: "none",
        stroke: color(i),
        "stroke-width": 1.5,
        class: "lw-series",
        "data-gstream": s.gstreamId,
        "data-count": pts.length,
      }),
    );
    drawn += pts.length;
    for (const gap of s.gaps) {
      const gx = x.map(gap.seq);
      svg.appendChild(
        svgEl("line", {
          x1: gx,
          y1: PAD,
          x2: gx,
          y2: H - PAD,
          stroke: "#cc3333",
          "stroke-dasharray": "3,3",
          class: "lw-gap",
        }),
      );
    }
  });
  return drawn;
}

function xyTuple(value: Value): { x: number; y: number; label?: string; c?: number } | null {
  if (!Array.isArray(value)) return null;
  const nums = value.filter((v): v is number => typeof v === "number");
  if (nums.length < 2) return null;
  const label = value.find((v): v is string => typeof v === "string");
  const out: { x: number; y: number; label?: string; c?: number } = {
    x: nums[0],
    y: nums[1],
  };
  if (label !== undefined) out.label = label;
  if (nums.length >= 3) out.c = nums[2];
  return out;
}

function rampColor(v: number, lo: number, hi: number): string {
  const t = hi === lo ? 0.5 : (v - lo) / (hi - lo);
  const hue = 240 - 240 * Math.max(0, Math.min(1, t));
  return `hsl(${hue.toFixed(0)}, 75%, 45%)`;
}

function drawXY(svg: SVGElement, panel: PanelState, kind: VisualizerKind): number {
  const series = renderableSeries(panel);
  const tuples = series.map((s) =>
    visiblePoints(s)
      .map((p) => xyTuple(p.value))
      .filter((t): t is NonNullable<ReturnType<typeof xyTuple>> => t !== null),
  );
  const xs = finite(tuples.flat().map((t) => t.x));
  const ys = finite(tuples.flat().map((t) => t.y));
  if (!xs.length || !ys.length) return 0;
  const x = makeScale(Math.min(...xs), Math.max(...xs), PAD, W - PAD);
  const y = makeScale(Math.min(...ys), Math.max(...ys), H - PAD, PAD);
  const cs = finite(tuples.flat().map((t) => t.c ?? NaN));
  const cLo = cs.length ? Math.min(...cs) : 0;
  const cHi = cs.length ? Math.max(...cs) : 1;
  let drawn = 0;
  tuples.forEach((pts, i) => {
    if (!pts.length) return;
    const sKind = series[i].kind ?? kind;
    if (sKind !== "xy-color") {
      svg.appendChild(
        svgEl("polyline", {
          points: pts.map((p) => `${x.map(p.x).toFixed(1)},${y.map(p.y).toFixed(1)}`).join(" "),
          fill: "none",
          stroke: color(i),
          "stroke-width": 1.5,
          class: "lw-series",
          "data-gstream": series[i].gstreamId,
          "data-count": pts.length,
        }),
      );
    }
    for (const p of pts) {
      if (sKind === "xy-color" && p.c !== undefined) {
        svg.appendChild(
          svgEl("circle", {
            cx: x.map(p.x).toFixed(1),
            cy: y.map(p.y).toFixed(1),
            r: 2.5,
            fill: rampColor(p.c, cLo, cHi),
            class: "lw-point",
          }),
        );
      } else if (p.label !== undefined) {
        svg.appendChild(
          svgEl("circle", {
            cx: x.map(p.x).toFixed(1),
            cy: y.map(p.y).toFixed(1),
            r: 3,
            fill: color(i),
            class: "lw-point",
          }),
        );
        const text = svgEl("text", {
          x: (x.map(p.x) + 5).toFixed(1),
          y: (y.map(p.y) - 5).toFixed(1),
          "font-size": 10,
          class: "lw-annotation",
        });
        text.textContent = p.label;
        svg.appendChild(text);
      }
    }
    drawn += pts.length;
  });
  return drawn;
}

function latestValue(series: SeriesState, mode: string): Value | null {
  if (mode === "frame") return series.frame;
  const pts = series.points;
  return pts.length ? pts[pts.length - 1].value : null;
}

function drawHistogram(svg: SVGElement, panel: PanelState): number {
  const series = renderableSeries(panel);
  let drawn = 0;
  series.forEach((s, i) => {
    const v = latestValue(s, panel.mode);
    if (v === null || typeof v !== "object" || Array.isArray(v)) return;
    const edges = v.edges as number[] | undefined;
    const counts = v.counts as number[] | undefined;
    if (!Array.isArray(edges) || !Array.isArray(counts) || !counts.length) return;
    const x = makeScale(edges[0], edges[edges.length - 1], PAD, W - PAD);
    const y = makeScale(0, Math.max(...counts, 1), H - PAD, PAD);
    counts.forEach((c, bin) => {
      const x0 = x.map(edges[bin]);
      const x1 = x.map(edges[bin + 1] ?? edges[bin] + 1);
      svg.appendChild(
        svgEl("rect", {
          x: x0.toFixed(1),
          y: y.map(c).toFixed(1),
          width: Math.max(x1 - x0 - 1, 1).toFixed(1),
          height: Math.max(H - PAD - y.map(c), 0).toFixed(1),
          fill: color(i),
          "fill-opacity": series.length > 1 ? 0.55 : 0.9,
          class: "lw-bin",
        }),
      );
      drawn += 1;
    });
  });
  return drawn;
}

function renderFrameGrid(host: HTMLElement, panel: PanelState): number {
  let drawn = 0;
  for (const s of renderableSeries(panel)) {
    const v = latestValue(s, panel.mode);
    if (!Array.isArray(v)) continue;
    const rows = v.filter(
      (r): r is { [key: string]: Value } =>
        r !== null && typeof r === "object" && !Array.isArray(r),
    );
    if (!rows.length) continue;
    const columns: string[] = [];
    for (const row of rows) {
      for (const key of Object.keys(row)) {
        if (!columns.includes(key)) columns.push(key);
      }
    }
    const table = htmlEl("table", "lw-grid") as HTMLTableElement;
    const head = table.createTHead().insertRow();
    for (const c of columns) head.appendChild(htmlEl("th", undefined, c));
    const tbody = table.createTBody();
    for (const row of rows) {
      const tr = tbody.insertRow();
      for (const c of columns) {
        tr.insertCell().textContent = c in row ? shortValue(row[c]) : "";
      }
      drawn += 1;
    }
    host.appendChild(table);
  }
  return drawn;
}

function shortValue(v: Value): string {
  if (typeof v === "number") {
    return Number.isInteger(v) ? String(v) : v.toPrecision(5);
  }
  return typeof v === "string" ? v : JSON.stringify(v);
}

function renderLog(host: HTMLElement, panel: PanelState): number {
  const pre = htmlEl("pre", "lw-log");
  const lines: string[] = [];
  for (const s of panel.series) {
    const pts = visiblePoints(s).slice(-30);
    for (const p of pts) {
      lines.push(`${s.gstreamId} #${p.seq} ${JSON.stringify(p.value)}`);
    }
    if (panel.mode === "frame" && s.frame !== null) {
      lines.push(`${s.gstreamId} #${s.frameSeq} ${JSON.stringify(s.frame)}`);
    }
  }
  pre.textContent = lines.join("\n");
  host.appendChild(pre);
  return lines.length;
}

// --- panel body ----------------------------------------------------------

/** Redraw a panel's body into `host`. Returns the number of data points
 * actually drawn (tests and the status line both use it). */
export function renderPanel(host: HTMLElement, panel: PanelState): number {
  host.textContent = "";
  host.classList.add("lw-panel-body");

  const status = htmlEl("div", "lw-status");
  const kind = effectiveKind(panel);
  status.appendChild(htmlEl("span", "lw-kind", kind ?? "waiting for data"));
  if (panel.errorBadge) {
    const badge = htmlEl("span", "lw-badge", "mixed shapes");
    badge.title =
      "some attached streams do not fit this visualizer; showing the compatible subset";
    status.appendChild(badge);
  }
  const droppedTotal = panel.series.reduce((n, s) => n + s.droppedTotal, 0);
  if (droppedTotal > 0) {
    status.appendChild(htmlEl("span", "lw-dropped", `dropped: ${droppedTotal}`));
  }
  if (panelClosed(panel)) {
    status.appendChild(htmlEl("span", "lw-closed", "closed"));
  }
  host.appendChild(status);

  if (panel.errors.length) {
    const strip = htmlEl("div", "lw-error-strip");
    for (const e of panel.errors.slice(-5)) {
      strip.appendChild(htmlEl("div", "lw-error", `#${e.seq} ${e.message}`));
    }
    host.appendChild(strip);
  }

  let drawn = 0;
  if (kind === "frame-grid") {
    drawn = renderFrameGrid(host, panel);
  } else if (kind === "log" || kind === null) {
    drawn = renderLog(host, panel);
  } else {
    const svg = svgEl("svg", {
      viewBox: `0 0 ${W} ${H}`,
      class: "lw-chart",
      role: "img",
    }) as SVGElement;
    if (kind === "line") drawn = drawLine(svg, panel);
    else if (kind === "histogram") drawn = drawHistogram(svg, panel);
    else drawn = drawXY(svg, panel, kind);
    host.appendChild(svg);
  }
  host.dataset.points = String(drawn);
  host.dataset.kind = kind ?? "";
  return drawn;
}
