/** Panel state and its message fold.
 *
 * A panel's state is a deterministic fold of (initial state, messages):
 * feeding the same message sequence into a fresh panel reproduces the
 * state exactly (the fold mutates in place for O(1) amortized cost per
 * message, but reads nothing except the state and the message).
 */

import type {
  PanelMode,
  StreamMessage,
  Value,
  VisualizerKind,
} from "./types.js";
import { compatibleWith, selectVisualizer } from "./visualizer.js";

export const RING_LIMIT = 10_000;
export const ERROR_STRIP_LIMIT = 100;

export interface Point {
  seq: number;
  t: number;
  value: Value;
}

export interface GapMarker {
  seq: number; // last dropped seq, as reported by the notice
  count: number;
}

export interface SeriesState {
  gstreamId: string;
  kind: VisualizerKind | null; // decided by the first item
  compatible: boolean; // against the panel's effective kind
  points: Point[]; // append mode; bounded, see visiblePoints()
  frame: Value | null; // frame mode: the whole current content
  frameSeq: number | null;
  gaps: GapMarker[];
  droppedTotal: number;
  itemCount: number;
  closed: boolean;
  lastSeq: number | null;
}

export interface ErrorEntry {
  gstreamId: string;
  seq: number;
  message: string;
}

export interface PanelState {
  panelId: string;
  mode: PanelMode;
  autoKind: VisualizerKind | null; // shape of the first item ever seen
  override: VisualizerKind | null; // user choice, persists for the panel
  series: SeriesState[];
  errors: ErrorEntry[]; // inline error strip, most recent last
  errorBadge: boolean; // some shaped stream is incompatible
}

export function createPanel(panelId: string, mode: PanelMode = "append"): PanelState {
  return {
    panelId,
    mode,
    autoKind: null,
    override: null,
    series: [],
    errors: [],
    errorBadge: false,
  };
}

export function attachStream(panel: PanelState, gstreamId: string): SeriesState {
  const existing = panel.series.find((s) => s.gstreamId === gstreamId);
  if (existing) return existing;
  const series: SeriesState = {
    gstreamId,
    kind: null,
    compatible: true,
    points: [],
    frame: null,
    frameSeq: null,
    gaps: [],
    droppedTotal: 0,
    itemCount: 0,
    closed: false,
    lastSeq: null,
  };
  panel.series.push(series);
  return series;
}

/** Remove a stream and exactly its points; other series are untouched. */
export function removeStream(panel: PanelState, gstreamId: string): void {
  panel.series = panel.series.filter((s) => s.gstreamId !== gstreamId);
  panel.errors = panel.errors.filter((e) => e.gstreamId !== gstreamId);
  refreshCompatibility(panel);
}

export function effectiveKind(panel: PanelState): VisualizerKind | null {
  return panel.override ?? panel.autoKind;
}

export function setOverride(panel: PanelState, kind: VisualizerKind | null): void {
  panel.override = kind;
  refreshCompatibility(panel);
}

function refreshCompatibility(panel: PanelState): void {
  const kind = effectiveKind(panel);
  panel.errorBadge = false;
  for (const s of panel.series) {
    s.compatible = kind === null || s.kind === null || compatibleWith(kind, s.kind);
    if (!s.compatible) panel.errorBadge = true;
  }
}

/** Fold one message into the panel. Messages for unattached streams are
 * ignored so one WebSocket can fan out to many panels. */
export function ingest(panel: PanelState, msg: StreamMessage): void {
  const gid = msg.gstream_id ?? msg.stream ?? "";
  const series = panel.series.find((s) => s.gstreamId === gid);
  if (!series) return;
  series.lastSeq = msg.seq;
  if (msg.kind === "item") {
    const value = msg.value ?? null;
    if (series.kind === null) {
      series.kind = selectVisualizer(value);
      if (panel.autoKind === null) panel.autoKind = series.kind;
      refreshCompatibility(panel);
    }
    series.itemCount += 1;
    if (panel.mode === "frame") {
      series.frame = value;
      series.frameSeq = msg.seq;
    } else {
      series.points.push({ seq: msg.seq, t: msg.t, value });
      if (series.points.length >= RING_LIMIT * 2) {
        series.points.splice(0, series.points.length - RING_LIMIT);
      }
    }
  } else if (msg.kind === "error") {
    const message = typeof msg.value === "string" ? msg.value : JSON.stringify(msg.value);
    panel.errors.push({ gstreamId: gid, seq: msg.seq, message });
    if (panel.errors.length > ERROR_STRIP_LIMIT) {
      panel.errors.splice(0, panel.errors.length - ERROR_STRIP_LIMIT);
    }
  } else if (msg.kind === "dropped") {
    series.gaps.push({ seq: msg.seq, count: msg.count ?? 0 });
    series.droppedTotal += msg.count ?? 0;
  } else if (msg.kind === "closed") {
    series.closed = true;
  }
}

/** The last RING_LIMIT appended points of one series. */
export function visiblePoints(series: SeriesState): Point[] {
  if (series.points.length <= RING_LIMIT) return series.points;
  return series.points.slice(-RING_LIMIT);
}

/** Series the current visualizer agrees to draw (the compatible subset). */
export function renderableSeries(panel: PanelState): SeriesState[] {
  return panel.series.filter((s) => s.compatible);
}

export function panelClosed(panel: PanelState): boolean {
  return panel.series.length > 0 && panel.series.every((s) => s.closed);
}
