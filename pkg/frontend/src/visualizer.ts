/** Visualizer selection: a fixed, ordered rule table over the shape of the
 * first value a stream produces. Pure; no DOM. */

import type { Value, VisualizerKind } from "./types.js";

function isNumeric(v: Value): v is number {
  return typeof v === "number";
}

function isRecord(v: Value): v is { [key: string]: Value } {
  return v !== null && typeof v === "object" && !Array.isArray(v);
}

function isNumericArray(v: Value): boolean {
  return Array.isArray(v) && v.every(isNumeric);
}

/** First matching rule wins; the last rule matches anything. */
export function selectVisualizer(sample: Value): VisualizerKind {
  if (isNumeric(sample)) {
    return "line";
  }
  if (Array.isArray(sample)) {
    const numbers = sample.filter(isNumeric).length;
    const strings = sample.filter((v) => typeof v === "string").length;
    if (sample.length === 2 && numbers === 2) {
      return "xy-line";
    }
    if (sample.length === 3 && numbers === 3) {
      return "xy-color";
    }
    if (sample.length === 3 && numbers === 2 && strings === 1) {
      return "xy-annotated";
    }
    if (sample.length > 0 && sample.every(isRecord)) {
      return "frame-grid";
    }
    return "log";
  }
  if (isRecord(sample)) {
    const keys = Object.keys(sample).sort();
    if (
      keys.length === 2 &&
      keys[0] === "counts" &&
      keys[1] === "edges" &&
      isNumericArray(sample.counts) &&
      isNumericArray(sample.edges)
    ) {
      return "histogram";
    }
  }
  return "log";
}

/** Kinds a visualizer can overlay besides its own. The 2D family mixes
 * freely (an annotated run over a plain trajectory is the point of it);
 * everything else accepts only streams of its own kind. */
const OVERLAYS: Partial<Record<VisualizerKind, readonly VisualizerKind[]>> = {
  "xy-line": ["xy-color", "xy-annotated"],
  "xy-color": ["xy-line", "xy-annotated"],
  "xy-annotated": ["xy-line", "xy-color"],
};

export function compatibleWith(
  panelKind: VisualizerKind,
  streamKind: VisualizerKind,
): boolean {
  if (panelKind === streamKind) return true;
  if (panelKind === "log") return true; // the log view prints anything
  return (OVERLAYS[panelKind] ?? []).includes(streamKind);
}
