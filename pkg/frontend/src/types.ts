/** Shared domain types. The wire shapes mirror the gateway API verbatim. */

export type Value =
  | null
  | boolean
  | number
  | string
  | Value[]
  | { [key: string]: Value };

export type MessageKind = "item" | "error" | "closed" | "dropped";

/** One frame from the gateway WebSocket (or one replayed file line). */
export interface StreamMessage {
  seq: number;
  t: number;
  kind: MessageKind;
  value?: Value;
  count?: number;
  stream?: string;
  agent_id?: string;
  gstream_id?: string;
}

export interface AgentInfo {
  agent_id: string;
  address: string;
  state: "connected" | "lost";
  events: string[];
  observables: string[];
}

export type VisualizerKind =
  | "line" // scalar over seq
  | "xy-line" // [x, y]
  | "xy-color" // [x, y, c], c drawn as a color ramp
  | "xy-annotated" // two numbers plus a string label
  | "histogram" // {edges, counts}
  | "frame-grid" // list of records, rendered as a table per frame
  | "log"; // catch-all

export const VISUALIZER_KINDS: readonly VisualizerKind[] = [
  "line",
  "xy-line",
  "xy-color",
  "xy-annotated",
  "histogram",
  "frame-grid",
  "log",
];

export type PanelMode = "append" | "frame";
