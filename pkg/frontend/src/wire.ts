/** Value codec and small parsing helpers for talking to a gateway.
 *
 * Non-finite floats cross the wire as the reserved strings "NaN", "Inf"
 * and "-Inf"; decode turns them back into numbers, encode does the
 * reverse. Everything else is plain JSON.
 */

import type { Value } from "./types.js";

const RESERVED: Record<string, number> = {
  NaN: Number.NaN,
  Inf: Number.POSITIVE_INFINITY,
  "-Inf": Number.NEGATIVE_INFINITY,
};

export function decodeValue(v: Value): Value {
  if (typeof v === "string" && v in RESERVED) {
    return RESERVED[v];
  }
  if (Array.isArray(v)) {
    return v.map(decodeValue);
  }
  if (v !== null && typeof v === "object") {
    const out: { [key: string]: Value } = {};
    for (const [k, inner] of Object.entries(v)) {
      out[k] = decodeValue(inner);
    }
    return out;
  }
  return v;
}

export function encodeValue(v: Value): Value {
  if (typeof v === "number" && !Number.isFinite(v)) {
    if (Number.isNaN(v)) return "NaN";
    return v > 0 ? "Inf" : "-Inf";
  }
  if (Array.isArray(v)) {
    return v.map(encodeValue);
  }
  if (v !== null && typeof v === "object") {
    const out: { [key: string]: Value } = {};
    for (const [k, inner] of Object.entries(v)) {
      out[k] = encodeValue(inner);
    }
    return out;
  }
  return v;
}

/** Parse a form field into a scalar: JSON first, bare string otherwise.
 * "0.5" -> 0.5, "true" -> true, "null" -> null, "warm" -> "warm". */
export function parseScalar(text: string): Value {
  const trimmed = text.trim();
  if (trimmed === "") return "";
  try {
    return JSON.parse(trimmed) as Value;
  } catch {
    return trimmed;
  }
}

/** Gateway base URL: the ?gateway= query parameter wins over the fallback.
 * A bare host:port is promoted to http://host:port. */
export function resolveGatewayUrl(search: string, fallback: string): string {
  const params = new URLSearchParams(search);
  let url = params.get("gateway") ?? fallback;
  if (!/^https?:\/\//.test(url)) {
    url = "http://" + url;
  }
  return url.replace(/\/+$/, "");
}

export function wsUrlFor(baseUrl: string, streams: string): string {
  const ws = baseUrl.replace(/^http/, "ws");
  return `${ws}/ws?streams=${encodeURIComponent(streams)}`;
}
