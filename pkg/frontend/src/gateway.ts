/** Thin client for the gateway HTTP + WebSocket API. fetch and the
 * WebSocket constructor are injectable so tests can run outside a
 * browser against a real gateway. */

import type { AgentInfo, StreamMessage, Value } from "./types.js";
import { decodeValue, encodeValue, wsUrlFor } from "./wire.js";

export class GatewayError extends Error {
  code: string;
  status: number;

  constructor(status: number, code: string, message: string) {
    super(message || code);
    this.code = code;
    this.status = status;
  }
}

export interface SocketLike {
  close(): void;
  addEventListener(type: string, listener: (ev: any) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface GatewayOptions {
  fetchFn?: typeof fetch;
  socketFactory?: SocketFactory;
}

export class GatewayClient {
  baseUrl: string;
  private fetchFn: typeof fetch;
  private socketFactory: SocketFactory;

  constructor(baseUrl: string, opts: GatewayOptions = {}) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = opts.fetchFn ?? fetch.bind(globalThis);
    this.socketFactory =
      opts.socketFactory ?? ((url) => new WebSocket(url) as unknown as SocketLike);
  }

  private async request(method: string, path: string, body?: unknown): Promise<any> {
    let res: Response;
    try {
      res = await this.fetchFn(this.baseUrl + path, {
        method,
        headers: body === undefined ? {} : { "content-type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (e) {
      throw new GatewayError(0, "unreachable", `gateway unreachable: ${e}`);
    }
    let parsed: any = null;
    try {
      parsed = await res.json();
    } catch {
      // non-JSON body; fall through with null
    }
    if (!res.ok) {
      const code = parsed?.code ?? `http_${res.status}`;
      const message = parsed?.message ?? res.statusText;
      throw new GatewayError(res.status, code, message);
    }
    return parsed;
  }

  async agents(): Promise<AgentInfo[]> {
    const r = await this.request("GET", "/agents");
    return r.agents as AgentInfo[];
  }

  async addAgent(address: string): Promise<{ agent_id: string; state: string }> {
    return this.request("POST", "/agents", { address });
  }

  async events(agentId: string): Promise<{ events: string[]; observables: string[] }> {
    return this.request("GET", `/agents/${encodeURIComponent(agentId)}/events`);
  }

  async createStream(req: {
    agent_id: string;
    event: string;
    query: string;
    window?: string;
  }): Promise<string> {
    const r = await this.request("POST", "/streams", req);
    return r.gstream_id as string;
  }

  async deleteStream(gstreamId: string): Promise<void> {
    await this.request("DELETE", `/streams/${encodeURIComponent(gstreamId)}`);
  }

  async setObservable(
    agentId: string,
    name: string,
    value: Value,
    atEvent?: string,
  ): Promise<void> {
    const body: Record<string, unknown> = {
      agent_id: agentId,
      name,
      value: encodeValue(value),
    };
    if (atEvent) body.at_event = atEvent;
    await this.request("POST", "/observables", body);
  }

  async requestStop(agentId: string): Promise<void> {
    await this.setObservable(agentId, "stop_requested", true);
  }

  async startReplay(path: string, speed: number | "max"): Promise<{
    agent_id: string;
    gstream_id: string;
  }> {
    return this.request("POST", "/replays", { path, speed });
  }

  /** One socket for the whole app; messages arrive decoded. */
  openSocket(
    streams: "*" | string[],
    onMessage: (msg: StreamMessage) => void,
    onState?: (state: "open" | "closed") => void,
  ): SocketLike {
    const wanted = streams === "*" ? "*" : streams.join(",");
    const sock = this.socketFactory(wsUrlFor(this.baseUrl, wanted));
    sock.addEventListener("open", () => onState?.("open"));
    sock.addEventListener("close", () => onState?.("closed"));
    sock.addEventListener("message", (ev: { data: unknown }) => {
      let msg: StreamMessage;
      try {
        msg = JSON.parse(String(ev.data)) as StreamMessage;
      } catch {
        return; // not ours to crash the loop over
      }
      if ("value" in msg) {
        msg.value = decodeValue(msg.value ?? null);
      }
      onMessage(msg);
    });
    return sock;
  }
}
