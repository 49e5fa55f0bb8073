/** Application shell: agent list, control forms, and live panels.
 *
 * One WebSocket (streams=*) feeds every panel; message handling only
 * folds into panel state (O(1)), and a timer repaints dirty panels. All
 * gateway failures are rendered inline next to the control that caused
 * them.
 */

import { GatewayClient, GatewayError, SocketFactory, SocketLike } from "./gateway.js";
import {
  PanelState,
  attachStream,
  createPanel,
  ingest,
  removeStream,
  setOverride,
} from "./panel.js";
import { renderPanel } from "./render.js";
import type { PanelMode, StreamMessage, VisualizerKind } from "./types.js";
import { VISUALIZER_KINDS } from "./types.js";
import { parseScalar } from "./wire.js";

export interface AppOptions {
  gatewayUrl: string;
  fetchFn?: typeof fetch;
  socketFactory?: SocketFactory;
  renderIntervalMs?: number;
}

interface PanelCard {
  state: PanelState;
  card: HTMLElement;
  body: HTMLElement;
  chips: HTMLElement;
  title: HTMLElement;
}

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function option(value: string, label?: string): HTMLOptionElement {
  const o = document.createElement("option");
  o.value = value;
  o.textContent = label ?? value;
  return o;
}

function describeError(e: unknown): string {
  if (e instanceof GatewayError) return `${e.code}: ${e.message}`;
  return String(e);
}

export class App {
  client: GatewayClient;
  panels = new Map<string, PanelCard>();
  private routes = new Map<string, Set<string>>(); // gstream_id -> panel ids
  private dirty = new Set<string>();
  private socket: SocketLike | null = null;
  private timer: ReturnType<typeof setInterval> | null = null;
  private nextPanel = 1;
  private root: HTMLElement;

  private agentSelects: HTMLSelectElement[] = [];
  private agentsBox!: HTMLElement;
  private agentsStatus!: HTMLElement;
  private panelsBox!: HTMLElement;
  private wsChip!: HTMLElement;
  private queryStatus!: HTMLElement;
  private obsStatus!: HTMLElement;
  private replayStatus!: HTMLElement;

  constructor(root: HTMLElement, opts: AppOptions) {
    this.root = root;
    this.client = new GatewayClient(opts.gatewayUrl, {
      fetchFn: opts.fetchFn,
      socketFactory: opts.socketFactory,
    });
    this.buildShell(opts.gatewayUrl);
    this.timer = setInterval(() => this.renderNow(), opts.renderIntervalMs ?? 100);
  }

  async init(): Promise<void> {
    await this.refreshAgents();
    this.socket = this.client.openSocket(
      "*",
      (msg) => this.onMessage(msg),
      (state) => {
        this.wsChip.textContent = state === "open" ? "live" : "disconnected";
        this.wsChip.className = `lw-ws lw-ws-${state}`;
      },
    );
  }

  destroy(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
    this.socket?.close();
  }

  // --- shell -------------------------------------------------------------

  private buildShell(gatewayUrl: string): void {
    this.root.textContent = "";
    const app = el("div", "lw-app");

    const header = el("header", "lw-header");
    header.appendChild(el("h1", "lw-title", "livewatch"));
    const gw = el("span", "lw-gateway", gatewayUrl);
    header.appendChild(gw);
    this.wsChip = el("span", "lw-ws", "connecting");
    header.appendChild(this.wsChip);
    app.appendChild(header);

    const agentsSection = el("section", "lw-agents-section");
    const agentsHead = el("div", "lw-section-head", "agents");
    const refresh = el("button", "lw-agents-refresh", "refresh") as HTMLButtonElement;
    refresh.type = "button";
    refresh.addEventListener("click", () => {
      void this.refreshAgents();
    });
    agentsHead.appendChild(refresh);
    agentsSection.appendChild(agentsHead);
    this.agentsBox = el("div", "lw-agents");
    agentsSection.appendChild(this.agentsBox);
    this.agentsStatus = el("div", "lw-inline-status lw-agents-status");
    agentsSection.appendChild(this.agentsStatus);
    app.appendChild(agentsSection);

    app.appendChild(this.buildQueryForm());
    app.appendChild(this.buildObservableForm());
    app.appendChild(this.buildReplayForm());

    this.panelsBox = el("section", "lw-panels");
    app.appendChild(this.panelsBox);
    this.root.appendChild(app);
  }

  private agentSelect(className: string): HTMLSelectElement {
    const select = document.createElement("select");
    select.className = className;
    this.agentSelects.push(select);
    return select;
  }

  private buildQueryForm(): HTMLElement {
    const form = el("form", "lw-query-form") as HTMLFormElement;
    form.appendChild(this.agentSelect("lw-query-agent"));
    const event = el("input", "lw-query-event") as HTMLInputElement;
    event.placeholder = "event (e.g. batch)";
    form.appendChild(event);
    const query = el("input", "lw-query-text") as HTMLInputElement;
    query.placeholder = "query (e.g. reduce(avg, b -> b.loss))";
    form.appendChild(query);
    const windowArg = el("input", "lw-query-window") as HTMLInputElement;
    windowArg.placeholder = "window (optional)";
    form.appendChild(windowArg);
    const mode = document.createElement("select");
    mode.className = "lw-query-mode";
    mode.appendChild(option("append"));
    mode.appendChild(option("frame"));
    form.appendChild(mode);
    const submit = el("button", "lw-query-submit", "watch") as HTMLButtonElement;
    submit.type = "submit";
    form.appendChild(submit);
    this.queryStatus = el("div", "lw-inline-status lw-query-status");
    form.appendChild(this.queryStatus);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.submitQuery(
        (form.querySelector(".lw-query-agent") as HTMLSelectElement).value,
        event.value.trim(),
        query.value.trim(),
        windowArg.value.trim() || undefined,
        mode.value as PanelMode,
      );
    });
    return form;
  }

  private buildObservableForm(): HTMLElement {
    const form = el("form", "lw-observable-form") as HTMLFormElement;
    form.appendChild(this.agentSelect("lw-obs-agent"));
    const name = el("input", "lw-obs-name") as HTMLInputElement;
    name.placeholder = "observable (e.g. lr)";
    form.appendChild(name);
    const value = el("input", "lw-obs-value") as HTMLInputElement;
    value.placeholder = "value (e.g. 0.001)";
    form.appendChild(value);
    const atEvent = el("input", "lw-obs-at-event") as HTMLInputElement;
    atEvent.placeholder = "at event (optional)";
    form.appendChild(atEvent);
    const submit = el("button", "lw-obs-submit", "set") as HTMLButtonElement;
    submit.type = "submit";
    form.appendChild(submit);
    this.obsStatus = el("div", "lw-inline-status lw-obs-status");
    form.appendChild(this.obsStatus);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.submitObservable(
        (form.querySelector(".lw-obs-agent") as HTMLSelectElement).value,
        name.value.trim(),
        value.value,
        atEvent.value.trim() || undefined,
      );
    });
    return form;
  }

  private buildReplayForm(): HTMLElement {
    const form = el("form", "lw-replay-form") as HTMLFormElement;
    const path = el("input", "lw-replay-path") as HTMLInputElement;
    path.placeholder = "recording path on the gateway host";
    form.appendChild(path);
    const speed = el("input", "lw-replay-speed") as HTMLInputElement;
    speed.value = "1";
    form.appendChild(speed);
    const submit = el("button", "lw-replay-submit", "replay") as HTMLButtonElement;
    submit.type = "submit";
    form.appendChild(submit);
    this.replayStatus = el("div", "lw-inline-status lw-replay-status");
    form.appendChild(this.replayStatus);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.submitReplay(path.value.trim(), speed.value.trim());
    });
    return form;
  }

  // --- agents ------------------------------------------------------------

  async refreshAgents(): Promise<void> {
    this.agentsStatus.textContent = "";
    let agents;
    try {
      agents = await this.client.agents();
    } catch (e) {
      this.agentsStatus.textContent = describeError(e);
      return;
    }
    this.agentsBox.textContent = "";
    for (const select of this.agentSelects) {
      const chosen = select.value;
      select.textContent = "";
      for (const a of agents) select.appendChild(option(a.agent_id));
      if (agents.some((a) => a.agent_id === chosen)) select.value = chosen;
    }
    for (const a of agents) {
      const row = el("div", "lw-agent");
      row.dataset.agentId = a.agent_id;
      row.appendChild(el("span", "lw-agent-id", a.agent_id));
      row.appendChild(el("span", "lw-agent-address", a.address));
      row.appendChild(el("span", `lw-agent-state lw-agent-${a.state}`, a.state));
      const stop = el("button", "lw-stop", "stop") as HTMLButtonElement;
      stop.type = "button";
      stop.addEventListener("click", () => {
        void this.requestStop(a.agent_id);
      });
      row.appendChild(stop);
      this.agentsBox.appendChild(row);
    }
  }

  private async requestStop(agentId: string): Promise<void> {
    this.agentsStatus.textContent = "";
    try {
      await this.client.requestStop(agentId);
      this.agentsStatus.textContent = `stop requested for ${agentId}`;
    } catch (e) {
      this.agentsStatus.textContent = describeError(e);
    }
  }

  // --- control actions -----------------------------------------------------

  async submitQuery(
    agentId: string,
    event: string,
    query: string,
    windowArg: string | undefined,
    mode: PanelMode,
  ): Promise<void> {
    this.queryStatus.textContent = "";
    try {
      const gid = await this.client.createStream({
        agent_id: agentId,
        event,
        query,
        ...(windowArg ? { window: windowArg } : {}),
      });
      this.addPanel(`${event}: ${query}`, [gid], mode);
      this.queryStatus.textContent = `streaming as ${gid}`;
    } catch (e) {
      this.queryStatus.textContent = describeError(e);
    }
  }

  async submitObservable(
    agentId: string,
    name: string,
    rawValue: string,
    atEvent?: string,
  ): Promise<void> {
    this.obsStatus.textContent = "";
    try {
      await this.client.setObservable(agentId, name, parseScalar(rawValue), atEvent);
      this.obsStatus.textContent = `set ${name}`;
    } catch (e) {
      this.obsStatus.textContent = describeError(e);
    }
  }

  async submitReplay(path: string, speedRaw: string): Promise<void> {
    this.replayStatus.textContent = "";
    const speed = speedRaw === "max" ? "max" : Number(speedRaw);
    try {
      const r = await this.client.startReplay(path, speed as number | "max");
      this.addPanel(`replay ${path}`, [r.gstream_id], "append");
      this.replayStatus.textContent = `replaying as ${r.gstream_id}`;
    } catch (e) {
      this.replayStatus.textContent = describeError(e);
    }
  }

  // --- panels --------------------------------------------------------------

  addPanel(title: string, gstreamIds: string[], mode: PanelMode): PanelState {
    const panelId = `p${this.nextPanel++}`;
    const state = createPanel(panelId, mode);

    const card = el("div", "lw-panel");
    card.dataset.panelId = panelId;
    const head = el("div", "lw-panel-head");
    const titleEl = el("span", "lw-panel-title", title);
    head.appendChild(titleEl);

    const kindSelect = document.createElement("select");
    kindSelect.className = "lw-kind-select";
    kindSelect.appendChild(option("", "auto"));
    for (const k of VISUALIZER_KINDS) kindSelect.appendChild(option(k));
    kindSelect.addEventListener("change", () => {
      setOverride(state, (kindSelect.value || null) as VisualizerKind | null);
      this.dirty.add(panelId);
    });
    head.appendChild(kindSelect);

    const attachInput = el("input", "lw-attach-gid") as HTMLInputElement;
    attachInput.placeholder = "overlay gstream id";
    head.appendChild(attachInput);
    const attachBtn = el("button", "lw-attach", "attach") as HTMLButtonElement;
    attachBtn.type = "button";
    attachBtn.addEventListener("click", () => {
      const gid = attachInput.value.trim();
      if (gid) {
        this.attachToPanel(panelId, gid);
        attachInput.value = "";
      }
    });
    head.appendChild(attachBtn);

    const close = el("button", "lw-panel-close", "close") as HTMLButtonElement;
    close.type = "button";
    close.addEventListener("click", () => {
      void this.closePanel(panelId);
    });
    head.appendChild(close);
    card.appendChild(head);

    const chips = el("div", "lw-panel-chips");
    card.appendChild(chips);
    const body = el("div", "lw-panel-body-host");
    card.appendChild(body);
    this.panelsBox.appendChild(card);

    this.panels.set(panelId, { state, card, body, chips, title: titleEl });
    for (const gid of gstreamIds) this.attachToPanel(panelId, gid);
    this.dirty.add(panelId);
    return state;
  }

  attachToPanel(panelId: string, gstreamId: string): void {
    const entry = this.panels.get(panelId);
    if (!entry) return;
    attachStream(entry.state, gstreamId);
    let set = this.routes.get(gstreamId);
    if (!set) {
      set = new Set();
      this.routes.set(gstreamId, set);
    }
    set.add(panelId);
    this.renderChips(entry);
    this.dirty.add(panelId);
  }

  detachFromPanel(panelId: string, gstreamId: string): void {
    const entry = this.panels.get(panelId);
    if (!entry) return;
    removeStream(entry.state, gstreamId);
    this.routes.get(gstreamId)?.delete(panelId);
    this.renderChips(entry);
    this.dirty.add(panelId);
  }

  private renderChips(entry: PanelCard): void {
    entry.chips.textContent = "";
    for (const s of entry.state.series) {
      const chip = el("span", "lw-series-chip", s.gstreamId);
      const remove = el("button", "lw-series-remove", "x") as HTMLButtonElement;
      remove.type = "button";
      remove.dataset.gid = s.gstreamId;
      remove.addEventListener("click", () => {
        this.detachFromPanel(entry.state.panelId, s.gstreamId);
      });
      chip.appendChild(remove);
      entry.chips.appendChild(chip);
    }
  }

  private async closePanel(panelId: string): Promise<void> {
    const entry = this.panels.get(panelId);
    if (!entry) return;
    for (const s of entry.state.series) {
      this.routes.get(s.gstreamId)?.delete(panelId);
      if (!s.closed && !s.gstreamId.startsWith("replay:")) {
        try {
          await this.client.deleteStream(s.gstreamId);
        } catch {
          // the stream may already be gone; closing the panel still works
        }
      }
    }
    entry.card.remove();
    this.panels.delete(panelId);
  }

  // --- message flow ---------------------------------------------------------

  private onMessage(msg: StreamMessage): void {
    const gid = msg.gstream_id ?? "";
    const wanting = this.routes.get(gid);
    if (!wanting) return;
    for (const panelId of wanting) {
      const entry = this.panels.get(panelId);
      if (!entry) continue;
      ingest(entry.state, msg);
      this.dirty.add(panelId);
    }
  }

  /** Repaint dirty panels immediately (the interval calls this too). */
  renderNow(): void {
    for (const panelId of this.dirty) {
      const entry = this.panels.get(panelId);
      if (entry) renderPanel(entry.body, entry.state);
    }
    this.dirty.clear();
  }
}

export function createApp(root: HTMLElement, opts: AppOptions): App {
  return new App(root, opts);
}
