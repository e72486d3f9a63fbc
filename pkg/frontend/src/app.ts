// Controller: wires user events to the API client and re-renders. One
// query may be in flight per session; the send button is disabled while
// pending, and a failed send keeps the typed question plus a retry button.

import { ApiClient } from "./api";
import { render } from "./render";
import { initialState, type ChatViewState } from "./state";
import type { TraceData } from "./types";

export class ChatApp {
  readonly state: ChatViewState = initialState();

  constructor(
    private readonly api: ApiClient,
    private readonly root: HTMLElement,
  ) {
    root.addEventListener("click", (event) => this.onClick(event));
    root.addEventListener("input", (event) => this.onInput(event));
  }

  async start(): Promise<void> {
    const { session_id } = await this.api.createSession();
    this.state.sessionId = session_id;
    this.render();
  }

  render(): void {
    render(this.state, this.root);
  }

  private onInput(event: Event): void {
    const target = event.target as HTMLInputElement;
    if (target.getAttribute("data-role") === "question") {
      // Track the draft without re-rendering so typing stays uninterrupted.
      this.state.draft = target.value;
    }
  }

  private onClick(event: Event): void {
    const target = (event.target as HTMLElement).closest("[data-action]");
    if (!target) return;
    const action = target.getAttribute("data-action");
    if (action === "send" || action === "retry") {
      void this.send();
    } else if (action === "open-inspector") {
      void this.openInspector(Number(target.getAttribute("data-turn")));
    } else if (action === "close-inspector") {
      this.state.inspector = null;
      this.render();
    } else if (action === "open-passage") {
      void this.openPassage(
        Number(target.getAttribute("data-turn")),
        target.getAttribute("data-chunk") ?? "",
      );
    } else if (action === "close-passage") {
      this.state.passage = null;
      this.render();
    }
  }

  async send(): Promise<void> {
    const question = this.state.draft.trim();
    if (!question || this.state.pending || !this.state.sessionId) return;
    this.state.pending = true;
    this.state.error = null;
    this.render();
    try {
      const response = await this.api.query(this.state.sessionId, question);
      this.state.turns.push({ role: "user", text: question, citations: [], flags: [] });
      this.state.turns.push({
        role: "assistant",
        text: response.answer,
        citations: response.citations,
        flags: response.degradation_flags,
        queryId: response.query_id,
      });
      this.state.draft = "";
    } catch (err) {
      // The typed question stays in the draft; the banner offers a retry.
      this.state.error = `Could not reach the engine (${String(err)}). Your question is kept below.`;
    } finally {
      this.state.pending = false;
      this.render();
    }
  }

  // Inspector data comes only from the trace endpoint, never from a
  // client-side re-retrieval.
  async openInspector(turnIndex: number): Promise<void> {
    const turn = this.state.turns[turnIndex];
    if (!turn || !turn.queryId) return;
    const trace = await this.api.trace(turn.queryId);
    this.state.inspector = { turnIndex, trace };
    this.render();
  }

  async openPassage(turnIndex: number, chunkId: string): Promise<void> {
    const turn = this.state.turns[turnIndex];
    if (!turn || !turn.queryId) return;
    const trace: TraceData = this.state.inspector?.turnIndex === turnIndex
      ? this.state.inspector.trace
      : await this.api.trace(turn.queryId);
    const hit = trace.vector_hits.find((h) => h.chunk_id === chunkId);
    this.state.passage = { chunkId, excerpt: hit ? hit.excerpt : "(passage not in trace)" };
    this.render();
  }
}

export function mount(root: HTMLElement, config?: { baseUrl?: string; bearerToken?: string }): ChatApp {
  const baseUrl =
    config?.baseUrl ??
    (globalThis as { KGRAG_BASE_URL?: string }).KGRAG_BASE_URL ??
    "http://127.0.0.1:8787";
  const app = new ChatApp(new ApiClient({ baseUrl, bearerToken: config?.bearerToken }), root);
  void app.start();
  return app;
}
