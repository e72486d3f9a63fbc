// DOM rendering. No state lives in the DOM: every render rebuilds the view
// from ChatViewState, and interactive elements carry data-action attributes
// handled by one delegated listener in app.ts.

import type { ChatViewState, TurnView } from "./state";

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderBanner(state: ChatViewState): HTMLElement | null {
  if (state.error) {
    const banner = el("div", "banner banner-error");
    banner.appendChild(el("span", "banner-text", state.error));
    const retry = el("button", "retry-button", "Retry");
    retry.setAttribute("data-action", "retry");
    banner.appendChild(retry);
    return banner;
  }
  const lastAssistant = [...state.turns].reverse().find((t) => t.role === "assistant");
  if (lastAssistant && lastAssistant.flags.length > 0) {
    return el(
      "div",
      "banner banner-degraded",
      `Degraded answer: ${lastAssistant.flags.join(", ")}`,
    );
  }
  return null;
}

function renderTurn(turn: TurnView, index: number): HTMLElement {
  const bubble = el("div", `turn turn-${turn.role}`);
  bubble.setAttribute("data-turn", String(index));
  bubble.appendChild(el("div", "turn-text", turn.text));
  if (turn.role === "assistant") {
    const row = el("div", "turn-meta");
    for (const chunkId of turn.citations) {
      const chip = el("button", "citation-chip", chunkId);
      chip.setAttribute("data-action", "open-passage");
      chip.setAttribute("data-chunk", chunkId);
      chip.setAttribute("data-turn", String(index));
      row.appendChild(chip);
    }
    const why = el("button", "why-button", "why");
    why.setAttribute("data-action", "open-inspector");
    why.setAttribute("data-turn", String(index));
    row.appendChild(why);
    bubble.appendChild(row);
  }
  return bubble;
}

function renderInspector(state: ChatViewState): HTMLElement | null {
  if (!state.inspector) return null;
  const { trace } = state.inspector;
  const panel = el("aside", "inspector");
  panel.appendChild(el("h2", "inspector-title", "Why this answer"));

  const paths = el("div", "inspector-paths");
  paths.appendChild(el("h3", undefined, "Concept paths"));
  for (const path of trace.concept_paths) {
    paths.appendChild(el("div", "breadcrumb", path));
  }
  panel.appendChild(paths);

  const subs = el("div", "inspector-subqueries");
  subs.appendChild(el("h3", undefined, "Sub-queries"));
  for (const sq of trace.sub_queries) {
    const block = el("div", "subquery");
    block.appendChild(el("div", "subquery-text", sq.sub_query));
    for (const [conceptId, score] of sq.matched_concepts) {
      block.appendChild(el("div", "matched-concept", `${conceptId} (${score.toFixed(3)})`));
    }
    if (sq.instance_entities.length > 0) {
      block.appendChild(el("div", "entities", sq.instance_entities.join(", ")));
    }
    subs.appendChild(block);
  }
  panel.appendChild(subs);

  const hits = el("div", "inspector-hits");
  hits.appendChild(el("h3", undefined, "Passages"));
  for (const hit of trace.vector_hits) {
    hits.appendChild(el("div", "hit", `${hit.chunk_id} — ${hit.score.toFixed(3)}`));
  }
  panel.appendChild(hits);

  const close = el("button", "close-button", "Close");
  close.setAttribute("data-action", "close-inspector");
  panel.appendChild(close);
  return panel;
}

function renderPassage(state: ChatViewState): HTMLElement | null {
  if (!state.passage) return null;
  const panel = el("aside", "passage");
  panel.appendChild(el("h2", "passage-title", state.passage.chunkId));
  panel.appendChild(el("pre", "passage-text", state.passage.excerpt));
  const close = el("button", "close-button", "Close");
  close.setAttribute("data-action", "close-passage");
  panel.appendChild(close);
  return panel;
}

export function render(state: ChatViewState, root: HTMLElement): void {
  root.textContent = "";
  const app = el("div", "chat-app");

  const banner = renderBanner(state);
  if (banner) app.appendChild(banner);

  const messages = el("main", "messages");
  state.turns.forEach((turn, index) => messages.appendChild(renderTurn(turn, index)));
  if (state.pending) {
    messages.appendChild(el("div", "turn turn-pending", "…"));
  }
  app.appendChild(messages);

  const inspector = renderInspector(state);
  if (inspector) app.appendChild(inspector);
  const passage = renderPassage(state);
  if (passage) app.appendChild(passage);

  const form = el("footer", "composer");
  const input = el("input", "question-input") as HTMLInputElement;
  input.setAttribute("type", "text");
  input.setAttribute("placeholder", "Ask the handbook…");
  input.value = state.draft;
  input.setAttribute("data-role", "question");
  const send = el("button", "send-button", "Send") as HTMLButtonElement;
  send.setAttribute("data-action", "send");
  send.disabled = state.pending;
  form.appendChild(input);
  form.appendChild(send);
  app.appendChild(form);

  root.appendChild(app);
}
