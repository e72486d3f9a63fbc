// UI contract tests against the recorded-response stub server.

import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api";
import { ChatApp } from "../src/app";
import { makeStubFetch, recordedTrace, type StubOptions } from "./stub";
import type { TraceData } from "../src/types";

const QUESTION_1 = "What flush interval controls write-back of dirty buffer pool pages?";
const QUESTION_2 = "How many cold pages fit in the eviction batch one clock sweep drains?";

function makeApp(options: StubOptions = {}) {
  const root = document.createElement("div");
  document.body.appendChild(root);
  const api = new ApiClient({ baseUrl: "http://stub", fetchImpl: makeStubFetch(options) });
  return { app: new ChatApp(api, root), root };
}

async function typeAndSend(app: ChatApp, root: HTMLElement, question: string) {
  const input = root.querySelector<HTMLInputElement>(".question-input")!;
  input.value = question;
  input.dispatchEvent(new Event("input", { bubbles: true }));
  await app.send();
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("chat flow", () => {
  it("renders the answer bubble with citation chips", async () => {
    const { app, root } = makeApp();
    await app.start();
    await typeAndSend(app, root, QUESTION_1);

    const turns = root.querySelectorAll(".turn");
    expect(turns).toHaveLength(2);
    expect(turns[0].textContent).toContain(QUESTION_1);
    const assistant = root.querySelector(".turn-assistant")!;
    expect(assistant.textContent).toContain("flush_interval = 200");
    const chips = root.querySelectorAll(".citation-chip");
    expect(chips.length).toBeGreaterThanOrEqual(1);
    expect(chips[0].textContent).toBe("manual:s0.0.0:0");
  });

  it("second question reuses the same session id", async () => {
    const log: NonNullable<StubOptions["log"]> = [];
    const { app, root } = makeApp({ log });
    await app.start();
    await typeAndSend(app, root, QUESTION_1);
    await typeAndSend(app, root, QUESTION_2);

    const queryCalls = log.filter((c) => c.path.endsWith("/query"));
    expect(queryCalls).toHaveLength(2);
    expect(queryCalls[0].path).toBe(queryCalls[1].path);
    expect(queryCalls[1].body).toEqual({ question: QUESTION_2 });
    expect(root.querySelectorAll(".turn")).toHaveLength(4);
  });

  it("disables send while a query is pending", async () => {
    const { app, root } = makeApp();
    await app.start();
    const input = root.querySelector<HTMLInputElement>(".question-input")!;
    input.value = QUESTION_1;
    input.dispatchEvent(new Event("input", { bubbles: true }));
    const inFlight = app.send();
    expect(root.querySelector<HTMLButtonElement>(".send-button")!.disabled).toBe(true);
    expect(root.querySelector(".turn-pending")).not.toBeNull();
    await inFlight;
    expect(root.querySelector<HTMLButtonElement>(".send-button")!.disabled).toBe(false);
  });
});

describe("trace inspector", () => {
  it("breadcrumbs equal the trace JSON from the trace endpoint", async () => {
    const { app, root } = makeApp();
    await app.start();
    await typeAndSend(app, root, QUESTION_1);

    root.querySelector<HTMLButtonElement>(".why-button")!.click();
    await new Promise((resolve) => setTimeout(resolve, 0));

    const trace = recordedTrace("qid-1") as TraceData;
    const breadcrumbs = [...root.querySelectorAll(".breadcrumb")].map((n) => n.textContent);
    expect(breadcrumbs).toEqual(trace.concept_paths);
    const hits = [...root.querySelectorAll(".inspector-hits .hit")];
    expect(hits).toHaveLength(trace.vector_hits.length);
    expect(hits[0].textContent).toContain(trace.vector_hits[0].chunk_id);
  });

  it("citation chip opens the passage from the trace", async () => {
    const { app, root } = makeApp();
    await app.start();
    await typeAndSend(app, root, QUESTION_1);

    root.querySelector<HTMLButtonElement>(".citation-chip")!.click();
    await new Promise((resolve) => setTimeout(resolve, 0));

    const trace = recordedTrace("qid-1") as TraceData;
    const expected = trace.vector_hits.find((h) => h.chunk_id === "manual:s0.0.0:0")!;
    expect(root.querySelector(".passage-title")!.textContent).toBe("manual:s0.0.0:0");
    expect(root.querySelector(".passage-text")!.textContent).toBe(expected.excerpt);
  });
});

describe("failure handling", () => {
  it("network failure keeps the question and offers retry", async () => {
    const { app, root } = makeApp({ failOnce: ["POST /sessions/recorded-session/query"] });
    await app.start();
    await typeAndSend(app, root, QUESTION_1);

    expect(root.querySelector(".banner-error")).not.toBeNull();
    expect(root.querySelector<HTMLInputElement>(".question-input")!.value).toBe(QUESTION_1);
    expect(root.querySelectorAll(".turn")).toHaveLength(0);

    root.querySelector<HTMLButtonElement>(".retry-button")!.click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(root.querySelector(".banner-error")).toBeNull();
    expect(root.querySelectorAll(".turn")).toHaveLength(2);
  });
});

describe("render purity", () => {
  async function runFlow(): Promise<string> {
    const { app, root } = makeApp();
    await app.start();
    await typeAndSend(app, root, QUESTION_1);
    root.querySelector<HTMLButtonElement>(".why-button")!.click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    return root.innerHTML;
  }

  it("identical API responses produce identical DOM", async () => {
    const first = await runFlow();
    document.body.innerHTML = "";
    const second = await runFlow();
    expect(second).toBe(first);
  });

  it("DOM snapshot is stable across runs", async () => {
    const html = await runFlow();
    expect(html).toMatchSnapshot();
  });
});
