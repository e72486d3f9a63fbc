// View state. Rendering is a pure function of this object, so identical
// API responses always produce identical DOM.

import type { TraceData } from "./types";

export interface TurnView {
  role: "user" | "assistant";
  text: string;
  citations: string[];
  flags: string[];
  queryId?: string;
}

export interface InspectorView {
  turnIndex: number;
  trace: TraceData;
}

export interface PassageView {
  chunkId: string;
  excerpt: string;
}

export interface ChatViewState {
  sessionId: string | null;
  turns: TurnView[];
  pending: boolean;
  draft: string;
  error: string | null;
  inspector: InspectorView | null;
  passage: PassageView | null;
}

export function initialState(): ChatViewState {
  return {
    sessionId: null,
    turns: [],
    pending: false,
    draft: "",
    error: null,
    inspector: null,
    passage: null,
  };
}
