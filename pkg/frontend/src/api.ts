// Thin typed client over the kgrag HTTP API. Configuration is limited to
// the base URL and an optional bearer token.

import type { QueryResponse, TraceData } from "./types";

export interface ApiConfig {
  baseUrl: string;
  bearerToken?: string;
  fetchImpl?: typeof fetch;
}

export class ApiRequestError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  private readonly fetchImpl: typeof fetch;

  constructor(private readonly config: ApiConfig) {
    this.fetchImpl = config.fetchImpl ?? fetch.bind(globalThis);
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.config.bearerToken) {
      headers["Authorization"] = `Bearer ${this.config.bearerToken}`;
    }
    const response = await this.fetchImpl(`${this.config.baseUrl}${path}`, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await response.json();
    if (!response.ok) {
      const code = payload?.error?.code ?? "http_error";
      const message = payload?.error?.message ?? `HTTP ${response.status}`;
      throw new ApiRequestError(response.status, code, message);
    }
    return payload as T;
  }

  createSession(): Promise<{ session_id: string }> {
    return this.request("POST", "/sessions");
  }

  query(sessionId: string, question: string): Promise<QueryResponse> {
    return this.request("POST", `/sessions/${sessionId}/query`, { question });
  }

  trace(queryId: string): Promise<TraceData> {
    return this.request("GET", `/graph/trace/${queryId}`);
  }

  status(): Promise<Record<string, unknown>> {
    return this.request("GET", "/status");
  }
}
