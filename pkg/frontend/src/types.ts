// Payload shapes of the kgrag HTTP API the client consumes.

export interface QueryResponse {
  answer: string;
  citations: string[];
  graph_entities_used: string[];
  degradation_flags: string[];
  latency_ms: number;
  query_id: string;
  trace: TraceData;
}

export interface TraceData {
  query: string;
  refined_queries: string[];
  sub_queries: SubQueryTrace[];
  vector_hits: VectorHit[];
  concept_paths: string[];
  degradation_flags: string[];
}

export interface SubQueryTrace {
  sub_query: string;
  matched_concepts: [string, number][];
  surviving_sections: string[];
  instance_entities: string[];
  instance_relations: string[];
  flags: string[];
}

export interface VectorHit {
  chunk_id: string;
  score: number;
  excerpt: string;
}

export interface ApiError {
  error: { code: string; message: string };
}
