/** Shapes of the retrieval service's JSON responses. */

export interface PipelineSettings {
  k: number;
  m: number;
  stage2: boolean;
  fusion_mode: string;
}

export interface ResultEntry {
  video_id: string;
  stage1_score: number;
  stage2_score?: number;
  final_rank: number;
  stage1_rank: number;
}

export interface Stage1Entry {
  video_id: string;
  stage1_score: number;
  rank: number;
}

export interface TurnResponse {
  session_id: string;
  turn: number;
  query: string;
  config: PipelineSettings;
  results: ResultEntry[];
  stage1_results?: Stage1Entry[];
  clamped: boolean;
}

export interface VideoMeta {
  video_id: string;
  source_id: string;
  n_frames: number;
  dim: number;
  d_v: string;
}

export interface ServiceInfo extends PipelineSettings {
  session_ttl_seconds: number;
  index_size: number;
  embed_dim: number;
}

export type Overrides = Partial<PipelineSettings>;
