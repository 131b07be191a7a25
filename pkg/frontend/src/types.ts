export interface HerbInfo {
  scientific_name: string;
  common_names: string[];
  description: string;
  medicinal_uses: string;
  regions: string[];
}

export interface TopkEntry {
  class_index: number;
  scientific_name: string;
  confidence: number;
  info?: HerbInfo;
}

export interface PredictResponse {
  topk: TopkEntry[];
  model_name: string;
  latency_ms: number;
}

export interface HealthResponse {
  status: string;
  model_name?: string;
  package_checksum?: string;
}
