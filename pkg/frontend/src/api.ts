// Thin typed client for the /api/v1 endpoints. No other backend contact.

import type { MixtureComponent } from "./mixture.js";

export interface EstimateResponse {
  plate: string;
  log_price_hkd: number;
  price_hkd: number;
  model_version: string;
}

export interface DistributionResponse {
  plate: string;
  log_price_hkd: number;
  model_version: string;
  components: MixtureComponent[];
  quantiles_log_hkd: Record<string, number>;
  quantiles_hkd: Record<string, number>;
}

export interface SimilarItem {
  plate: string;
  distance: number;
  last_sale: { price_hkd: number; date: string } | null;
}

export interface SimilarResponse {
  plate: string;
  results: SimilarItem[];
}

export interface HistoryRecord {
  datetime: string;
  price_hkd: number | null;
  status: "S" | "U";
}

export interface HistoryResponse {
  plate: string;
  records: HistoryRecord[];
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function getJson<T>(url: string): Promise<T> {
  const response = await fetch(url);
  const body = await response.json().catch(() => null);
  if (!response.ok) {
    const err = body?.error ?? {};
    throw new ApiError(response.status, err.code ?? "UNKNOWN", err.message ?? response.statusText);
  }
  return body as T;
}

export class ApiClient {
  constructor(private base: string = "") {}

  estimate(plate: string): Promise<EstimateResponse> {
    return getJson(`${this.base}/api/v1/estimate?plate=${encodeURIComponent(plate)}`);
  }

  distribution(plate: string): Promise<DistributionResponse> {
    return getJson(`${this.base}/api/v1/distribution?plate=${encodeURIComponent(plate)}`);
  }

  similar(plate: string, k: number): Promise<SimilarResponse> {
    return getJson(`${this.base}/api/v1/similar?plate=${encodeURIComponent(plate)}&k=${k}`);
  }

  history(plate: string): Promise<HistoryResponse> {
    return getJson(`${this.base}/api/v1/history?plate=${encodeURIComponent(plate)}`);
  }
}
