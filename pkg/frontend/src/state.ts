// Pure UI state machine: plate input validation, one in-flight query at a
// time (stale responses discarded by sequence number), and pivot/back
// navigation whose history grows only on successful queries.

import { validatePlate, type PlateValidation } from "./plate.js";
import type {
  DistributionResponse,
  EstimateResponse,
  HistoryResponse,
  SimilarResponse,
} from "./api.js";

export interface PlateView {
  plate: string; // canonical
  estimate: EstimateResponse;
  distribution: DistributionResponse;
  similar: SimilarResponse;
  history: HistoryResponse;
}

export interface SessionState {
  inputText: string;
  validation: PlateValidation;
  current: PlateView | null;
  historyDepth: number;
  pending: boolean;
  lastError: string | null;
}

export class QuerySession {
  private seq = 0;
  private pendingSeq: number | null = null;
  private stack: PlateView[] = [];
  private currentView: PlateView | null = null;
  private text = "";
  private error: string | null = null;

  get state(): SessionState {
    return {
      inputText: this.text,
      validation: this.validation(),
      current: this.currentView,
      historyDepth: this.stack.length,
      pending: this.pendingSeq !== null,
      lastError: this.error,
    };
  }

  validation(): PlateValidation {
    return validatePlate(this.text);
  }

  setInput(text: string): PlateValidation {
    this.text = text;
    return this.validation();
  }

  // returns the query's sequence number, or null when the input is invalid
  startQuery(): number | null {
    const v = this.validation();
    if (!v.valid) return null;
    this.seq += 1;
    this.pendingSeq = this.seq;
    this.error = null;
    return this.seq;
  }

  // apply a finished query; stale sequence numbers are ignored
  complete(seq: number, view: PlateView): boolean {
    if (seq !== this.pendingSeq) return false;
    this.pendingSeq = null;
    if (this.currentView !== null) {
      this.stack.push(this.currentView);
    }
    this.currentView = view;
    return true;
  }

  fail(seq: number, message: string): boolean {
    if (seq !== this.pendingSeq) return false;
    this.pendingSeq = null;
    this.error = message; // history untouched: it grows only on success
    return true;
  }

  // click a similar plate: prime the input and start a new query
  pivot(plateText: string): number | null {
    this.setInput(plateText);
    return this.startQuery();
  }

  canGoBack(): boolean {
    return this.stack.length > 0;
  }

  back(): boolean {
    const previous = this.stack.pop();
    if (previous === undefined) return false;
    this.pendingSeq = null; // an in-flight query can no longer apply
    this.currentView = previous;
    this.text = previous.plate;
    this.error = null;
    return true;
  }
}
