/**
 * Panel state and the request scheduler.
 *
 * The scheduler owns the round-trip discipline: edits are coalesced so at
 * most one request is in flight, issues are rate-limited (default 5/s), the
 * newest pending values always win, and responses older than the latest
 * issued request id are discarded. The UI itself never computes model math;
 * every displayed number comes from a service response.
 */

import type { EditMode, EditRequest, EditResponse } from "./api.js";

export const AU_COUNT = 12;
export const SLIDER_MIN = -2;
export const SLIDER_MAX = 5;

export interface UIState {
  subjectId: number | null;
  frameId: string | null;
  sliders: number[];
  mode: EditMode;
  targetFrameId: string | null;
  lastResponse: EditResponse | null;
  requestInFlight: boolean;
  error: string | null;
}

export function initialState(): UIState {
  return {
    subjectId: null,
    frameId: null,
    sliders: new Array(AU_COUNT).fill(0),
    mode: "edit",
    targetFrameId: null,
    lastResponse: null,
    requestInFlight: false,
    error: null,
  };
}

export function clampSlider(value: number): number {
  const snapped = Math.round(value * 10) / 10; // 0.1 steps
  return Math.min(SLIDER_MAX, Math.max(SLIDER_MIN, snapped));
}

export function setSlider(state: UIState, index: number, value: number): UIState {
  const sliders = state.sliders.slice();
  sliders[index] = clampSlider(value);
  return { ...state, sliders };
}

export function buildEditRequest(state: UIState): EditRequest | null {
  if (state.frameId === null) return null;
  if (state.mode === "neutralize") {
    return { source_frame_id: state.frameId, mode: "neutralize" };
  }
  if (state.mode === "transfer") {
    if (state.targetFrameId === null) return null;
    return {
      source_frame_id: state.frameId,
      target_frame_id: state.targetFrameId,
      mode: "transfer",
    };
  }
  return {
    source_frame_id: state.frameId,
    target_intensities: state.sliders.slice(),
    mode: "edit",
  };
}

export type SendFn = (req: EditRequest) => Promise<EditResponse>;

export interface SchedulerCallbacks {
  onResponse: (res: EditResponse, requestId: number) => void;
  onError?: (err: unknown) => void;
  onInFlightChange?: (inFlight: boolean) => void;
}

export class EditScheduler {
  private pending: EditRequest | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private lastIssueAt = Number.NEGATIVE_INFINITY;
  private issuedSeq = 0;
  private appliedSeq = 0;
  private inFlight = false;

  constructor(
    private send: SendFn,
    private callbacks: SchedulerCallbacks,
    private minIntervalMs = 200, // <= 5 requests per second
    private now: () => number = () => Date.now(),
  ) {}

  get requestInFlight(): boolean {
    return this.inFlight;
  }

  get latestIssuedId(): number {
    return this.issuedSeq;
  }

  /** Coalescing submit: the newest request replaces any queued one. */
  submit(req: EditRequest): void {
    this.pending = req;
    this.maybeFire();
  }

  private maybeFire(): void {
    if (this.pending === null || this.inFlight) return;
    const wait = this.lastIssueAt + this.minIntervalMs - this.now();
    if (wait > 0) {
      if (this.timer === null) {
        this.timer = setTimeout(() => {
          this.timer = null;
          this.maybeFire();
        }, wait);
      }
      return;
    }
    const req = this.pending;
    this.pending = null;
    this.lastIssueAt = this.now();
    const seq = ++this.issuedSeq;
    this.inFlight = true;
    this.callbacks.onInFlightChange?.(true);
    this.send(req)
      .then((res) => {
        // discard anything older than the newest issued request
        if (seq === this.issuedSeq && seq > this.appliedSeq) {
          this.appliedSeq = seq;
          this.callbacks.onResponse(res, seq);
        }
      })
      .catch((err) => {
        this.callbacks.onError?.(err);
      })
      .finally(() => {
        this.inFlight = false;
        this.callbacks.onInFlightChange?.(false);
        this.maybeFire();
      });
  }
}
