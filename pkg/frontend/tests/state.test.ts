import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import type { EditRequest, EditResponse } from "../src/api.js";
import {
  AU_COUNT,
  EditScheduler,
  buildEditRequest,
  clampSlider,
  initialState,
  setSlider,
} from "../src/state.js";

function fakeResponse(tag: number): EditResponse {
  return {
    edited_image_b64: `edited-${tag}`,
    neutral_image_b64: `neutral-${tag}`,
    estimated_intensities: new Array(AU_COUNT).fill(tag),
    latency_ms: 5,
  };
}

describe("state transitions", () => {
  it("clamps sliders to [-2, 5] with 0.1 steps", () => {
    expect(clampSlider(9.0)).toBe(5);
    expect(clampSlider(-3.5)).toBe(-2);
    expect(clampSlider(1.2345)).toBeCloseTo(1.2);
  });

  it("edits carry the full slider vector", () => {
    let state = initialState();
    state = { ...state, frameId: "s018_f0001" };
    state = setSlider(state, 10, 3.3);
    const req = buildEditRequest(state)!;
    expect(req.mode).toBe("edit");
    expect(req.source_frame_id).toBe("s018_f0001");
    expect(req.target_intensities).toHaveLength(AU_COUNT);
    expect(req.target_intensities![10]).toBeCloseTo(3.3);
  });

  it("neutralize sends no target; transfer needs a target frame", () => {
    let state = { ...initialState(), frameId: "f" };
    state = { ...state, mode: "neutralize" as const };
    expect(buildEditRequest(state)).toEqual({ source_frame_id: "f", mode: "neutralize" });
    state = { ...state, mode: "transfer" as const };
    expect(buildEditRequest(state)).toBeNull();
    state = { ...state, targetFrameId: "g" };
    expect(buildEditRequest(state)).toMatchObject({ target_frame_id: "g" });
  });

  it("no request without a selected frame", () => {
    expect(buildEditRequest(initialState())).toBeNull();
  });
});

describe("EditScheduler", () => {
  beforeEach(() => {
    vi.useFakeTimers();
  });
  afterEach(() => {
    vi.useRealTimers();
  });

  function makeScheduler(opts?: { delayMs?: number }) {
    const issued: EditRequest[] = [];
    const applied: EditResponse[] = [];
    let inFlightCount = 0;
    let maxInFlight = 0;
    const send = (req: EditRequest): Promise<EditResponse> => {
      issued.push(req);
      inFlightCount += 1;
      maxInFlight = Math.max(maxInFlight, inFlightCount);
      const tag = issued.length;
      return new Promise((resolve) =>
        setTimeout(() => {
          inFlightCount -= 1;
          resolve(fakeResponse(tag));
        }, opts?.delayMs ?? 30),
      );
    };
    const scheduler = new EditScheduler(send, {
      onResponse: (res) => applied.push(res),
    });
    return { scheduler, issued, applied, maxInFlight: () => maxInFlight };
  }

  function sliderRequest(value: number): EditRequest {
    return {
      source_frame_id: "f",
      target_intensities: [value, ...new Array(AU_COUNT - 1).fill(0)],
      mode: "edit",
    };
  }

  it("rapid drags keep at most one request in flight and the last value wins", async () => {
    const { scheduler, issued, applied, maxInFlight } = makeScheduler();
    for (let i = 1; i <= 25; i++) {
      scheduler.submit(sliderRequest(i / 10));
      await vi.advanceTimersByTimeAsync(10); // 25 submits over 250ms
    }
    await vi.advanceTimersByTimeAsync(1000);
    expect(maxInFlight()).toBe(1);
    expect(issued.length).toBeLessThan(25); // coalesced
    const last = issued[issued.length - 1];
    expect(last.target_intensities![0]).toBeCloseTo(2.5);
    expect(applied.length).toBe(issued.length);
  });

  it("rate stays at or below 5 requests per second", async () => {
    const { scheduler, issued } = makeScheduler({ delayMs: 1 });
    for (let i = 0; i < 100; i++) {
      scheduler.submit(sliderRequest(i));
      await vi.advanceTimersByTimeAsync(10);
    }
    // 1 second of wall time has elapsed: at most 5 issues fit in it
    expect(issued.length).toBeLessThanOrEqual(6);
  });

  it("discards responses older than the latest issued request", async () => {
    const responses: Array<(res: EditResponse) => void> = [];
    const issued: EditRequest[] = [];
    const applied: EditResponse[] = [];
    const send = (req: EditRequest): Promise<EditResponse> => {
      issued.push(req);
      return new Promise((resolve) => responses.push(resolve));
    };
    const scheduler = new EditScheduler(send, {
      onResponse: (res) => applied.push(res),
    });

    scheduler.submit(sliderRequest(1));
    await vi.advanceTimersByTimeAsync(0);
    expect(issued.length).toBe(1);

    // resolve #1 late, after a newer request has been issued
    scheduler.submit(sliderRequest(2));
    responses[0](fakeResponse(1)); // completes, scheduler fires #2
    await vi.advanceTimersByTimeAsync(300);
    expect(issued.length).toBe(2);

    responses[1](fakeResponse(2));
    await vi.advanceTimersByTimeAsync(10);

    // the late response for #1 must not overwrite #2's
    expect(applied.map((r) => r.edited_image_b64)).toContain("edited-2");
    const lastApplied = applied[applied.length - 1];
    expect(lastApplied.edited_image_b64).toBe("edited-2");
  });

  it("recovers after a failed request", async () => {
    let calls = 0;
    const applied: EditResponse[] = [];
    const errors: unknown[] = [];
    const send = (_req: EditRequest): Promise<EditResponse> => {
      calls += 1;
      if (calls === 1) return Promise.reject(new Error("boom"));
      return Promise.resolve(fakeResponse(calls));
    };
    const scheduler = new EditScheduler(send, {
      onResponse: (res) => applied.push(res),
      onError: (err) => errors.push(err),
    });
    scheduler.submit(sliderRequest(1));
    await vi.advanceTimersByTimeAsync(10);
    expect(errors.length).toBe(1);
    scheduler.submit(sliderRequest(2));
    await vi.advanceTimersByTimeAsync(300);
    expect(applied.length).toBe(1);
  });
});
