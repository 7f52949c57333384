/** DOM wiring for the editing panel. */

import { ApiClient } from "./api.js";
import type { EditResponse } from "./api.js";
import {
  AU_COUNT,
  EditScheduler,
  SLIDER_MAX,
  SLIDER_MIN,
  buildEditRequest,
  initialState,
  setSlider,
} from "./state.js";

const AU_LABELS = [
  "AU1 inner brow", "AU2 outer brow", "AU4 brow lower", "AU5 upper lid",
  "AU6 cheek", "AU9 nose wrinkle", "AU12 corner pull", "AU15 corner depress",
  "AU17 chin", "AU20 stretch", "AU25 lips part", "AU26 jaw drop",
];

const serviceUrl =
  new URLSearchParams(window.location.search).get("service") ?? "http://127.0.0.1:8750";
const api = new ApiClient(serviceUrl);
let state = initialState();

const $ = (id: string) => document.getElementById(id)!;

function toast(message: string): void {
  const el = $("toast");
  el.textContent = message;
  el.classList.add("visible");
  setTimeout(() => el.classList.remove("visible"), 2500);
}

const scheduler = new EditScheduler(
  (req) => api.edit(req),
  {
    onResponse: (res) => {
      state = { ...state, lastResponse: res, error: null };
      renderResponse(res);
    },
    onError: (err) => toast(`edit failed: ${String(err)}`),
    onInFlightChange: (inFlight) => {
      state = { ...state, requestInFlight: inFlight };
      $("busy").style.visibility = inFlight ? "visible" : "hidden";
    },
  },
);

function issueEdit(): void {
  const req = buildEditRequest(state);
  if (req) scheduler.submit(req);
}

function renderResponse(res: EditResponse): void {
  ($("preview") as HTMLImageElement).src = `data:image/png;base64,${res.edited_image_b64}`;
  ($("neutral") as HTMLImageElement).src = `data:image/png;base64,${res.neutral_image_b64}`;
  $("latency").textContent = `${res.latency_ms.toFixed(0)} ms`;
  res.estimated_intensities.forEach((v, i) => {
    const bar = $(`bar-${i}`);
    const clamped = Math.max(-2, Math.min(5, v));
    bar.style.width = `${((clamped + 2) / 7) * 100}%`;
    $(`barval-${i}`).textContent = v.toFixed(2);
  });
}

function buildSliders(): void {
  const host = $("sliders");
  for (let i = 0; i < AU_COUNT; i++) {
    const row = document.createElement("div");
    row.className = "slider-row";
    row.innerHTML = `
      <label>${AU_LABELS[i]}</label>
      <input type="range" id="slider-${i}" min="${SLIDER_MIN}" max="${SLIDER_MAX}"
             step="0.1" value="0">
      <span id="sliderval-${i}">0.0</span>
      <div class="bar-track"><div class="bar" id="bar-${i}"></div></div>
      <span class="bar-value" id="barval-${i}">-</span>`;
    host.appendChild(row);
    const input = row.querySelector("input")!;
    input.addEventListener("input", () => {
      state = setSlider(state, i, parseFloat(input.value));
      $(`sliderval-${i}`).textContent = state.sliders[i].toFixed(1);
      issueEdit();
    });
  }
}

async function loadSubjects(): Promise<void> {
  const subjects = await api.subjects();
  const select = $("subject") as HTMLSelectElement;
  for (const sid of subjects.test) {
    const opt = document.createElement("option");
    opt.value = String(sid);
    opt.textContent = `subject ${sid} (held out)`;
    select.appendChild(opt);
  }
  select.addEventListener("change", () => loadFrames(parseInt(select.value, 10)));
  if (subjects.test.length) {
    select.value = String(subjects.test[0]);
    await loadFrames(subjects.test[0]);
  }
}

async function loadFrames(subjectId: number): Promise<void> {
  const frames = await api.frames(subjectId);
  state = { ...state, subjectId };
  const host = $("frames");
  host.innerHTML = "";
  for (const frame of frames.frames.slice(0, 40)) {
    const img = document.createElement("img");
    img.src = api.imageUrl(frame.frame_id);
    img.title = frame.frame_id;
    img.addEventListener("click", () => {
      state = { ...state, frameId: frame.frame_id };
      ($("source") as HTMLImageElement).src = api.imageUrl(frame.frame_id);
      document.querySelectorAll("#frames img").forEach((el) =>
        el.classList.toggle("selected", el === img));
      issueEdit();
    });
    host.appendChild(img);
  }
}

function wireModes(): void {
  const modeInputs = document.querySelectorAll<HTMLInputElement>("input[name=mode]");
  modeInputs.forEach((input) =>
    input.addEventListener("change", () => {
      state = { ...state, mode: input.value as typeof state.mode };
      issueEdit();
    }));
  const target = $("target-frame") as HTMLInputElement;
  target.addEventListener("change", () => {
    state = { ...state, targetFrameId: target.value || null };
    issueEdit();
  });
}

async function boot(): Promise<void> {
  try {
    const health = await api.health();
    $("model-hash").textContent = health.model_hash.slice(0, 12);
  } catch (err) {
    toast(`service unreachable at ${serviceUrl}`);
    return;
  }
  buildSliders();
  wireModes();
  await loadSubjects();
}

boot();
