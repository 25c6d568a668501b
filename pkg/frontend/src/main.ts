// Explorer wiring: sliders -> debounced validity + render; slice heatmap with
// click-to-set; URL round-trips the whole view.

import { ApiClient, Debouncer, LatestOnly, realScheduler } from "./requests.js";
import { badgeColor, decodeState, encodeState, ExplorerState, initialState,
         setScale } from "./state.js";
import { cellCenterValue, clickToCell, heatmapPixels, toGrid } from "./heatmap.js";

const RENDER_SIZE = 128;
const DEBOUNCE_MS = 150;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function boot() {
  const api = new ApiClient((url, init) => fetch(url, init));
  const scene = await api.scene();
  let state: ExplorerState = decodeState(location.search.slice(1), scene.objects);

  const sliders = el<HTMLDivElement>("sliders");
  const badge = el<HTMLSpanElement>("badge");
  const scoreText = el<HTMLSpanElement>("score");
  const viewImg = el<HTMLImageElement>("view");
  const frameInput = el<HTMLInputElement>("frame");
  const banner = el<HTMLDivElement>("banner");
  const canvas = el<HTMLCanvasElement>("slice");
  const sliceInfo = el<HTMLSpanElement>("slice-info");

  frameInput.max = String(scene.frames - 1);
  frameInput.value = String(state.frame);

  const validityGate = new LatestOnly<number>();
  const renderGate = new LatestOnly<Blob>();
  const sliceGate = new LatestOnly<Awaited<ReturnType<ApiClient["validSlice"]>>>();
  const debounce = new Debouncer(DEBOUNCE_MS, realScheduler);

  let lastBlobUrl: string | null = null;
  let sliceCoords: number[] = [];
  let sliceGrid: number[][] = [];

  const inputs: HTMLInputElement[] = [];
  for (let k = 0; k < scene.objects; k++) {
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = k === 0 ? "object 0 (anchor)" : `object ${k}`;
    const input = document.createElement("input");
    input.type = "range";
    input.min = "0";
    input.max = k === 0 ? "1" : "0.999";
    input.step = "0.001";
    input.value = String(state.scales[k]);
    input.disabled = k === 0; // the anchor is pinned at 1
    const value = document.createElement("span");
    value.textContent = Number(state.scales[k]).toFixed(3);
    input.addEventListener("input", () => {
      state = setScale(state, k, Number(input.value));
      value.textContent = Number(state.scales[k]).toFixed(3);
      onStateChanged();
    });
    row.append(label, input, value);
    sliders.append(row);
    inputs.push(input);
  }

  function syncSliders() {
    for (let k = 1; k < scene.objects; k++) {
      inputs[k].value = String(state.scales[k]);
      (inputs[k].nextElementSibling as HTMLSpanElement).textContent =
        state.scales[k].toFixed(3);
    }
  }

  function pushUrl() {
    history.replaceState(null, "", `?${encodeState(state)}`);
  }

  function refresh() {
    banner.textContent = "";
    void validityGate.dispatch(
      () => api.validity(state.scales),
      (score) => {
        scoreText.textContent = score.toFixed(4);
        badge.dataset.color = badgeColor(score);
        badge.textContent = badgeColor(score);
      },
      (err) => { banner.textContent = String(err); });
    void renderGate.dispatch(
      () => api.render(state.scales, state.frame, RENDER_SIZE, RENDER_SIZE),
      (blob) => {
        const url = URL.createObjectURL(blob);
        viewImg.src = url;
        if (lastBlobUrl) URL.revokeObjectURL(lastBlobUrl);
        lastBlobUrl = url;
      },
      (err) => { banner.textContent = String(err); });
  }

  function onStateChanged() {
    pushUrl();
    debounce.call(refresh);
  }

  frameInput.addEventListener("change", () => {
    state = { ...state, frame: Number(frameInput.value) };
    onStateChanged();
  });

  async function loadSlice() {
    const fixed: Record<number, number> = {};
    for (let k = 1; k < scene.objects; k++) {
      if (k !== state.sliceAxisI && k !== state.sliceAxisJ) fixed[k] = state.scales[k];
    }
    await sliceGate.dispatch(
      () => api.validSlice(state.sliceAxisI, state.sliceAxisJ, state.sliceRes, fixed),
      (payload) => {
        sliceCoords = payload.coords;
        sliceGrid = toGrid(payload.scores);
        const ni = sliceGrid.length;
        const nj = sliceGrid[0]?.length ?? 1;
        canvas.width = nj;
        canvas.height = ni;
        const ctx = canvas.getContext("2d")!;
        ctx.putImageData(new ImageData(heatmapPixels(sliceGrid), nj, ni), 0, 0);
        sliceInfo.textContent = state.sliceAxisJ === null
          ? `scale ${state.sliceAxisI}`
          : `scales ${state.sliceAxisI} x ${state.sliceAxisJ}`;
      },
      (err) => { banner.textContent = String(err); });
  }

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const cell = clickToCell(ev.clientX - rect.left, ev.clientY - rect.top,
                             rect.width, rect.height,
                             sliceGrid.length, sliceGrid[0]?.length ?? 1);
    if (!cell || sliceCoords.length === 0) return;
    state = setScale(state, state.sliceAxisI, cellCenterValue(sliceCoords, cell.i));
    if (state.sliceAxisJ !== null) {
      state = setScale(state, state.sliceAxisJ, cellCenterValue(sliceCoords, cell.j));
    }
    syncSliders();
    onStateChanged();
  });

  el<HTMLButtonElement>("reload-slice").addEventListener("click", () => void loadSlice());

  refresh();
  void loadSlice();
}

boot().catch((err) => {
  const banner = document.getElementById("banner");
  if (banner) banner.textContent = `failed to start: ${err}`;
});
