// Explorer state: scale sliders (anchor pinned at 1), selected frame, slice
// axes. The whole view is reproducible from the URL query string.

export interface ExplorerState {
  scales: number[]; // length K, scales[0] === 1
  frame: number;
  sliceAxisI: number;
  sliceAxisJ: number | null;
  sliceRes: number;
}

export function initialState(numObjects: number): ExplorerState {
  const scales = new Array(numObjects).fill(0.5);
  scales[0] = 1;
  return {
    scales,
    frame: 0,
    sliceAxisI: 1,
    sliceAxisJ: numObjects > 2 ? 2 : null,
    sliceRes: 64,
  };
}

export function clampScale(v: number): number {
  // free scales live in [0, 1); the service rejects 1.0 itself
  if (!Number.isFinite(v)) return 0;
  return Math.min(Math.max(v, 0), 0.999);
}

export function setScale(state: ExplorerState, index: number, value: number): ExplorerState {
  if (index <= 0 || index >= state.scales.length) return state; // anchor is pinned
  const scales = state.scales.slice();
  scales[index] = clampScale(value);
  return { ...state, scales };
}

export function encodeState(state: ExplorerState): string {
  const p = new URLSearchParams();
  p.set("s", state.scales.slice(1).map((v) => v.toFixed(4)).join(","));
  p.set("frame", String(state.frame));
  p.set("ai", String(state.sliceAxisI));
  if (state.sliceAxisJ !== null) p.set("aj", String(state.sliceAxisJ));
  p.set("res", String(state.sliceRes));
  return p.toString();
}

export function decodeState(query: string, numObjects: number): ExplorerState {
  const p = new URLSearchParams(query);
  const state = initialState(numObjects);
  const s = p.get("s");
  if (s) {
    const parts = s.split(",").map(Number);
    for (let i = 0; i < Math.min(parts.length, numObjects - 1); i++) {
      state.scales[i + 1] = clampScale(parts[i]);
    }
  }
  const frame = Number(p.get("frame"));
  if (Number.isInteger(frame) && frame >= 0) state.frame = frame;
  const ai = Number(p.get("ai"));
  if (Number.isInteger(ai) && ai >= 1 && ai < numObjects) state.sliceAxisI = ai;
  const aj = p.get("aj");
  if (aj !== null) {
    const v = Number(aj);
    if (Number.isInteger(v) && v >= 1 && v < numObjects && v !== state.sliceAxisI) {
      state.sliceAxisJ = v;
    }
  }
  const res = Number(p.get("res"));
  if (Number.isInteger(res) && res >= 2 && res <= 257) state.sliceRes = res;
  return state;
}

export type BadgeColor = "green" | "amber" | "red";

// thresholds mirror the training-side sampler
export function badgeColor(score: number): BadgeColor {
  if (score > 0.95) return "green";
  if (score < 0.05) return "red";
  return "amber";
}
