// Valid-region heatmap: raw scores map to pixels without rescaling, clicks
// map back to cell-center scale coordinates.

export interface HeatmapData {
  coords: number[];          // grid coordinates along each axis
  scores: number[][];        // [i][j] validity scores, scores[i][j] for (axisI=i, axisJ=j)
}

export function toGrid(scores: number[] | number[][]): number[][] {
  if (scores.length === 0) return [];
  return Array.isArray(scores[0])
    ? (scores as number[][])
    : (scores as number[]).map((v) => [v]);
}

/** RGBA bytes, one pixel per cell, row-major with axis i across rows. */
export function heatmapPixels(grid: number[][]): Uint8ClampedArray<ArrayBuffer> {
  const ni = grid.length;
  const nj = grid[0]?.length ?? 0;
  const out = new Uint8ClampedArray(new ArrayBuffer(ni * nj * 4));
  for (let i = 0; i < ni; i++) {
    for (let j = 0; j < nj; j++) {
      const v = grid[i][j];
      const o = (i * nj + j) * 4;
      // score 0 -> dark blue, 1 -> warm yellow; exact endpoints preserved
      out[o] = Math.round(255 * v);
      out[o + 1] = Math.round(200 * v);
      out[o + 2] = Math.round(80 + 100 * (1 - v));
      out[o + 3] = 255;
    }
  }
  return out;
}

/** Map a click in canvas pixels to the clicked cell's center coordinates. */
export function clickToCell(x: number, y: number, canvasW: number, canvasH: number,
                            ni: number, nj: number): { i: number; j: number } | null {
  if (x < 0 || y < 0 || x >= canvasW || y >= canvasH) return null;
  const j = Math.min(Math.floor((x / canvasW) * nj), nj - 1);
  const i = Math.min(Math.floor((y / canvasH) * ni), ni - 1);
  return { i, j };
}

export function cellCenterValue(coords: number[], index: number): number {
  return coords[Math.min(Math.max(index, 0), coords.length - 1)];
}
