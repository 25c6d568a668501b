// Debounced, stale-proof request machinery. Every logical request gets a
// monotonically increasing id; a response is delivered only if no newer
// request of the same kind has been issued since. The clock and scheduler are
// injectable so the logic is testable without timers or a DOM.

export interface Scheduler {
  setTimeout(fn: () => void, ms: number): number;
  clearTimeout(id: number): void;
}

export const realScheduler: Scheduler = {
  setTimeout: (fn, ms) => setTimeout(fn, ms) as unknown as number,
  clearTimeout: (id) => clearTimeout(id),
};

export class LatestOnly<T> {
  private lastIssued = 0;
  private lastDelivered = 0;

  /** Run the request; deliver() fires only for the newest issued request. */
  async dispatch(run: () => Promise<T>, deliver: (value: T) => void,
                 onError?: (err: unknown) => void): Promise<void> {
    const id = ++this.lastIssued;
    try {
      const value = await run();
      if (id > this.lastDelivered && id === this.lastIssued) {
        this.lastDelivered = id;
        deliver(value);
      }
    } catch (err) {
      if (id === this.lastIssued && onError) onError(err);
    }
  }

  get issued(): number {
    return this.lastIssued;
  }
}

export class Debouncer {
  private timer: number | null = null;

  constructor(private readonly delayMs: number,
              private readonly scheduler: Scheduler = realScheduler) {}

  /** Schedule fn, replacing any pending call. */
  call(fn: () => void): void {
    if (this.timer !== null) this.scheduler.clearTimeout(this.timer);
    this.timer = this.scheduler.setTimeout(() => {
      this.timer = null;
      fn();
    }, this.delayMs);
  }

  cancel(): void {
    if (this.timer !== null) {
      this.scheduler.clearTimeout(this.timer);
      this.timer = null;
    }
  }
}

export interface SceneInfo {
  objects: number;
  frames: number;
  width: number;
  height: number;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(private readonly fetchFn: FetchLike, private readonly base = "") {}

  async scene(): Promise<SceneInfo> {
    const r = await this.fetchFn(`${this.base}/api/scene`);
    if (!r.ok) throw new Error(`scene: HTTP ${r.status}`);
    return (await r.json()) as SceneInfo;
  }

  async validity(scales: number[]): Promise<number> {
    const r = await this.fetchFn(`${this.base}/api/validity`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ scales }),
    });
    if (!r.ok) throw new Error(`validity: HTTP ${r.status}`);
    return (await r.json()).score as number;
  }

  async render(scales: number[], frame: number, width: number, height: number): Promise<Blob> {
    const r = await this.fetchFn(`${this.base}/api/render`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ scales, frame, width, height }),
    });
    if (!r.ok) throw new Error(`render: HTTP ${r.status}`);
    return await r.blob();
  }

  async validSlice(axisI: number, axisJ: number | null, res: number,
                   fixed: Record<number, number>): Promise<{
      axes: number[]; coords: number[]; scores: number[] | number[][];
    }> {
    const p = new URLSearchParams();
    p.set("axis_i", String(axisI));
    if (axisJ !== null) p.set("axis_j", String(axisJ));
    p.set("res", String(res));
    const fixedStr = Object.entries(fixed).map(([k, v]) => `${k}:${v}`).join(",");
    if (fixedStr) p.set("fixed", fixedStr);
    const r = await this.fetchFn(`${this.base}/api/valid-slice?${p.toString()}`);
    if (!r.ok) throw new Error(`valid-slice: HTTP ${r.status}`);
    return await r.json();
  }
}
