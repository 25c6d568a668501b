import { describe, expect, it } from "vitest";
import { ApiClient, Debouncer, LatestOnly, Scheduler } from "../src/requests.js";

class FakeScheduler implements Scheduler {
  private nextId = 1;
  private pending = new Map<number, () => void>();

  setTimeout(fn: () => void, _ms: number): number {
    const id = this.nextId++;
    this.pending.set(id, fn);
    return id;
  }

  clearTimeout(id: number): void {
    this.pending.delete(id);
  }

  fire(): void {
    const fns = [...this.pending.values()];
    this.pending.clear();
    fns.forEach((fn) => fn());
  }

  get pendingCount(): number {
    return this.pending.size;
  }
}

function deferred<T>() {
  let resolve!: (v: T) => void;
  let reject!: (e: unknown) => void;
  const promise = new Promise<T>((res, rej) => { resolve = res; reject = rej; });
  return { promise, resolve, reject };
}

describe("Debouncer", () => {
  it("coalesces rapid calls into one", () => {
    const sched = new FakeScheduler();
    const d = new Debouncer(150, sched);
    let calls = 0;
    d.call(() => calls++);
    d.call(() => calls++);
    d.call(() => calls++);
    expect(sched.pendingCount).toBe(1);
    sched.fire();
    expect(calls).toBe(1);
  });

  it("cancel drops the pending call", () => {
    const sched = new FakeScheduler();
    const d = new Debouncer(150, sched);
    let calls = 0;
    d.call(() => calls++);
    d.cancel();
    sched.fire();
    expect(calls).toBe(0);
  });
});

describe("LatestOnly", () => {
  it("delivers a single request", async () => {
    const gate = new LatestOnly<number>();
    const got: number[] = [];
    await gate.dispatch(async () => 7, (v) => got.push(v));
    expect(got).toEqual([7]);
  });

  it("drops stale responses that resolve after newer ones", async () => {
    const gate = new LatestOnly<string>();
    const got: string[] = [];
    const slow = deferred<string>();
    const fast = deferred<string>();
    const p1 = gate.dispatch(() => slow.promise, (v) => got.push(v));
    const p2 = gate.dispatch(() => fast.promise, (v) => got.push(v));
    fast.resolve("new");
    await p2;
    slow.resolve("old");
    await p1;
    expect(got).toEqual(["new"]);
  });

  it("monotonic ids: never re-delivers older than the last shown", async () => {
    const gate = new LatestOnly<number>();
    const got: number[] = [];
    const a = deferred<number>();
    const b = deferred<number>();
    const c = deferred<number>();
    const pa = gate.dispatch(() => a.promise, (v) => got.push(v));
    const pb = gate.dispatch(() => b.promise, (v) => got.push(v));
    const pc = gate.dispatch(() => c.promise, (v) => got.push(v));
    b.resolve(2);
    await pb;
    c.resolve(3);
    await pc;
    a.resolve(1);
    await pa;
    expect(got).toEqual([3]);
    expect(gate.issued).toBe(3);
  });

  it("errors only surface for the newest request", async () => {
    const gate = new LatestOnly<number>();
    const errors: string[] = [];
    const stale = deferred<number>();
    const p1 = gate.dispatch(() => stale.promise, () => {},
                             (e) => errors.push(`stale:${e}`));
    const p2 = gate.dispatch(async () => { throw new Error("boom"); },
                             () => {}, (e) => errors.push("new"));
    await p2;
    stale.reject(new Error("ignored"));
    await p1;
    expect(errors).toEqual(["new"]);
  });
});

describe("ApiClient", () => {
  it("posts scales and reads the score", async () => {
    const calls: Array<{ url: string; body?: string }> = [];
    const fetchFn = async (url: string, init?: RequestInit) => {
      calls.push({ url, body: init?.body as string });
      return new Response(JSON.stringify({ score: 0.42 }),
                          { status: 200, headers: { "content-type": "application/json" } });
    };
    const api = new ApiClient(fetchFn);
    const score = await api.validity([1, 0.3]);
    expect(score).toBe(0.42);
    expect(calls[0].url).toBe("/api/validity");
    expect(JSON.parse(calls[0].body!)).toEqual({ scales: [1, 0.3] });
  });

  it("raises on http errors", async () => {
    const api = new ApiClient(async () => new Response("{}", { status: 422 }));
    await expect(api.validity([1, 2])).rejects.toThrow("422");
  });

  it("builds valid-slice query with fixed axes", async () => {
    let seen = "";
    const api = new ApiClient(async (url: string) => {
      seen = url;
      return new Response(JSON.stringify({ axes: [1], coords: [0, 1], scores: [0.1, 0.9] }),
                          { status: 200 });
    });
    await api.validSlice(1, null, 2, { 2: 0.25 });
    expect(seen).toContain("axis_i=1");
    expect(seen).toContain("res=2");
    expect(seen).toContain("fixed=2%3A0.25");
  });
});
