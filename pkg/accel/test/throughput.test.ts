/**
 * Throughput target: at least 5x the reference implementation's
 * encode+decode wall time on a one-million-symbol stream, measured on the
 * same machine with the identical distribution and symbol sequence seeds.
 */
import { execFileSync } from "node:child_process";
import { join } from "node:path";
import { describe, expect, it } from "vitest";
import { Cdf, rangeDecode, rangeEncode } from "../src/coder";

const REPO_ROOT = join(__dirname, "..", "..");
const N = 1_000_000;

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

describe("throughput", () => {
  it(`runs a ${N.toLocaleString()}-symbol stream at >= 5x the reference`, () => {
    const referenceSeconds = parseFloat(
      execFileSync("python3", ["-m", "yoda.testvectors", "--bench", String(N)], {
        cwd: REPO_ROOT,
        stdio: "pipe",
      })
        .toString()
        .trim(),
    );

    const rand = mulberry32(0);
    const weights = new Array(256).fill(0).map(() => rand() + 0.05);
    const sum = weights.reduce((a, b) => a + b, 0);
    const counts = weights.map((w) => Math.max(1, Math.floor((w / sum) * 65536 + 0.5)));
    let top = 0;
    for (let i = 1; i < 256; i++) if (weights[i] > weights[top]) top = i;
    counts[top] += 65536 - counts.reduce((a, b) => a + b, 0);
    const table = new Uint32Array(257);
    for (let i = 0; i < 256; i++) table[i + 1] = table[i] + counts[i];
    const cdf: Cdf = { table, precision: 16 };

    const symbols = new Int32Array(N);
    for (let i = 0; i < N; i++) symbols[i] = Math.floor(rand() * 256);
    const indices = new Uint32Array(N);

    // warmup pass for the JIT, then the measured pass
    rangeDecode(rangeEncode(symbols.subarray(0, 50_000), [cdf],
                            indices.subarray(0, 50_000)),
                [cdf], indices.subarray(0, 50_000));
    const t0 = performance.now();
    const payload = rangeEncode(symbols, [cdf], indices);
    const decoded = rangeDecode(payload, [cdf], indices);
    const seconds = (performance.now() - t0) / 1000;

    expect(decoded).toEqual(symbols);
    const speedup = referenceSeconds / seconds;
    // eslint-disable-next-line no-console
    console.log(
      `reference ${referenceSeconds.toFixed(2)}s, accelerated ` +
        `${seconds.toFixed(2)}s, speedup ${speedup.toFixed(1)}x`,
    );
    expect(speedup).toBeGreaterThanOrEqual(5.0);
  });
});
