/**
 * Accelerated range coder, bit-exact with the reference implementation.
 *
 * State is 48 bits with 16-bit renormalization, so every intermediate value
 * stays below 2^49 and all arithmetic is exact in IEEE doubles — no BigInt
 * on the hot path. Carries propagate into already-emitted chunks; the flush
 * emits the single 16-bit chunk of the smallest 2^32-aligned code point in
 * the final interval, and the decoder's trailing check (exact chunk count
 * plus two zero-completion reads) catches truncation, trailing garbage and
 * CDF mismatches.
 */

const STATE_BITS = 48;
const RENORM_BITS = 16;
const MASK = 2 ** STATE_BITS - 1;
const BOTTOM = 2 ** (STATE_BITS - RENORM_BITS);
const TWO32 = 2 ** 32;
const TWO16 = 2 ** 16;

export class CoderError extends Error {}
export class CorruptPayloadError extends CoderError {}

/** Integer CDF table: alphabet+1 entries, starts at 0, ends at 2^precision. */
export interface Cdf {
  table: Uint32Array;
  precision: number;
}

export function validateCdf(cdf: Cdf): void {
  const t = cdf.table;
  if (t.length < 2) throw new CoderError("cdf needs at least two entries");
  if (cdf.precision < 2 || cdf.precision > 24) {
    throw new CoderError(`precision ${cdf.precision} out of range`);
  }
  if (t[0] !== 0 || t[t.length - 1] !== 2 ** cdf.precision) {
    throw new CoderError("cdf must start at 0 and end at 2^precision");
  }
  for (let i = 1; i < t.length; i++) {
    if (t[i] < t[i - 1]) throw new CoderError("cdf must be non-decreasing");
  }
}

export class RangeEncoder {
  private low = 0;
  private range = MASK;
  private chunks: number[] = [];

  encode(symbol: number, cdf: Cdf): void {
    const table = cdf.table;
    if (!(symbol >= 0 && symbol < table.length - 1)) {
      throw new CoderError(`symbol ${symbol} outside alphabet`);
    }
    const lo = table[symbol];
    const hi = table[symbol + 1];
    if (hi <= lo) throw new CoderError(`zero-width bin for symbol ${symbol}`);
    const r = Math.floor(this.range / 2 ** cdf.precision);
    this.low += lo * r;
    if (this.low > MASK) {
      this.propagateCarry();
      this.low -= MASK + 1;
    }
    this.range = (hi - lo) * r;
    while (this.range < BOTTOM) {
      this.chunks.push(Math.floor(this.low / TWO32));
      this.low = (this.low % TWO32) * TWO16;
      this.range *= TWO16;
    }
  }

  private propagateCarry(): void {
    const chunks = this.chunks;
    let i = chunks.length - 1;
    while (i >= 0 && chunks[i] === 0xffff) {
      chunks[i] = 0;
      i--;
    }
    if (i < 0) throw new CoderError("carry escaped the stream start");
    chunks[i] += 1;
  }

  finish(): Uint8Array {
    let c = Math.ceil(this.low / TWO32) * TWO32;
    if (c > MASK) {
      this.propagateCarry();
      c -= MASK + 1;
    }
    this.chunks.push(Math.floor(c / TWO32));
    const out = new Uint8Array(2 * this.chunks.length);
    for (let i = 0; i < this.chunks.length; i++) {
      out[2 * i] = this.chunks[i] >>> 8;
      out[2 * i + 1] = this.chunks[i] & 0xff;
    }
    return out;
  }
}

export class RangeDecoder {
  private chunks: Uint16Array;
  private pos = 0;
  private overrun = 0;
  private rel = 0;
  private range = MASK;

  constructor(payload: Uint8Array) {
    if (payload.length % 2 !== 0 || payload.length < 2) {
      throw new CorruptPayloadError(
        `payload length ${payload.length} is not a chunk multiple`,
      );
    }
    this.chunks = new Uint16Array(payload.length / 2);
    for (let i = 0; i < this.chunks.length; i++) {
      this.chunks[i] = (payload[2 * i] << 8) | payload[2 * i + 1];
    }
    for (let i = 0; i < STATE_BITS / RENORM_BITS; i++) {
      this.rel = this.rel * TWO16 + this.nextChunk();
    }
  }

  private nextChunk(): number {
    let c = 0;
    if (this.pos < this.chunks.length) {
      c = this.chunks[this.pos];
    } else {
      this.overrun++;
    }
    this.pos++;
    return c;
  }

  decode(cdf: Cdf): number {
    const table = cdf.table;
    const r = Math.floor(this.range / 2 ** cdf.precision);
    const val = Math.floor(this.rel / r);
    if (val >= 2 ** cdf.precision) {
      throw new CorruptPayloadError("decoded value outside CDF total");
    }
    // binary search: greatest index with table[index] <= val
    let loIdx = 0;
    let hiIdx = table.length - 1;
    while (hiIdx - loIdx > 1) {
      const mid = (loIdx + hiIdx) >>> 1;
      if (table[mid] <= val) loIdx = mid;
      else hiIdx = mid;
    }
    const symbol = loIdx;
    const lo = table[symbol];
    const hi = table[symbol + 1];
    this.rel -= lo * r;
    this.range = (hi - lo) * r;
    while (this.range < BOTTOM) {
      this.range *= TWO16;
      this.rel = this.rel * TWO16 + this.nextChunk();
    }
    return symbol;
  }

  finish(): void {
    const consumed = this.pos - this.overrun;
    if (this.overrun !== 2 || consumed !== this.chunks.length) {
      throw new CorruptPayloadError(
        `trailing sentinel check failed: ${this.chunks.length} chunks, ` +
          `${consumed} consumed, ${this.overrun} overrun`,
      );
    }
  }
}

/** Batch encode: symbols[i] coded under bank[indices[i]]. */
export function rangeEncode(
  symbols: Int32Array,
  bank: Cdf[],
  indices: Uint32Array,
): Uint8Array {
  if (symbols.length !== indices.length) {
    throw new CoderError("symbols and indices must have equal length");
  }
  const enc = new RangeEncoder();
  for (let i = 0; i < symbols.length; i++) {
    enc.encode(symbols[i], bank[indices[i]]);
  }
  return enc.finish();
}

/** Batch decode: exact inverse of rangeEncode for the same bank/indices. */
export function rangeDecode(
  payload: Uint8Array,
  bank: Cdf[],
  indices: Uint32Array,
): Int32Array {
  const dec = new RangeDecoder(payload);
  const out = new Int32Array(indices.length);
  for (let i = 0; i < indices.length; i++) {
    out[i] = dec.decode(bank[indices[i]]);
  }
  dec.finish();
  return out;
}
