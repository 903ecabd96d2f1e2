/**
 * Stdio server for the host codec: one framed request per encode/decode
 * batch (whole-frame granularity), CDFs crossing as one flat array with an
 * offsets index.
 *
 * Request (little-endian):
 *   u8 op (1 encode / 2 decode) | u32 nSymbols | u32 nCdfs | u32 bankLen |
 *   u32 blobLen | offsets (nCdfs+1) u32 | precisions nCdfs u8 | bank u32[] |
 *   indices nSymbols u32 | blob
 * Response:
 *   u8 status (0 ok, 1 error, 2 corrupt payload) | u32 len | body
 */

import {
  Cdf,
  CoderError,
  CorruptPayloadError,
  rangeDecode,
  rangeEncode,
} from "./coder";

const HEADER_SIZE = 1 + 4 * 4;

function handle(message: Buffer): Buffer {
  const op = message.readUInt8(0);
  const nSymbols = message.readUInt32LE(1);
  const nCdfs = message.readUInt32LE(5);
  const bankLen = message.readUInt32LE(9);
  const blobLen = message.readUInt32LE(13);

  let pos = HEADER_SIZE;
  const offsets = new Uint32Array(nCdfs + 1);
  for (let i = 0; i <= nCdfs; i++) {
    offsets[i] = message.readUInt32LE(pos);
    pos += 4;
  }
  const precisions = message.subarray(pos, pos + nCdfs);
  pos += nCdfs;
  const flat = new Uint32Array(bankLen);
  for (let i = 0; i < bankLen; i++) {
    flat[i] = message.readUInt32LE(pos);
    pos += 4;
  }
  const indices = new Uint32Array(nSymbols);
  for (let i = 0; i < nSymbols; i++) {
    indices[i] = message.readUInt32LE(pos);
    pos += 4;
  }
  const blob = message.subarray(pos, pos + blobLen);

  const bank: Cdf[] = [];
  for (let i = 0; i < nCdfs; i++) {
    bank.push({
      table: flat.subarray(offsets[i], offsets[i + 1]),
      precision: precisions[i],
    });
  }

  let body: Buffer;
  if (op === 1) {
    const symbols = new Int32Array(nSymbols);
    for (let i = 0; i < nSymbols; i++) symbols[i] = blob.readInt32LE(4 * i);
    body = Buffer.from(rangeEncode(symbols, bank, indices));
  } else if (op === 2) {
    const decoded = rangeDecode(new Uint8Array(blob), bank, indices);
    body = Buffer.alloc(4 * decoded.length);
    for (let i = 0; i < decoded.length; i++) body.writeInt32LE(decoded[i], 4 * i);
  } else {
    throw new CoderError(`unknown op ${op}`);
  }
  const out = Buffer.alloc(5 + body.length);
  out.writeUInt8(0, 0);
  out.writeUInt32LE(body.length, 1);
  body.copy(out, 5);
  return out;
}

function errorResponse(err: unknown): Buffer {
  const message = Buffer.from(String(err instanceof Error ? err.message : err));
  const out = Buffer.alloc(5 + message.length);
  out.writeUInt8(err instanceof CorruptPayloadError ? 2 : 1, 0);
  out.writeUInt32LE(message.length, 1);
  message.copy(out, 5);
  return out;
}

function requestLength(buffer: Buffer): number | null {
  if (buffer.length < HEADER_SIZE) return null;
  const nSymbols = buffer.readUInt32LE(1);
  const nCdfs = buffer.readUInt32LE(5);
  const bankLen = buffer.readUInt32LE(9);
  const blobLen = buffer.readUInt32LE(13);
  return (
    HEADER_SIZE + 4 * (nCdfs + 1) + nCdfs + 4 * bankLen + 4 * nSymbols + blobLen
  );
}

function main(): void {
  let pending: Buffer = Buffer.alloc(0);
  process.stdin.on("data", (data: Buffer) => {
    pending = pending.length ? Buffer.concat([pending, data]) : Buffer.from(data);
    for (;;) {
      const needed = requestLength(pending);
      if (needed === null || pending.length < needed) break;
      const message = pending.subarray(0, needed);
      pending = Buffer.from(pending.subarray(needed));
      let response: Buffer;
      try {
        response = handle(message);
      } catch (err) {
        response = errorResponse(err);
      }
      process.stdout.write(response);
    }
  });
  process.stdin.on("end", () => process.exit(0));
}

main();
