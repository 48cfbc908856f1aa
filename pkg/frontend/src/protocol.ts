/**
 * Wire protocol (client side). Binary frames and changesets share the
 * server's layouts; control messages are JSON text. All integers are
 * little-endian.
 *
 * Frame message:
 *   magic "SCFR" | version u8 (=1) | frameId u64 | width u16 | height u16 |
 *   format u8 (0 = RGBA8) | payloadLength u32 | payload bytes
 */

export const FRAME_MAGIC = 0x53434652; // "SCFR" big-endian read
export const CHANGESET_MAGIC = 0x53434353; // "SCCS"
export const PROTOCOL_VERSION = 1;
export const FRAME_HEADER_BYTES = 22;

export class ProtocolError extends Error {}

export interface FrameMessage {
  frameId: number;
  width: number;
  height: number;
  format: number;
  pixels: Uint8Array; // RGBA8, row-major, top-left origin
}

export type BinaryKind = "frame" | "changeset" | "unknown";

export function binaryKind(buf: ArrayBuffer): BinaryKind {
  if (buf.byteLength < 4) return "unknown";
  const magic = new DataView(buf).getUint32(0, false);
  if (magic === FRAME_MAGIC) return "frame";
  if (magic === CHANGESET_MAGIC) return "changeset";
  return "unknown";
}

export function decodeFrame(buf: ArrayBuffer): FrameMessage {
  if (buf.byteLength < FRAME_HEADER_BYTES) {
    throw new ProtocolError(`frame header truncated: ${buf.byteLength} bytes`);
  }
  const view = new DataView(buf);
  if (view.getUint32(0, false) !== FRAME_MAGIC) {
    throw new ProtocolError("bad magic: expected SCFR");
  }
  const version = view.getUint8(4);
  if (version !== PROTOCOL_VERSION) {
    throw new ProtocolError(`unsupported protocolVersion ${version}`);
  }
  const frameId = view.getBigUint64(5, true);
  if (frameId > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new ProtocolError("frameId exceeds safe integer range");
  }
  const width = view.getUint16(13, true);
  const height = view.getUint16(15, true);
  const format = view.getUint8(17);
  if (format !== 0) {
    throw new ProtocolError(`unsupported format ${format}`);
  }
  const payloadLength = view.getUint32(18, true);
  const payload = new Uint8Array(buf, FRAME_HEADER_BYTES);
  if (payloadLength !== width * height * 4 || payload.byteLength !== payloadLength) {
    throw new ProtocolError(
      `payloadLength mismatch: header ${payloadLength}, dims want ${width * height * 4}, got ${payload.byteLength}`,
    );
  }
  return { frameId: Number(frameId), width, height, format, pixels: payload };
}

export function helloMessage(wantsFrames: boolean, wantsStats: boolean): string {
  return JSON.stringify({ type: "hello", wantsFrames, wantsStats });
}

export function cameraMessage(pos: number[], quat: number[], fovY: number): string {
  return JSON.stringify({ type: "camera", pos, quat, fovY });
}

export interface StatsSnapshot {
  frameId: number;
  fps: number;
  residentSlots: number;
  pendingLoads: number;
  absentSamples: number;
  evictions?: number;
  cpuHits?: number;
  sourceReads?: number;
}

export function parseStats(text: string): StatsSnapshot | null {
  let doc: Record<string, unknown>;
  try {
    doc = JSON.parse(text);
  } catch {
    return null;
  }
  if (doc["type"] !== "stats") return null;
  return {
    frameId: Number(doc["frameId"] ?? -1),
    fps: Number(doc["fps"] ?? 0),
    residentSlots: Number(doc["residentSlots"] ?? 0),
    pendingLoads: Number(doc["pendingLoads"] ?? 0),
    absentSamples: Number(doc["absentSamples"] ?? 0),
    evictions: Number(doc["evictions"] ?? 0),
    cpuHits: Number(doc["cpuHits"] ?? 0),
    sourceReads: Number(doc["sourceReads"] ?? 0),
  };
}
