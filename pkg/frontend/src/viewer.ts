/**
 * Connection and session logic, kept free of DOM types so it runs under node
 * tests with an injected socket implementation. The browser entry point
 * supplies the real WebSocket and a canvas sink.
 */

import { Hud } from "./hud.js";
import type { OrbitController } from "./orbit.js";
import {
  binaryKind,
  decodeFrame,
  helloMessage,
  parseStats,
  ProtocolError,
  type FrameMessage,
} from "./protocol.js";

export type ConnectionStatus = "connecting" | "connected" | "reconnecting" | "closed";

/** Structural subset of the browser WebSocket that `ws` also implements. */
export interface SocketLike {
  binaryType: string;
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export interface ViewerOptions {
  makeSocket: (url: string) => SocketLike;
  onFrame?: (frame: FrameMessage) => void;
  onStatus?: (status: ConnectionStatus, detail?: string) => void;
  onProtocolError?: (message: string) => void;
  setTimer?: (fn: () => void, ms: number) => unknown;
  now?: () => number;
  backoffMs?: number;
  maxBackoffMs?: number;
}

export class ViewerSession {
  readonly hud = new Hud();
  status: ConnectionStatus = "connecting";
  errorBanner: string | null = null;
  framesReceived = 0;

  private url: string;
  private opts: ViewerOptions;
  private socket: SocketLike | null = null;
  private backoff: number;
  private closedByUser = false;

  constructor(url: string, opts: ViewerOptions) {
    this.url = url;
    this.opts = opts;
    this.backoff = opts.backoffMs ?? 250;
  }

  connect(): void {
    this.setStatus("connecting");
    const sock = this.opts.makeSocket(this.url);
    this.socket = sock;
    sock.binaryType = "arraybuffer";
    sock.onopen = () => {
      this.backoff = this.opts.backoffMs ?? 250;
      sock.send(helloMessage(true, true));
      this.setStatus("connected");
    };
    sock.onmessage = (ev) => this.handleMessage(ev.data);
    sock.onerror = () => {
      /* the close handler owns reconnection */
    };
    sock.onclose = () => {
      this.socket = null;
      if (!this.closedByUser) {
        this.scheduleReconnect();
      }
    };
  }

  close(): void {
    this.closedByUser = true;
    this.setStatus("closed");
    this.socket?.close();
    this.socket = null;
  }

  /** Drive once per animation tick: flushes at most one coalesced camera message. */
  tick(controller: OrbitController): void {
    const msg = controller.takeMessage();
    if (msg !== null && this.status === "connected" && this.socket) {
      this.socket.send(msg);
    }
  }

  private now(): number {
    return this.opts.now ? this.opts.now() : Date.now();
  }

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      const stats = parseStats(data);
      if (stats) {
        this.hud.update(stats, this.now());
      }
      return;
    }
    let buf: ArrayBuffer;
    if (data instanceof ArrayBuffer) {
      buf = data;
    } else if (ArrayBuffer.isView(data as ArrayBufferView)) {
      const view = data as ArrayBufferView;
      buf = view.buffer.slice(view.byteOffset, view.byteOffset + view.byteLength) as ArrayBuffer;
    } else {
      return;
    }
    const kind = binaryKind(buf);
    if (kind === "changeset") {
      return; // scene replication is not this client's concern
    }
    try {
      const frame = decodeFrame(buf);
      this.framesReceived += 1;
      this.hud.noteFrame(frame.frameId);
      this.opts.onFrame?.(frame);
    } catch (err) {
      const msg = err instanceof ProtocolError ? err.message : String(err);
      this.errorBanner = msg;
      this.opts.onProtocolError?.(msg);
    }
  }

  private setStatus(status: ConnectionStatus, detail?: string): void {
    this.status = status;
    this.opts.onStatus?.(status, detail);
  }

  private scheduleReconnect(): void {
    this.setStatus("reconnecting", `retry in ${this.backoff} ms`);
    const timer = this.opts.setTimer ?? ((fn: () => void, ms: number) => setTimeout(fn, ms));
    const delay = this.backoff;
    this.backoff = Math.min(this.backoff * 2, this.opts.maxBackoffMs ?? 5000);
    timer(() => {
      if (!this.closedByUser) {
        this.connect();
      }
    }, delay);
  }
}
