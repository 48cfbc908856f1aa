/**
 * Stats HUD state: latest server stats, staleness tracking, and an
 * absent-samples sparkline so refinement (absent trending to 0) is visible.
 */

import type { StatsSnapshot } from "./protocol.js";

export const STALE_AFTER_MS = 2000;
const BLOCKS = "▁▂▃▄▅▆▇█";
const HISTORY = 60;

export class Hud {
  latest: StatsSnapshot | null = null;
  latestFrameId = -1;
  absentHistory: number[] = [];
  private lastUpdateMs = -Infinity;

  update(stats: StatsSnapshot, nowMs: number): void {
    this.latest = stats;
    this.lastUpdateMs = nowMs;
    this.absentHistory.push(stats.absentSamples);
    if (this.absentHistory.length > HISTORY) {
      this.absentHistory.shift();
    }
  }

  noteFrame(frameId: number): void {
    this.latestFrameId = Math.max(this.latestFrameId, frameId);
  }

  isStale(nowMs: number): boolean {
    return nowMs - this.lastUpdateMs > STALE_AFTER_MS;
  }

  sparkline(): string {
    if (this.absentHistory.length === 0) return "";
    const max = Math.max(...this.absentHistory, 1);
    return this.absentHistory
      .map((v) => BLOCKS[Math.min(Math.floor((v / max) * (BLOCKS.length - 1)), BLOCKS.length - 1)])
      .join("");
  }

  lines(nowMs: number): string[] {
    const s = this.latest;
    const stale = this.isStale(nowMs);
    const fmt = (v: number | undefined) => (s == null || stale || v == null ? "—" : String(v));
    const fps = s == null || stale ? "—" : s.fps.toFixed(1);
    return [
      `fps ${fps}${stale && s != null ? " (stale)" : ""}`,
      `frame ${this.latestFrameId >= 0 ? this.latestFrameId : "—"}`,
      `resident ${fmt(s?.residentSlots)}`,
      `pending ${fmt(s?.pendingLoads)}`,
      `absent ${fmt(s?.absentSamples)}`,
      this.sparkline(),
    ];
  }
}
