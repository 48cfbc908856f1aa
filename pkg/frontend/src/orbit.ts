/**
 * Orbit camera: yaw/pitch/distance around a target point, +y up.
 * Pointer input accumulates into the state; the controller emits at most one
 * camera message per animation tick no matter how many events arrived.
 */

import { cameraMessage } from "./protocol.js";

export interface OrbitState {
  target: [number, number, number];
  distance: number;
  yaw: number;
  pitch: number;
  fovY: number;
}

const PITCH_LIMIT = Math.PI / 2 - 1e-3;
const MIN_DISTANCE = 1e-3;

export function clampOrbit(state: OrbitState): OrbitState {
  state.pitch = Math.min(Math.max(state.pitch, -PITCH_LIMIT), PITCH_LIMIT);
  state.distance = Math.max(state.distance, MIN_DISTANCE);
  return state;
}

export function orbitPosition(s: OrbitState): [number, number, number] {
  const cp = Math.cos(s.pitch);
  return [
    s.target[0] + s.distance * cp * Math.sin(s.yaw),
    s.target[1] + s.distance * Math.sin(s.pitch),
    s.target[2] + s.distance * cp * Math.cos(s.yaw),
  ];
}

type Vec3 = [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n === 0) throw new Error("zero vector");
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** Quaternion (x, y, z, w) looking from the orbit position at the target, +y-ish up. */
export function orbitQuaternion(s: OrbitState): [number, number, number, number] {
  const eye = orbitPosition(s);
  const fwd = normalize(sub(s.target, eye));
  let right: Vec3;
  try {
    right = normalize(cross(fwd, [0, 1, 0]));
  } catch {
    right = [1, 0, 0];
  }
  const up = cross(right, fwd);
  // column-major rotation basis: x=right, y=up, z=-fwd
  const m = [
    [right[0], up[0], -fwd[0]],
    [right[1], up[1], -fwd[1]],
    [right[2], up[2], -fwd[2]],
  ];
  const trace = m[0][0] + m[1][1] + m[2][2];
  let x: number, y: number, z: number, w: number;
  if (trace > 0) {
    const sq = Math.sqrt(trace + 1) * 2;
    w = sq / 4;
    x = (m[2][1] - m[1][2]) / sq;
    y = (m[0][2] - m[2][0]) / sq;
    z = (m[1][0] - m[0][1]) / sq;
  } else if (m[0][0] >= m[1][1] && m[0][0] >= m[2][2]) {
    const sq = Math.sqrt(1 + m[0][0] - m[1][1] - m[2][2]) * 2;
    x = sq / 4;
    y = (m[0][1] + m[1][0]) / sq;
    z = (m[0][2] + m[2][0]) / sq;
    w = (m[2][1] - m[1][2]) / sq;
  } else if (m[1][1] >= m[2][2]) {
    const sq = Math.sqrt(1 + m[1][1] - m[0][0] - m[2][2]) * 2;
    x = (m[0][1] + m[1][0]) / sq;
    y = sq / 4;
    z = (m[1][2] + m[2][1]) / sq;
    w = (m[0][2] - m[2][0]) / sq;
  } else {
    const sq = Math.sqrt(1 + m[2][2] - m[0][0] - m[1][1]) * 2;
    x = (m[0][2] + m[2][0]) / sq;
    y = (m[1][2] + m[2][1]) / sq;
    z = sq / 4;
    w = (m[1][0] - m[0][1]) / sq;
  }
  const n = Math.hypot(x, y, z, w);
  return [x / n, y / n, z / n, w / n];
}

/** Rotate a vector by a quaternion; handy for verifying the look direction. */
export function rotateByQuat(q: [number, number, number, number], v: Vec3): Vec3 {
  const [x, y, z, w] = q;
  const uv = cross([x, y, z], v);
  const uuv = cross([x, y, z], uv);
  return [
    v[0] + 2 * (w * uv[0] + uuv[0]),
    v[1] + 2 * (w * uv[1] + uuv[1]),
    v[2] + 2 * (w * uv[2] + uuv[2]),
  ];
}

export class OrbitController {
  state: OrbitState;
  rotateSensitivity: number;
  zoomSensitivity: number;
  private dirty = false;

  constructor(state: OrbitState, rotateSensitivity = 0.006, zoomSensitivity = 0.0012) {
    this.state = clampOrbit({ ...state });
    this.rotateSensitivity = rotateSensitivity;
    this.zoomSensitivity = zoomSensitivity;
  }

  drag(dxPx: number, dyPx: number): void {
    this.state.yaw += dxPx * this.rotateSensitivity;
    this.state.pitch += dyPx * this.rotateSensitivity;
    clampOrbit(this.state);
    this.dirty = true;
  }

  wheel(deltaY: number): void {
    this.state.distance *= Math.exp(deltaY * this.zoomSensitivity);
    clampOrbit(this.state);
    this.dirty = true;
  }

  /** The camera message for this animation tick, or null when nothing moved.
   *  Any number of input events between ticks coalesce into one message. */
  takeMessage(): string | null {
    if (!this.dirty) return null;
    this.dirty = false;
    return cameraMessage(orbitPosition(this.state), orbitQuaternion(this.state), this.state.fovY);
  }
}
