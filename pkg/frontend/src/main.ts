/** Browser entry point: canvas blit, pointer-to-orbit wiring, HUD text. */

import { Hud } from "./hud.js";
import { OrbitController } from "./orbit.js";
import type { FrameMessage } from "./protocol.js";
import { ViewerSession } from "./viewer.js";

function blit(canvas: HTMLCanvasElement, frame: FrameMessage): void {
  if (canvas.width !== frame.width || canvas.height !== frame.height) {
    canvas.width = frame.width;
    canvas.height = frame.height;
  }
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const image = new ImageData(new Uint8ClampedArray(frame.pixels), frame.width, frame.height);
  ctx.putImageData(image, 0, 0);
}

function hudText(hud: Hud, status: string, banner: string | null): string {
  const lines = hud.lines(Date.now());
  lines.unshift(`link ${status}`);
  if (banner) {
    lines.unshift(`! ${banner}`);
  }
  return lines.join("\n");
}

export function start(): void {
  const canvas = document.getElementById("frame") as HTMLCanvasElement;
  const overlay = document.getElementById("hud") as HTMLPreElement;
  const url = `ws://${location.host || "127.0.0.1:9000"}/`;

  const controller = new OrbitController({
    target: [0.5, 0.5, 0.5],
    distance: 3.0,
    yaw: 0.0,
    pitch: 0.2,
    fovY: 0.9,
  });

  const session = new ViewerSession(url, {
    makeSocket: (u) => new WebSocket(u) as unknown as import("./viewer.js").SocketLike,
    onFrame: (frame) => blit(canvas, frame),
  });
  session.connect();

  let dragging = false;
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (dragging) {
      controller.drag(ev.movementX, ev.movementY);
    }
  });
  canvas.addEventListener("wheel", (ev) => {
    controller.wheel(ev.deltaY);
    ev.preventDefault();
  });

  const frameLoop = () => {
    session.tick(controller);
    overlay.textContent = hudText(session.hud, session.status, session.errorBanner);
    requestAnimationFrame(frameLoop);
  };
  requestAnimationFrame(frameLoop);
}

start();
