/**
 * Slice viewer state and rendering. The server is the source of truth for
 * masks and prompt history; this module never computes a mask itself.
 */

import { ApiClient, PromptRecord, SliceResponse, Polarity } from "./api.js";
import { Axis, VolumeShape, Voxel, canvasToVoxel, clampIndex, sliceDims, voxelToCanvas } from "./coords.js";
import { rleDecode } from "./rle.js";

export interface PlacedPoint extends Voxel {
  polarity: Polarity;
}

export class ViewerState {
  sessionId = "";
  shape: VolumeShape = { d: 0, h: 0, w: 0 };
  axis: Axis = 0;
  index = 0;
  zoom = 6;
  overlayOpacity = 0.45;
  showOverlay = true;
  points: PlacedPoint[] = [];
  clickLog: PromptRecord[] = [];
  dsc: number | null = null;
  hasGt = false;
  private sliceCache = new Map<string, SliceResponse>();

  constructor(private client: ApiClient) {}

  async open(volumeId: string, target?: string): Promise<void> {
    const info = await this.client.createSession(volumeId, target);
    this.sessionId = info.session_id;
    const [d, h, w] = info.shape;
    this.shape = { d, h, w };
    this.hasGt = info.has_gt;
    this.axis = 0;
    this.index = Math.floor(d / 2);
    this.points = [];
    this.clickLog = [];
    this.dsc = null;
    this.sliceCache.clear();
  }

  /** Map a canvas click to a prompt; returns null for out-of-bounds clicks
   * (no request is sent in that case). */
  clickToPrompt(canvasX: number, canvasY: number, polarity: Polarity): PromptRecord | null {
    const v = canvasToVoxel(canvasX, canvasY, this.axis, this.index, this.shape, this.zoom);
    if (v === null) return null;
    return { x: v.x, y: v.y, z: v.z, polarity };
  }

  async sendPrompt(p: PromptRecord): Promise<void> {
    const resp = await this.client.prompt(this.sessionId, p);
    this.points.push({ z: p.z, y: p.y, x: p.x, polarity: p.polarity });
    this.clickLog.push(p);
    this.dsc = resp.dsc ?? null;
    this.sliceCache.clear(); // mask changed; cached slices are stale
  }

  async fetchSlice(): Promise<SliceResponse> {
    const key = `${this.axis}/${this.index}`;
    const hit = this.sliceCache.get(key);
    if (hit) return hit;
    const resp = await this.client.getSlice(this.sessionId, this.axis, this.index);
    this.sliceCache.set(key, resp);
    return resp;
  }

  scrub(delta: number): void {
    this.index = clampIndex(this.index + delta, this.shape, this.axis);
  }

  setAxis(axis: Axis): void {
    this.axis = axis;
    this.index = clampIndex(this.index, this.shape, this.axis);
  }

  promptCount(): number {
    return this.clickLog.length;
  }
}

function decodeBase64(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function renderSlice(
  ctx: CanvasRenderingContext2D,
  state: ViewerState,
  slice: SliceResponse,
): void {
  const { rows, cols } = sliceDims(state.shape, state.axis);
  const zoom = state.zoom;
  const img = decodeBase64(slice.image_b64);
  const mask = rleDecode(slice.mask_rle, rows * cols);
  const gt = slice.gt_rle ? rleDecode(slice.gt_rle, rows * cols) : null;

  const pix = ctx.createImageData(cols * zoom, rows * zoom);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const i = r * cols + c;
      const g = img[i];
      let [cr, cg, cb] = [g, g, g];
      if (state.showOverlay && mask[i]) {
        cr = Math.min(255, cr + 255 * state.overlayOpacity);
      }
      if (state.showOverlay && gt && gt[i]) {
        cg = Math.min(255, cg + 128 * state.overlayOpacity);
      }
      for (let dy = 0; dy < zoom; dy++) {
        for (let dx = 0; dx < zoom; dx++) {
          const o = ((r * zoom + dy) * cols * zoom + c * zoom + dx) * 4;
          pix.data[o] = cr;
          pix.data[o + 1] = cg;
          pix.data[o + 2] = cb;
          pix.data[o + 3] = 255;
        }
      }
    }
  }
  ctx.putImageData(pix, 0, 0);

  for (const p of state.points) {
    const pos = voxelToCanvas(p, state.axis, state.index, state.zoom);
    ctx.beginPath();
    ctx.arc(pos.x, pos.y, pos.onSlice ? 4 : 2, 0, 2 * Math.PI);
    ctx.fillStyle = p.polarity === "positive"
      ? (pos.onSlice ? "#2fd22f" : "rgba(47,210,47,0.35)")
      : (pos.onSlice ? "#ff4040" : "rgba(255,64,64,0.35)");
    ctx.fill();
  }
}
