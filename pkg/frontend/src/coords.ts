/**
 * Canvas <-> voxel coordinate mapping.
 *
 * Volumes use (d, h, w) axis order. A slice along axis A shows the remaining
 * two axes as (row, col):
 *   axis 0 -> rows = h, cols = w
 *   axis 1 -> rows = d, cols = w
 *   axis 2 -> rows = d, cols = h
 * The canvas draws the slice at an integer zoom factor; canvas y is the row.
 */

export type Axis = 0 | 1 | 2;

export interface VolumeShape {
  d: number;
  h: number;
  w: number;
}

export interface Voxel {
  z: number; // axis 0
  y: number; // axis 1
  x: number; // axis 2
}

export function sliceDims(shape: VolumeShape, axis: Axis): { rows: number; cols: number } {
  switch (axis) {
    case 0: return { rows: shape.h, cols: shape.w };
    case 1: return { rows: shape.d, cols: shape.w };
    case 2: return { rows: shape.d, cols: shape.h };
  }
}

export function sliceCount(shape: VolumeShape, axis: Axis): number {
  return axis === 0 ? shape.d : axis === 1 ? shape.h : shape.w;
}

/**
 * Map a click inside the canvas to a voxel, or null if outside the image.
 * canvasX/canvasY are pixels relative to the canvas origin; zoom is the
 * integer scale the slice is drawn at.
 */
export function canvasToVoxel(
  canvasX: number,
  canvasY: number,
  axis: Axis,
  index: number,
  shape: VolumeShape,
  zoom: number,
): Voxel | null {
  const col = Math.floor(canvasX / zoom);
  const row = Math.floor(canvasY / zoom);
  const { rows, cols } = sliceDims(shape, axis);
  if (row < 0 || row >= rows || col < 0 || col >= cols) return null;
  if (index < 0 || index >= sliceCount(shape, axis)) return null;
  switch (axis) {
    case 0: return { z: index, y: row, x: col };
    case 1: return { z: row, y: index, x: col };
    case 2: return { z: row, y: col, x: index };
  }
}

/** Position of a voxel within a given slice view, or null if not on it. */
export function voxelToCanvas(
  v: Voxel,
  axis: Axis,
  index: number,
  zoom: number,
): { x: number; y: number; onSlice: boolean } {
  let row: number;
  let col: number;
  let sliceIdx: number;
  switch (axis) {
    case 0: row = v.y; col = v.x; sliceIdx = v.z; break;
    case 1: row = v.z; col = v.x; sliceIdx = v.y; break;
    case 2: row = v.z; col = v.y; sliceIdx = v.x; break;
  }
  return {
    x: col * zoom + zoom / 2,
    y: row * zoom + zoom / 2,
    onSlice: sliceIdx === index,
  };
}

export function clampIndex(index: number, shape: VolumeShape, axis: Axis): number {
  const n = sliceCount(shape, axis);
  return Math.min(Math.max(index, 0), n - 1);
}
