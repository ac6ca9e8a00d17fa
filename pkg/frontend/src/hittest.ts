/**
 * Click-to-layer hit testing against the server-computed visibility map,
 * so what the editor selects is exactly what the pipeline will treat as
 * that layer's region.
 */

import type { VisibilityResponse } from "./api.js";

export interface Hit {
  layerIndex: number; // 1-based, as in the visibility map
  layerName: string;
}

/**
 * Map a click at fractional canvas coordinates (0..1) to the visible layer.
 * Returns null where no layer covers the cell.
 */
export function pickLayer(vis: VisibilityResponse, xFrac: number, yFrac: number): Hit | null {
  if (!(xFrac >= 0 && xFrac < 1 && yFrac >= 0 && yFrac < 1)) return null;
  const row = Math.min(vis.resolution.h - 1, Math.floor(yFrac * vis.resolution.h));
  const col = Math.min(vis.resolution.w - 1, Math.floor(xFrac * vis.resolution.w));
  const index = vis.indices[row]?.[col] ?? 0;
  if (index <= 0) return null;
  const name = vis.layers[index - 1];
  if (name === undefined) return null;
  return { layerIndex: index, layerName: name };
}
