import { describe, expect, it } from "vitest";

import { VisibilityResponse } from "../src/api.js";
import { pickLayer } from "../src/hittest.js";

function bentoVisibility(): VisibilityResponse {
  // 8x8 layout matching the server's map for the worked fixture:
  // row 0 box, edamame top-left block, ginger top-right, rice bottom-left,
  // sushi bottom-middle, box margins elsewhere, one uncovered hole at (4,4).
  const v = [
    [1, 1, 1, 1, 1, 1, 1, 1],
    [1, 3, 3, 3, 1, 4, 4, 4],
    [1, 3, 3, 3, 1, 4, 4, 4],
    [1, 3, 3, 3, 1, 4, 4, 4],
    [1, 1, 1, 1, 0, 1, 1, 1],
    [2, 2, 2, 5, 5, 5, 5, 1],
    [2, 2, 2, 5, 5, 5, 5, 1],
    [2, 2, 2, 5, 5, 5, 5, 1],
  ];
  return {
    resolution: { h: 8, w: 8 },
    indices: v,
    layers: ["bento box", "rice", "edamame", "ginger", "sushi"],
  };
}

describe("visibility hit testing", () => {
  it("maps clicks to the visible layer", () => {
    const vis = bentoVisibility();
    expect(pickLayer(vis, 0.5, 0.75)!.layerName).toBe("sushi");
    expect(pickLayer(vis, 0.2, 0.3)!.layerName).toBe("edamame");
    expect(pickLayer(vis, 0.8, 0.2)!.layerName).toBe("ginger");
    expect(pickLayer(vis, 0.05, 0.9)!.layerName).toBe("rice");
    expect(pickLayer(vis, 0.5, 0.05)!.layerName).toBe("bento box");
  });

  it("returns null on uncovered cells and outside the canvas", () => {
    const vis = bentoVisibility();
    expect(pickLayer(vis, 0.55, 0.55)).toBeNull(); // the hole at (4,4)
    expect(pickLayer(vis, -0.1, 0.5)).toBeNull();
    expect(pickLayer(vis, 0.5, 1.2)).toBeNull();
  });

  it("cell indexing hits exact boundaries correctly", () => {
    const vis = bentoVisibility();
    // exactly on the border between edamame block and the box margin column
    expect(pickLayer(vis, 4 / 8, 1 / 8)!.layerName).toBe("bento box");
    expect(pickLayer(vis, 3.99 / 8, 1 / 8)!.layerName).toBe("edamame");
  });
});
