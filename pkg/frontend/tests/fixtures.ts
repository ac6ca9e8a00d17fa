import type { ProjectManifest } from "../src/manifest.js";

/** Fully-populated two-layer manifest exercising every field, optional ones included. */
export function bentoManifest(): ProjectManifest {
  const prompt = "a bento box with rice, edamame, ginger, and sushi";
  const span = (text: string): [number, number] => {
    const start = prompt.indexOf(text);
    return [start, start + text.length];
  };
  return {
    version: 1,
    prompt,
    negative_prompt: "collage",
    canvas: { w: 64, h: 64 },
    layers: [
      {
        name: "bento box",
        image: "layer_00_bento box.png",
        placement: { x: 0, y: 0, scale: 1 },
        text: "bento box",
        span: span("bento box"),
        noise_level: 0.5,
        controlnet_weight: 0.2,
        attn_pos: 1,
        attn_neg: 1,
      },
      {
        name: "sushi",
        image: "layer_01_sushi.png",
        placement: { x: 24.5, y: 40, scale: 1.25 },
        text: "sushi",
        span: span("sushi"),
        noise_level: 0.8,
        controlnet_weight: 1,
        attn_pos: 1.5,
        attn_neg: 0.75,
        inverted_token: "token_01_sushi.npz",
      },
    ],
  };
}
