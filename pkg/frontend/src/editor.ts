/**
 * Editor state: pure transitions over the project manifest. The DOM layer
 * calls these and re-renders; every request the app sends is derived from
 * the manifest this state holds plus explicit user input, nothing else.
 */

import type { LayerManifest, ProjectManifest } from "./manifest.js";
import { cloneManifest, spanErrors } from "./manifest.js";

export class EditorState {
  private manifest: ProjectManifest;
  private dirty = false;

  constructor(manifest: ProjectManifest) {
    this.manifest = cloneManifest(manifest);
  }

  /** Snapshot to send to the service (deep copy; callers cannot mutate us). */
  toManifest(): ProjectManifest {
    return cloneManifest(this.manifest);
  }

  get isDirty(): boolean {
    return this.dirty;
  }

  markSaved(): void {
    this.dirty = false;
  }

  get layers(): readonly LayerManifest[] {
    return this.manifest.layers;
  }

  get prompt(): string {
    return this.manifest.prompt;
  }

  get canvas(): { w: number; h: number } {
    return this.manifest.canvas;
  }

  private layer(index: number): LayerManifest {
    const layer = this.manifest.layers[index];
    if (!layer) throw new Error(`no layer at index ${index}`);
    return layer;
  }

  /** Drag: translate a layer by whole pixels. */
  moveLayer(index: number, dx: number, dy: number): void {
    const p = this.layer(index).placement;
    p.x += dx;
    p.y += dy;
    this.dirty = true;
  }

  /** Wheel/pinch: multiply the uniform scale, clamped to something sane. */
  scaleLayer(index: number, factor: number): void {
    const p = this.layer(index).placement;
    p.scale = Math.min(64, Math.max(1 / 64, p.scale * factor));
    this.dirty = true;
  }

  /** Reorder in the back-to-front list. */
  reorderLayer(from: number, to: number): void {
    const layers = this.manifest.layers;
    if (from < 0 || from >= layers.length || to < 0 || to >= layers.length) {
      throw new Error(`reorder out of range: ${from} -> ${to}`);
    }
    const [moved] = layers.splice(from, 1);
    layers.splice(to, 0, moved!);
    this.dirty = true;
  }

  setPrompt(text: string): void {
    this.manifest.prompt = text;
    this.dirty = true;
  }

  setNegativePrompt(text: string): void {
    this.manifest.negative_prompt = text;
    this.dirty = true;
  }

  /**
   * Define a layer's text by selecting [start, end) in the prompt; the
   * layer text is read from the prompt so span and text cannot disagree.
   */
  setSpan(index: number, start: number, end: number): void {
    if (start < 0 || end < start || end > this.manifest.prompt.length) {
      throw new Error(`span [${start}, ${end}) is outside the prompt`);
    }
    const layer = this.layer(index);
    layer.span = [start, end];
    layer.text = this.manifest.prompt.slice(start, end);
    this.dirty = true;
  }

  setSlider(
    index: number,
    field: "noise_level" | "controlnet_weight" | "attn_pos" | "attn_neg",
    value: number,
  ): void {
    if (field === "noise_level" || field === "controlnet_weight") {
      value = Math.min(1, Math.max(0, value));
    } else {
      value = Math.max(0, value);
    }
    this.layer(index)[field] = value;
    this.dirty = true;
  }

  /** Populate sliders from an autoparams manifest copy (same layer names). */
  applyAutoParams(tuned: ProjectManifest): void {
    const byName = new Map(tuned.layers.map((l) => [l.name, l]));
    for (const layer of this.manifest.layers) {
      const t = byName.get(layer.name);
      if (!t) continue;
      layer.noise_level = t.noise_level;
      layer.controlnet_weight = t.controlnet_weight;
      layer.attn_pos = t.attn_pos;
      layer.attn_neg = t.attn_neg;
    }
    this.dirty = true;
  }

  /** Validation mirroring the server's token-mapping rejections. */
  validationErrors(): string[] {
    return spanErrors(this.manifest);
  }
}
