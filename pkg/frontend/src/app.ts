/**
 * Browser editor: compose layers, tune per-layer controls, launch
 * generations, review galleries, and click objects to re-generate them.
 * All server interaction goes through ApiClient against the /v1 API.
 */

import { ApiClient, GenerationConfigBody, JobRecord, VisibilityResponse } from "./api.js";
import { EditorState } from "./editor.js";
import { GalleryStore } from "./gallery.js";
import { pickLayer } from "./hittest.js";
import type { ProjectManifest } from "./manifest.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function randomSeeds(n: number): number[] {
  const out: number[] = [];
  for (let i = 0; i < n; i++) out.push(Math.floor(Math.random() * 2 ** 31));
  return out;
}

class App {
  private api: ApiClient;
  private editor: EditorState | null = null;
  private collageId: string | null = null;
  private gallery = new GalleryStore();
  private layerImages = new Map<string, HTMLImageElement>();
  private selectedLayer = 0;
  private visibility: VisibilityResponse | null = null;
  private dragging: { x: number; y: number } | null = null;

  constructor() {
    this.api = new ApiClient((el<HTMLInputElement>("service-url")).value);
    el<HTMLButtonElement>("connect").onclick = () => this.load();
    el<HTMLButtonElement>("save").onclick = () => void this.save();
    el<HTMLButtonElement>("auto").onclick = () => void this.autoParams();
    el<HTMLButtonElement>("generate").onclick = () => void this.generate();
    el<HTMLButtonElement>("refine").onclick = () => void this.refineSelected();
    el<HTMLTextAreaElement>("prompt").oninput = () => this.promptEdited();
    el<HTMLButtonElement>("set-span").onclick = () => this.assignSpanFromSelection();
    this.bindCanvas();
    this.bindPreview();
  }

  private status(text: string): void {
    el<HTMLSpanElement>("status").textContent = text;
  }

  // -- project I/O -------------------------------------------------------

  private async load(): Promise<void> {
    this.api = new ApiClient(el<HTMLInputElement>("service-url").value);
    const id = el<HTMLInputElement>("collage-id").value.trim();
    if (!id) {
      this.status("enter a collage id");
      return;
    }
    try {
      const manifest = await this.api.getCollage(id);
      this.collageId = id;
      this.editor = new EditorState(manifest);
      this.selectedLayer = 0;
      await this.loadLayerImages(manifest);
      this.visibility = await this.api.getVisibility(id, 64, 64);
      this.renderAll();
      this.status(`loaded ${id}`);
    } catch (e) {
      this.status(`load failed: ${(e as Error).message}`);
    }
  }

  private async loadLayerImages(manifest: ProjectManifest): Promise<void> {
    this.layerImages.clear();
    await Promise.all(
      manifest.layers.map(
        (layer) =>
          new Promise<void>((resolve) => {
            const img = new Image();
            img.onload = () => resolve();
            img.onerror = () => resolve();
            img.src = this.api.assetUrl(this.collageId!, layer.image);
            this.layerImages.set(layer.name, img);
          }),
      ),
    );
  }

  private async save(): Promise<void> {
    if (!this.editor || !this.collageId) return;
    const errors = this.editor.validationErrors();
    if (errors.length) {
      this.status(`fix before saving: ${errors[0]}`);
      return;
    }
    await this.api.putCollage(this.collageId, this.editor.toManifest());
    this.editor.markSaved();
    this.visibility = await this.api.getVisibility(this.collageId, 64, 64);
    this.status("saved");
  }

  private async autoParams(): Promise<void> {
    if (!this.editor || !this.collageId) return;
    await this.save();
    const tuned = await this.api.autoparams(this.collageId);
    this.editor.applyAutoParams(tuned);
    this.renderControls();
    this.status("auto params applied (unsaved)");
  }

  // -- layer canvas ------------------------------------------------------

  private bindCanvas(): void {
    const canvas = el<HTMLCanvasElement>("canvas");
    canvas.onmousedown = (ev) => {
      this.dragging = { x: ev.offsetX, y: ev.offsetY };
    };
    canvas.onmousemove = (ev) => {
      if (!this.dragging || !this.editor) return;
      const scale = this.canvasScale();
      const dx = Math.round((ev.offsetX - this.dragging.x) / scale);
      const dy = Math.round((ev.offsetY - this.dragging.y) / scale);
      if (dx || dy) {
        this.editor.moveLayer(this.selectedLayer, dx, dy);
        this.dragging = { x: ev.offsetX, y: ev.offsetY };
        this.renderCanvas();
      }
    };
    canvas.onmouseup = canvas.onmouseleave = () => (this.dragging = null);
    canvas.onwheel = (ev) => {
      if (!this.editor) return;
      ev.preventDefault();
      this.editor.scaleLayer(this.selectedLayer, ev.deltaY < 0 ? 1.1 : 1 / 1.1);
      this.renderCanvas();
    };
  }

  private canvasScale(): number {
    if (!this.editor) return 1;
    return el<HTMLCanvasElement>("canvas").width / this.editor.canvas.w;
  }

  private renderCanvas(): void {
    if (!this.editor) return;
    const canvas = el<HTMLCanvasElement>("canvas");
    const ctx = canvas.getContext("2d")!;
    const scale = this.canvasScale();
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.imageSmoothingEnabled = false;
    this.editor.layers.forEach((layer, i) => {
      const img = this.layerImages.get(layer.name);
      if (!img || !img.complete || !img.naturalWidth) return;
      const p = layer.placement;
      ctx.drawImage(
        img,
        p.x * scale,
        p.y * scale,
        img.naturalWidth * p.scale * scale,
        img.naturalHeight * p.scale * scale,
      );
      if (i === this.selectedLayer) {
        ctx.strokeStyle = "#e33";
        ctx.strokeRect(
          p.x * scale,
          p.y * scale,
          img.naturalWidth * p.scale * scale,
          img.naturalHeight * p.scale * scale,
        );
      }
    });
  }

  // -- layer list + sliders ---------------------------------------------

  private renderControls(): void {
    if (!this.editor) return;
    const list = el<HTMLDivElement>("layers");
    list.innerHTML = "";
    this.editor.layers.forEach((layer, i) => {
      const row = document.createElement("div");
      row.className = "layer-row" + (i === this.selectedLayer ? " selected" : "");
      const title = document.createElement("div");
      title.className = "layer-title";
      title.textContent = `${i + 1}. ${layer.name}  ("${layer.text}")`;
      title.onclick = () => {
        this.selectedLayer = i;
        this.renderAll();
      };
      row.appendChild(title);

      const order = document.createElement("span");
      for (const [label, to] of [["back", i - 1], ["front", i + 1]] as const) {
        const btn = document.createElement("button");
        btn.textContent = label === "back" ? "▼" : "▲";
        btn.title = `move toward the ${label}`;
        btn.disabled = to < 0 || to >= this.editor!.layers.length;
        btn.onclick = () => {
          this.editor!.reorderLayer(i, to);
          if (this.selectedLayer === i) this.selectedLayer = to;
          this.renderAll();
        };
        order.appendChild(btn);
      }
      title.appendChild(order);

      const sliders: Array<["noise_level" | "controlnet_weight" | "attn_pos" | "attn_neg", number, number]> = [
        ["noise_level", 0, 1],
        ["controlnet_weight", 0, 1],
        ["attn_pos", 0, 4],
        ["attn_neg", 0, 4],
      ];
      for (const [field, min, max] of sliders) {
        const wrap = document.createElement("label");
        wrap.className = "slider";
        wrap.textContent = field.replace("_", " ");
        const input = document.createElement("input");
        input.type = "range";
        input.min = String(min);
        input.max = String(max);
        input.step = "0.01";
        input.value = String(layer[field]);
        const value = document.createElement("span");
        value.textContent = Number(layer[field]).toFixed(2);
        input.oninput = () => {
          this.editor!.setSlider(i, field, Number(input.value));
          value.textContent = Number(input.value).toFixed(2);
        };
        wrap.appendChild(input);
        wrap.appendChild(value);
        row.appendChild(wrap);
      }
      list.appendChild(row);
    });
  }

  // -- prompt + spans ------------------------------------------------------

  private promptEdited(): void {
    if (!this.editor) return;
    this.editor.setPrompt(el<HTMLTextAreaElement>("prompt").value);
    this.renderValidation();
  }

  private assignSpanFromSelection(): void {
    if (!this.editor) return;
    const area = el<HTMLTextAreaElement>("prompt");
    const start = area.selectionStart ?? 0;
    const end = area.selectionEnd ?? 0;
    if (end <= start) {
      this.status("select the layer's words in the prompt first");
      return;
    }
    this.editor.setSpan(this.selectedLayer, start, end);
    this.renderControls();
    this.renderValidation();
  }

  private renderValidation(): void {
    if (!this.editor) return;
    el<HTMLDivElement>("validation").textContent =
      this.editor.validationErrors().join("; ") || "";
  }

  // -- generation ----------------------------------------------------------

  private currentConfig(): GenerationConfigBody {
    return {
      ablation: el<HTMLSelectElement>("ablation").value,
      controlnet: el<HTMLInputElement>("controlnet").checked,
      steps: Number(el<HTMLInputElement>("steps").value),
      start_noise: Number(el<HTMLInputElement>("start-noise").value),
    };
  }

  private trackProgress(job: JobRecord): void {
    const bar = el<HTMLProgressElement>("progress");
    bar.max = Math.max(1, job.progress.total);
    bar.value = job.progress.step;
  }

  private async generate(): Promise<void> {
    if (!this.editor || !this.collageId) return;
    await this.save();
    const seeds = randomSeeds(Number(el<HTMLInputElement>("seed-count").value));
    this.status(`generating ${seeds.length} images...`);
    try {
      const jobId = await this.api.generate(this.collageId, seeds, this.currentConfig());
      const job = await this.api.pollJob(jobId, (j) => this.trackProgress(j));
      this.gallery.addRun({ jobId, kind: "generate", imageIds: job.outputs });
      this.renderGallery();
      this.status(`gallery ready (${job.outputs.length} images)`);
    } catch (e) {
      this.status(`generation failed: ${(e as Error).message}`);
    }
  }

  // -- gallery + refinement -------------------------------------------------

  private renderGallery(): void {
    const grid = el<HTMLDivElement>("gallery");
    grid.innerHTML = "";
    const run = this.gallery.current;
    if (!run) return;
    for (const id of run.imageIds) {
      const img = document.createElement("img");
      img.src = this.api.imageUrl(id);
      img.className = "thumb" + (this.gallery.pickedImage === id ? " picked" : "");
      img.onclick = () => {
        this.gallery.pick(id);
        el<HTMLImageElement>("preview").src = this.api.imageUrl(id);
        this.renderGallery();
      };
      grid.appendChild(img);
    }
  }

  private bindPreview(): void {
    el<HTMLImageElement>("preview").onclick = (ev) => {
      if (!this.visibility) return;
      const target = ev.currentTarget as HTMLImageElement;
      const rect = target.getBoundingClientRect();
      const hit = pickLayer(
        this.visibility,
        (ev.clientX - rect.left) / rect.width,
        (ev.clientY - rect.top) / rect.height,
      );
      if (hit) {
        el<HTMLSelectElement>("refine-layer").value = hit.layerName;
        this.status(`picked layer '${hit.layerName}' for refinement`);
      }
    };
  }

  private renderRefinePanel(): void {
    if (!this.editor) return;
    const select = el<HTMLSelectElement>("refine-layer");
    select.innerHTML = "";
    for (const layer of this.editor.layers) {
      const option = document.createElement("option");
      option.value = layer.name;
      option.textContent = layer.name;
      select.appendChild(option);
    }
  }

  private async refineSelected(): Promise<void> {
    const picked = this.gallery.pickedImage;
    if (!picked) {
      this.status("pick a gallery image first");
      return;
    }
    const layerName = el<HTMLSelectElement>("refine-layer").value;
    const seeds = randomSeeds(Number(el<HTMLInputElement>("seed-count").value));
    this.status(`re-generating '${layerName}'...`);
    try {
      const jobId = await this.api.refine(picked, layerName, seeds, this.currentConfig());
      const job = await this.api.pollJob(jobId, (j) => this.trackProgress(j));
      this.gallery.addRun({
        jobId,
        kind: "refine",
        imageIds: job.outputs,
        refinedLayer: layerName,
        sourceImageId: picked,
      });
      this.renderGallery();
      this.status(`refinement gallery ready (${job.outputs.length} images)`);
    } catch (e) {
      this.status(`refinement failed: ${(e as Error).message}`);
    }
  }

  // -- top-level render ------------------------------------------------------

  private renderAll(): void {
    if (!this.editor) return;
    const canvas = el<HTMLCanvasElement>("canvas");
    canvas.width = 512;
    canvas.height = Math.round((512 * this.editor.canvas.h) / this.editor.canvas.w);
    el<HTMLTextAreaElement>("prompt").value = this.editor.prompt;
    this.renderCanvas();
    this.renderControls();
    this.renderRefinePanel();
    this.renderValidation();
  }
}

window.addEventListener("DOMContentLoaded", () => new App());
