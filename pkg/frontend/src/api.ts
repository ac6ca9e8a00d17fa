/**
 * Typed client for the /v1 service API. The fetch implementation and the
 * sleep used by job polling are injectable so tests can inspect every
 * outgoing request without a network.
 */

import type { ProjectManifest } from "./manifest.js";
import { serializeManifest } from "./manifest.js";

export interface GenerationConfigBody {
  ablation?: string; // "gh" | "gh+ca" | "gh+ca+ti" | "gh+ca+ti+ln"
  controlnet?: boolean;
  steps?: number;
  start_noise?: number;
  guidance_scale?: number;
  negative_prompt?: string;
  background_noise_level?: number;
}

export interface JobRecord {
  id: string;
  kind: string;
  collage_id: string;
  state: "queued" | "running" | "done" | "failed";
  progress: { step: number; total: number };
  outputs: string[];
  error: string | null;
}

export interface VisibilityResponse {
  resolution: { h: number; w: number };
  indices: number[][];
  layers: string[];
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/**
 * Build the refine request body. The background of a refinement is always
 * pinned: background_noise_level is exactly 0 unless the caller explicitly
 * overrides the config, and the layer id passes through untouched.
 */
export function buildRefineBody(
  layerName: string,
  seeds: number[],
  config: GenerationConfigBody,
): { layer: string; seeds: number[]; config: GenerationConfigBody } {
  return {
    layer: layerName,
    seeds: [...seeds],
    config: { ...config, background_noise_level: 0 },
  };
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
    private sleep: (ms: number) => Promise<void> = (ms) =>
      new Promise((r) => setTimeout(r, ms)),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}/v1${path}`;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(this.url(path), init);
    if (!resp.ok) {
      let detail = `${resp.status}`;
      try {
        detail = ((await resp.json()) as { detail?: string }).detail ?? detail;
      } catch {
        /* non-JSON error body */
      }
      throw new Error(detail);
    }
    return (await resp.json()) as T;
  }

  async createCollage(
    manifest: ProjectManifest,
    images: Array<{ name: string; blob: Blob }>,
  ): Promise<string> {
    const form = new FormData();
    form.append(
      "manifest",
      new Blob([serializeManifest(manifest)], { type: "application/json" }),
      "collage.json",
    );
    for (const img of images) form.append("images", img.blob, img.name);
    const body = await this.json<{ id: string }>("/collages", {
      method: "POST",
      body: form,
    });
    return body.id;
  }

  getCollage(id: string): Promise<ProjectManifest> {
    return this.json(`/collages/${id}`);
  }

  /** Persist edits; the body is the manifest serialization, byte for byte. */
  putCollage(id: string, manifest: ProjectManifest): Promise<ProjectManifest> {
    return this.json(`/collages/${id}`, {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: serializeManifest(manifest),
    });
  }

  assetUrl(collageId: string, name: string): string {
    return this.url(`/collages/${collageId}/assets/${encodeURIComponent(name)}`);
  }

  getVisibility(id: string, w?: number, h?: number): Promise<VisibilityResponse> {
    const query = w && h ? `?w=${w}&h=${h}` : "";
    return this.json(`/collages/${id}/visibility${query}`);
  }

  autoparams(id: string): Promise<ProjectManifest> {
    return this.json(`/collages/${id}/autoparams`, { method: "POST" });
  }

  async generate(
    id: string,
    seeds: number[],
    config: GenerationConfigBody,
  ): Promise<string> {
    const body = await this.json<{ job_id: string }>(`/collages/${id}/generate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ seeds, config }),
    });
    return body.job_id;
  }

  async refine(
    imageId: string,
    layerName: string,
    seeds: number[],
    config: GenerationConfigBody,
  ): Promise<string> {
    const body = await this.json<{ job_id: string }>(`/images/${imageId}/refine`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(buildRefineBody(layerName, seeds, config)),
    });
    return body.job_id;
  }

  async invert(
    id: string,
    layerName: string,
    config: { steps?: number; lr?: number; seed?: number } = {},
  ): Promise<string> {
    const body = await this.json<{ job_id: string }>(
      `/collages/${id}/invert?layer=${encodeURIComponent(layerName)}`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(config),
      },
    );
    return body.job_id;
  }

  getJob(jobId: string): Promise<JobRecord> {
    return this.json(`/jobs/${jobId}`);
  }

  imageUrl(imageId: string): string {
    return this.url(`/images/${imageId}`);
  }

  getImageMeta(imageId: string): Promise<Record<string, unknown>> {
    return this.json(`/images/${imageId}/meta`);
  }

  evaluate(
    id: string,
    galleries: Record<string, string[]>,
  ): Promise<{ summary: Record<string, unknown>; csv: string }> {
    return this.json(`/collages/${id}/eval`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ galleries }),
    });
  }

  /**
   * Poll a job every `intervalMs` (500 ms by default, matching the
   * service's poll-only progress contract) until it is done or failed.
   */
  async pollJob(
    jobId: string,
    onProgress?: (job: JobRecord) => void,
    intervalMs = 500,
  ): Promise<JobRecord> {
    for (;;) {
      const job = await this.getJob(jobId);
      onProgress?.(job);
      if (job.state === "done") return job;
      if (job.state === "failed") throw new Error(job.error ?? "job failed");
      await this.sleep(intervalMs);
    }
  }
}
