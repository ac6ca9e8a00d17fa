/**
 * Project manifest model: the exact JSON the service stores and returns.
 * Serialization is field-for-field lossless so PUT /collages/{id} round-trips.
 */

export interface PlacementManifest {
  x: number;
  y: number;
  scale: number;
}

export interface LayerManifest {
  name: string;
  image: string;
  placement: PlacementManifest;
  text: string;
  span: [number, number];
  noise_level: number;
  controlnet_weight: number;
  attn_pos: number;
  attn_neg: number;
  inverted_token?: string;
}

export interface ProjectManifest {
  version: number;
  prompt: string;
  negative_prompt: string;
  canvas: { w: number; h: number };
  layers: LayerManifest[];
}

export function cloneManifest(m: ProjectManifest): ProjectManifest {
  return JSON.parse(JSON.stringify(m)) as ProjectManifest;
}

/** Stable-keyed serialization; parse(serialize(m)) deep-equals m. */
export function serializeManifest(m: ProjectManifest): string {
  const layers = m.layers.map((l) => {
    const out: Record<string, unknown> = {
      name: l.name,
      image: l.image,
      placement: { x: l.placement.x, y: l.placement.y, scale: l.placement.scale },
      text: l.text,
      span: [l.span[0], l.span[1]],
      noise_level: l.noise_level,
      controlnet_weight: l.controlnet_weight,
      attn_pos: l.attn_pos,
      attn_neg: l.attn_neg,
    };
    if (l.inverted_token !== undefined) out.inverted_token = l.inverted_token;
    return out;
  });
  return JSON.stringify(
    {
      version: m.version,
      prompt: m.prompt,
      negative_prompt: m.negative_prompt,
      canvas: { w: m.canvas.w, h: m.canvas.h },
      layers,
    },
    null,
    2,
  );
}

export function parseManifest(json: string): ProjectManifest {
  const m = JSON.parse(json) as ProjectManifest;
  if (m.version !== 1) throw new Error(`unsupported project version ${m.version}`);
  for (const layer of m.layers) {
    if (!Array.isArray(layer.span) || layer.span.length !== 2) {
      throw new Error(`layer '${layer.name}': malformed span`);
    }
  }
  return m;
}

/**
 * Client-side span validation, mirroring the server's token-mapping rules:
 * each span must read back the layer text, and spans must not overlap.
 */
export function spanErrors(m: ProjectManifest): string[] {
  const errors: string[] = [];
  const occupied: Array<{ name: string; start: number; end: number }> = [];
  for (const layer of m.layers) {
    const [start, end] = layer.span;
    if (start < 0 || end < start || end > m.prompt.length) {
      errors.push(`layer '${layer.name}': span [${start}, ${end}) is out of range`);
      continue;
    }
    const read = m.prompt.slice(start, end);
    if (read !== layer.text) {
      errors.push(
        `layer '${layer.name}': span reads ${JSON.stringify(read)}, expected ${JSON.stringify(layer.text)}`,
      );
    }
    if (end > start) occupied.push({ name: layer.name, start, end });
  }
  occupied.sort((a, b) => a.start - b.start);
  for (let i = 1; i < occupied.length; i++) {
    const prev = occupied[i - 1]!;
    const cur = occupied[i]!;
    if (cur.start < prev.end) {
      errors.push(`layers '${prev.name}' and '${cur.name}' have overlapping spans`);
    }
  }
  return errors;
}
