/**
 * Gallery bookkeeping: each run is an immutable list of image ids; picking
 * and refining never mutates an existing run, refinement appends a new one.
 */

export interface GalleryRun {
  readonly jobId: string;
  readonly kind: "generate" | "refine";
  readonly imageIds: readonly string[];
  readonly refinedLayer?: string;
  readonly sourceImageId?: string;
}

export class GalleryStore {
  private runs: GalleryRun[] = [];
  private picked: string | null = null;

  addRun(run: GalleryRun): GalleryRun {
    const frozen: GalleryRun = Object.freeze({
      ...run,
      imageIds: Object.freeze([...run.imageIds]) as readonly string[],
    });
    this.runs.push(frozen);
    return frozen;
  }

  allRuns(): readonly GalleryRun[] {
    return this.runs;
  }

  get current(): GalleryRun | null {
    return this.runs.length ? this.runs[this.runs.length - 1]! : null;
  }

  pick(imageId: string): void {
    const known = this.runs.some((r) => r.imageIds.includes(imageId));
    if (!known) throw new Error(`image ${imageId} is not in any gallery`);
    this.picked = imageId;
  }

  get pickedImage(): string | null {
    return this.picked;
  }
}
