"""HTTP API and job runner for the interactive editor and batch clients.

Layout on disk (everything under one data dir, no database):

    projects/{collage_id}/collage.json + PNG assets + token blobs
    images/{image_id}.png + {image_id}.json   (content-addressed, sha256)
    jobs.jsonl                                (append-only job log)

Generation runs on a single backend instance behind a FIFO queue: one
worker thread, one running job at a time, progress polled via GET /jobs.
"""

from __future__ import annotations

import hashlib
import io
import json
import queue
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Request
from starlette.datastructures import UploadFile
from fastapi.responses import Response
from PIL import Image

from .autoparams import AutoParamBounds, auto_params
from .backend import MockControlNet, backend_from_config
from .imageops import from_uint8, to_uint8
from .inversion import InversionConfig, invert_layer, load_token, save_token
from .metrics import MockEmbedder, export_rubric, report
from .model import (
    Collage,
    CollageError,
    collage_from_manifest,
    collage_to_manifest,
    compute_visibility,
    load_project,
)
from .pipeline import (
    AblationFlags,
    GenerationConfig,
    generate_gallery,
    refine_layer,
)

STATES = ("queued", "running", "done", "failed")


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def parse_generation_config(body: dict | None) -> GenerationConfig:
    """Request-body config: ablation comes as a method name plus a
    controlnet toggle, everything else maps straight through."""
    body = dict(body or {})
    ablation = AblationFlags.from_name(
        body.pop("ablation", "gh+ca+ti+ln"), controlnet=bool(body.pop("controlnet", False))
    )
    allowed = {
        "seed",
        "start_noise",
        "steps",
        "solver",
        "guidance_scale",
        "negative_prompt",
        "ln_blur_sigma",
        "ln_uncovered",
        "background_noise_level",
    }
    unknown = set(body) - allowed
    if unknown:
        raise CollageError(f"unknown config fields: {sorted(unknown)}")
    return GenerationConfig(ablation=ablation, **body)


@dataclass
class JobRecord:
    id: str
    kind: str
    collage_id: str
    state: str = "queued"
    progress: dict = field(default_factory=lambda: {"step": 0, "total": 0})
    outputs: list = field(default_factory=list)
    error: str | None = None
    created_at: float = field(default_factory=time.time)

    def to_json(self) -> dict:
        return asdict(self)


class JobStore:
    """Single-writer job table with an append-only log."""

    def __init__(self, log_path: Path):
        self._records: dict[str, JobRecord] = {}
        self._lock = threading.Lock()
        self._log_path = log_path

    def create(self, kind: str, collage_id: str) -> JobRecord:
        record = JobRecord(id=uuid.uuid4().hex[:12], kind=kind, collage_id=collage_id)
        with self._lock:
            self._records[record.id] = record
            self._append(record)
        return record

    def get(self, job_id: str) -> JobRecord:
        with self._lock:
            if job_id not in self._records:
                raise KeyError(job_id)
            return self._records[job_id]

    def update(self, job_id: str, **changes) -> None:
        with self._lock:
            record = self._records[job_id]
            new_state = changes.get("state")
            if new_state is not None:
                if STATES.index(new_state) < STATES.index(record.state):
                    raise ValueError(f"job {job_id}: cannot move {record.state} -> {new_state}")
            for k, v in changes.items():
                setattr(record, k, v)
            if record.state == "done" and not record.outputs:
                raise ValueError(f"job {job_id}: done with no outputs")
            if new_state in ("done", "failed"):
                self._append(record)

    def _append(self, record: JobRecord) -> None:
        with open(self._log_path, "a") as f:
            f.write(json.dumps(record.to_json()) + "\n")


class ImageStore:
    """Content-addressed PNG store with JSON sidecars."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, image: np.ndarray, sidecar: dict) -> str:
        data = png_bytes(image)
        image_id = hashlib.sha256(data).hexdigest()[:16]
        (self.root / f"{image_id}.png").write_bytes(data)
        (self.root / f"{image_id}.json").write_text(json.dumps(sidecar, indent=2))
        return image_id

    def png(self, image_id: str) -> bytes:
        path = self.root / f"{image_id}.png"
        if not path.exists():
            raise KeyError(image_id)
        return path.read_bytes()

    def meta(self, image_id: str) -> dict:
        path = self.root / f"{image_id}.json"
        if not path.exists():
            raise KeyError(image_id)
        return json.loads(path.read_text())


class AppState:
    def __init__(self, data_dir: str | Path, backend_config: dict | None = None):
        self.root = Path(data_dir)
        (self.root / "projects").mkdir(parents=True, exist_ok=True)
        self.backend_config = backend_config or {"kind": "mock", "seed": 0}
        self.backend = backend_from_config(self.backend_config)
        self.images = ImageStore(self.root / "images")
        self.jobs = JobStore(self.root / "jobs.jsonl")
        self.embedder = MockEmbedder(seed=0)
        self._queue: queue.Queue = queue.Queue()
        self._worker: threading.Thread | None = None
        self._controlnet = None

    # -- projects -----------------------------------------------------------

    def project_dir(self, collage_id: str) -> Path:
        path = self.root / "projects" / collage_id
        if not path.exists():
            raise KeyError(collage_id)
        return path

    def load_collage(self, collage_id: str) -> Collage:
        return load_project(self.project_dir(collage_id))

    def controlnet(self):
        if self._controlnet is None:
            self._controlnet = MockControlNet(
                self.backend.latent_dims, 8, self.backend.stride,
                seed=self.backend_config.get("seed", 0),
            )
        return self._controlnet

    def load_inverted_tokens(self, collage: Collage, collage_id: str) -> dict:
        tokens = {}
        root = self.project_dir(collage_id)
        for layer in collage.layers:
            if layer.inverted_token:
                tokens[layer.name] = load_token(root / layer.inverted_token)
        return tokens

    # -- job execution ------------------------------------------------------

    def submit(self, kind: str, collage_id: str, work) -> JobRecord:
        record = self.jobs.create(kind, collage_id)
        self._queue.put((record.id, work))
        self._ensure_worker()
        return record

    def _ensure_worker(self):
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._run_worker, daemon=True)
            self._worker.start()

    def _run_worker(self):
        while True:
            try:
                job_id, work = self._queue.get(timeout=1.0)
            except queue.Empty:
                return
            self.jobs.update(job_id, state="running")
            try:
                outputs = work(job_id)
                self.jobs.update(job_id, state="done", outputs=outputs)
            except Exception as e:  # job errors end up on the record, verbatim
                self.jobs.update(job_id, state="failed", error=str(e))

    def wait_idle(self, timeout: float = 60.0) -> None:
        """Block until the queue drains (used by tests and the CLI)."""
        deadline = time.time() + timeout
        while time.time() < deadline:
            with self.jobs._lock:
                active = any(
                    r.state in ("queued", "running") for r in self.jobs._records.values()
                )
            if self._queue.empty() and not active:
                return
            time.sleep(0.01)
        raise TimeoutError("job queue did not drain")


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, KeyError):
        return HTTPException(status_code=404, detail=str(e))
    return HTTPException(status_code=400, detail=str(e))


def create_app(
    data_dir: str | Path,
    backend_config: dict | None = None,
    frontend_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="collagekit", version="1")
    state = AppState(data_dir, backend_config)
    app.state.collagekit = state

    # single-user workstation tool: the browser editor may be served from
    # file:// or another port, so cross-origin requests are fine
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    if frontend_dir is not None and Path(frontend_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=frontend_dir, html=True), name="ui")

    # -- collage CRUD -------------------------------------------------------

    @app.post("/v1/collages")
    async def create_collage(request: Request):
        form = await request.form()
        if "manifest" not in form:
            raise HTTPException(status_code=400, detail="multipart field 'manifest' required")
        manifest_field = form["manifest"]
        raw = (
            await manifest_field.read()
            if isinstance(manifest_field, UploadFile)
            else manifest_field.encode()
        )
        try:
            manifest = json.loads(raw)
        except json.JSONDecodeError as e:
            raise HTTPException(status_code=400, detail=f"manifest is not JSON: {e}")
        collage_id = uuid.uuid4().hex[:12]
        project = state.root / "projects" / collage_id
        project.mkdir(parents=True)
        try:
            for key, value in form.multi_items():
                if key == "manifest" or not isinstance(value, UploadFile):
                    continue
                name = Path(value.filename or key).name
                (project / name).write_bytes(await value.read())
            (project / "collage.json").write_text(json.dumps(manifest, indent=2))
            load_project(project)  # load-rule validation: spans, version, assets
        except CollageError as e:
            import shutil

            shutil.rmtree(project, ignore_errors=True)
            raise HTTPException(status_code=400, detail=str(e))
        return {"id": collage_id}

    @app.get("/v1/collages/{collage_id}")
    def get_collage(collage_id: str):
        try:
            path = state.project_dir(collage_id) / "collage.json"
        except KeyError as e:
            raise _http_error(e)
        return json.loads(path.read_text())

    @app.put("/v1/collages/{collage_id}")
    def put_collage(collage_id: str, manifest: dict = Body(...)):
        try:
            project = state.project_dir(collage_id)
            collage_from_manifest(manifest, project)  # load-rule validation
            (project / "collage.json").write_text(json.dumps(manifest, indent=2))
        except (CollageError, KeyError) as e:
            raise _http_error(e)
        return manifest

    @app.get("/v1/collages/{collage_id}/assets/{name}")
    def get_asset(collage_id: str, name: str):
        if "/" in name or name.startswith(".."):
            raise HTTPException(status_code=400, detail="bad asset name")
        try:
            path = state.project_dir(collage_id) / name
        except KeyError as e:
            raise _http_error(e)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no asset {name}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/v1/collages/{collage_id}/visibility")
    def get_visibility(collage_id: str, w: int | None = None, h: int | None = None):
        try:
            collage = state.load_collage(collage_id)
            res = None if w is None or h is None else (h, w)
            vis = compute_visibility(collage, res)
        except (CollageError, KeyError) as e:
            raise _http_error(e)
        return {
            "resolution": {"h": vis.indices.shape[0], "w": vis.indices.shape[1]},
            "indices": vis.indices.tolist(),
            "layers": [l.name for l in collage.layers],
        }

    @app.post("/v1/collages/{collage_id}/autoparams")
    def autoparams_endpoint(collage_id: str, body: dict = Body(default=None)):
        try:
            collage = state.load_collage(collage_id)
            bounds = AutoParamBounds(**(body or {}))
            params = auto_params(collage, bounds)
            updated = collage.with_layer_params(
                {
                    name: {
                        "noise_level": p["noise_level"],
                        "controlnet_weight": p["controlnet_weight"],
                        "attn_pos_strength": p["attn_pos_strength"],
                        "attn_neg_strength": p["attn_neg_strength"],
                    }
                    for name, p in params.items()
                }
            )
            manifest = collage_to_manifest(
                updated,
                [e["image"] for e in json.loads(
                    (state.project_dir(collage_id) / "collage.json").read_text()
                )["layers"]],
            )
        except (CollageError, KeyError, TypeError) as e:
            raise _http_error(e)
        return manifest

    # -- jobs ---------------------------------------------------------------

    @app.post("/v1/collages/{collage_id}/generate")
    def generate(collage_id: str, body: dict = Body(...)):
        try:
            collage = state.load_collage(collage_id)
            seeds = [int(s) for s in body.get("seeds", [0])]
            config = parse_generation_config(body.get("config"))
            tokens = state.load_inverted_tokens(collage, collage_id)
        except (CollageError, KeyError, ValueError) as e:
            raise _http_error(e)

        def work(job_id: str):
            total = config.steps * len(seeds)
            outputs = []
            for n, seed in enumerate(seeds):
                def progress(step, steps_total, base=n):
                    state.jobs.update(
                        job_id, progress={"step": base * config.steps + step, "total": total}
                    )

                result = generate_gallery(
                    state.backend,
                    collage,
                    config,
                    [seed],
                    controlnet=state.controlnet() if config.ablation.cn else None,
                    inverted_tokens=tokens,
                    progress=progress,
                )[0]
                sidecar = dict(result.sidecar, collage_id=collage_id, job_id=job_id)
                outputs.append(state.images.put(result.image, sidecar))
            return outputs

        record = state.submit("generate", collage_id, work)
        return {"job_id": record.id}

    @app.post("/v1/images/{image_id}/refine")
    def refine(image_id: str, body: dict = Body(...)):
        try:
            meta = state.images.meta(image_id)
            collage_id = meta["collage_id"]
            collage = state.load_collage(collage_id)
            layer_name = body["layer"]
            collage.layer_index(layer_name)  # 404-worthy if absent
            seeds = [int(s) for s in body.get("seeds", [0])]
            config = parse_generation_config(body.get("config"))
            base_image = image_from_png(state.images.png(image_id))
            tokens = state.load_inverted_tokens(collage, collage_id)
        except (CollageError, KeyError, ValueError) as e:
            raise _http_error(e)

        def work(job_id: str):
            from dataclasses import replace

            outputs = []
            total = config.steps * len(seeds)
            for n, seed in enumerate(seeds):
                def progress(step, steps_total, base=n):
                    state.jobs.update(
                        job_id, progress={"step": base * config.steps + step, "total": total}
                    )

                result = refine_layer(
                    state.backend,
                    collage,
                    base_image,
                    layer_name,
                    replace(config, seed=seed),
                    inverted_tokens=tokens,
                    controlnet=state.controlnet() if config.ablation.cn else None,
                    progress=progress,
                )
                sidecar = dict(
                    result.sidecar,
                    collage_id=collage_id,
                    job_id=job_id,
                    refined_from=image_id,
                    refined_layer=layer_name,
                )
                outputs.append(state.images.put(result.image, sidecar))
            return outputs

        record = state.submit("refine", collage_id, work)
        return {"job_id": record.id}

    @app.post("/v1/collages/{collage_id}/invert")
    def invert(collage_id: str, layer: str, body: dict = Body(default=None)):
        try:
            collage = state.load_collage(collage_id)
            layer_index = collage.layer_index(layer)
            cfg = InversionConfig(**(body or {}))
        except (CollageError, KeyError, TypeError) as e:
            raise _http_error(e)

        def work(job_id: str):
            def on_step(step, loss):
                state.jobs.update(job_id, progress={"step": step + 1, "total": cfg.steps})

            token = invert_layer(state.backend, collage, layer_index, cfg, on_step=on_step)
            project = state.project_dir(collage_id)
            asset = f"token_{layer_index:02d}_{layer.replace(' ', '_')}.npz"
            save_token(token, project / asset)
            manifest = json.loads((project / "collage.json").read_text())
            manifest["layers"][layer_index - 1]["inverted_token"] = asset
            (project / "collage.json").write_text(json.dumps(manifest, indent=2))
            return [asset]

        record = state.submit("invert", collage_id, work)
        return {"job_id": record.id}

    @app.get("/v1/jobs/{job_id}")
    def get_job(job_id: str):
        try:
            return state.jobs.get(job_id).to_json()
        except KeyError as e:
            raise _http_error(e)

    # -- images -------------------------------------------------------------

    @app.get("/v1/images/{image_id}")
    def get_image(image_id: str):
        try:
            return Response(content=state.images.png(image_id), media_type="image/png")
        except KeyError as e:
            raise _http_error(e)

    @app.get("/v1/images/{image_id}/meta")
    def get_image_meta(image_id: str):
        try:
            return state.images.meta(image_id)
        except KeyError as e:
            raise _http_error(e)

    # -- evaluation ---------------------------------------------------------

    @app.post("/v1/collages/{collage_id}/eval")
    def eval_endpoint(collage_id: str, body: dict = Body(...)):
        try:
            collage = state.load_collage(collage_id)
            galleries = {
                method: [image_from_png(state.images.png(i)) for i in ids]
                for method, ids in body["galleries"].items()
            }
            rep = report(collage, galleries, state.embedder)
        except (CollageError, KeyError) as e:
            raise _http_error(e)
        return {
            "summary": rep.summary,
            "per_layer": json.loads(rep.to_json())["per_layer"],
            "csv": rep.to_csv(),
        }

    @app.get("/v1/collages/{collage_id}/rubric")
    def rubric(collage_id: str):
        try:
            return export_rubric(state.load_collage(collage_id))
        except (CollageError, KeyError) as e:
            raise _http_error(e)

    return app
