"""Batch command line: generation sweeps, inversion, refinement, evaluation.

Exit codes: 0 success, 2 validation problem (project, config, placement),
3 backend failure. `--json` prints one machine-readable object per command.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .autoparams import auto_params
from .backend import BackendError, backend_from_config
from .inversion import InversionConfig, invert_layer, load_token, save_token
from .metrics import MockEmbedder, export_rubric, report
from .model import CollageError, collage_to_manifest, load_project, save_project
from .pipeline import AblationFlags, GenerationConfig, harmonize, refine_layer
from .service import image_from_png, parse_generation_config, png_bytes

ABLATIONS = ["gh", "gh+ca", "gh+ca+ti", "gh+ca+ti+ln"]


def _load_backend(backend_config: str | None):
    if backend_config:
        return backend_from_config(json.loads(Path(backend_config).read_text()))
    return backend_from_config({"kind": "mock", "seed": 0})


def _emit(ctx, payload: dict, human: str):
    if ctx.obj.get("json"):
        click.echo(json.dumps(payload))
    else:
        click.echo(human)


def _fail(e: Exception):
    code = 3 if isinstance(e, BackendError) else 2
    click.echo(f"error: {e}", err=True)
    sys.exit(code)


def _mock_controlnet(backend):
    from .backend import MockControlNet

    return MockControlNet(backend.latent_dims, 8, backend.stride, seed=getattr(backend, "seed", 0))


def _project_tokens(project_dir: Path, collage):
    tokens = {}
    for layer in collage.layers:
        if layer.inverted_token:
            tokens[layer.name] = load_token(project_dir / layer.inverted_token)
    return tokens


@click.group()
@click.option("--json", "json_mode", is_flag=True, help="machine-readable output")
@click.pass_context
def main(ctx, json_mode):
    """Layer-conditioned diffusion harmonization toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["json"] = json_mode


@main.command()
@click.option("--project", "project_path", required=True, type=click.Path(exists=True))
@click.option("--seeds", default=1, show_default=True, help="number of seeds (0..N-1)")
@click.option("--ablation", default="gh+ca+ti+ln", type=click.Choice(ABLATIONS), show_default=True)
@click.option("--controlnet", is_flag=True, help="apply per-layer control weights")
@click.option("--auto-params", "auto", is_flag=True, help="initialize per-layer parameters")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", default=50, show_default=True)
@click.option("--start-noise", default=0.75, show_default=True)
@click.option("--guidance-scale", default=1.0, show_default=True)
@click.option("--backend-config", type=click.Path(exists=True), help="backend JSON config")
@click.pass_context
def generate(ctx, project_path, seeds, ablation, controlnet, auto, out_dir, steps,
             start_noise, guidance_scale, backend_config):
    """Harmonize a project for N seeds; one PNG + sidecar per seed."""
    try:
        backend = _load_backend(backend_config)
        collage = load_project(project_path)
        project_dir = Path(project_path) if Path(project_path).is_dir() else Path(project_path).parent
        if auto:
            params = auto_params(collage)
            collage = collage.with_layer_params(params)
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "autoparams_manifest.json").write_text(
                json.dumps(collage_to_manifest(collage), indent=2)
            )
        flags = AblationFlags.from_name(ablation, controlnet=controlnet)
        config = GenerationConfig(
            start_noise=start_noise, steps=steps, ablation=flags, guidance_scale=guidance_scale
        )
        tokens = _project_tokens(project_dir, collage) if flags.ti else None
        cnet = _mock_controlnet(backend) if flags.cn else None
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        from dataclasses import replace

        for seed in range(seeds):
            result = harmonize(
                backend, collage, replace(config, seed=seed),
                inverted_tokens=tokens, controlnet=cnet,
            )
            stem = f"{ablation.replace('+', '-')}{'-cn' if controlnet else ''}_seed{seed:04d}"
            (out / f"{stem}.png").write_bytes(png_bytes(result.image))
            (out / f"{stem}.json").write_text(json.dumps(result.sidecar, indent=2))
            written.append(f"{stem}.png")
    except (CollageError, BackendError, json.JSONDecodeError) as e:
        _fail(e)
    _emit(ctx, {"written": written, "out": str(out)}, f"wrote {len(written)} images to {out}")


@main.command()
@click.option("--project", "project_path", required=True, type=click.Path(exists=True))
@click.option("--layer", "layer_name", default=None, help="invert one layer (default: all)")
@click.option("--steps", default=500, show_default=True)
@click.option("--lr", default=5e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--backend-config", type=click.Path(exists=True))
@click.pass_context
def invert(ctx, project_path, layer_name, steps, lr, seed, backend_config):
    """Learn modifier tokens; blobs land in the project dir, manifest updated."""
    try:
        backend = _load_backend(backend_config)
        collage = load_project(project_path)
        project_dir = Path(project_path) if Path(project_path).is_dir() else Path(project_path).parent
        names = [layer_name] if layer_name else [l.name for l in collage.layers]
        config = InversionConfig(steps=steps, lr=lr, seed=seed)
        trained = {}
        for name in names:
            idx = collage.layer_index(name)
            token = invert_layer(backend, collage, idx, config)
            asset = f"token_{idx:02d}_{name.replace(' ', '_')}.npz"
            save_token(token, project_dir / asset)
            manifest = json.loads((project_dir / "collage.json").read_text())
            manifest["layers"][idx - 1]["inverted_token"] = asset
            (project_dir / "collage.json").write_text(json.dumps(manifest, indent=2))
            trained[name] = {"asset": asset, "final_loss": token.final_loss}
    except (CollageError, BackendError) as e:
        _fail(e)
    _emit(ctx, {"trained": trained}, f"trained {len(trained)} token(s)")


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--project", "project_path", required=True, type=click.Path(exists=True))
@click.option("--layer", "layer_name", required=True)
@click.option("--seeds", default=1, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", default=50, show_default=True)
@click.option("--start-noise", default=0.75, show_default=True)
@click.option("--backend-config", type=click.Path(exists=True))
@click.pass_context
def refine(ctx, image_path, project_path, layer_name, seeds, out_dir, steps,
           start_noise, backend_config):
    """Re-generate one layer of a picked image; background stays pinned."""
    try:
        backend = _load_backend(backend_config)
        collage = load_project(project_path)
        base = image_from_png(Path(image_path).read_bytes())
        config = GenerationConfig(
            start_noise=start_noise, steps=steps, ablation=AblationFlags(ca=True, ln=True)
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        from dataclasses import replace

        for seed in range(seeds):
            result = refine_layer(
                backend, collage, base, layer_name, replace(config, seed=seed)
            )
            stem = f"refine-{layer_name.replace(' ', '_')}_seed{seed:04d}"
            (out / f"{stem}.png").write_bytes(png_bytes(result.image))
            (out / f"{stem}.json").write_text(json.dumps(result.sidecar, indent=2))
            written.append(f"{stem}.png")
    except (CollageError, BackendError) as e:
        _fail(e)
    _emit(ctx, {"written": written, "out": str(out)}, f"wrote {len(written)} refinements to {out}")


@main.command()
@click.option("--project", "project_path", required=True, type=click.Path(exists=True))
@click.option("--galleries", "gallery_dirs", multiple=True, required=True,
              type=click.Path(exists=True), help="one dir per method (dir name = method)")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def eval(ctx, project_path, gallery_dirs, out_path):
    """Per-layer fidelity report over aligned galleries; CSV + JSON."""
    try:
        collage = load_project(project_path)
        galleries = {}
        for d in gallery_dirs:
            d = Path(d)
            images = [image_from_png(p.read_bytes()) for p in sorted(d.glob("*.png"))]
            if not images:
                raise CollageError(f"gallery {d} has no PNG images")
            galleries[d.name] = images
        rep = report(collage, galleries, MockEmbedder(seed=0))
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_csv())
        out.with_suffix(".json").write_text(rep.to_json())
    except CollageError as e:
        _fail(e)
    _emit(
        ctx,
        {"summary": rep.summary, "csv": str(out), "json": str(out.with_suffix('.json'))},
        f"report written to {out}",
    )


@main.command()
@click.option("--project", "project_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def rubric(ctx, project_path, out_path):
    """Export the blank human-evaluation scoring form."""
    try:
        collage = load_project(project_path)
        Path(out_path).write_text(json.dumps(export_rubric(collage), indent=2))
    except CollageError as e:
        _fail(e)
    _emit(ctx, {"rubric": str(out_path)}, f"rubric written to {out_path}")


@main.command()
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--backend-config", type=click.Path(exists=True))
@click.option("--frontend", "frontend_dir", type=click.Path(exists=True),
              help="serve the browser editor from this directory at /ui")
def serve(data_dir, host, port, backend_config, frontend_dir):
    """Run the HTTP service (editor backend)."""
    import uvicorn

    from .service import create_app

    cfg = json.loads(Path(backend_config).read_text()) if backend_config else None
    uvicorn.run(create_app(data_dir, cfg, frontend_dir=frontend_dir), host=host, port=port)


if __name__ == "__main__":
    main()
