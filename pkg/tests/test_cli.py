import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from collagekit.backend import mock_backend
from collagekit.cli import main
from collagekit.model import load_project, save_project
from collagekit.pipeline import GenerationConfig, AblationFlags, sdedit_harmonize
from collagekit.service import png_bytes

from conftest import bento_collage


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def project(tmp_path):
    path = tmp_path / "proj"
    save_project(bento_collage(), path)
    return path


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestGenerate:
    def test_gh_matches_library_sdedit_bytes(self, runner, project, tmp_path):
        out = tmp_path / "out"
        run_ok(
            runner,
            ["generate", "--project", str(project), "--seeds", "1", "--ablation", "gh",
             "--steps", "4", "--start-noise", "0.8", "--out", str(out)],
        )
        cli_bytes = (out / "gh_seed0000.png").read_bytes()
        backend = mock_backend(seed=0)
        result = sdedit_harmonize(
            backend, bento_collage(),
            GenerationConfig(seed=0, steps=4, start_noise=0.8, ablation=AblationFlags()),
        )
        assert cli_bytes == png_bytes(result.image)

    def test_seed_stamped_files_and_sidecars(self, runner, project, tmp_path):
        out = tmp_path / "out"
        result = run_ok(
            runner,
            ["--json", "generate", "--project", str(project), "--seeds", "3",
             "--ablation", "gh", "--steps", "2", "--start-noise", "0.8",
             "--out", str(out)],
        )
        payload = json.loads(result.output)
        assert len(payload["written"]) == 3
        for seed in range(3):
            assert (out / f"gh_seed{seed:04d}.png").exists()
            sidecar = json.loads((out / f"gh_seed{seed:04d}.json").read_text())
            assert sidecar["seed"] == seed

    def test_auto_params_writes_manifest(self, runner, project, tmp_path):
        out = tmp_path / "out"
        run_ok(
            runner,
            ["generate", "--project", str(project), "--seeds", "1", "--ablation", "gh",
             "--steps", "2", "--auto-params", "--out", str(out)],
        )
        manifest = json.loads((out / "autoparams_manifest.json").read_text())
        assert manifest["layers"][0]["noise_level"] == 0.85

    def test_validation_error_exit_2(self, runner, project, tmp_path):
        # LN needs start_noise >= max layer noise; the fixture has 0.8 layers
        result = runner.invoke(
            main,
            ["generate", "--project", str(project), "--seeds", "1",
             "--ablation", "gh+ca+ti+ln", "--steps", "2", "--start-noise", "0.6",
             "--out", str(tmp_path / "x")],
        )
        assert result.exit_code == 2
        assert "start_noise" in result.output

    def test_backend_error_exit_3(self, runner, project, tmp_path):
        cfg = tmp_path / "backend.json"
        cfg.write_text(json.dumps({"kind": "mock", "seed": 1, "checksum": "forged000"}))
        result = runner.invoke(
            main,
            ["generate", "--project", str(project), "--seeds", "1", "--ablation", "gh",
             "--steps", "2", "--out", str(tmp_path / "x"), "--backend-config", str(cfg)],
        )
        assert result.exit_code == 3


class TestInvert:
    def test_invert_one_layer_updates_project(self, runner, project):
        result = run_ok(
            runner,
            ["--json", "invert", "--project", str(project), "--layer", "ginger",
             "--steps", "3", "--lr", "0.005"],
        )
        payload = json.loads(result.output)
        asset = payload["trained"]["ginger"]["asset"]
        assert (project / asset).exists()
        collage = load_project(project)
        assert collage.layers[3].inverted_token == asset

    def test_generate_with_ti_uses_trained_token(self, runner, project, tmp_path):
        # enough optimization to move the image past 8-bit PNG quantization
        run_ok(runner, ["invert", "--project", str(project), "--layer", "ginger",
                        "--steps", "30", "--lr", "0.2"])
        out_a = tmp_path / "with_token"
        run_ok(
            runner,
            ["generate", "--project", str(project), "--seeds", "1",
             "--ablation", "gh+ca+ti", "--steps", "3", "--start-noise", "0.8",
             "--out", str(out_a)],
        )
        out_b = tmp_path / "without"
        run_ok(
            runner,
            ["generate", "--project", str(project), "--seeds", "1",
             "--ablation", "gh+ca", "--steps", "3", "--start-noise", "0.8",
             "--out", str(out_b)],
        )
        a = (out_a / "gh-ca-ti_seed0000.png").read_bytes()
        b = (out_b / "gh-ca_seed0000.png").read_bytes()
        assert a != b


class TestRefine:
    def test_refine_from_generated_image(self, runner, project, tmp_path):
        out = tmp_path / "gen"
        run_ok(
            runner,
            ["generate", "--project", str(project), "--seeds", "1", "--ablation", "gh",
             "--steps", "3", "--start-noise", "0.8", "--out", str(out)],
        )
        refined = tmp_path / "refined"
        result = run_ok(
            runner,
            ["--json", "refine", "--image", str(out / "gh_seed0000.png"),
             "--project", str(project), "--layer", "ginger", "--seeds", "2",
             "--steps", "3", "--start-noise", "0.8", "--out", str(refined)],
        )
        payload = json.loads(result.output)
        assert len(payload["written"]) == 2
        assert (refined / "refine-ginger_seed0000.png").exists()


class TestSweep:
    def test_full_ablation_sweep_forty_outputs_under_budget(self, runner, project, tmp_path):
        import time

        t0 = time.monotonic()
        out = tmp_path / "sweep"
        for ablation in ("gh", "gh+ca", "gh+ca+ti", "gh+ca+ti+ln"):
            run_ok(
                runner,
                ["generate", "--project", str(project), "--seeds", "10",
                 "--ablation", ablation, "--steps", "50", "--start-noise", "0.8",
                 "--out", str(out / ablation)],
            )
        pngs = list(out.rglob("*.png"))
        sidecars = list(out.rglob("*seed*.json"))
        elapsed = time.monotonic() - t0
        assert len(pngs) == 40 and len(sidecars) == 40
        assert elapsed < 60.0, f"sweep took {elapsed:.1f}s"


class TestEvalAndRubric:
    def test_eval_writes_csv_and_json(self, runner, project, tmp_path):
        for method in ("gh", "gh+ca"):
            out = tmp_path / "galleries" / method
            run_ok(
                runner,
                ["generate", "--project", str(project), "--seeds", "2",
                 "--ablation", method, "--steps", "2", "--start-noise", "0.8",
                 "--out", str(out)],
            )
        report_path = tmp_path / "report.csv"
        result = run_ok(
            runner,
            ["--json", "eval", "--project", str(project),
             "--galleries", str(tmp_path / "galleries" / "gh"),
             "--galleries", str(tmp_path / "galleries" / "gh+ca"),
             "--out", str(report_path)],
        )
        payload = json.loads(result.output)
        assert set(payload["summary"]) == {"gh", "gh+ca"}
        assert report_path.exists() and report_path.with_suffix(".json").exists()
        lines = report_path.read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 5 + 2  # header + 2 methods x 5 layers + 2 summaries

    def test_rubric(self, runner, project, tmp_path):
        out = tmp_path / "rubric.json"
        run_ok(runner, ["rubric", "--project", str(project), "--out", str(out)])
        rubric = json.loads(out.read_text())
        assert len(rubric["appearance_fidelity"]) == 5
