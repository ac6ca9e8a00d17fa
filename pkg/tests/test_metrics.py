import json

import numpy as np
import pytest

from collagekit.metrics import (
    MockEmbedder,
    SeedCountMismatchError,
    appearance_fidelity,
    cosine,
    export_rubric,
    masked_region,
    published_similarity_table,
    report,
    spatial_fidelity,
)
from collagekit.model import Collage, Layer, compute_visibility, layer_coverage

from conftest import bento_collage, make_layer, solid_rgba


@pytest.fixture
def embedder():
    return MockEmbedder(seed=0)


def gallery_for(bento, seeds):
    rng_imgs = []
    for s in seeds:
        rng = np.random.default_rng(s)
        rng_imgs.append(rng.uniform(size=(64, 64, 3)))
    return rng_imgs


class TestMaskedRegion:
    def test_full_cover_layer_is_identity(self, embedder):
        layer = make_layer("bg", (16, 16), (9, 9, 9, 255), (0, 0), "", "")
        collage = Collage(prompt="", canvas=(16, 16), layers=(layer,))
        vis = compute_visibility(collage)
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        region = masked_region(img, vis, 1)
        assert region.present and np.array_equal(region.image, img)

    def test_fully_occluded_layer_flagged_absent(self, embedder):
        bottom = make_layer("hidden", (16, 16), (1, 1, 1, 255), (0, 0), "", "")
        top = make_layer("cover", (16, 16), (2, 2, 2, 255), (0, 0), "", "")
        collage = Collage(prompt="", canvas=(16, 16), layers=(bottom, top))
        vis = compute_visibility(collage)
        region = masked_region(np.ones((16, 16, 3)), vis, 1)
        assert not region.present
        assert not region.image.any()

    def test_bento_sushi_region(self, bento):
        vis = compute_visibility(bento)
        img = np.ones((64, 64, 3))
        region = masked_region(img, vis, bento.layer_index("sushi"))
        nz = region.image.any(axis=2)
        assert np.array_equal(nz, vis.layer_mask(bento.layer_index("sushi")))

    def test_masks_tile_covered_cells(self, bento):
        vis = compute_visibility(bento)
        img = np.ones((64, 64, 3))
        total = np.zeros((64, 64))
        for j in range(1, bento.n_layers + 1):
            total += masked_region(img, vis, j).image[:, :, 0]
        covered = (vis.indices > 0).astype(np.float64)
        assert np.array_equal(total, covered)  # disjoint and exactly tiling


class TestSimilarities:
    def test_text_determinism(self, embedder):
        img = np.random.default_rng(1).uniform(size=(32, 32, 3))
        a = spatial_fidelity(embedder, "sliced ginger", img)
        b = spatial_fidelity(embedder, "sliced ginger", img)
        assert a == b

    def test_scores_bounded(self, embedder):
        rng = np.random.default_rng(2)
        for _ in range(5):
            img = rng.uniform(size=(16, 16, 3))
            s = spatial_fidelity(embedder, "anything at all", img)
            assert -1.0 <= s <= 1.0

    def test_self_similarity_is_one(self, embedder):
        img = np.random.default_rng(3).uniform(size=(32, 32, 3))
        assert appearance_fidelity(embedder, img, img) == pytest.approx(1.0, abs=1e-6)

    def test_unrelated_noise_scores_below_self(self, embedder):
        rng = np.random.default_rng(4)
        img = rng.uniform(size=(32, 32, 3))
        noise = rng.uniform(size=(32, 32, 3))
        assert appearance_fidelity(embedder, img, noise) < appearance_fidelity(
            embedder, img, img
        )


class TestReport:
    def test_single_cell_table(self, bento, embedder):
        gallery = gallery_for(bento, [0])
        rep = report(bento, {"gh": gallery}, embedder)
        row = [r for r in rep.rows if r["layer"] == "ginger"][0]
        vis = compute_visibility(bento)
        region = masked_region(gallery[0], vis, bento.layer_index("ginger"))
        want = spatial_fidelity(embedder, "ginger", region.image)
        assert row["spatial"] == pytest.approx(want)

    def test_identical_galleries_identical_rows(self, bento, embedder):
        gallery = gallery_for(bento, [0, 1])
        rep = report(bento, {"a": gallery, "b": list(gallery)}, embedder)
        rows_a = [r for r in rep.rows if r["method"] == "a"]
        rows_b = [r for r in rep.rows if r["method"] == "b"]
        for ra, rb in zip(rows_a, rows_b):
            assert ra["spatial"] == rb["spatial"]
            assert ra["appearance"] == rb["appearance"]
        assert rep.summary["a"] == rep.summary["b"]

    def test_averages_match_hand_computation(self, bento, embedder):
        from collagekit.metrics import _placed_rgb

        gallery = gallery_for(bento, [0, 1, 2])
        rep = report(bento, {"m": gallery}, embedder)
        vis = compute_visibility(bento)
        hand_all = {"spatial": [], "appearance": []}
        for li, layer in enumerate(bento.layers, start=1):
            per_layer = []
            for img in gallery:
                region = masked_region(img, vis, li)
                if not region.present:
                    continue
                per_layer.append(spatial_fidelity(embedder, layer.text, region.image))
                hand_all["spatial"].append(per_layer[-1])
                hand_all["appearance"].append(
                    appearance_fidelity(embedder, _placed_rgb(bento, li), region.image)
                )
            row = [r for r in rep.rows if r["layer"] == layer.name][0]
            assert row["spatial"] == pytest.approx(float(np.mean(per_layer)))
        assert rep.summary["m"]["spatial"] == pytest.approx(float(np.mean(hand_all["spatial"])))
        assert rep.summary["m"]["appearance"] == pytest.approx(
            float(np.mean(hand_all["appearance"]))
        )

    def test_seed_count_mismatch(self, bento, embedder):
        with pytest.raises(SeedCountMismatchError):
            report(
                bento,
                {"a": gallery_for(bento, [0]), "b": gallery_for(bento, [0, 1])},
                embedder,
            )

    def test_csv_and_json_shapes(self, bento, embedder):
        rep = report(bento, {"gh": gallery_for(bento, [0])}, embedder)
        parsed = json.loads(rep.to_json())
        assert "gh" in parsed["summary"] and "gh" in parsed["per_layer"]
        lines = rep.to_csv().strip().splitlines()
        assert lines[0].startswith("method,layer,")
        assert len(lines) == 1 + 5 + 1  # header + five layers + summary


class TestReferencesAndRubric:
    def test_paper_table_values(self):
        table = published_similarity_table()
        assert table["gh"] == {"spatial": 0.215, "appearance": 0.846}
        assert table["gh+ca+ti+ln"] == {"spatial": 0.238, "appearance": 0.893}
        spatial = [table[m]["spatial"] for m in ("gh", "gh+ca", "gh+ca+ti", "gh+ca+ti+ln")]
        appearance = [
            table[m]["appearance"] for m in ("gh", "gh+ca", "gh+ca+ti", "gh+ca+ti+ln")
        ]
        assert appearance == sorted(appearance)  # image-image climbs monotonically
        assert spatial[-1] == max(spatial)

    def test_rubric_template(self, bento):
        rubric = export_rubric(bento)
        assert rubric["prompt"] == bento.prompt
        assert len(rubric["spatial_fidelity"]) == 5
        assert all(item["score"] is None for item in rubric["spatial_fidelity"])
        json.dumps(rubric)  # must be serializable as a blank scoring form
