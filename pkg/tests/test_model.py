import numpy as np
import pytest

from collagekit.model import (
    Collage,
    Layer,
    Placement,
    PlacementError,
    ProjectFormatError,
    SpanError,
    collage_equal,
    compute_visibility,
    flatten_composite,
    layer_coverage,
    load_project,
    rasterize_layer,
    save_project,
    validate_collage,
)

from conftest import bento_collage, make_layer, solid_rgba, span_of, visibility_oracle


def _single_layer_collage(img, placement=Placement(), canvas=(8, 8)):
    layer = Layer(name="only", image=img, text="", text_span=(0, 0), placement=placement)
    return Collage(prompt="anything", canvas=canvas, layers=(layer,))


class TestRasterize:
    def test_identity_placement_is_byte_identical(self):
        img = np.random.default_rng(0).integers(0, 256, (8, 8, 4)).astype(np.float64) / 255.0
        layer = Layer(name="l", image=img, text="", text_span=(0, 0))
        out = rasterize_layer(layer, (8, 8))
        assert np.array_equal(out, img)

    def test_scale_two_of_single_pixel(self):
        img = solid_rgba((1, 1), (255, 0, 0, 255))
        layer = Layer(
            name="dot", image=img, text="", text_span=(0, 0), placement=Placement(scale=2.0)
        )
        out = rasterize_layer(layer, (4, 4))
        assert np.array_equal(out[:2, :2], np.broadcast_to(img[0, 0], (2, 2, 4)))
        assert (out[2:, :, 3] == 0).all() and (out[:, 2:, 3] == 0).all()

    def test_offset_placement_against_per_pixel_oracle(self):
        rng = np.random.default_rng(1)
        src = rng.uniform(size=(64, 64, 4))
        layer = Layer(
            name="q", image=src, text="", text_span=(0, 0), placement=Placement(x=32, y=32)
        )
        out = rasterize_layer(layer, (64, 64))
        oracle = np.zeros((64, 64, 4))
        for y in range(64):
            for x in range(64):
                if y >= 32 and x >= 32:
                    oracle[y, x] = src[y - 32, x - 32]
        assert np.array_equal(out, oracle)
        assert (out[:32, :, 3] == 0).all() and (out[:, :32, 3] == 0).all()

    def test_fully_off_canvas_rejected(self):
        layer = Layer(
            name="gone",
            image=solid_rgba((4, 4), (255, 255, 255, 255)),
            text="",
            text_span=(0, 0),
            placement=Placement(x=100, y=0),
        )
        with pytest.raises(PlacementError):
            rasterize_layer(layer, (8, 8))


class TestComposite:
    def test_single_opaque_layer_is_identity(self):
        img = np.random.default_rng(2).uniform(size=(8, 8, 4))
        img[:, :, 3] = 1.0
        collage = _single_layer_collage(img)
        assert np.allclose(flatten_composite(collage), img)

    def test_opaque_top_layer_absorbs_lower(self):
        rng = np.random.default_rng(3)
        bottom = rng.uniform(size=(8, 8, 4))
        top = rng.uniform(size=(8, 8, 4))
        top[:, :, 3] = 1.0
        layers = (
            Layer(name="b", image=bottom, text="", text_span=(0, 0)),
            Layer(name="t", image=top, text="", text_span=(0, 0)),
        )
        collage = Collage(prompt="x", canvas=(8, 8), layers=layers)
        assert np.allclose(flatten_composite(collage), top)

    def test_two_half_transparent_layers_match_over_operator(self):
        a = solid_rgba((4, 4), (200, 40, 40, 128))
        b = solid_rgba((4, 4), (40, 200, 40, 128))
        layers = (
            Layer(name="a", image=a, text="", text_span=(0, 0)),
            Layer(name="b", image=b, text="", text_span=(0, 0)),
        )
        collage = Collage(prompt="x", canvas=(4, 4), layers=layers)
        out = flatten_composite(collage)
        # closed-form over operator per pixel: straight alpha
        aa, ab = a[0, 0, 3], b[0, 0, 3]
        out_alpha = ab + aa * (1 - ab)
        out_rgb = (b[0, 0, :3] * ab + a[0, 0, :3] * aa * (1 - ab)) / out_alpha
        assert np.allclose(out[:, :, 3], out_alpha)
        assert np.allclose(out[:, :, :3], np.broadcast_to(out_rgb, (4, 4, 3)))

    def test_needs_a_layer(self):
        with pytest.raises(Exception):
            flatten_composite(Collage(prompt="", canvas=(4, 4), layers=()))


class TestVisibility:
    def test_single_full_layer(self):
        img = solid_rgba((8, 8), (10, 10, 10, 255))
        collage = _single_layer_collage(img)
        vis = compute_visibility(collage)
        assert (vis.indices == 1).all()

    def test_left_half_top_layer(self):
        full = solid_rgba((8, 8), (0, 0, 0, 255))
        half = solid_rgba((8, 4), (255, 255, 255, 255))
        layers = (
            Layer(name="base", image=full, text="", text_span=(0, 0)),
            Layer(name="left", image=half, text="", text_span=(0, 0)),
        )
        collage = Collage(prompt="x", canvas=(8, 8), layers=layers)
        vis = compute_visibility(collage)
        assert (vis.indices[:, :4] == 2).all()
        assert (vis.indices[:, 4:] == 1).all()

    def test_bento_against_brute_force_oracle(self, bento):
        for res in [(8, 8), (4, 4), (16, 16), (64, 64)]:
            got = compute_visibility(bento, res).indices
            want = visibility_oracle(bento, res)
            assert np.array_equal(got, want), f"mismatch at {res}"

    def test_bento_expected_regions_at_latent_res(self, bento):
        vis = compute_visibility(bento, (8, 8)).indices
        assert (vis[0, :] == 1).all()
        assert (vis[1:4, 1:4] == 3).all()  # edamame
        assert (vis[1:4, 5:8] == 4).all()  # ginger
        assert (vis[5:8, 0:3] == 2).all()  # rice
        assert (vis[5:8, 3:7] == 5).all()  # sushi wins the contested column
        assert (vis[5:8, 7] == 1).all()

    def test_reordering_changes_only_overlap(self, bento):
        swapped_layers = list(bento.layers)
        swapped_layers[1], swapped_layers[4] = swapped_layers[4], swapped_layers[1]
        swapped = Collage(prompt=bento.prompt, canvas=bento.canvas, layers=tuple(swapped_layers))
        vis_a = compute_visibility(bento).indices
        vis_b = compute_visibility(swapped).indices
        cov = layer_coverage(bento)
        overlap = cov[1] & cov[4]  # rice & sushi both cover
        assert overlap.any()
        # compare by physical layer, since indices renumber after the swap
        names_a = np.array(["none"] + [l.name for l in bento.layers])[vis_a]
        names_b = np.array(["none"] + [l.name for l in swapped.layers])[vis_b]
        assert np.array_equal(names_a[~overlap], names_b[~overlap])
        assert (names_a[overlap] != names_b[overlap]).all()

    def test_composite_consistency_where_layer_visible(self, bento):
        vis = compute_visibility(bento).indices
        full = flatten_composite(bento)
        for j in range(1, bento.n_layers + 1):
            partial = Collage(
                prompt=bento.prompt, canvas=bento.canvas, layers=bento.layers[:j]
            )
            up_to_j = flatten_composite(partial)
            cells = vis == j
            if cells.any():
                assert np.allclose(full[cells], up_to_j[cells])


class TestProjectRoundTrip:
    def test_save_load_is_field_for_field_equal(self, bento, tmp_path):
        save_project(bento, tmp_path / "proj")
        loaded = load_project(tmp_path / "proj")
        assert collage_equal(bento, loaded)

    def test_span_text_mismatch_names_layer(self, bento, tmp_path):
        import json

        path = save_project(bento, tmp_path / "proj")
        manifest = json.loads(path.read_text())
        manifest["layers"][1]["span"] = [16, 20]  # off-by-one on the rice span
        path.write_text(json.dumps(manifest))
        with pytest.raises(ProjectFormatError, match="rice"):
            load_project(tmp_path / "proj")

    def test_missing_asset_names_path(self, bento, tmp_path):
        save_project(bento, tmp_path / "proj")
        victim = next((tmp_path / "proj").glob("layer_02*.png"))
        victim.unlink()
        with pytest.raises(ProjectFormatError, match=victim.name):
            load_project(tmp_path / "proj")

    def test_version_mismatch_rejected(self, bento, tmp_path):
        path = save_project(bento, tmp_path / "proj")
        manifest = path.read_text().replace('"version": 1', '"version": 99')
        path.write_text(manifest)
        with pytest.raises(ProjectFormatError, match="version"):
            load_project(tmp_path / "proj")


class TestValidation:
    def test_span_not_matching_text_rejected_at_construction(self):
        img = solid_rgba((4, 4), (1, 2, 3, 255))
        with pytest.raises(SpanError):
            Collage(
                prompt="a cat sat",
                canvas=(4, 4),
                layers=(Layer(name="c", image=img, text="dog", text_span=(2, 5)),),
            )

    def test_alpha_out_of_range_rejected(self):
        img = np.full((2, 2, 4), 1.5)
        with pytest.raises(Exception):
            Layer(name="bad", image=img, text="", text_span=(0, 0))

    def test_invisible_layer_fails_validation(self):
        img = np.zeros((4, 4, 4))
        collage = _single_layer_collage(img)
        with pytest.raises(PlacementError, match="only"):
            validate_collage(collage)

    def test_stride_check(self, bento):
        validate_collage(bento, latent_stride=8)
        with pytest.raises(Exception):
            validate_collage(bento, latent_stride=48)
