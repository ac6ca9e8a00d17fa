import numpy as np
import pytest
import torch

from collagekit.control import (
    ControlWeightMap,
    apply_scalar_weight,
    apply_weights,
    build_weight_map,
    canny_condition,
)
from collagekit.model import Collage, Layer, compute_visibility

from conftest import bento_collage, make_layer, solid_rgba


def with_weights(collage, weights):
    layers = tuple(
        Layer(
            name=l.name,
            image=l.image,
            text=l.text,
            text_span=l.text_span,
            placement=l.placement,
            noise_level=l.noise_level,
            controlnet_weight=w,
        )
        for l, w in zip(collage.layers, weights)
    )
    return Collage(prompt=collage.prompt, canvas=collage.canvas, layers=layers)


def bilinear_oracle(src, out_hw):
    """Scalar half-pixel bilinear resize, written independently."""
    h, w = src.shape
    oh, ow = out_hw
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
            x = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                src[y0, x0] * (1 - fy) * (1 - fx)
                + src[y0, x1] * (1 - fy) * fx
                + src[y1, x0] * fy * (1 - fx)
                + src[y1, x1] * fy * fx
            )
    return out


class TestWeightMap:
    def test_all_ones(self, bento):
        wmap = build_weight_map(with_weights(bento, [1.0] * 5))
        assert (wmap.w == 1.0).all()

    def test_all_zeros_disables(self, bento):
        wmap = build_weight_map(with_weights(bento, [0.0] * 5))
        assert (wmap.w == 0.0).all()

    def test_cells_carry_visible_layers_weight(self, bento):
        wmap = build_weight_map(bento)
        vis = compute_visibility(bento).indices
        weights = [l.controlnet_weight for l in bento.layers]
        for j in range(1, 6):
            assert (wmap.w[vis == j] == weights[j - 1]).all()

    def test_uncovered_cells_get_zero(self):
        layer = make_layer("dot", (8, 8), (255, 0, 0, 255), (0, 0), "", "",
                           controlnet_weight=0.9)
        collage = Collage(prompt="", canvas=(16, 16), layers=(layer,))
        wmap = build_weight_map(collage)
        assert (wmap.w[:8, :8] == 0.9).all()
        assert (wmap.w[8:, 8:] == 0.0).all()


class TestApplyWeights:
    def _maps(self, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return [
            torch.randn(3, 8, 8, generator=gen, dtype=torch.float64),
            torch.randn(6, 4, 4, generator=gen, dtype=torch.float64),
        ]

    def test_unit_map_is_bit_exact_identity(self):
        maps = self._maps()
        wmap = ControlWeightMap(w=np.ones((64, 64)))
        out = apply_weights(maps, wmap)
        for m, o in zip(maps, out):
            assert torch.equal(m, o)

    def test_half_map_halves_everything(self):
        maps = self._maps()
        wmap = ControlWeightMap(w=np.full((64, 64), 0.5))
        out = apply_weights(maps, wmap)
        for m, o in zip(maps, out):
            assert torch.equal(o, m * 0.5)

    def test_resize_matches_dense_bilinear_oracle(self):
        rng = np.random.default_rng(4)
        w = rng.uniform(size=(4, 4))
        wmap = ControlWeightMap(w=w)
        feature = torch.ones(1, 2, 2, dtype=torch.float64)
        out = apply_weights([feature], wmap)[0]
        want = bilinear_oracle(w, (2, 2))
        assert np.abs(out[0].numpy() - want).max() < 1e-6

    def test_scalar_recovery_bit_exact(self, bento):
        maps = self._maps()
        for s in (0.0, 0.5, 1.0, 0.3):
            uniform = build_weight_map(with_weights(bento, [s] * 5))
            via_map = apply_weights(maps, uniform)
            via_scalar = apply_scalar_weight(maps, s)
            for a, b in zip(via_map, via_scalar):
                assert torch.equal(a, b), f"scalar recovery failed at s={s}"

    def test_locality_of_single_layer_change(self, bento):
        base = build_weight_map(bento)
        bumped = build_weight_map(
            with_weights(bento, [0.2, 0.4, 0.6, 0.8, 0.5])  # only sushi changed (1.0 -> 0.5)
        )
        feature = torch.ones(1, 4, 4, dtype=torch.float64)
        out_a = apply_weights([feature], base)[0][0].numpy()
        out_b = apply_weights([feature], bumped)[0][0].numpy()
        changed = np.abs(out_a - out_b) > 0
        # oracle: output cells whose bilinear support touches sushi's region
        vis = compute_visibility(bento).indices
        sushi = (vis == 5).astype(np.float64)
        support = bilinear_oracle(sushi, (4, 4)) > 0
        assert (~changed | support).all()

    def test_map_bounds_validated(self):
        with pytest.raises(Exception):
            ControlWeightMap(w=np.full((4, 4), 1.5))


class TestCondition:
    def test_canny_shape_and_range(self, bento):
        edges = canny_condition(bento)
        assert edges.shape == (64, 64)
        assert edges.min() >= 0.0 and edges.max() <= 1.0
        assert edges.any()  # the fixture has hard region boundaries
