import numpy as np
import pytest

from collagekit.model import Collage, Layer, Placement

BENTO_PROMPT = "a bento box with rice, edamame, ginger, and sushi"


def span_of(prompt: str, text: str) -> tuple[int, int]:
    start = prompt.index(text)
    return (start, start + len(text))


def solid_rgba(shape_hw: tuple[int, int], rgba: tuple[int, int, int, int]) -> np.ndarray:
    h, w = shape_hw
    img = np.zeros((h, w, 4), dtype=np.float64)
    img[:, :] = np.array(rgba, dtype=np.float64) / 255.0
    return img


def make_layer(
    name: str,
    shape_hw: tuple[int, int],
    rgba: tuple[int, int, int, int],
    xy: tuple[int, int],
    text: str,
    prompt: str,
    **controls,
) -> Layer:
    return Layer(
        name=name,
        image=solid_rgba(shape_hw, rgba),
        text=text,
        text_span=span_of(prompt, text) if text else (0, 0),
        placement=Placement(x=xy[0], y=xy[1], scale=1.0),
        **controls,
    )


def bento_collage() -> Collage:
    """Five-layer 64x64 fixture, cell-aligned on the 8x8 latent grid.

    The box fills the canvas; rice/edamame/ginger/sushi are placed crops and
    sushi overlaps rice (ordering matters on cell column 3, rows 5:8).
    Noise levels follow the worked example: 0.5 box/rice, 0.6 edamame,
    0.8 ginger/sushi.
    """
    p = BENTO_PROMPT
    layers = (
        make_layer("bento box", (64, 64), (191, 128, 64, 255), (0, 0), "bento box", p,
                   noise_level=0.5, controlnet_weight=0.2),
        make_layer("rice", (24, 32), (255, 255, 255, 255), (0, 40), "rice", p,
                   noise_level=0.5, controlnet_weight=0.4),
        make_layer("edamame", (24, 24), (64, 191, 64, 255), (8, 8), "edamame", p,
                   noise_level=0.6, controlnet_weight=0.6),
        make_layer("ginger", (24, 24), (255, 191, 191, 255), (40, 8), "ginger", p,
                   noise_level=0.8, controlnet_weight=0.8),
        make_layer("sushi", (24, 32), (255, 64, 64, 255), (24, 40), "sushi", p,
                   noise_level=0.8, controlnet_weight=1.0),
    )
    return Collage(prompt=p, canvas=(64, 64), layers=layers)


@pytest.fixture
def bento() -> Collage:
    return bento_collage()


def visibility_oracle(collage: Collage, resolution: tuple[int, int]) -> np.ndarray:
    """Brute-force per-cell scan from the top layer down."""
    from collagekit.model import rasterize_layer

    cw, ch = collage.canvas
    rh, rw = resolution
    alphas = [rasterize_layer(l, collage.canvas)[:, :, 3] for l in collage.layers]
    out = np.zeros((rh, rw), dtype=np.int32)
    by, bx = ch // rh, cw // rw
    for a in range(rh):
        for b in range(rw):
            for j in range(collage.n_layers, 0, -1):
                block = alphas[j - 1][a * by : (a + 1) * by, b * bx : (b + 1) * bx]
                if (rh, rw) == (ch, cw):
                    visible = block[0, 0] > 0
                else:
                    visible = block.mean() >= 0.5
                if visible:
                    out[a, b] = j
                    break
    return out
