"""Synthetic fundus-like images with exactly known vessel masks.

Vessels are smooth random walks with angular momentum, 1-3 px wide, drawn
inside a circular field of view. Background texture is a smooth illumination
field plus white noise, both scaled by ``noise``; with ``noise=0`` the image
is nonzero exactly on the vessel mask.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

from .data import FundusImage, image_rng
from .errors import ParameterError

_STENCILS = {
    1: [(0, 0)],
    2: [(0, 0), (0, 1), (1, 0), (1, 1)],
    3: [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if abs(dy) + abs(dx) < 2],
}


def _fov_disc(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    r = 0.46 * min(h, w)
    return (((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) <= r * r).astype(np.uint8)


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # low-frequency field from a coarse grid, bilinearly upsampled, in [0, 1]
    gh, gw = 4, 4
    grid = rng.random((gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _draw_stroke(rng, intensity, mask, fov, value):
    h, w = mask.shape
    inside = np.argwhere(fov)
    y, x = inside[rng.integers(len(inside))].astype(float)
    theta = rng.uniform(0, 2 * np.pi)
    omega = 0.0
    width = int(rng.integers(1, 4))
    length = int(rng.integers(min(h, w) // 3, 2 * max(h, w)))
    stencil = _STENCILS[width]
    for _ in range(length):
        iy, ix = int(round(y)), int(round(x))
        for dy, dx in stencil:
            py, px = iy + dy, ix + dx
            if 0 <= py < h and 0 <= px < w and fov[py, px]:
                mask[py, px] = 1
                intensity[py, px] = max(intensity[py, px], value)
        omega = 0.85 * omega + rng.normal(0, 0.06)
        theta += omega
        y += np.sin(theta)
        x += np.cos(theta)
        if not (0 <= y < h and 0 <= x < w) or not fov[int(y), int(x)]:
            break


def synth_image(
    size: Union[int, Sequence[int]],
    density: float,
    noise: float,
    rng: np.random.Generator,
    image_id: str = "",
) -> FundusImage:
    """One synthetic image; ``density`` is strokes per 1000 pixels of area."""
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    fov = _fov_disc(h, w)
    mask = np.zeros((h, w), np.uint8)
    vessels = np.zeros((h, w))
    n_strokes = int(round(density * h * w / 1000))
    for _ in range(n_strokes):
        _draw_stroke(rng, vessels, mask, fov, rng.uniform(0.55, 0.95))
    img = vessels.copy()
    if noise > 0:
        background = 0.5 * _smooth_field(rng, h, w) + rng.normal(0.0, 1.0, (h, w))
        img = img + noise * background
    img = np.clip(img, 0.0, 1.0) * fov
    gray = np.round(img * 255).astype(np.uint8)
    if noise == 0:
        # rounding must not erase a vessel pixel
        gray[(mask == 1) & (gray == 0)] = 1
    rgb = np.stack([gray, gray, gray], axis=-1)
    return FundusImage(image=rgb, mask=mask, fov=fov, id=image_id)


def gen_synthetic(
    out_dir,
    count: int,
    size: Union[int, Sequence[int]] = 128,
    density: float = 1.0,
    noise: float = 0.1,
    seed: int = 0,
) -> Path:
    """Write ``count`` synthetic triplets in the standard dataset layout.

    Image ``i`` draws from the stream seeded with ``seed XOR i``, so output is
    byte-identical for identical arguments.
    """
    if count < 1:
        raise ParameterError("count must be ≥ 1")
    if density < 0 or noise < 0:
        raise ParameterError("density and noise must be non-negative")
    out = Path(out_dir)
    for sub in ("images", "masks", "fov"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    digits = max(2, len(str(count - 1)))
    for i in range(count):
        stem = f"{i:0{digits}d}"
        img = synth_image(size, density, noise, image_rng(seed, i), stem)
        Image.fromarray(img.image).save(out / "images" / f"{stem}.png")
        Image.fromarray(img.mask * 255).save(out / "masks" / f"{stem}.png")
        Image.fromarray(img.fov * 255).save(out / "fov" / f"{stem}.png")
    return out
