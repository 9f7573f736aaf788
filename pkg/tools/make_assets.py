"""Render the stand-in RGBA patch objects shipped in ``assets/``.

The three patches are drawn procedurally (no third-party artwork), so they
carry no license restrictions beyond the repository's own.

Usage: python tools/make_assets.py [OUT_DIR]
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SIZE = 128


def rugby_ball() -> Image.Image:
    im = Image.new("RGBA", (SIZE, SIZE // 2 + 16), (0, 0, 0, 0))
    d = ImageDraw.Draw(im)
    d.ellipse((4, 4, SIZE - 4, SIZE // 2 + 12), fill=(139, 69, 19, 255), outline=(80, 40, 10, 255), width=3)
    cy = (SIZE // 2 + 16) // 2
    d.line((SIZE // 2 - 24, cy, SIZE // 2 + 24, cy), fill=(255, 255, 255, 255), width=3)
    for x in range(SIZE // 2 - 20, SIZE // 2 + 21, 8):
        d.line((x, cy - 6, x, cy + 6), fill=(255, 255, 255, 255), width=2)
    return im


def soccer_ball() -> Image.Image:
    im = Image.new("RGBA", (SIZE, SIZE), (0, 0, 0, 0))
    d = ImageDraw.Draw(im)
    d.ellipse((4, 4, SIZE - 4, SIZE - 4), fill=(250, 250, 250, 255), outline=(20, 20, 20, 255), width=3)
    c = SIZE / 2

    def pentagon(cx, cy, r, rot):
        ang = rot + np.arange(5) * 2 * np.pi / 5
        return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang]

    d.polygon(pentagon(c, c, 18, -np.pi / 2), fill=(20, 20, 20, 255))
    for k in range(5):
        a = -np.pi / 2 + k * 2 * np.pi / 5 + np.pi / 5
        d.polygon(pentagon(c + 44 * np.cos(a), c + 44 * np.sin(a), 13, a), fill=(20, 20, 20, 255))
    # keep everything inside the ball outline
    mask = Image.new("L", im.size, 0)
    ImageDraw.Draw(mask).ellipse((4, 4, SIZE - 4, SIZE - 4), fill=255)
    im.putalpha(mask)
    return im


def lotus() -> Image.Image:
    im = Image.new("RGBA", (SIZE, SIZE), (0, 0, 0, 0))
    d = ImageDraw.Draw(im)
    base = (SIZE / 2, SIZE - 20)
    for k, ang in enumerate(np.linspace(-70, 70, 7)):
        a = np.deg2rad(ang - 90)
        tip = (base[0] + 80 * np.cos(a), base[1] + 80 * np.sin(a))
        nrm = (-np.sin(a) * 14, np.cos(a) * 14)
        mid = ((base[0] + tip[0]) / 2, (base[1] + tip[1]) / 2)
        shade = 200 + 8 * (3 - abs(k - 3))
        d.polygon([base, (mid[0] + nrm[0], mid[1] + nrm[1]), tip, (mid[0] - nrm[0], mid[1] - nrm[1])],
                  fill=(shade, 110, 170, 255), outline=(150, 60, 120, 255))
    d.ellipse((SIZE / 2 - 10, SIZE - 34, SIZE / 2 + 10, SIZE - 14), fill=(240, 200, 60, 255))
    d.rectangle((10, SIZE - 14, SIZE - 10, SIZE - 6), fill=(40, 130, 60, 255))
    return im


def main(out: str = "assets") -> None:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, fn in (("rugby_ball", rugby_ball), ("soccer_ball", soccer_ball), ("lotus", lotus)):
        fn().save(out_dir / f"{name}.png", optimize=False)


if __name__ == "__main__":
    main(*sys.argv[1:])
