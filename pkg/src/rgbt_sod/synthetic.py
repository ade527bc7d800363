"""Small synthetic RGBT dataset for smoke tests and demos.

Each sample is a textured background with one elliptical object that differs
in colour in the RGB image and is warmer in the thermal image.
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image


def make_sample(rng, height, width):
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
    ry, rx = rng.uniform(0.15, 0.3) * height, rng.uniform(0.15, 0.3) * width
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    bg = rng.uniform(0.2, 0.5, size=3)
    fg = 1.0 - bg
    rgb = bg[None, None] + 0.08 * rng.standard_normal((height, width, 3))
    rgb[mask] = fg + 0.08 * rng.standard_normal((mask.sum(), 3))

    thermal = 0.25 + 0.05 * rng.standard_normal((height, width))
    thermal[mask] = 0.8 + 0.05 * rng.standard_normal(mask.sum())

    to8 = lambda a: (np.clip(a, 0, 1) * 255).round().astype(np.uint8)
    return to8(rgb), to8(thermal), mask.astype(np.uint8) * 255


def make_dataset(root, n=4, height=80, width=96, seed=0, attributes=None):
    """Write ``n`` samples under ``root/{RGB,T,GT}``; returns the root path.

    ``attributes`` optionally maps sample index -> list of challenge tags.
    """
    root = Path(root)
    for d in ("RGB", "T", "GT"):
        (root / d).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        sid = f"{i:04d}"
        rgb, thermal, gt = make_sample(rng, height, width)
        Image.fromarray(rgb).save(root / "RGB" / f"{sid}.jpg", quality=95)
        Image.fromarray(thermal, mode="L").save(root / "T" / f"{sid}.jpg", quality=95)
        Image.fromarray(gt, mode="L").save(root / "GT" / f"{sid}.png")
        if attributes and i in attributes:
            lines.append(f"{sid}\t{','.join(attributes[i])}")
    if lines:
        (root / "attributes.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root")
    p.add_argument("-n", type=int, default=4)
    p.add_argument("--height", type=int, default=80)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    make_dataset(args.root, args.n, args.height, args.width, args.seed)


if __name__ == "__main__":
    main()
