#!/usr/bin/env python3
"""Regenerates the committed test images in tests/data.

Procedural scenes (sky gradient, hills, discs, stripes, mild grain) so the
images have smooth regions, edges and texture. Output is deterministic.
"""
import struct
import sys
import zlib
from pathlib import Path

import numpy as np


def write_png(path, img):
    h, w, c = img.shape
    raw = b"".join(b"\x00" + img[y].tobytes() for y in range(h))
    color = {1: 0, 3: 2}[c]

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    png = b"\x89PNG\r\n\x1a\n"
    png += chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0))
    png += chunk(b"IDAT", zlib.compress(raw, 9))
    png += chunk(b"IEND", b"")
    Path(path).write_bytes(png)


def scene(size, seed):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    sky_top, sky_bot = rng.uniform(0.2, 0.6, 3), rng.uniform(0.6, 0.95, 3)
    img[:] = sky_top + (sky_bot - sky_top) * y[..., None]
    for _ in range(3):
        base = rng.uniform(0.5, 0.8)
        amp, freq, phase = rng.uniform(0.03, 0.1), rng.uniform(2, 6), rng.uniform(0, 6.3)
        ridge = base + amp * np.sin(2 * np.pi * freq * x + phase)
        col = rng.uniform(0.1, 0.6, 3)
        shade = 0.8 + 0.2 * np.cos(9 * x + 5 * y)
        mask = y > ridge
        img[mask] = (col * shade[..., None])[mask]
    for _ in range(4):
        cy, cx, r = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.04, 0.15)
        d = np.hypot(y - cy, x - cx)
        edge = np.clip((r - d) * size / 1.5, 0, 1)
        img = img * (1 - edge[..., None]) + rng.uniform(0, 1, 3) * edge[..., None]
    sy, sx = int(size * 0.05), int(size * 0.6)
    band = img[sy:sy + size // 5, sx:sx + size // 4]
    stripes = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * np.arange(band.shape[1]) / 6.0))
    band[:] = 0.5 * band + 0.5 * stripes[None, :, None]
    img += rng.normal(0, 0.015, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests" / "data")
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "scene_a_128.png", scene(128, 1))
    write_png(out / "scene_b_256.png", scene(256, 2))
    write_png(out / "scene_c_256.png", scene(256, 3))
    write_png(out / "scene_d_512.png", scene(512, 4))


if __name__ == "__main__":
    main()
