"""Regenerates the bundled synthetic dark images and their references."""
import numpy as np
from pathlib import Path

from PIL import Image

OUT = Path(__file__).resolve().parent
rng = np.random.default_rng(20240611)
S = 96
yy, xx = np.mgrid[0:S, 0:S] / (S - 1)

def scene(k):
    base = np.stack([
        0.5 + 0.4 * np.sin(2 * np.pi * (xx * (k + 1) + 0.3 * k)),
        0.5 + 0.4 * np.cos(2 * np.pi * (yy * (k + 2) - 0.2 * k)),
        0.5 + 0.4 * np.sin(2 * np.pi * (xx + yy) * (k % 3 + 1)),
    ], -1)
    for _ in range(5):
        cx, cy, r = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.08, 0.25)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        base[mask] = rng.uniform(0.15, 0.95, 3)
    for _ in range(3):
        x0, y0 = rng.integers(0, S - 20, 2)
        w, h = rng.integers(8, 30, 2)
        base[y0:y0 + h, x0:x0 + w] = rng.uniform(0.1, 0.9, 3)
    return np.clip(base, 0, 1)

def darken(ref, k):
    low = 0.12 * (0.8 + 0.1 * k) * ref ** 1.4 + rng.normal(0, 0.006, ref.shape)
    return np.clip(low, 0, 1)

def save(a, path):
    Image.fromarray(np.round(a * 255).astype(np.uint8), "RGB").save(OUT / path)

for k in range(4):
    ref = scene(k)
    low = darken(ref, k)
    save(low, f"train/dark_{k}.png")
    save(low, f"low/pair_{k}.png")
    save(ref, f"ref/pair_{k}.png")
probe_ref = scene(7)
save(darken(probe_ref, 1), "probe_dark.png")
