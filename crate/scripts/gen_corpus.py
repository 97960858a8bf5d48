#!/usr/bin/env python3
"""Regenerates the bundled synthetic corpus in data/corpus.

Twenty 64x64 RGB PNGs with smooth, structured content (gradients, rings,
stripes, low-frequency plasma). Deterministic: running it twice writes
identical files. Image stems are chosen so the name-hash split used by the
trainer (FNV-1a 64 mod 10; 0-1 val, 2 test, rest train) yields at least
4 validation and 2 test images.
"""

import math
from pathlib import Path

import numpy as np
from PIL import Image

OUT = Path(__file__).resolve().parent.parent / "data" / "corpus"
SIZE = 64
COUNT = 20
MIN_VAL = 4
MIN_TEST = 2


def fnv1a64(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode():
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def bucket(stem: str) -> str:
    r = fnv1a64(stem) % 10
    if r in (0, 1):
        return "val"
    if r == 2:
        return "test"
    return "train"


def pick_stems() -> list[str]:
    """First COUNT candidate stems, but skewed so val/test quotas are met."""
    val, test, train = [], [], []
    i = 0
    while len(val) + len(test) + len(train) < COUNT * 3:
        stem = f"synth_{i:03d}"
        {"val": val, "test": test, "train": train}[bucket(stem)].append(stem)
        i += 1
    chosen = val[:MIN_VAL] + test[:MIN_TEST]
    rest = [s for s in (val[MIN_VAL:] + test[MIN_TEST:] + train)]
    rest.sort()
    chosen += rest[: COUNT - len(chosen)]
    chosen.sort()
    assert len(chosen) == COUNT
    assert sum(1 for s in chosen if bucket(s) == "val") >= MIN_VAL
    assert sum(1 for s in chosen if bucket(s) == "test") >= MIN_TEST
    return chosen


def grid():
    y, x = np.mgrid[0:SIZE, 0:SIZE] / (SIZE - 1)
    return y, x


def render(kind: int, rng: np.random.Generator) -> np.ndarray:
    y, x = grid()
    img = np.zeros((SIZE, SIZE, 3))
    if kind == 0:  # tilted gradient plus a soft sine wash
        for c in range(3):
            a, b = rng.uniform(-1, 1, 2)
            img[..., c] = 0.5 + 0.35 * (a * x + b * y) + 0.15 * np.sin(
                2 * math.pi * (rng.uniform(1, 3) * x + rng.uniform(0, 1))
            )
    elif kind == 1:  # concentric rings around a random center
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = np.hypot(y - cy, x - cx)
        for c in range(3):
            img[..., c] = 0.5 + 0.45 * np.cos(
                2 * math.pi * rng.uniform(3, 7) * r + c * rng.uniform(0.5, 2)
            )
    elif kind == 2:  # soft checkerboard
        f = rng.integers(2, 5)
        base = np.sin(2 * math.pi * f * x) * np.sin(2 * math.pi * f * y)
        for c in range(3):
            img[..., c] = 0.5 + 0.4 * np.tanh(3 * base) * rng.uniform(0.6, 1.0)
    elif kind == 3:  # a few gaussian blobs on a gradient
        img += (0.3 + 0.3 * x)[..., None]
        for _ in range(rng.integers(3, 6)):
            cy, cx = rng.uniform(0, 1, 2)
            s = rng.uniform(0.05, 0.18)
            blob = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
            img += blob[..., None] * rng.uniform(-0.4, 0.5, 3)
    elif kind == 4:  # diagonal stripes under a vignette
        th = rng.uniform(0, math.pi)
        u = x * math.cos(th) + y * math.sin(th)
        stripes = 0.5 + 0.4 * np.sin(2 * math.pi * rng.uniform(4, 9) * u)
        vig = 1.0 - 0.5 * ((y - 0.5) ** 2 + (x - 0.5) ** 2) * 2
        for c in range(3):
            img[..., c] = stripes * vig * rng.uniform(0.7, 1.0)
    else:  # low-frequency Fourier plasma
        for c in range(3):
            acc = np.zeros((SIZE, SIZE))
            for _ in range(6):
                fy, fx = rng.integers(1, 4, 2)
                ph = rng.uniform(0, 2 * math.pi)
                acc += rng.uniform(0.2, 1.0) * np.sin(
                    2 * math.pi * (fy * y + fx * x) + ph
                )
            acc = (acc - acc.min()) / (acc.max() - acc.min() + 1e-9)
            img[..., c] = 0.1 + 0.8 * acc
    return np.clip(img, 0.0, 1.0)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    stems = pick_stems()
    counts = {"train": 0, "val": 0, "test": 0}
    for i, stem in enumerate(stems):
        rng = np.random.default_rng(1000 + int(stem.split("_")[1]))
        img = render(i % 6, rng)
        pixels = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(pixels, "RGB").save(OUT / f"{stem}.png")
        counts[bucket(stem)] += 1
    print(f"wrote {len(stems)} images to {OUT}")
    print(f"split: {counts['train']} train, {counts['val']} val, {counts['test']} test")


if __name__ == "__main__":
    main()
