"""Regenerates the image fixtures under this directory.

Run from the repository root: python3 fixtures/make_fixtures.py
Output is deterministic; the committed files are what this script writes.
"""

from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).resolve().parent


def gradient(w, h, phase):
    y, x = np.mgrid[0:h, 0:w]
    r = (x * 255 // max(w - 1, 1) + phase) % 256
    g = (y * 255 // max(h - 1, 1) + 2 * phase) % 256
    b = ((x + y) * 7 + 3 * phase) % 256
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def with_scratch(img, offset):
    out = img.copy()
    h, w = out.shape[:2]
    for i in range(min(h, w) - 4):
        out[2 + i, (offset + i) % w] = 255
        out[2 + i, (offset + i + 1) % w] = 255
    return out


def save(arr, path, gray=False):
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(arr)
    if gray:
        img = img.convert("L")
    img.save(path, optimize=False)


def mini_mvtec():
    root = HERE / "mini_mvtec"
    for ci, (category, defect, gray) in enumerate([("capsule", "crack", False), ("grid", "bent", True)]):
        w, h = 40, 32
        phase = 0
        for split, cls, count in [("train", "good", 2), ("test", "good", 2), ("test", defect, 2)]:
            for k in range(count):
                base = gradient(w, h, 10 * ci + phase)
                arr = with_scratch(base, 5 + 7 * k) if cls != "good" else base
                save(arr, root / category / split / cls / f"{k:03d}.png", gray=gray)
                phase += 3


def small_images():
    px2 = np.array([[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [10, 20, 30]]], dtype=np.uint8)
    save(px2, HERE / "rgb_2x2.png")
    save(np.array([[0, 64], [128, 255]], dtype=np.uint8), HERE / "gray_2x2.png")
    rgba = np.dstack([px2, np.array([[255, 0], [128, 7]], dtype=np.uint8)])
    Image.fromarray(rgba, "RGBA").save(HERE / "rgba_2x2.png")
    px4 = (np.arange(48, dtype=np.uint32).reshape(4, 4, 3) * 5 + 3).astype(np.uint8)
    save(px4, HERE / "rgb_4x4.png")

    jpg = gradient(16, 12, 40)
    Image.fromarray(jpg).save(HERE / "gradient_16x12.jpg", quality=90, subsampling=0)
    decoded = np.asarray(Image.open(HERE / "gradient_16x12.jpg").convert("RGB"), dtype=np.uint8)
    (HERE / "gradient_16x12.rgb").write_bytes(decoded.tobytes())


if __name__ == "__main__":
    mini_mvtec()
    small_images()
