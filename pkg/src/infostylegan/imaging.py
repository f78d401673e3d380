"""Tile montages and image files (binary PGM, plus PNG through matplotlib)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SEPARATOR = 2


def tile(images: Sequence[np.ndarray], rows: int, cols: int, sep: int = SEPARATOR,
         sep_value: float = 0.5, empty_value: float = 0.0) -> np.ndarray:
    """Row-major montage of (1,h,w) or (h,w) images; missing slots are filled with ``empty_value``."""
    imgs = [np.asarray(im, dtype=np.float64).reshape(np.shape(im)[-2:]) for im in images]
    if len(imgs) > rows * cols:
        raise ValueError(f"{len(imgs)} images do not fit a {rows}x{cols} grid")
    h, w = imgs[0].shape if imgs else (32, 32)
    out = np.full((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep), sep_value)
    for r in range(rows):
        for c in range(cols):
            y, x = r * (h + sep), c * (w + sep)
            k = r * cols + c
            out[y:y + h, x:x + w] = imgs[k] if k < len(imgs) else empty_value
    return out


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of an image with values in [0, 1] (clipped)."""
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return data / float(maxval)


def write_png(path, image: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = np.asarray(image, dtype=np.float64)
    plt.imsave(str(path), np.clip(img.reshape(img.shape[-2:]), 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)


def save_image(stem, image: np.ndarray, png: bool = True) -> Optional[Path]:
    """Write ``stem``.pgm and, unless disabled, ``stem``.png; returns the PGM path."""
    stem = Path(stem)
    pgm = stem.with_suffix(".pgm")
    write_pgm(pgm, image)
    if png:
        write_png(stem.with_suffix(".png"), image)
    return pgm
