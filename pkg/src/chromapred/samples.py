"""A small natural-image corpus built from scikit-image's bundled photographs.

Used by the test suite and the training smoke check when no DIV2K-style
corpus is at hand. Requires the ``samples`` extra (scikit-image).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import write_ppm

SOURCES = (
    "astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
    "hubble_deep_field", "retina", "colorwheel", "logo",
)


def _sources() -> list[tuple[str, np.ndarray]]:
    from skimage import data

    out = []
    for name in SOURCES:
        img = getattr(data, name)()
        if img.shape[-1] == 4:
            rgba = img.astype(np.float64) / 255.0
            img = np.round((rgba[..., :3] * rgba[..., 3:] + (1.0 - rgba[..., 3:])) * 255.0).astype(np.uint8)
        out.append((name, img))
    left, right, _ = data.stereo_motorcycle()
    out += [("motorcycle_left", left), ("motorcycle_right", right)]
    return out


def sample_images(count: int = 20) -> list[tuple[str, np.ndarray]]:
    """``count`` RGB images: each source split into left/right halves, in a fixed order."""
    halves = []
    for name, img in _sources():
        mid = img.shape[1] // 2
        halves.append((f"{name}_a", img[:, :mid]))
        halves.append((f"{name}_b", img[:, mid:]))
    if count > len(halves):
        raise ValueError(f"only {len(halves)} sample images available")
    return halves[:count]


def write_sample_corpus(directory: str | Path, count: int = 20) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (name, img) in enumerate(sample_images(count)):
        path = directory / f"{i:02d}_{name}.ppm"
        write_ppm(path, img.astype(np.float64) / 255.0)
        paths.append(path)
    return paths
