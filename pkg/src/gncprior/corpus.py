"""Build small PGM corpora from the scikit-image sample images.

scikit-image is only needed here (install the ``data`` extra).  Training and
held-out images come from disjoint source pictures.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import save_pgm

__all__ = ["TRAIN_SOURCES", "TEST_SOURCES", "build_corpus"]

TRAIN_SOURCES = ("camera", "astronaut", "coins", "moon", "brick", "grass", "gravel",
                 "chelsea", "coffee", "rocket")
TEST_SOURCES = ("clock", "stereo_motorcycle", "immunohistochemistry", "retina", "cell", "page")


def _gray(name: str) -> np.ndarray:
    from skimage import color, data, transform

    img = getattr(data, name)()
    if isinstance(img, tuple):
        img = img[0]
    img = np.asarray(img)
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3])
    elif img.dtype == np.uint8:
        img = img / 255.0
    img = np.asarray(img, dtype=float)
    # bring every source to roughly 256 px on the short side
    scale = 256.0 / min(img.shape)
    if scale < 1:
        img = transform.rescale(img, scale, anti_aliasing=True)
    return np.clip(img, 0.0, 1.0)


def _crops(img, size, count, rng):
    out = []
    for _ in range(count):
        i = rng.integers(img.shape[0] - size + 1)
        j = rng.integers(img.shape[1] - size + 1)
        out.append(img[i:i + size, j:j + size])
    return out


def build_corpus(out_dir, train_size: int = 128, per_source: int = 2, test_size: int = 96,
                 seed: int = 0) -> tuple[list[Path], list[Path]]:
    """Write ``train/*.pgm`` and ``test/*.pgm`` under ``out_dir``.

    Returns the written training and test paths.
    """
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(seed))
    train, test = [], []
    for name in TRAIN_SOURCES:
        for k, crop in enumerate(_crops(_gray(name), train_size, per_source, rng)):
            p = out / "train" / f"{name}_{k}.pgm"
            save_pgm(crop, p)
            train.append(p)
    for name in TEST_SOURCES:
        p = out / "test" / f"{name}.pgm"
        save_pgm(_crops(_gray(name), test_size, 1, rng)[0], p)
        test.append(p)
    return train, test


if __name__ == "__main__":
    import sys

    tr, te = build_corpus(sys.argv[1] if len(sys.argv) > 1 else "data")
    print(f"wrote {len(tr)} training and {len(te)} test images")
