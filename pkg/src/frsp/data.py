"""Image I/O, bicubic resampling and the synthetic super-resolution dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImagePair",
    "ImageDecodeError",
    "NotRGBError",
    "load_png",
    "save_png",
    "bicubic_weights",
    "bicubic_resize",
    "synth_dataset",
    "sample_patches",
    "load_dataset_dir",
]


class ImageDecodeError(ValueError):
    pass


class NotRGBError(ValueError):
    pass


FLAT, EDGE, TEXTURE = 0, 1, 2


@dataclass
class ImagePair:
    hr: np.ndarray  # 3 x sH x sW
    lr: np.ndarray  # 3 x H x W
    scale: int
    labels: np.ndarray | None = None  # sH x sW region labels (FLAT / EDGE / TEXTURE)
    name: str = ""

    def __post_init__(self):
        if self.hr.shape[0] != 3 or self.lr.shape[0] != 3:
            raise ValueError("images must be 3 x H x W")
        if self.hr.shape[1:] != (self.lr.shape[1] * self.scale, self.lr.shape[2] * self.scale):
            raise ValueError(f"HR {self.hr.shape} is not {self.scale}x LR {self.lr.shape}")


# ----------------------------------------------------------------------
# PNG


def load_png(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG -> float64 array ``3 x H x W`` in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise NotRGBError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageDecodeError(f"{path}: {e}") from e
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"save_png expects 3 x H x W, got {img.shape}")
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path)


# ----------------------------------------------------------------------
# bicubic


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_weights(in_len: int, out_len: int, a: float = -0.5) -> np.ndarray:
    """``out_len x in_len`` interpolation matrix, pixel-center aligned, edge-clamped."""
    if out_len <= 0 or in_len <= 0:
        raise ValueError("bicubic_resize: dimensions must be positive")
    w = np.zeros((out_len, in_len))
    scale = in_len / out_len
    for i in range(out_len):
        x = (i + 0.5) * scale - 0.5
        base = math.floor(x)
        t = x - base
        for off in range(-1, 3):
            idx = min(max(base + off, 0), in_len - 1)
            w[i, idx] += cubic(np.float64(off - t), a)
    return w


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resize of a ``[C x] H x W`` array."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    wh = bicubic_weights(h, out_h)
    ww = bicubic_weights(w, out_w)
    return np.einsum("oh,...hw,pw->...op", wh, img, ww)


# ----------------------------------------------------------------------
# synthetic data


def _aligned(rng: np.random.Generator, lo: int, hi: int, step: int) -> int:
    """Random multiple of ``step`` in ``[lo, hi]``."""
    return step * int(rng.integers(-(-lo // step), hi // step + 1))


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # sharp two-level patterns: blurred by downscaling but recoverable by a deeper net
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = rng.integers(3)
    if kind == 0:
        theta = rng.choice([0.0, 0.25, 0.5, 0.75]) * np.pi + rng.uniform(-0.2, 0.2)
        period = rng.uniform(5.0, 9.0)
        pat = (np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period) > 0).astype(np.float64)
    elif kind == 1:
        cell = int(rng.integers(3, 6))
        pat = ((yy // cell + xx // cell) % 2).astype(np.float64)
    else:
        cells = rng.integers(0, 2, size=(-(-h // 4), -(-w // 4))).astype(np.float64)
        pat = np.kron(cells, np.ones((4, 4)))[:h, :w]
    amp = rng.uniform(0.5, 0.8)
    c0 = rng.uniform(0.35, 0.65, size=3)
    tint = rng.uniform(0.7, 1.0, size=3)
    return np.clip(c0[:, None, None] + amp * (pat[None] - 0.5) * tint[:, None, None], 0.0, 1.0)


def synth_image(rng: np.random.Generator, size: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """One procedural HR image and its region labels.

    Flat or gently graded background, a few flat rectangles and one or two
    high-frequency texture patches.  Region boundaries are aligned to ``scale``.
    """
    img = np.empty((3, size, size))
    base = rng.uniform(0.15, 0.85, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    slope = rng.uniform(-0.15, 0.15, size=(3, 2))
    for c in range(3):
        img[c] = base[c] + slope[c, 0] * (yy - 0.5) + slope[c, 1] * (xx - 0.5)
    labels = np.full((size, size), FLAT, dtype=np.int8)
    edge = np.zeros((size, size), dtype=bool)

    def box(lo_frac, hi_frac):
        bh = _aligned(rng, int(size * lo_frac), int(size * hi_frac), scale)
        bw = _aligned(rng, int(size * lo_frac), int(size * hi_frac), scale)
        y0 = _aligned(rng, 0, size - bh, scale)
        x0 = _aligned(rng, 0, size - bw, scale)
        return y0, x0, bh, bw

    def mark_edges(y0, x0, bh, bw, pad=scale):
        inner = np.zeros_like(edge)
        inner[y0:y0 + bh, x0:x0 + bw] = True
        grown = np.zeros_like(edge)
        grown[max(y0 - pad, 0):y0 + bh + pad, max(x0 - pad, 0):x0 + bw + pad] = True
        shrunk = np.zeros_like(edge)
        shrunk[y0 + pad:y0 + bh - pad, x0 + pad:x0 + bw - pad] = True
        edge[grown & ~shrunk] = True
        return inner

    for _ in range(int(rng.integers(0, 3))):
        y0, x0, bh, bw = box(0.25, 0.5)
        img[:, y0:y0 + bh, x0:x0 + bw] = rng.uniform(0.1, 0.9, size=3)[:, None, None]
        mark_edges(y0, x0, bh, bw)
        labels[y0:y0 + bh, x0:x0 + bw] = FLAT
    for _ in range(int(rng.integers(1, 3))):
        y0, x0, bh, bw = box(0.25, 0.5)
        img[:, y0:y0 + bh, x0:x0 + bw] = _texture(rng, bh, bw)
        labels[y0:y0 + bh, x0:x0 + bw] = TEXTURE
        edge[y0:y0 + bh, x0:x0 + bw] = False
    labels[edge & (labels != TEXTURE)] = EDGE
    return np.clip(img, 0.0, 1.0), labels


def synth_dataset(seed: int, count: int, size: int = 32, scale: int = 2) -> list[ImagePair]:
    """``count`` procedural HR/LR pairs; LR by bicubic downscaling.  Fully determined by ``seed``."""
    if size % scale:
        raise ValueError(f"size {size} not divisible by scale {scale}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        hr, labels = synth_image(rng, size, scale)
        lr = np.clip(bicubic_resize(hr, size // scale, size // scale), 0.0, 1.0)
        pairs.append(ImagePair(hr, lr, scale, labels, name=f"synth_{seed}_{i:04d}"))
    return pairs


def lr_regions(labels: np.ndarray, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """LR-grid boolean maps ``(texture, flat)``.

    A LR pixel is texture when its whole HR block is texture.  It is flat when
    its block and all 8 LR neighbours' blocks are flat.
    """
    h, w = labels.shape[0] // scale, labels.shape[1] // scale
    blocks = labels.reshape(h, scale, w, scale)
    texture = (blocks == TEXTURE).all(axis=(1, 3))
    flat_block = (blocks == FLAT).all(axis=(1, 3))
    padded = np.pad(flat_block, 1, constant_values=True)
    flat = np.ones_like(flat_block)
    for dy in range(3):
        for dx in range(3):
            flat &= padded[dy:dy + h, dx:dx + w]
    return texture, flat


def sample_patches(pair: ImagePair, patch: int, count: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aligned random crops: LR ``patch x patch`` and the matching HR ``s*patch`` crop."""
    s = pair.scale
    h, w = pair.lr.shape[1:]
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than LR image {h}x{w}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        oy = int(rng.integers(0, h - patch + 1))
        ox = int(rng.integers(0, w - patch + 1))
        lr = pair.lr[:, oy:oy + patch, ox:ox + patch]
        hr = pair.hr[:, s * oy:s * (oy + patch), s * ox:s * (ox + patch)]
        out.append((lr, hr))
    return out


def load_dataset_dir(root: str | Path, scale: int) -> list[ImagePair]:
    """Pairs from ``<root>/hr/*.png``; HR is cropped to a multiple of ``scale``, LR made by bicubic."""
    files = sorted(Path(root, "hr").glob("*.png"))
    pairs = []
    for f in files:
        hr = load_png(f)
        h = hr.shape[1] - hr.shape[1] % scale
        w = hr.shape[2] - hr.shape[2] % scale
        hr = hr[:, :h, :w]
        lr = np.clip(bicubic_resize(hr, h // scale, w // scale), 0.0, 1.0)
        pairs.append(ImagePair(hr, lr, scale, name=f.stem))
    return pairs
