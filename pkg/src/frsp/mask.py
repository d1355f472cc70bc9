"""Importance map (FMAP) network, mask generation and multi-sparsity adjustment.

The FMAP is a per-pixel importance score in [0, 1].  It is quantized into a
class ``G`` in ``{0, ..., n}`` and each pixel keeps the first ``G * (C // n)``
channels of every masked feature map, so the kept channels always form a
contiguous prefix.  Binarization has no useful derivative; each mask mode
supplies its own surrogate backward through :func:`frsp.tensor.custom_vjp`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MODES = ("hard", "soft", "sigmoid")


@dataclass(frozen=True)
class MaskParams:
    mode: str = "hard"
    n: int = 4
    channels: int = 32
    k1: float = 10.0
    alpha_sig: float = 20.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mask mode must be one of {MODES}, got {self.mode!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.channels < self.n:
            raise ValueError(f"channels ({self.channels}) must be >= n ({self.n})")
        if self.k1 <= 0 or self.alpha_sig <= 0:
            raise ValueError("k1 and alpha_sig must be positive")

    @property
    def cpc(self) -> int:
        return self.channels // self.n


@dataclass
class ChannelMask:
    """Per-pixel prefix mask stored as a class map.

    ``guidance`` holds the class of every pixel (``H x W`` or ``N x H x W``);
    pixel ``(i, j)`` keeps channels ``0 .. guidance[i, j] * cpc - 1``.
    ``tensor`` is the differentiable dense mask when built on the training path.
    """

    guidance: np.ndarray
    n: int
    channels: int
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def cpc(self) -> int:
        return self.channels // self.n

    @property
    def active(self) -> np.ndarray:
        """Number of active channels per pixel."""
        return self.guidance.astype(np.int64) * self.cpc

    def dense(self) -> np.ndarray:
        return dense_from_active(self.active, self.channels)

    def density(self) -> float:
        return float(self.active.sum()) / (self.channels * self.guidance.size)


def dense_from_active(active: np.ndarray, channels: int) -> np.ndarray:
    """Binary ``[N x] C x H x W`` array with ``dense[k] = k < active``."""
    k = np.arange(channels).reshape((channels,) + (1,) * 2)
    if active.ndim == 3:
        return (k[None] < active[:, None]).astype(np.float64)
    return (k < active[None]).astype(np.float64)


# ----------------------------------------------------------------------
# FMAP network


FMAP_LAYERS = 3


def init_fmap_params(rng: np.random.Generator, hidden: int = 16, in_channels: int = 3) -> dict[str, Tensor]:
    from .network import kaiming_conv

    widths = [in_channels, hidden, hidden, 1]
    params = {}
    for i in range(FMAP_LAYERS):
        w, b = kaiming_conv(rng, widths[i], widths[i + 1], 3)
        params[f"fmap.{i}.w"] = w
        params[f"fmap.{i}.b"] = b
    return params


def fmap_forward(image: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Light conv stack ``3 -> h -> h -> 1`` with ReLU between and a sigmoid on top."""
    x = image
    for i in range(FMAP_LAYERS):
        x = T.conv2d(x, params[f"fmap.{i}.w"], params[f"fmap.{i}.b"])
        x = T.relu(x) if i < FMAP_LAYERS - 1 else T.sigmoid(x)
    return x


def fmap_layer_shapes(hidden: int = 16, in_channels: int = 3) -> list[tuple[int, int, int]]:
    widths = [in_channels, hidden, hidden, 1]
    return [(widths[i], widths[i + 1], 3) for i in range(FMAP_LAYERS)]


# ----------------------------------------------------------------------
# guidance and mask modes


def guidance(fmap, n: int) -> np.ndarray:
    """Class map: ``l - 1`` where ``(l-1)/n <= v < l/n``, and ``n`` where ``v == 1``.

    Accepts a tensor or array of shape ``[N x] 1 x H x W`` (or bare ``H x W``)
    and returns the class map without the singleton channel axis.
    """
    v = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap, dtype=np.float64)
    if v.ndim >= 3 and v.shape[-3] == 1:
        v = v[..., 0, :, :]
    thresholds = np.arange(1, n + 1) / n
    # count of thresholds l/n that are <= v
    return np.searchsorted(thresholds, v, side="right").astype(np.int64)


def _split_fmap(fmap: Tensor) -> tuple[Tensor, bool]:
    if fmap.ndim == 3:
        if fmap.shape[0] != 1:
            raise ShapeError(f"FMAP must have one channel, got shape {fmap.shape}")
        return fmap, False
    if fmap.ndim == 4:
        if fmap.shape[1] != 1:
            raise ShapeError(f"FMAP must have one channel, got shape {fmap.shape}")
        return fmap, True
    raise ShapeError(f"FMAP must be [N x] 1 x H x W, got shape {fmap.shape}")


def hard_band_grad(grad: np.ndarray, g: np.ndarray, n: int, cpc: int) -> np.ndarray:
    """Surrogate FMAP gradient of the hard mask.

    With 1-based channel index k, ``dMask_k/dFMAP = n`` for
    ``(G-1)*cpc <= k <= G*cpc`` and 0 otherwise; the result is summed over k.
    ``grad`` is ``[N x] C x H x W``, ``g`` the class map without channel axis.
    """
    caxis = grad.ndim - 3
    channels = grad.shape[caxis]
    cs = np.concatenate([np.zeros_like(np.take(grad, [0], axis=caxis)), np.cumsum(grad, axis=caxis)], axis=caxis)
    # 0-based inclusive band [lo, hi]
    lo = np.clip((g - 1) * cpc - 1, 0, channels)
    hi = np.clip(g * cpc - 1, -1, channels - 1)
    lo_e = np.expand_dims(lo, caxis)
    hi_e = np.expand_dims(hi, caxis)
    upper = np.take_along_axis(cs, hi_e + 1, axis=caxis)
    lower = np.take_along_axis(cs, lo_e, axis=caxis)
    band = np.where(hi_e >= lo_e, upper - lower, 0.0)
    return n * band


def _hard_mask_from(value: Tensor, n: int, channels: int) -> ChannelMask:
    """Binary prefix mask of ``value`` (FMAP or Prob) with the band surrogate backward."""
    cpc = channels // n
    g = guidance(value, n)

    def forward(v):
        return dense_from_active(g * cpc, channels)

    def backward(grad, v):
        return hard_band_grad(grad, g, n, cpc)

    return ChannelMask(g, n, channels, T.custom_vjp(forward, backward, value))


def mask_hard(fmap: Tensor, params: MaskParams) -> ChannelMask:
    _split_fmap(fmap)
    return _hard_mask_from(fmap, params.n, params.channels)


def soft_prob(fmap: Tensor, n: int, k1: float) -> Tensor:
    """``Prob = FMAP / sum_{i=0..n} exp(-k1 * (FMAP - i/n))``, elementwise."""
    total = None
    for i in range(n + 1):
        p = T.exp((fmap - i / n) * (-k1))
        total = p if total is None else total + p
    return fmap / total


def mask_soft(fmap: Tensor, params: MaskParams) -> ChannelMask:
    _split_fmap(fmap)
    return _hard_mask_from(soft_prob(fmap, params.n, params.k1), params.n, params.channels)


def sigmoid_thresholds(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def mask_sigmoid(fmap: Tensor, params: MaskParams) -> ChannelMask:
    """Segment ``l`` is on where ``Sign(2*Sigmoid(a*(FMAP - (l+0.5)/n)) - 1) > 0``.

    Sign's -1 is clamped to 0.  Backward passes straight through Sign and
    uses the true derivative of the smooth inner term.
    """
    fm, batched = _split_fmap(fmap)
    n, channels, a = params.n, params.channels, params.alpha_sig
    cpc = channels // n
    thr = sigmoid_thresholds(n)
    v = fm.data[:, 0] if batched else fm.data[0]
    # (..., n, H, W) smooth responses per segment
    s = T.sigmoid_np(a * (v[..., None, :, :] - thr.reshape(n, 1, 1)))
    on = np.sign(2.0 * s - 1.0) > 0
    g = on.sum(axis=-3).astype(np.int64)
    deriv = 2.0 * a * s * (1.0 - s)

    def forward(_):
        return dense_from_active(g * cpc, channels)

    def backward(grad, _):
        caxis = grad.ndim - 3
        used = grad.take(np.arange(n * cpc), axis=caxis)
        shape = used.shape[:caxis] + (n, cpc) + used.shape[caxis + 1:]
        per_seg = used.reshape(shape).sum(axis=caxis + 1)
        out = (per_seg * deriv).sum(axis=caxis)
        return np.expand_dims(out, caxis)

    return ChannelMask(g, n, channels, T.custom_vjp(forward, backward, fm))


def make_mask(fmap: Tensor, params: MaskParams) -> ChannelMask:
    if params.mode == "hard":
        return mask_hard(fmap, params)
    if params.mode == "soft":
        return mask_soft(fmap, params)
    return mask_sigmoid(fmap, params)


def apply_mask(features: Tensor, mask: ChannelMask) -> Tensor:
    """Hadamard product of features with the dense mask."""
    m = mask.tensor if mask.tensor is not None else Tensor(mask.dense())
    if features.shape != m.shape:
        raise ShapeError(f"apply_mask: features {features.shape} vs mask {m.shape}")
    return features * m


def downsize_fmap(fmap: Tensor, factor: int) -> Tensor:
    return T.avg_pool2d(fmap, factor)


# ----------------------------------------------------------------------
# multi-sparsity adjustment


def adjuster_classes(g: np.ndarray, n: int) -> np.ndarray:
    """Fold class ``n`` (FMAP exactly 1) into ``n - 1`` so classes index a length-n vector."""
    return np.minimum(g, n - 1)


def pdf_of(g: np.ndarray, n: int) -> np.ndarray:
    """Fraction of pixels in each adjuster class; batched input gives one row per image."""
    cls = adjuster_classes(np.asarray(g), n)
    if cls.ndim == 3:
        return np.stack([pdf_of(c, n) for c in cls])
    counts = np.bincount(cls.ravel(), minlength=n).astype(np.float64)
    return counts / cls.size


@dataclass(frozen=True)
class MultiSparsity:
    """Range of sparsity levels Q and their affine maps to the targets gamma and beta."""

    q_min: int = 0
    q_max: int = 3
    gamma: tuple[float, float] = (0.15, 0.7)
    beta: tuple[float, float] | None = None

    def __post_init__(self):
        if self.q_max < self.q_min:
            raise ValueError(f"empty Q range [{self.q_min}, {self.q_max}]")

    def check(self, q: int) -> None:
        if not (self.q_min <= q <= self.q_max):
            raise ValueError(f"Q={q} outside trained range [{self.q_min}, {self.q_max}]")

    def _interp(self, ends: tuple[float, float], q: int) -> float:
        self.check(q)
        if self.q_max == self.q_min:
            return float(ends[0])
        t = (q - self.q_min) / (self.q_max - self.q_min)
        return float(ends[0] + t * (ends[1] - ends[0]))

    def gamma_of(self, q: int) -> float:
        return self._interp(self.gamma, q)

    def beta_of(self, q: int, n: int) -> float:
        # default: pdf-weighted mean of V equal to 2*gamma (FMAP of density ~0.5 rescaled to gamma)
        ends = self.beta if self.beta is not None else (2 * self.gamma[0] / n, 2 * self.gamma[1] / n)
        return self._interp(ends, q)

    @property
    def levels(self) -> list[int]:
        return list(range(self.q_min, self.q_max + 1))


def init_adjuster_params(rng: np.random.Generator, n: int, hidden: int = 16) -> dict[str, Tensor]:
    from .network import kaiming_linear

    w0, b0 = kaiming_linear(rng, n + 1, hidden)
    w1, b1 = kaiming_linear(rng, hidden, n)
    return {"adj.0.w": w0, "adj.0.b": b0, "adj.1.w": w1, "adj.1.b": b1}


def adjuster_forward(pdf: np.ndarray, beta: float, params: dict[str, Tensor]) -> Tensor:
    """``V = 2 * sigmoid(FC(relu(FC([pdf, beta]))))`` with one row per image."""
    pdf = np.atleast_2d(pdf)
    z = Tensor(np.concatenate([pdf, np.full((pdf.shape[0], 1), beta)], axis=1))
    ones = Tensor(np.ones((pdf.shape[0], 1)))
    h = T.relu(z @ params["adj.0.w"] + ones @ params["adj.0.b"])
    return T.sigmoid(h @ params["adj.1.w"] + ones @ params["adj.1.b"]) * 2.0


def rescale_fmap(fmap: Tensor, v: Tensor, n: int) -> Tensor:
    """``clamp(FMAP * V[class(FMAP)], 0, 1)`` for batched ``N x 1 x H x W`` maps."""
    cls = adjuster_classes(guidance(fmap, n), n)
    if fmap.ndim == 3:
        scale = T.take_rows(v, cls[None]).reshape(fmap.shape)
    else:
        scale = T.take_rows(v, cls).reshape(fmap.shape)
    return T.clip(fmap * scale, 0.0, 1.0)


def adjust_fmap(
    fmap: Tensor,
    pdf: np.ndarray,
    q: int,
    params: dict[str, Tensor],
    multi: MultiSparsity,
    n: int,
) -> tuple[Tensor, Tensor]:
    """Rescale FMAP for sparsity level ``q``; returns ``(adjusted FMAP, V)``."""
    multi.check(q)
    v = adjuster_forward(pdf, multi.beta_of(q, n), params)
    return rescale_fmap(fmap, v, n), v


# ----------------------------------------------------------------------
# export


def save_fmap_png(fmap, path: str | Path) -> None:
    """Write an ``H x W`` importance map as 8-bit grayscale (value * 255, rounded)."""
    from PIL import Image

    v = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
    v = np.squeeze(v)
    img = np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def save_guidance_png(g: np.ndarray, n: int, path: str | Path) -> None:
    """Write a class map as a palettized PNG with a gray ramp over ``0..n``."""
    from PIL import Image

    g = np.squeeze(np.asarray(g)).astype(np.uint8)
    img = Image.fromarray(g, mode="P")
    ramp = [round(255 * i / max(n, 1)) for i in range(n + 1)]
    palette = []
    for r in ramp:
        palette += [r, r, r]
    img.putpalette(palette + [0] * (768 - len(palette)))
    img.save(path)
