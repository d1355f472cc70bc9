"""Res-SR super-resolution network and its masked (Mask-SR) variant.

Layout: head conv ``3 -> C``, a body of conv layers (residual conv-ReLU-conv
pairs by default), tail conv ``C -> 3 s^2`` and a pixel shuffle.  In the
masked variant one FMAP is computed per image and its channel mask multiplies
every body conv output; head and tail stay dense.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .mask import (
    ChannelMask,
    MaskParams,
    MultiSparsity,
    adjust_fmap,
    apply_mask,
    fmap_forward,
    guidance,
    init_adjuster_params,
    init_fmap_params,
    make_mask,
    pdf_of,
)
from .tensor import Tensor


def kaiming_conv(rng: np.random.Generator, cin: int, cout: int, k: int) -> tuple[Tensor, Tensor]:
    bound = math.sqrt(6.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    return T.parameter(w), T.parameter(np.zeros(cout))


def kaiming_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return T.parameter(w), T.parameter(np.zeros((1, fan_out)))


@dataclass
class NetworkConfig:
    body_layers: int = 8
    channels: int = 32
    scale: int = 2
    mask: MaskParams | None = field(default_factory=MaskParams)
    residual: bool = True
    global_skip: bool = False
    fmap_hidden: int = 16
    adjuster_hidden: int = 16
    multi: MultiSparsity | None = None

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskParams(**self.mask)
        if isinstance(self.multi, dict):
            m = dict(self.multi)
            m["gamma"] = tuple(m.get("gamma", (0.15, 0.7)))
            if m.get("beta") is not None:
                m["beta"] = tuple(m["beta"])
            self.multi = MultiSparsity(**m)
        self.validate()

    def validate(self) -> None:
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.body_layers < 1:
            raise ValueError("body_layers must be >= 1")
        if self.residual and self.body_layers % 2:
            raise ValueError(f"residual body needs an even number of layers, got {self.body_layers}")
        if self.mask is not None:
            if self.mask.channels != self.channels:
                raise ValueError(f"mask channels {self.mask.channels} != network channels {self.channels}")
            if self.channels % self.mask.n:
                raise ValueError(f"channels {self.channels} not divisible by n={self.mask.n}")
        if self.multi is not None and self.mask is None:
            raise ValueError("multi-sparsity requires a mask")

    @classmethod
    def paper_scale(cls, scale: int = 2, mode: str = "hard") -> "NetworkConfig":
        # 24 conv layers in total: head + 22 body + tail
        return cls(body_layers=22, channels=128, scale=scale, mask=MaskParams(mode=mode, n=16, channels=128))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict[str, Tensor]
    step: int = 0

    def functional_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith(("fmap.", "adj."))]

    def mask_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("fmap.", "adj."))]

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: T.parameter(v.data.copy()) for k, v in self.params.items()},
            self.step,
        )


def init_model(config: NetworkConfig, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    c, s = config.channels, config.scale
    params: dict[str, Tensor] = {}
    params["head.w"], params["head.b"] = kaiming_conv(rng, 3, c, 3)
    for i in range(config.body_layers):
        params[f"body.{i}.w"], params[f"body.{i}.b"] = kaiming_conv(rng, c, c, 3)
    params["tail.w"], params["tail.b"] = kaiming_conv(rng, c, 3 * s * s, 3)
    if config.mask is not None:
        params.update(init_fmap_params(rng, config.fmap_hidden))
        if config.multi is not None:
            params.update(init_adjuster_params(rng, config.mask.n, config.adjuster_hidden))
    return ModelState(config, params)


def _conv(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])


def run_body(x: Tensor, state: ModelState, mask: ChannelMask | None = None) -> Tensor:
    """Body layers on the head output; ``mask`` multiplies every body conv output."""
    cfg, p = state.config, state.params

    def m(h):
        return h if mask is None else apply_mask(h, mask)

    if cfg.residual:
        for i in range(0, cfg.body_layers, 2):
            h = m(T.relu(_conv(x, p, f"body.{i}")))
            h = m(_conv(h, p, f"body.{i + 1}"))
            x = x + h
    else:
        for i in range(cfg.body_layers):
            x = m(T.relu(_conv(x, p, f"body.{i}")))
    return x


def forward_with_mask(lr: Tensor, state: ModelState, mask: ChannelMask | None, clamp: bool = False) -> Tensor:
    cfg, p = state.config, state.params
    head = _conv(lr, p, "head")
    x = run_body(head, state, mask)
    if cfg.global_skip:
        x = x + head
    out = T.pixel_shuffle(_conv(x, p, "tail"), cfg.scale)
    if clamp:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def forward_dense(lr: Tensor, state: ModelState, clamp: bool = False) -> Tensor:
    """Plain Res-SR forward; any mask network is ignored."""
    return forward_with_mask(lr, state, None, clamp)


@dataclass
class MaskOutput:
    mask: ChannelMask
    fmap: Tensor
    raw_fmap: Tensor
    v: Tensor | None = None
    pdf: np.ndarray | None = None


def compute_mask(lr: Tensor, state: ModelState, q: int | None = None) -> MaskOutput:
    """FMAP (optionally rescaled for sparsity level ``q``) and the resulting channel mask."""
    cfg = state.config
    if cfg.mask is None:
        raise ValueError("network has no mask configuration")
    raw = fmap_forward(lr, state.params)
    fmap, v, pdf = raw, None, None
    if q is not None:
        if cfg.multi is None:
            raise ValueError("Q given but the model was not trained for multi-sparsity")
        pdf = pdf_of(guidance(raw, cfg.mask.n), cfg.mask.n)
        fmap, v = adjust_fmap(raw, pdf, q, state.params, cfg.multi, cfg.mask.n)
    return MaskOutput(make_mask(fmap, cfg.mask), fmap, raw, v, pdf)


def forward_masked(lr: Tensor, state: ModelState, q: int | None = None, clamp: bool = False) -> tuple[Tensor, ChannelMask]:
    """Mask-SR forward: one FMAP per image, one shared mask for every body layer."""
    mo = compute_mask(lr, state, q)
    return forward_with_mask(lr, state, mo.mask, clamp), mo.mask


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int
    role: str  # head | body | tail | fmap
    masked_in: bool = False
    masked_out: bool = False


def conv_specs(config: NetworkConfig, masked: bool = True) -> list[ConvSpec]:
    """Every conv layer in execution order with which side of it the mask covers."""
    c = config.channels
    use = masked and config.mask is not None
    specs = [ConvSpec("head", 3, c, 3, "head")]
    for i in range(config.body_layers):
        if config.residual:
            masked_in = use and i % 2 == 1
        else:
            masked_in = use and i > 0
        specs.append(ConvSpec(f"body.{i}", c, c, 3, "body", masked_in, use))
    specs.append(ConvSpec("tail", c, 3 * config.scale**2, 3, "tail"))
    if use:
        widths = [3, config.fmap_hidden, config.fmap_hidden, 1]
        for i in range(3):
            specs.append(ConvSpec(f"fmap.{i}", widths[i], widths[i + 1], 3, "fmap"))
    return specs
