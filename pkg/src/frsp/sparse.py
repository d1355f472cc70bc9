"""Inference executor that skips masked channels, and MAC accounting.

Every masked feature map has a per-pixel active-channel count ``a[i, j]``
and is zero beyond it.  A body convolution then only has to produce output
channels ``0 .. out_active[i, j] - 1``, and for each kernel tap only has to
reduce over the neighbour's active input channels.  Pixels are grouped by
``(out_active, neighbour active)`` per tap so each group is one small matmul.

MAC convention: zero-padding taps count as fully active (as a dense
convolution counts them), so an all-ones mask costs exactly the dense count.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .mask import ChannelMask
from .network import ModelState, compute_mask, conv_specs
from .tensor import Tensor


class PrefixViolation(ValueError):
    """Feature data is non-zero beyond its declared active prefix."""


@dataclass
class PrefixFeature:
    data: np.ndarray  # C x H x W
    active: np.ndarray  # H x W, int

    def validate(self) -> None:
        c = self.data.shape[0]
        beyond = np.arange(c)[:, None, None] >= self.active[None]
        if np.any(self.data[beyond] != 0):
            raise PrefixViolation("feature has non-zero values beyond its active channel count")


@dataclass
class MacReport:
    dense_macs: int
    actual_macs: int
    density: float
    overhead_macs: int = 0
    per_layer: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.dense_macs = int(self.dense_macs)
        self.actual_macs = int(self.actual_macs)
        self.overhead_macs = int(self.overhead_macs)
        self.density = float(self.density)
        for l in self.per_layer:
            l["dense"], l["actual"] = int(l["dense"]), int(l["actual"])

    @property
    def reduction(self) -> float:
        return 1.0 - self.actual_macs / self.dense_macs if self.dense_macs else 0.0

    @property
    def actual_macs_no_overhead(self) -> int:
        return self.actual_macs - self.overhead_macs

    @property
    def dense_macs_no_overhead(self) -> int:
        return self.dense_macs - self.overhead_macs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reduction"] = self.reduction
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    CSV_FIELDS = ("dense_macs", "actual_macs", "reduction", "density", "overhead_macs")

    def to_csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.CSV_FIELDS)
        d = self.to_dict()
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in self.CSV_FIELDS])
        return buf.getvalue()

    def __add__(self, other: "MacReport") -> "MacReport":
        layers = []
        for a, b in zip(self.per_layer, other.per_layer):
            layers.append({"name": a["name"], "dense": a["dense"] + b["dense"], "actual": a["actual"] + b["actual"]})
        total = self.dense_macs + other.dense_macs
        # density weighted by body size, which is proportional to dense MACs for equal configs
        dens = (self.density * self.dense_macs + other.density * other.dense_macs) / total if total else 0.0
        return MacReport(total, self.actual_macs + other.actual_macs, dens,
                         self.overhead_macs + other.overhead_macs, layers)


def dense_conv_macs(h: int, w: int, cin: int, cout: int, k: int) -> int:
    return h * w * cin * cout * k * k


def _pad_active(active: np.ndarray, cin: int, p: int) -> np.ndarray:
    return np.pad(active, p, constant_values=cin)


def sparse_layer_macs(in_active: np.ndarray, out_active: np.ndarray, cin: int, k: int) -> int:
    """Exact tap-by-tap MAC count ``sum_ij out[i,j] * sum_taps in[neighbour]``."""
    h, w = out_active.shape
    p = k // 2
    pa = _pad_active(in_active.astype(np.int64), cin, p)
    tap_sum = np.zeros((h, w), dtype=np.int64)
    for di in range(k):
        for dj in range(k):
            tap_sum += pa[di:di + h, dj:dj + w]
    return int(np.sum(out_active.astype(np.int64) * tap_sum))


def sparse_conv2d(
    x: PrefixFeature,
    weight: np.ndarray,
    bias: np.ndarray | None,
    out_active: np.ndarray,
    check: bool = True,
) -> tuple[PrefixFeature, int]:
    """Same-padded conv computing only active outputs from active inputs.

    Returns the output feature and the number of multiply-accumulates done.
    Output channels past ``out_active`` are left at zero (bias included).
    """
    if check:
        x.validate()
    data = x.data
    cin, h, w = data.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise T.ShapeError(f"sparse_conv2d: weight expects {wcin} channels, input has {cin}")
    p = k // 2
    dtype = data.dtype
    weight = weight.astype(dtype, copy=False)
    xp = np.pad(data, ((0, 0), (p, p), (p, p))).reshape(cin, -1) if p else data.reshape(cin, -1)
    pa = _pad_active(x.active.astype(np.int64), cin, p).ravel()
    wp = w + 2 * p
    out = np.zeros((cout, h * w), dtype=dtype)
    oa = out_active.astype(np.int64).ravel()
    macs = 0

    # padded-grid index of every output pixel's top-left tap
    base = (np.arange(h)[:, None] * wp + np.arange(w)[None, :]).ravel()
    live = np.flatnonzero(oa > 0)
    if live.size:
        out_levels, out_inv = np.unique(oa[live], return_inverse=True)
        if bias is not None:
            b = bias.astype(dtype, copy=False)
            for li, a in enumerate(out_levels):
                pix = live[out_inv == li]
                out[:a, pix] += b[:a, None]
        for di in range(k):
            for dj in range(k):
                src = base[live] + di * wp + dj
                nb = pa[src]
                keep = nb > 0
                if not keep.any():
                    continue
                in_levels, in_inv = np.unique(nb[keep], return_inverse=True)
                n_in = len(in_levels)
                key = out_inv[keep] * n_in + in_inv
                order = np.argsort(key, kind="stable")
                key_sorted = key[order]
                bounds = np.flatnonzero(np.diff(key_sorted)) + 1
                pix_all = live[keep][order]
                src_all = src[keep][order]
                starts = np.concatenate([[0], bounds])
                ends = np.concatenate([bounds, [len(order)]])
                wt = weight[:, :, di, dj]
                for s, e in zip(starts, ends):
                    kk = key_sorted[s]
                    a = int(out_levels[kk // n_in])
                    bl = int(in_levels[kk % n_in])
                    pix = pix_all[s:e]
                    out[:a, pix] += wt[:a, :bl] @ xp[:bl, src_all[s:e]]
                    macs += a * bl * (e - s)
    return PrefixFeature(out.reshape(cout, h, w), out_active.astype(np.int64)), macs


def _relu_prefix(f: PrefixFeature) -> PrefixFeature:
    return PrefixFeature(np.maximum(f.data, 0), f.active)


def _params_np(state: ModelState, dtype) -> dict[str, np.ndarray]:
    return {k: v.data.astype(dtype) for k, v in state.params.items()}


def mac_count(config, mask: ChannelMask | None, hw: tuple[int, int] | None = None) -> MacReport:
    """MACs of one forward pass with ``mask`` (or densely when ``mask`` is None).

    Batched masks (``N x H x W`` guidance) sum over the images.  Head, tail
    and FMAP network are counted dense; the FMAP network is reported as
    overhead and included in both totals.
    """
    if mask is not None and mask.guidance.ndim == 3:
        reports = [mac_count(config, ChannelMask(g, mask.n, mask.channels)) for g in mask.guidance]
        out = reports[0]
        for r in reports[1:]:
            out = out + r
        out.density = mask.density()
        return out
    if mask is None:
        if hw is None:
            raise ValueError("need image size when no mask is given")
        h, w = hw
    else:
        h, w = mask.guidance.shape
    c = config.channels
    specs = conv_specs(config, masked=config.mask is not None)
    full = np.full((h, w), c, dtype=np.int64)
    out_act = full if mask is None else mask.active
    layers, dense_total, actual_total, overhead = [], 0, 0, 0
    for sp in specs:
        d = dense_conv_macs(h, w, sp.cin, sp.cout, sp.k)
        if sp.role == "body" and mask is not None:
            ia = out_act if sp.masked_in else full
            a = sparse_layer_macs(ia, out_act if sp.masked_out else full, sp.cin, sp.k)
        else:
            a = d
        if sp.role == "fmap":
            overhead += d
        layers.append({"name": sp.name, "dense": d, "actual": a})
        dense_total += d
        actual_total += a
    density = 1.0 if mask is None else mask.density()
    return MacReport(dense_total, actual_total, density, overhead, layers)


def run_sparse(lr, state: ModelState, q: int | None = None, dtype=np.float32, mask: ChannelMask | None = None):
    """Masked forward with skipped channels in the body.

    ``lr`` is ``3 x h x w`` (or a batch, processed image by image).  The mask
    is computed exactly as in :func:`frsp.network.forward_masked` unless given.
    Returns ``(sr, MacReport)`` with the executor's own multiply tally.
    """
    lr_arr = lr.data if isinstance(lr, Tensor) else np.asarray(lr, dtype=np.float64)
    if lr_arr.ndim == 4:
        outs, rep = [], None
        for i in range(lr_arr.shape[0]):
            m = None if mask is None else ChannelMask(mask.guidance[i], mask.n, mask.channels)
            sr, r = run_sparse(lr_arr[i], state, q, dtype, m)
            outs.append(sr)
            rep = r if rep is None else rep + r
        return np.stack(outs), rep

    cfg = state.config
    if mask is None:
        mask = compute_mask(Tensor(lr_arr), state, q).mask
    p = _params_np(state, dtype)
    c = cfg.channels
    h, w = lr_arr.shape[1:]
    full = np.full((h, w), c, dtype=np.int64)
    act = mask.active
    layers, actual_total, dense_total = [], 0, 0

    def dense_layer(x, name):
        nonlocal actual_total, dense_total
        wgt = p[f"{name}.w"]
        y = T.conv2d_np(x[None], wgt, p[f"{name}.b"])[0]
        d = dense_conv_macs(h, w, wgt.shape[1], wgt.shape[0], wgt.shape[2])
        layers.append({"name": name, "dense": d, "actual": d})
        actual_total += d
        dense_total += d
        return y

    def sparse_layer(f, name, out_active):
        nonlocal actual_total, dense_total
        wgt = p[f"{name}.w"]
        y, macs = sparse_conv2d(f, wgt, p[f"{name}.b"], out_active, check=False)
        d = dense_conv_macs(h, w, wgt.shape[1], wgt.shape[0], wgt.shape[2])
        layers.append({"name": name, "dense": d, "actual": macs})
        actual_total += macs
        dense_total += d
        return y

    x = dense_layer(lr_arr.astype(dtype), "head")
    head = x
    if cfg.residual:
        for i in range(0, cfg.body_layers, 2):
            hf = _relu_prefix(sparse_layer(PrefixFeature(x, full), f"body.{i}", act))
            hf = sparse_layer(hf, f"body.{i + 1}", act)
            x = x + hf.data
    else:
        f = PrefixFeature(x, full)
        for i in range(cfg.body_layers):
            f = _relu_prefix(sparse_layer(f, f"body.{i}", act))
        x = f.data
    if cfg.global_skip:
        x = x + head
    y = dense_layer(x, "tail")
    sr = T.pixel_shuffle_np(y, cfg.scale)

    overhead = 0
    for i, (cin, cout, k) in enumerate(_fmap_shapes(cfg)):
        d = dense_conv_macs(h, w, cin, cout, k)
        layers.append({"name": f"fmap.{i}", "dense": d, "actual": d})
        overhead += d
    rep = MacReport(dense_total + overhead, actual_total + overhead, mask.density(), overhead, layers)
    return sr, rep


def _fmap_shapes(cfg) -> list[tuple[int, int, int]]:
    from .mask import fmap_layer_shapes

    return fmap_layer_shapes(cfg.fmap_hidden)


def count_multiplies(x_active: np.ndarray, out_active: np.ndarray, cin: int, k: int) -> int:
    """Instrumented reference: walk every multiply of a prefix-sparse conv one by one."""
    h, w = out_active.shape
    p = k // 2
    n = 0
    for i in range(h):
        for j in range(w):
            for oc in range(int(out_active[i, j])):
                for di in range(k):
                    for dj in range(k):
                        y, xx = i + di - p, j + dj - p
                        if 0 <= y < h and 0 <= xx < w:
                            na = int(x_active[y, xx])
                        else:
                            na = cin
                        for _ic in range(na):
                            n += 1
    return n


def run_dense_np(lr, state: ModelState, dtype=np.float32) -> np.ndarray:
    """Unmasked forward in plain numpy (no graph); the timing baseline for the executor."""
    lr_arr = lr.data if isinstance(lr, Tensor) else np.asarray(lr)
    cfg = state.config
    p = _params_np(state, dtype)

    def conv(x, name):
        return T.conv2d_np(x[None], p[f"{name}.w"], p[f"{name}.b"])[0]

    x = head = conv(lr_arr.astype(dtype), "head")
    if cfg.residual:
        for i in range(0, cfg.body_layers, 2):
            x = x + conv(np.maximum(conv(x, f"body.{i}"), 0), f"body.{i + 1}")
    else:
        for i in range(cfg.body_layers):
            x = np.maximum(conv(x, f"body.{i}"), 0)
    if cfg.global_skip:
        x = x + head
    return T.pixel_shuffle_np(conv(x, "tail"), cfg.scale)
