"""Training loops for fixed-target and multi-sparsity models, plus evaluation.

Both loops optimize the functional network and the mask network jointly.  A
short warm-up trains only the functional network under the initial mask so
the mask network starts from a functional net that already uses its
channels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .data import ImagePair, synth_dataset
from .losses import LossConfig, bitrate_loss, functional_loss, multi_sparsity_loss, total_loss
from .mask import MultiSparsity
from .metrics import psnr, ssim
from .network import ModelState, NetworkConfig, compute_mask, forward_dense, forward_with_mask, init_model
from .optim import AdamState, NonFiniteGradient, adam_step, clip_grad_norm
from .sparse import mac_count, run_sparse
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class DataConfig:
    seed: int = 1
    count: int = 1024
    size: int = 32
    data_dir: str | None = None


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    patch: int = 16
    lr: float = 1e-3
    mask_lr: float = 1e-4
    adjuster_lr: float = 1e-3
    seed: int = 0
    warmup_steps: int = 400
    clip_norm: float = 1.0
    lr_decay: bool = False
    fmap_init_bias: float = 2.0
    res_init_scale: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    q_range: tuple[int, int] | None = None
    gamma_map: tuple[float, float] = (0.15, 0.7)
    beta_map: tuple[float, float] | None = None
    log_every: int = 50

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if self.q_range is not None:
            self.q_range = tuple(self.q_range)
        self.gamma_map = tuple(self.gamma_map)
        if self.beta_map is not None:
            self.beta_map = tuple(self.beta_map)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.lr, self.mask_lr, self.adjuster_lr) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.batch_size < 1 or self.patch < 1:
            raise ValueError("batch_size and patch must be positive")

    @property
    def multi(self) -> MultiSparsity | None:
        if self.q_range is None:
            return None
        return MultiSparsity(self.q_range[0], self.q_range[1], self.gamma_map, self.beta_map)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict]
    optimizers: dict[str, AdamState]
    rng_state: dict


def _lr_at(cfg: TrainConfig, step: int, base: float) -> float:
    if cfg.lr_decay and step >= int(0.75 * cfg.steps):
        return base * 0.1
    return base


def _load_data(cfg: TrainConfig, pairs: list[ImagePair] | None = None) -> tuple[np.ndarray, np.ndarray]:
    from .data import load_dataset_dir, sample_patches

    s = cfg.network.scale
    if pairs is None and cfg.data.data_dir:
        pairs = load_dataset_dir(cfg.data.data_dir, s)
    elif pairs is None:
        pairs = synth_dataset(cfg.data.seed, cfg.data.count, cfg.data.size, s)
    if not pairs:
        raise ValueError("training set is empty")
    # fixed patch pool: same-size crops so a batch is one array
    rng = np.random.default_rng(cfg.data.seed)
    lrs, hrs = [], []
    for p in pairs:
        n = 1 if min(p.lr.shape[1:]) == cfg.patch else 4
        for lr, hr in sample_patches(p, cfg.patch, n, int(rng.integers(2**31))):
            lrs.append(lr)
            hrs.append(hr)
    return np.stack(lrs), np.stack(hrs)


def prepare_model(cfg: TrainConfig, multi: bool = False) -> ModelState:
    net = cfg.network
    if multi:
        net = NetworkConfig.from_dict({**net.to_dict(), "multi": asdict(cfg.multi)})
    state = init_model(net, cfg.seed)
    if net.mask is not None:
        state.params["fmap.2.b"].data[:] = cfg.fmap_init_bias
    # residual branches start small so the body refines rather than swamps the head path
    if net.residual:
        for i in range(1, net.body_layers, 2):
            state.params[f"body.{i}.w"].data *= cfg.res_init_scale
    return state


def _groups(state: ModelState) -> dict[str, dict[str, Tensor]]:
    groups = {
        "functional": {k: state.params[k] for k in state.functional_names()},
        "mask": {k: state.params[k] for k in state.mask_names() if k.startswith("fmap.")},
    }
    adj = {k: state.params[k] for k in state.mask_names() if k.startswith("adj.")}
    if adj:
        groups["adjuster"] = adj
    return groups


def train(
    cfg: TrainConfig,
    multi: bool = False,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    init_state: ModelState | None = None,
    pairs: list[ImagePair] | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Shared loop behind :func:`train_fixed` and :func:`train_multi`.

    ``stop_at`` ends the run early (for checkpoint/resume); ``resume`` picks
    up parameters, optimizer moments, RNG state and step from a checkpoint.
    ``init_state`` warm-starts from trained weights (matching names are
    copied and the step counter restarts).  ``pairs`` replaces the dataset
    named in the config.
    """
    if multi and cfg.q_range is None:
        raise ValueError("multi-sparsity training needs q_range")
    if multi and cfg.loss.alpha2 <= 0:
        raise ValueError("multi-sparsity training needs alpha2 > 0")
    if not multi and cfg.loss.alpha2 != 0:
        raise ValueError("fixed-sparsity training needs alpha2 == 0")
    lrs, hrs = _load_data(cfg, pairs)
    if resume is not None:
        state = resume.state
        optim = resume.optimizers
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    else:
        state = prepare_model(cfg, multi)
        if init_state is not None:
            for k, p in init_state.params.items():
                if k in state.params and state.params[k].data.shape == p.data.shape:
                    state.params[k].data[...] = p.data
        groups = _groups(state)
        optim = {g: AdamState.zeros_like(p) for g, p in groups.items()}
        rng = np.random.default_rng(cfg.seed)
    groups = _groups(state)
    masked = state.config.mask is not None
    ms = state.config.multi
    warmup = cfg.warmup_steps
    log: list[dict] = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)

    while state.step < end:
        step = state.step
        idx = rng.choice(len(lrs), size=min(cfg.batch_size, len(lrs)), replace=False)
        lr, hr = Tensor(lrs[idx]), Tensor(hrs[idx])
        q = int(rng.integers(ms.q_min, ms.q_max + 1)) if multi else None
        rec: dict = {"step": step + 1}
        if masked:
            mo = compute_mask(lr, state, q)
            sr = forward_with_mask(lr, state, mo.mask)
            lf = functional_loss(sr, hr)
            lb = bitrate_loss(mo.mask)
            if multi:
                lc = LossConfig(cfg.loss.alpha1, ms.gamma_of(q), cfg.loss.alpha2, ms.beta_of(q, state.config.mask.n))
                loss = multi_sparsity_loss(lf, lb, mo.pdf, mo.v, lc)
                rec["q"] = q
            else:
                loss = total_loss(lf, lb, cfg.loss)
            rec["density"] = float(lb.item())
        else:
            sr = forward_dense(lr, state)
            lf = functional_loss(sr, hr)
            loss = lf
        rec["l_f"] = float(lf.item())
        rec["loss"] = float(loss.item())
        if not math.isfinite(rec["loss"]):
            raise TrainingDiverged(f"non-finite loss at step {step + 1}: {rec}")

        for p in state.params.values():
            p.grad = None
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in state.params.items()}
        rec["grad_norm"] = clip_grad_norm(grads, cfg.clip_norm)
        try:
            for g, params in groups.items():
                if g != "functional" and step < warmup:
                    continue
                base = {"functional": cfg.lr, "mask": cfg.mask_lr, "adjuster": cfg.adjuster_lr}[g]
                adam_step(params, {k: grads[k] for k in params}, optim[g], _lr_at(cfg, step, base))
        except NonFiniteGradient as e:
            raise TrainingDiverged(f"step {step + 1}: {e}") from e
        state.step += 1
        log.append(rec)
        if on_step is not None:
            on_step(state.step, rec)
        if cfg.log_every and state.step % cfg.log_every == 0:
            logger.info("step %d %s", state.step, {k: round(v, 5) for k, v in rec.items() if isinstance(v, float)})
    return TrainResult(state, log, optim, rng.bit_generator.state)


def train_fixed(cfg: TrainConfig, **kw) -> TrainResult:
    """Fixed target: ``L_f + alpha1 * |density - gamma|``."""
    return train(cfg, multi=False, **kw)


def train_multi(cfg: TrainConfig, **kw) -> TrainResult:
    """One model for every Q in ``q_range``: a random Q per minibatch, targets mapped from Q."""
    return train(cfg, multi=True, **kw)


def to_checkpoint(result: TrainResult, cfg: TrainConfig | None = None) -> Checkpoint:
    meta = {"train_config": cfg.to_dict()} if cfg is not None else {}
    return Checkpoint(result.state, result.optimizers, result.rng_state, meta)


# ----------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    image: str
    psnr_db: float
    ssim: float
    density: float
    dense_macs: int
    actual_macs: int
    reduction: float

    def __post_init__(self):
        for f in ("psnr_db", "ssim", "density", "reduction"):
            setattr(self, f, float(getattr(self, f)))
        self.dense_macs = int(self.dense_macs)
        self.actual_macs = int(self.actual_macs)


COLUMNS = ("image", "psnr_db", "ssim", "density", "dense_macs", "actual_macs", "reduction")


def evaluate(state: ModelState, pairs: list[ImagePair], q: int | None = None, dtype=np.float64) -> list[EvalRow]:
    """Per-image PSNR/SSIM (luma, border shaved by the scale), density and MACs via the sparse executor."""
    if not pairs:
        raise ValueError("evaluation set is empty")
    cfg = state.config
    if q is not None:
        if cfg.multi is None:
            raise ValueError("Q given but the model was not trained for multi-sparsity")
        cfg.multi.check(q)
    rows = []
    for p in pairs:
        if cfg.mask is not None:
            sr, rep = run_sparse(p.lr, state, q, dtype=dtype)
        else:
            sr = forward_dense(Tensor(p.lr), state).data
            rep = mac_count(cfg, None, p.lr.shape[1:])
        sr = np.clip(sr.astype(np.float64), 0.0, 1.0)
        rows.append(
            EvalRow(
                p.name,
                psnr(sr, p.hr, shave_border=cfg.scale),
                ssim(sr, p.hr),
                float(rep.density),
                int(rep.dense_macs),
                int(rep.actual_macs),
                float(rep.reduction),
            )
        )
    return rows


def summarize(rows: list[EvalRow]) -> dict:
    dense = sum(r.dense_macs for r in rows)
    actual = sum(r.actual_macs for r in rows)
    return {
        "psnr_db": float(np.mean([r.psnr_db for r in rows])),
        "ssim": float(np.mean([r.ssim for r in rows])),
        "density": float(np.mean([r.density for r in rows])),
        "dense_macs": dense,
        "actual_macs": actual,
        "reduction": 1.0 - actual / dense if dense else 0.0,
    }
