"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION n PASS|FAIL: ...`` line with the measured
numbers.  The training criteria share session fixtures so the alpha grid is
trained once and reused by the MAC-reduction and importance-map checks.
"""

import json
import math
import time

import numpy as np
import pytest

from frsp import cli
from frsp import tensor as T
from frsp.checkpoint import save_checkpoint
from frsp.data import lr_regions, save_png, synth_dataset
from frsp.losses import LossConfig, bitrate_loss, functional_loss, total_loss
from frsp.mask import ChannelMask, MaskParams, fmap_forward, hard_band_grad, make_mask, mask_hard
from frsp.metrics import psnr, rgb_to_y, ssim
from frsp.network import NetworkConfig, compute_mask, forward_masked, forward_with_mask, init_model
from frsp.sparse import count_multiplies, run_sparse
from frsp.tensor import Tensor
from frsp.trainer import DataConfig, TrainConfig, evaluate, summarize, to_checkpoint, train_fixed, train_multi

from helpers import gradcheck, hard_grad_scalar, hard_mask_scalar, numeric_grad, rel_err


def report(n, ok, detail):
    print(f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# ----------------------------------------------------------------------
# 1. hard-mode semantics against a scalar oracle


def test_criterion_01_mask_semantics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    # C must hold at least one channel per class, so (n=16, C=8) is not a valid mask
    combos = [(n, c) for n in (2, 4, 16) for c in (8, 32, 128) if c >= n]
    per = -(-10_000 // len(combos))
    fwd_bad = bwd_bad = total = 0
    for n, c in combos:
        f = rng.uniform(size=per)
        # include every class boundary and both ends
        f[: n + 1] = np.arange(n + 1) / n
        fm = T.parameter(f.reshape(1, 1, per))
        m = mask_hard(fm, MaskParams(n=n, channels=c))
        up = rng.normal(size=(c, 1, per))
        (m.tensor * Tensor(up)).sum().backward()
        dense = m.dense()
        for i, v in enumerate(f):
            ref = hard_mask_scalar(float(v), n, c)
            fwd_bad += int(np.any(dense[:, 0, i] != ref))
            gref = float(np.sum(hard_grad_scalar(float(v), n, c) * up[:, 0, i]))
            bwd_bad += int(fm.grad[0, 0, i] != gref and abs(fm.grad[0, 0, i] - gref) > 1e-12 * max(1, abs(gref)))
            total += 1
    dt = time.perf_counter() - t0
    report(1, fwd_bad == 0 and bwd_bad == 0 and total >= 10_000 and dt < 10,
           f"{total} values, forward mismatches {fwd_bad}, backward mismatches {bwd_bad}, {dt:.1f}s")


# ----------------------------------------------------------------------
# 2. prefix structure in every mode


def _is_prefix(dense):
    # along channels: once a channel is off, every later one is off
    return bool(np.all(np.diff(dense, axis=0) <= 0)) and bool(np.all((dense == 0) | (dense == 1)))


def test_criterion_02_prefix_structure():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    bad = 0
    for i in range(1000):
        mode = ("hard", "soft", "sigmoid")[i % 3]
        n = int(rng.choice([2, 4, 8, 16]))
        c = n * int(rng.integers(1, 5))
        f = rng.uniform(size=(1, 5, 5))
        if i % 7 == 0:
            f = np.round(f * n) / n  # exactly on class boundaries
        m = make_mask(Tensor(f), MaskParams(mode=mode, n=n, channels=c))
        d = m.dense()
        ok = _is_prefix(d) and np.array_equal(d.sum(axis=0), m.active) and np.all(m.active % (c // n) == 0)
        bad += int(not ok)
    dt = time.perf_counter() - t0
    report(2, bad == 0 and dt < 10, f"1000 maps over hard/soft/sigmoid, violations {bad}, {dt:.1f}s")


# ----------------------------------------------------------------------
# 3. autodiff against central differences


def _op_cases(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    pos = rng.uniform(0.5, 2.0, size=(2, 3))
    x4 = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    ps = rng.normal(size=(1, 8, 2, 3))
    tbl = rng.normal(size=(4, 3))
    idx = rng.integers(0, 3, size=(4, 2, 2))
    away = a + np.sign(a) * 0.2  # away from ReLU / abs / clip kinks
    return {
        "add": (lambda p, q: (p + q).sum() * 1.3, [a, b]),
        "sub": (lambda p, q: ((p - q) * (p - q)).sum(), [a, b]),
        "mul": (lambda p, q: (p * q).sum(), [a, b]),
        "div": (lambda p, q: (p / q).sum(), [a, pos]),
        "neg": (lambda p: (-p * p).mean(), [a]),
        "relu": (lambda p: (T.relu(p) * p).sum(), [away]),
        "sigmoid": (lambda p: T.sigmoid(p).sum(), [a]),
        "exp": (lambda p: T.exp(p).mean(), [a]),
        "abs": (lambda p: T.tabs(p).sum(), [away]),
        "clip": (lambda p: (T.clip(p, -0.05, 0.05) + p * 0).sum() + (p * p).sum(), [away]),
        "sum_mean": (lambda p: T.tsum(p * p) + T.mean(p), [a]),
        "reshape": (lambda p: (T.reshape(p, (3, 2)) * Tensor(np.arange(6.0).reshape(3, 2))).sum(), [a]),
        "matmul": (lambda p, q: T.matmul(p, q).sum(), [a, b.T.copy()]),
        "take_rows": (lambda t: (T.take_rows(t, idx) * T.take_rows(t, idx)).sum(), [tbl]),
        "conv2d": (lambda x, k, c: T.tabs(T.conv2d(x, k, c) * 0.5 + 3.0).mean(), [x4, w, bias]),
        "pixel_shuffle": (lambda x: (T.pixel_shuffle(x, 2) * Tensor(np.arange(48.0).reshape(1, 2, 4, 6))).sum(), [ps]),
        "avg_pool2d": (lambda x: (T.avg_pool2d(x, 2) * T.avg_pool2d(x, 2)).sum(), [x4]),
    }


def _masked_model_error(seed, mode):
    rng = np.random.default_rng(seed)
    cfg_net = NetworkConfig(
        body_layers=2, channels=2, mask=MaskParams(mode=mode, n=2, channels=2), fmap_hidden=2
    )
    st = init_model(cfg_net, seed)
    for k, p in st.params.items():
        p.data[...] = rng.normal(0, 0.5, size=p.shape)
    st.params["fmap.2.b"].data[:] = rng.uniform(0.5, 1.5)
    lr = Tensor(rng.uniform(size=(3, 3, 3)))
    hr = Tensor(rng.uniform(size=(3, 6, 6)))
    cfg = LossConfig(alpha1=0.05, gamma=0.2)

    def loss_of(overrides, mask_tensor=None):
        saved = {k: st.params[k].data for k in overrides}
        for k, v in overrides.items():
            st.params[k].data = v
        try:
            if mask_tensor is None:
                sr, m = forward_masked(lr, st)
            else:
                m = ChannelMask(np.zeros((1, 1), int), 2, 2, Tensor(mask_tensor))
                sr = forward_with_mask(lr, st, m)
            return total_loss(functional_loss(sr, hr), bitrate_loss(m), cfg)
        finally:
            for k, v in saved.items():
                st.params[k].data = v

    for p in st.params.values():
        p.grad = None
    loss_of({}).backward()
    analytic = {k: st.params[k].grad.copy() for k in st.params}
    fn, mn = st.functional_names(), st.mask_names()
    # functional weights do not move the mask, so differentiate with the mask held fixed
    _, mask = forward_masked(lr, st)
    marr = mask.tensor.data.copy()
    num_f = numeric_grad(lambda *a: loss_of(dict(zip(fn, a)), marr).item(), [st.params[k].data.copy() for k in fn])
    err = max(rel_err(analytic[k], g) for k, g in zip(fn, num_f))

    fm = fmap_forward(lr, st.params).data
    dl_dm = numeric_grad(lambda m: loss_of({}, m).item(), [marr])[0]
    if mode == "hard":
        dl_df = hard_band_grad(dl_dm, mask.guidance, 2, 1)
    else:
        a = cfg_net.mask.alpha_sig
        s = 1 / (1 + np.exp(-a * (fm[0][None] - np.array([0.25, 0.75])[:, None, None])))
        dl_df = (dl_dm * 2 * a * s * (1 - s)).sum(axis=0)[None]

    def fmap_dot(*arrs):
        p = dict(st.params)
        p.update({k: Tensor(v) for k, v in zip(mn, arrs)})
        return float(np.sum(fmap_forward(lr, p).data * dl_df))

    num_m = numeric_grad(fmap_dot, [st.params[k].data.copy() for k in mn], h=1e-6)
    return max(err, max(rel_err(analytic[k], g) for k, g in zip(mn, num_m)))


def test_criterion_03_autodiff():
    t0 = time.perf_counter()
    worst_op, worst_model = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, (build, arrays) in _op_cases(rng).items():
            worst_op = max(worst_op, gradcheck(build, arrays))
        worst_model = max(worst_model, _masked_model_error(seed, ("hard", "sigmoid")[seed % 2]))
    dt = time.perf_counter() - t0
    report(3, worst_op <= 1e-4 and worst_model <= 1e-4 and dt < 60,
           f"20 seeds (hard and sigmoid alternating), worst op rel err {worst_op:.2e}, worst 2-layer masked model rel err {worst_model:.2e}, {dt:.1f}s")


# ----------------------------------------------------------------------
# 4. sparse executor equivalence and MAC tally


def test_criterion_04_sparse_equivalence():
    t0 = time.perf_counter()
    worst, mac_bad, configs = 0.0, 0, 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        residual = bool(seed % 2)
        layers = int(rng.choice([2, 4])) if residual else int(rng.integers(1, 4))
        n = int(rng.choice([2, 4]))
        c = n * int(rng.integers(1, 4))
        mode = ("hard", "soft", "sigmoid")[seed % 3]
        cfg = NetworkConfig(body_layers=layers, channels=c, mask=MaskParams(mode=mode, n=n, channels=c),
                            fmap_hidden=4, residual=residual, global_skip=seed % 5 == 0)
        st = init_model(cfg, seed)
        st.params["fmap.2.b"].data[:] = rng.uniform(-1.5, 1.5)
        lr = rng.uniform(size=(3, int(rng.integers(3, 8)), int(rng.integers(3, 8))))
        ref, mask = forward_masked(Tensor(lr), st)
        sr, rep = run_sparse(lr, st, dtype=np.float32)
        worst = max(worst, float(np.max(np.abs(sr - ref.data))))
        full = np.full(mask.active.shape, c)
        by_name = {l["name"]: l["actual"] for l in rep.per_layer}
        for i in range(layers):
            in_act = mask.active if (i % 2 == 1 if residual else i > 0) else full
            mac_bad += int(by_name[f"body.{i}"] != count_multiplies(in_act, mask.active, c, 3))
        configs += 1
    dt = time.perf_counter() - t0
    report(4, worst <= 1e-5 and mac_bad == 0 and dt < 120,
           f"{configs} configs, max abs diff {worst:.2e} (float32), MAC mismatches {mac_bad}, {dt:.1f}s")


# ----------------------------------------------------------------------
# 9. metrics against direct formulas


def _ssim_direct(x, y):
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5**2))
    g /= g.sum()
    w = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = np.sum(w * px), np.sum(w * py)
            cov = np.sum(w * (px - mx) * (py - my))
            vx, vy = np.sum(w * (px - mx) ** 2), np.sum(w * (py - my) ** 2)
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def _psnr_direct(a, b, s):
    total, count = 0.0, 0
    for i in range(s, a.shape[1] - s):
        for j in range(s, a.shape[2] - s):
            ya = (16 + 65.481 * a[0, i, j] + 128.553 * a[1, i, j] + 24.966 * a[2, i, j]) / 255
            yb = (16 + 65.481 * b[0, i, j] + 128.553 * b[1, i, j] + 24.966 * b[2, i, j]) / 255
            total += (ya - yb) ** 2
            count += 1
    return 10 * math.log10(1 / (total / count))


def test_criterion_09_metrics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(3):
        a = rng.uniform(size=(3, 24, 20))
        b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0, 1)
        worst = max(worst, abs(psnr(a, b, shave_border=2) - _psnr_direct(a, b, 2)))
        worst = max(worst, abs(ssim(a, b) - _ssim_direct(rgb_to_y(a), rgb_to_y(b))))
    same = ssim(a, a)
    hand = psnr(np.full((1, 1, 1), 250 / 255), np.full((1, 1, 1), 245 / 255))
    dt = time.perf_counter() - t0
    report(9, worst <= 1e-6 and abs(same - 1) <= 1e-12 and round(hand, 2) == 34.15 and dt < 10,
           f"max oracle diff {worst:.1e}, SSIM(x,x)={same:.12f}, hand PSNR {hand:.4f} dB, {dt:.1f}s")


# ----------------------------------------------------------------------
# training criteria: toy task shared by 5, 6, 7, 8 and 10

TOY_NET = NetworkConfig(body_layers=8, channels=32, scale=2, mask=MaskParams(mode="sigmoid", n=4, channels=32))
ALPHAS = (0.0, 4e-4, 2e-3, 1e-2, 5e-2, 0.25)  # 0 plus {4e-6, 2e-5, 1e-4, 5e-4, 2.5e-3} x 100
HELD_OUT = (2, 16)  # seed and count of the held-out synthetic set


def toy_config(**loss):
    return TrainConfig(steps=2000, seed=0, network=TOY_NET, data=DataConfig(seed=1, size=32),
                       loss=LossConfig(**loss), log_every=0)


@pytest.fixture(scope="session")
def held_out():
    return synth_dataset(*HELD_OUT, size=32)


@pytest.fixture(scope="session")
def alpha_grid(held_out):
    t0 = time.perf_counter()
    runs = {}
    for a in ALPHAS:
        cfg = toy_config(alpha1=a)
        r = train_fixed(cfg)
        runs[a] = (r, cfg, summarize(evaluate(r.state, held_out)))
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_05_sparsity_trend(alpha_grid):
    runs, dt = alpha_grid
    dens = [runs[a][2]["density"] for a in ALPHAS]
    psnrs = [runs[a][2]["psnr_db"] for a in ALPHAS]
    monotone = all(d1 >= d2 for d1, d2 in zip(dens, dens[1:]))
    top = ALPHAS[-1]
    gap = psnrs[0] - psnrs[-1]
    table = ", ".join(f"a={a:g}: d={d:.3f} {p:.2f}dB" for a, d, p in zip(ALPHAS, dens, psnrs))
    report(5, monotone and dens[-1] <= 0.4 and gap <= 1.5 and dt <= 30 * 60,
           f"{table}; monotone={monotone}, density at a={top:g} {dens[-1]:.3f}, PSNR drop {gap:.2f} dB, {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_06_target_tracking(held_out):
    t0 = time.perf_counter()
    r = train_fixed(toy_config(alpha1=0.25, gamma=0.25))
    d = summarize(evaluate(r.state, held_out))["density"]
    dt = time.perf_counter() - t0
    report(6, abs(d - 0.25) <= 0.15 and dt <= 10 * 60, f"gamma=0.25 -> held-out density {d:.3f}, {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_07_multi_sparsity(alpha_grid, held_out):
    runs, _ = alpha_grid
    t0 = time.perf_counter()
    cfg = TrainConfig(steps=2000, seed=0, warmup_steps=0, network=TOY_NET, data=DataConfig(seed=1, size=32),
                      loss=LossConfig(alpha1=0.25, alpha2=1.0), q_range=(0, 3), log_every=0)
    r = train_multi(cfg, init_state=runs[0.0][0].state)
    rows = [summarize(evaluate(r.state, held_out, q=q)) for q in range(4)]
    dt = time.perf_counter() - t0
    dens = [s["density"] for s in rows]
    psnrs = [s["psnr_db"] for s in rows]
    mono_d = all(a <= b for a, b in zip(dens, dens[1:]))
    mono_p = all(b >= a - 0.3 for a, b in zip(psnrs, psnrs[1:]))
    table = ", ".join(f"Q={q}: d={d:.3f} {p:.2f}dB" for q, d, p in zip(range(4), dens, psnrs))
    report(7, mono_d and dens[3] - dens[0] >= 0.1 and mono_p and dt <= 20 * 60,
           f"{table}; spread {dens[3] - dens[0]:.3f}, {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_08_mac_reduction(alpha_grid, tmp_path):
    runs, _ = alpha_grid
    r, cfg, summary = runs[ALPHAS[-1]]
    ck = tmp_path / "high_alpha.frsp"
    save_checkpoint(to_checkpoint(r, cfg), ck)
    # a larger held-out image so the timing is not dominated by per-call overhead
    img = synth_dataset(HELD_OUT[0] + 100, 1, size=192)[0].lr
    save_png(img, tmp_path / "bench.png")
    out = tmp_path / "bench.json"
    code = cli.main(["bench", "--ckpt", str(ck), "--image", str(tmp_path / "bench.png"), "--repeat", "5",
                     "--json", str(out)])
    bench = json.loads(out.read_text()) if code == 0 else {"speedup": float("nan")}
    report(8, summary["reduction"] >= 0.5 and code == 0 and bench["speedup"] > 1.0,
           f"held-out MAC reduction {summary['reduction']:.3f}, bench exit {code}, "
           f"speedup {bench['speedup']:.2f}x on a 96x96 LR image")


def fmap_wins(state, pairs):
    wins = 0
    for p in pairs:
        f = compute_mask(Tensor(p.lr), state).fmap.data[0]
        tex, flat = lr_regions(p.labels, p.scale)
        wins += int(f[tex].mean() > f[flat].mean())
    return wins


@pytest.mark.slow
def test_criterion_10_fmap_texture(alpha_grid, held_out):
    runs, _ = alpha_grid
    usable = [p for p in held_out if lr_regions(p.labels, p.scale)[0].any() and lr_regions(p.labels, p.scale)[1].any()]
    per_alpha = {a: fmap_wins(runs[a][0].state, usable) for a in ALPHAS}
    wins = per_alpha[ALPHAS[-1]]
    info = ", ".join(f"a={a:g}: {w}/{len(usable)}" for a, w in per_alpha.items())
    report(10, len(usable) >= 10 and wins >= 0.8 * len(usable),
           f"texture FMAP > flat FMAP on {wins}/{len(usable)} images for the high-alpha model (all models: {info})")
