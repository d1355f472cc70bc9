"""Command-line entry point: ``frsp train | eval | fmap | bench``.

Exit codes: 0 ok, 2 usage or configuration error, 3 numerical failure,
4 internal consistency failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CONSISTENCY = 0, 2, 3, 4

logger = logging.getLogger("frsp")


class UsageError(Exception):
    pass


class ConsistencyError(Exception):
    pass


@dataclass
class RunManifest:
    config: dict
    seed: int
    build: str
    command: list[str]
    outputs: dict

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def build_id() -> str:
    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _thread_limit():
    """Context manager capping BLAS threads to ``FRSP_THREADS`` when set."""
    from contextlib import nullcontext

    n = os.environ.get("FRSP_THREADS")
    if not n:
        return nullcontext()
    try:
        n_int = int(n)
        if n_int < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"FRSP_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n_int)


# ----------------------------------------------------------------------
# loading helpers


def _load_config(path: str):
    from .trainer import TrainConfig

    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config {path}: {e}")


def _load_ckpt(path: str):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}")
    except CheckpointError as e:
        raise UsageError(str(e))


def _load_image(path: str) -> np.ndarray:
    from .data import load_png

    try:
        return load_png(path)
    except (FileNotFoundError, ValueError) as e:
        raise UsageError(f"cannot load image {path}: {e}")


def _check_q(state, q):
    if q is None:
        return
    ms = state.config.multi
    if ms is None:
        raise UsageError("--q given but the checkpoint was not trained for multi-sparsity")
    try:
        ms.check(q)
    except ValueError as e:
        raise UsageError(str(e))


def _load_eval_data(spec: str, scale: int):
    """``DIR`` (PNG files under ``DIR/hr``) or ``synth:SEED:COUNT[:SIZE]``."""
    from .data import load_dataset_dir, synth_dataset

    if spec.startswith("synth:"):
        try:
            parts = [int(v) for v in spec.split(":")[1:]]
            seed, count = parts[0], parts[1]
            size = parts[2] if len(parts) > 2 else 32
        except (ValueError, IndexError):
            raise UsageError(f"bad synthetic data spec {spec!r}, want synth:SEED:COUNT[:SIZE]")
        return synth_dataset(seed, count, size, scale)
    if not Path(spec).is_dir():
        raise UsageError(f"data directory not found: {spec}")
    try:
        return load_dataset_dir(spec, scale)
    except ValueError as e:
        raise UsageError(str(e))


# ----------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .trainer import TrainConfig, to_checkpoint, train

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.multi:
        if cfg.q_range is None:
            raise UsageError("--multi needs q_range in the config")
        if cfg.loss.alpha2 <= 0:
            raise UsageError("--multi needs loss.alpha2 > 0")
    elif cfg.loss.alpha2 != 0:
        raise UsageError("loss.alpha2 must be 0 without --multi")
    try:
        cfg.multi
    except ValueError as e:
        raise UsageError(str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = _load_ckpt(args.resume) if args.resume else None
    init = _load_ckpt(args.init).state if args.init else None
    if resume is not None:
        saved = resume.meta.get("train_config")
        if saved is not None and TrainConfig.from_dict(saved).to_dict() != cfg.to_dict():
            raise UsageError("--resume checkpoint was trained with a different config")

    paths = {
        "manifest": str(out / "manifest.json"),
        "config": str(out / "config.json"),
        "metrics": str(out / "metrics.csv"),
        "checkpoint": str(out / "final.frsp"),
    }
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    RunManifest(cfg.to_dict(), cfg.seed, build_id(), args.argv, paths).write(out / "manifest.json")

    fields = ["step", "q", "l_f", "density", "loss", "grad_norm"]
    mode = "a" if resume is not None and (out / "metrics.csv").exists() else "w"
    with open(out / "metrics.csv", mode, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        if mode == "w":
            writer.writeheader()

        def on_step(step, rec):
            writer.writerow({k: rec.get(k, "") for k in fields})

        every = args.checkpoint_every or cfg.steps
        ckpt = resume
        while True:
            start = ckpt.state.step if ckpt is not None else 0
            if start >= cfg.steps:
                break
            stop = min(cfg.steps, (start // every + 1) * every)
            result = train(cfg, multi=args.multi, resume=ckpt, stop_at=stop, init_state=init, on_step=on_step)
            ckpt = to_checkpoint(result, cfg)
            f.flush()
            save_checkpoint(ckpt, out / f"step{result.state.step:06d}.frsp")
    save_checkpoint(ckpt, out / "final.frsp")
    logger.info("wrote %s", out / "final.frsp")
    return EXIT_OK


def _write_table(rows, path: str | None) -> None:
    from .trainer import COLUMNS

    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    print("\t".join(COLUMNS))
    for r in rows:
        print("\t".join(fmt(getattr(r, c)) for c in COLUMNS))
    if path:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COLUMNS)
            for r in rows:
                w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in COLUMNS])


def cmd_eval(args) -> int:
    from .trainer import evaluate, summarize

    ckpt = _load_ckpt(args.ckpt)
    _check_q(ckpt.state, args.q)
    pairs = _load_eval_data(args.data, ckpt.state.config.scale)
    if not pairs:
        raise UsageError(f"no images found in {args.data}")
    rows = evaluate(ckpt.state, pairs, args.q)
    _write_table(rows, args.csv)
    s = summarize(rows)
    print("mean\t" + "\t".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return EXIT_OK


def cmd_fmap(args) -> int:
    from .mask import guidance, save_fmap_png, save_guidance_png
    from .network import compute_mask
    from .tensor import Tensor

    ckpt = _load_ckpt(args.ckpt)
    state = ckpt.state
    if state.config.mask is None:
        raise UsageError("checkpoint has no mask network")
    _check_q(state, args.q)
    img = _load_image(args.image)
    mo = compute_mask(Tensor(img), state, args.q)
    fmap = mo.fmap.data[0]
    save_fmap_png(fmap, args.out)
    gpath = args.guidance or str(Path(args.out).with_name(Path(args.out).stem + "_guidance.png"))
    save_guidance_png(guidance(fmap, state.config.mask.n), state.config.mask.n, gpath)
    print(f"fmap mean={fmap.mean():.4f} std={fmap.std():.4f} density={mo.mask.density():.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .network import forward_masked
    from .sparse import mac_count, run_dense_np, run_sparse
    from .tensor import Tensor

    ckpt = _load_ckpt(args.ckpt)
    state = ckpt.state
    if state.config.mask is None:
        raise UsageError("checkpoint has no mask network")
    _check_q(state, args.q)
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    img = _load_image(args.image)

    ref, mask = forward_masked(Tensor(img), state, args.q)
    sr, report = run_sparse(img, state, args.q, dtype=np.float32, mask=mask)
    err = float(np.max(np.abs(sr.astype(np.float64) - ref.data)))
    expected = mac_count(state.config, mask)
    if err > args.tol or report.actual_macs != expected.actual_macs:
        raise ConsistencyError(
            f"sparse/dense mismatch: max abs diff {err:.3g} (tol {args.tol}), "
            f"MACs {report.actual_macs} vs counted {expected.actual_macs}"
        )

    def best_of(fn):
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    img32 = img.astype(np.float32)
    t_dense = best_of(lambda: run_dense_np(img32, state))
    t_sparse = best_of(lambda: run_sparse(img32, state, args.q, dtype=np.float32))
    result = {
        "image": args.image,
        "max_abs_diff": err,
        "dense_seconds": t_dense,
        "sparse_seconds": t_sparse,
        "speedup": t_dense / t_sparse if t_sparse > 0 else float("inf"),
        **report.to_dict(),
    }
    result.pop("per_layer", None)
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = argparse.ArgumentParser(prog="frsp", description="Input-adaptive channel-sparse super-resolution")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="JSON file mirroring TrainConfig")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--multi", action="store_true", help="multi-sparsity training (needs q_range)")
    p.add_argument("--resume", help="continue from a checkpoint written by this command")
    p.add_argument("--init", help="warm-start weights from a checkpoint")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM/density/MAC table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory with hr/*.png, or synth:SEED:COUNT[:SIZE]")
    p.add_argument("--q", type=int, help="sparsity level for multi-sparsity models")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fmap", help="write the importance map and guidance map of an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="grayscale PNG of the importance map")
    p.add_argument("--guidance", help="indexed PNG of the guidance classes (default: <out>_guidance.png)")
    p.add_argument("--q", type=int)
    p.set_defaults(func=cmd_fmap)

    p = sub.add_parser("bench", help="dense vs channel-skipping wall clock")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--q", type=int)
    p.add_argument("--tol", type=float, default=1e-4, help="max abs diff allowed before timing")
    p.add_argument("--json", help="also write the report here")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .trainer import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConsistencyError as e:
        print(f"consistency failure: {e}", file=sys.stderr)
        return EXIT_CONSISTENCY


if __name__ == "__main__":
    sys.exit(main())
