"""Command-line entry point: synth, train, render, eval, gradcheck, bench.

Every command prints one machine-readable summary line starting with
``RESULT``. Exit codes: 0 success, 2 validation error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .camera import Camera
from .gaussians import GaussianSet
from .losses import psnr, ssim_metric
from .optim import TrainConfig, model_size_report, render_frame, train
from .rasterizer import rasterize_brute_force, rasterize_forward, read_f32, read_ppm, write_f32, write_ppm
from .scene_io import (
    CheckpointError,
    PlyError,
    SynthConfig,
    checkpoint_load,
    frame_path,
    load_dataset,
    load_synth_config,
    measure_aperture_gap,
    read_keyvalue,
    synth_scene_generate,
)

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("splatdeform")


def _result(cmd, **kv):
    parts = [f"{k}={_fmt(v)}" for k, v in kv.items()]
    print(f"RESULT {cmd} " + " ".join(parts), flush=True)


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.6g}"
    return str(v)


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(default, text):
    if isinstance(default, bool):
        return _parse_bool(text)
    return type(default)(text)


def _add_dataclass_flags(parser, cls, title):
    """One flag per dataclass field; defaults are resolved later so config
    files can sit between built-in defaults and explicit flags."""
    group = parser.add_argument_group(title)
    for f in fields(cls):
        default = f.default
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                               default=None, help=f"(default: {default})")
        else:
            group.add_argument(flag, dest=f.name, type=type(default), default=None, metavar=type(default).__name__.upper(),
                               help=f"(default: {default})")


def _resolve(cls, args, config_path=None):
    """Built-in defaults < config file < command-line flags."""
    obj = cls()
    names = {f.name for f in fields(cls)}
    if config_path is not None:
        for k, v in read_keyvalue(config_path).items():
            key = k.replace("-", "_")
            if key not in names:
                raise ValueError(f"{config_path}: unknown config key {k!r}")
            setattr(obj, key, _coerce(getattr(obj, key), v))
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            setattr(obj, name, v)
    return obj


def _set_threads(n):
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(n if n and n > 0 else limit, limit)))


# -- commands ----------------------------------------------------------------------

def cmd_synth(args):
    cfg = load_synth_config(args.config) if args.config else SynthConfig()
    for f in fields(SynthConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    cfg.validate()
    res = synth_scene_generate(cfg, args.out)
    ds = res.dataset
    _result("synth", frames=len(ds), train=len(ds.train_indices), test=len(ds.test_indices),
            gaussians=len(res.scene), width=cfg.width, height=cfg.height, out=args.out)
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(TrainConfig, args, args.config).validate()
    ds = load_dataset(args.data)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    res = train(ds, cfg, checkpoint_path=out, log_path=log_path)
    ck = res.checkpoint
    test = ds.test_indices
    m = _evaluate_checkpoint(ck, ds, test) if len(test) else {"psnr": float("nan"), "ssim": float("nan")}
    rep = model_size_report(ck)
    _result("train", iterations=ck.iteration, gaussians=len(ck.gaussians), final_loss=res.history[-1] if res.history else float("nan"),
            test_psnr=m["psnr"], test_ssim=m["ssim"], bytes=rep["file_bytes"], checkpoint=out, log=log_path)
    return EXIT_OK


def _frame_range(spec: str | None, n: int):
    if not spec:
        return list(range(n))
    if ":" in spec:
        a, b = spec.split(":", 1)
        lo, hi = int(a or 0), int(b or n)
    else:
        lo = int(spec)
        hi = lo + 1
    if not (0 <= lo < hi <= n):
        raise ValueError(f"frame range {spec!r} outside 0..{n}")
    return list(range(lo, hi))


def cmd_render(args):
    ck = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.data)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames = _frame_range(args.frames, len(ds))
    g = ck.gaussians.astype(np.float64)
    for n in frames:
        img = render_frame(g, ck.field, ds.camera, ds.background, ds.audio[n], ds.expr[n])
        write_ppm(frame_path(out, n), img)
        write_f32(frame_path(out, n, ".f32"), img)
    _result("render", frames=len(frames), out=out)
    return EXIT_OK


def _evaluate_checkpoint(ck, ds, indices):
    g = ck.gaussians.astype(np.float64)
    ps, ss = [], []
    for n in indices:
        img = render_frame(g, ck.field, ds.camera, ds.background, ds.audio[n], ds.expr[n])
        ps.append(psnr(img, ds.images[n]))
        ss.append(ssim_metric(img, ds.images[n]))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def _split(ds, name):
    if name == "test":
        return ds.test_indices
    if name == "train":
        return ds.train_indices
    return np.arange(len(ds))


def cmd_eval(args):
    ds = load_dataset(args.data)
    indices = _split(ds, args.split)
    if args.checkpoint:
        ck = checkpoint_load(args.checkpoint)
        g = ck.gaussians.astype(np.float64)

        def predict(n):
            return render_frame(g, ck.field, ds.camera, ds.background, ds.audio[n], ds.expr[n])
    elif args.predictions:
        pdir = Path(args.predictions)

        def predict(n):
            return _load_prediction(pdir, n, ds.camera)
    else:
        raise ValueError("eval needs --checkpoint or --predictions")
    gt_gap = np.array([measure_aperture_gap(ds.images[n], ds.background, ds.mouth_rects[n]) for n in range(len(ds))])
    gap_range = float(gt_gap.max() - gt_gap.min())
    rows = []
    print("frame,psnr,ssim,gap_gt,gap_pred,gap_abs_err")
    for n in indices:
        img = predict(n)
        p = psnr(img, ds.images[n])
        s = ssim_metric(img, ds.images[n])
        gp = measure_aperture_gap(img, ds.background, ds.mouth_rects[n])
        rows.append((p, s, abs(gp - gt_gap[n])))
        print(f"{n},{_fmt(p)},{s:.6f},{gt_gap[n]:.4f},{gp:.4f},{abs(gp - gt_gap[n]):.4f}")
    arr = np.array(rows)
    mean_psnr = float(np.mean(arr[:, 0]))
    gap_err = float(arr[:, 2].mean())
    gap_frac = gap_err / gap_range if gap_range > 0 else 0.0
    _result("eval", split=args.split, frames=len(indices), psnr=mean_psnr, ssim=float(arr[:, 1].mean()),
            gap_err=gap_err, gap_range=gap_range, gap_err_frac=gap_frac)
    return EXIT_OK


def _load_prediction(pdir, n, cam):
    """Float sidecar when present (lossless), else the 8-bit PPM. ``pdir`` is
    a render output directory or the ``frames`` folder inside it."""
    if not (pdir / "frames").is_dir() and pdir.name == "frames":
        pdir = pdir.parent
    f32 = frame_path(pdir, n, ".f32")
    if f32.exists():
        return read_f32(f32, cam.width, cam.height)
    return read_ppm(frame_path(pdir, n))


def cmd_gradcheck(args):
    from .gradcheck import REL_TOL, run_gradcheck

    seeds = tuple(range(args.seed, args.seed + args.problems))
    report = run_gradcheck(seeds, n=args.gaussians, size=args.size, samples=args.samples)
    ok = True
    for cls, r in report.items():
        print(f"{cls:16s} max_rel={r['max_rel']:.3e} max_abs_small={r['max_abs_small']:.3e} "
              f"checked={r['checked']} {'ok' if r['ok'] else 'FAIL'}")
        ok = ok and r["ok"]
    worst = max(r["max_rel"] for r in report.values())
    _result("gradcheck", ok=ok, max_rel=worst, tol=REL_TOL, problems=len(seeds))
    return EXIT_OK if ok else EXIT_NUMERIC


def random_bench_scene(n=1000, seed=0, sh_degree=1):
    rng = np.random.default_rng(seed)
    centers = np.column_stack([rng.uniform(-1.2, 1.2, (n, 2)), rng.uniform(2.5, 4.0, n)])
    return GaussianSet(centers, rng.normal(size=(n, 4)), np.log(rng.uniform(0.01, 0.06, (n, 3))),
                       rng.normal(0.0, 1.5, n), rng.normal(0.0, 0.5, (n, (sh_degree + 1) ** 2, 3)))


def _time(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench(gaussians, cam, background, repeats=3, brute_repeats=1):
    """Best-of-``repeats`` wall times (seconds per frame) of both renderers."""
    rasterize_forward(gaussians, cam, background)  # JIT warm-up
    t_tiled = _time(lambda: rasterize_forward(gaussians, cam, background), repeats)
    t_brute = _time(lambda: rasterize_brute_force(gaussians, cam, background), brute_repeats)
    return t_tiled, t_brute


def cmd_bench(args):
    _set_threads(args.threads)
    size = args.size
    if args.checkpoint:
        ck = checkpoint_load(args.checkpoint)
        g = ck.gaussians.astype(np.float64)
        if args.data:
            ds = load_dataset(args.data)
            from .deform import apply_deltas

            g = apply_deltas(g, ck.field(g.embeddings, ds.audio[0], ds.expr[0]), ck.field.mask)
            base = ds.camera
            k = size / base.width
            cam = Camera(base.rotation, base.translation, base.fx * k, base.fy * k, base.cx * k, base.cy * k,
                         size, int(round(base.height * k)), base.near, base.far)
        else:
            cam = Camera.simple(size, size, 0.9 * size)
    else:
        g = random_bench_scene(args.gaussians, args.seed)
        cam = Camera.simple(size, size, 0.9 * size)
    bg = np.full((cam.height, cam.width, 3), 0.5)
    t_tiled, t_brute = bench(g, cam, bg, args.repeats)
    _result("bench", gaussians=len(g), width=cam.width, height=cam.height, tiled_fps=1.0 / t_tiled,
            brute_fps=1.0 / t_brute, speedup=t_brute / t_tiled)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="splatdeform", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic driven-aperture dataset")
    s.add_argument("--config", help="key = value file of synth settings")
    s.add_argument("--out", required=True, help="output directory (created if missing)")
    _add_dataclass_flags(s, SynthConfig, "synth settings")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimise a scene against a dataset",
                       description="All run settings below may also come from --config; flags win.")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output checkpoint path (.spld)")
    t.add_argument("--log", help="training log CSV (default: checkpoint path with .csv)")
    t.add_argument("--config", help="key = value file of run settings")
    _add_dataclass_flags(t, TrainConfig, "run settings")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render driven frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frames", help="frame range 'a:b' (end exclusive) or a single index")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR / SSIM / aperture-gap error table")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="render output directory (frames/frame_XXXX.ppm or .f32) instead of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--seed", type=int, default=0, help="(default: 0)")
    g.add_argument("--problems", type=int, default=3, help="number of seeded scenes (default: 3)")
    g.add_argument("--gaussians", type=int, default=40, help="(default: 40)")
    g.add_argument("--size", type=int, default=32, help="image side in pixels (default: 32)")
    g.add_argument("--samples", type=int, default=12, help="entries checked per class (default: 12)")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="tiled vs brute-force renderer frames per second")
    b.add_argument("--checkpoint")
    b.add_argument("--data")
    b.add_argument("--threads", type=int, default=0, help="rasterizer threads, 0 = all cores (default: 0)")
    b.add_argument("--gaussians", type=int, default=1000, help="random scene size (default: 1000)")
    b.add_argument("--size", type=int, default=256, help="image width in pixels (default: 256)")
    b.add_argument("--repeats", type=int, default=3, help="(default: 3)")
    b.add_argument("--seed", type=int, default=0, help="(default: 0)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, PlyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
