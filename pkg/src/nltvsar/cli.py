"""Command-line entry point: simulate, reconstruct, train, eval, export."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ConfigurationError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
    ParameterError,
    RadarParams,
    SamplingMask,
    read_image,
    write_image,
)
from .datagen import generate_dataset, load_dataset
from .metrics import Region, aggregate, evaluate, find_uniform_region, write_metrics_csv
from .operators import apply_mask, build_plan, image
from .solver import (
    Mode,
    SolverConfig,
    admm_solve,
    default_nltv_config,
    default_params,
    reference_scale,
    write_residuals_csv,
)
from .unrolled import (
    Sample,
    TrainConfig,
    data_scale,
    default_network,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

METHODS = ("csa", "l1-admm", "nltv-nc-admm", "sphr-net")
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class Timer:
    def __init__(self):
        self.stages = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0


def _dims(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}")
    return vals


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1), got {text}")
    return v


def _snr(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("snr is NaN")
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def write_manifest(path: Path, command: str, args: argparse.Namespace, timer: Timer,
                   inputs=(), outputs=(), extra=None) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "timings": timer.stages,
    }
    if extra:
        doc.update(extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _plan_for(dims):
    radar = RadarParams.for_grid(*dims)
    return build_plan(radar, dims)


# simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    with timer.stage("simulate"):
        plan = _plan_for(args.dims)
        ds = generate_dataset(out, plan, args.count, snr_db=args.snr, az_drop=args.az_drop,
                              rg_drop=args.rg_drop, seed=args.seed, split=args.split)
    write_manifest(out / MANIFEST_NAME, "simulate", args, timer, outputs=[out],
                   extra={"counts": {"train": len(ds.train_ids), "test": len(ds.test_ids)}})
    print(f"wrote {args.count} items to {out} ({len(ds.train_ids)} train / {len(ds.test_ids)} test)")
    return EXIT_OK


# reconstruct ------------------------------------------------------------

def _reconstruct_one(method, echo, plan, mask, args, network):
    """Return (image, solver state or None, seconds spent in the solve)."""
    t0 = time.perf_counter()
    state = None
    if method == "csa":
        x = image(plan, apply_mask(mask, echo))
    elif method == "sphr-net":
        x = forward(network, echo, plan, mask)
    else:
        mode = Mode.L1 if method == "l1-admm" else Mode.NLTV_NC
        scale = reference_scale(echo, plan, mask)
        prm = default_params(scale, mode)
        cfg = SolverConfig(layers=args.iters, params=prm, mode=mode,
                           nltv=default_nltv_config(), stop_tol=args.stop_tol)
        x, state = admm_solve(echo, plan, mask, cfg)
    return x, state, time.perf_counter() - t0


def _magnitude_pgm(x, path, dynamic_range=40.0):
    from PIL import Image

    Image.fromarray(to_gray(x, dynamic_range), mode="L").save(path, format="PPM")


def cmd_reconstruct(args) -> int:
    if args.method == "sphr-net" and not args.checkpoint:
        raise UsageError("method sphr-net requires --checkpoint")
    if bool(args.echo) == bool(args.dataset):
        raise UsageError("give exactly one of --echo or --dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    network = load_checkpoint(args.checkpoint) if args.method == "sphr-net" else None

    jobs = []
    inputs = []
    if args.echo:
        with timer.stage("io"):
            echo = read_image(args.echo)
            mask = (SamplingMask.from_indicator(read_image(args.mask)) if args.mask
                    else SamplingMask.full(echo.shape))
        inputs.append(args.echo)
        jobs.append((Path(args.echo).stem, echo, mask))
    else:
        ds = load_dataset(args.dataset)
        ids = {"test": ds.test_ids, "train": ds.train_ids,
               "all": [it.item_id for it in ds.items]}[args.subset]
        if not ids:
            raise DataError(f"dataset subset {args.subset!r} is empty")
        for item_id in ids:
            with timer.stage("io"):
                echo = read_image(ds.path("echoes", item_id))
                mask = SamplingMask.from_indicator(read_image(ds.path("masks", item_id)))
            inputs.append(ds.path("echoes", item_id))
            jobs.append((item_id, echo, mask))

    dims = jobs[0][1].shape
    for name, echo, _ in jobs:
        if echo.shape != dims:
            raise DimensionError(f"{name}: echo {echo.shape} differs from {dims}")
    plan = _plan_for(dims)

    def solve(job):
        name, echo, mask = job
        return _reconstruct_one(args.method, echo, plan, mask, args, network)

    # scenes are independent; the FFTs and numba kernels release the GIL
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(solve, jobs))

    times = {}
    outputs = []
    for (name, _, _), (x, state, secs) in zip(jobs, results):
        times[name] = secs
        timer.stages["solve"] = timer.stages.get("solve", 0.0) + secs
        with timer.stage("io"):
            write_image(x, out / f"{name}.sphc")
            _magnitude_pgm(x, out / f"{name}.pgm")
            outputs += [out / f"{name}.sphc", out / f"{name}.pgm"]
            if state is not None:
                write_residuals_csv(state, out / f"{name}_residuals.csv")
                outputs.append(out / f"{name}_residuals.csv")
    write_manifest(out / MANIFEST_NAME, "reconstruct", args, timer, inputs, outputs,
                   extra={"method": args.method, "solve_seconds": times})
    print(f"{args.method}: reconstructed {len(jobs)} image(s) into {out}")
    return EXIT_OK


# train ------------------------------------------------------------------

def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    if not ds.train_ids:
        raise DataError("training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = Timer()
    with timer.stage("io"):
        samples = []
        for item_id in ds.train_ids:
            _, label, echo, mask = ds.load(item_id)
            samples.append(Sample(echo, label, mask))
    plan = _plan_for(ds.dims)
    scale = data_scale(samples, plan)
    init = default_network(args.layers, scale)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, spsa_step=args.spsa_step,
                      spsa_perturb=args.spsa_perturb, seed=args.seed)
    ckpt = out / "checkpoint.sphp"
    save_checkpoint(init, ckpt)

    def progress(epoch, value, best):
        save_checkpoint(best, ckpt)
        print(f"epoch {epoch}: loss {value:.6e}")

    with timer.stage("train"):
        result = train(samples, cfg, init, plan, scale=scale, log=progress)
    save_checkpoint(result.params, ckpt)
    write_loss_csv(result.history, out / "loss.csv")
    write_manifest(out / MANIFEST_NAME, "train", args, timer, [args.dataset],
                   [ckpt, out / "loss.csv"],
                   extra={"initial_loss": result.initial_loss, "best_loss": result.best_loss,
                          "scale": scale})
    print(f"initial loss {result.initial_loss:.6e}, best {result.best_loss:.6e}")
    return EXIT_OK


# eval -------------------------------------------------------------------

def _parse_region(text):
    if text == "auto":
        return None
    try:
        r, c, h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("region must be 'auto' or row,col,height,width") from None
    return Region(r, c, h, w)


def cmd_eval(args) -> int:
    recon_dir, label_dir = Path(args.recon), Path(args.labels)
    ids = sorted(p.stem for p in recon_dir.glob("*.sphc"))
    if not ids:
        raise DataError(f"no reconstructions in {recon_dir}")
    times = {}
    method = args.method
    manifest = recon_dir / MANIFEST_NAME
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        times = doc.get("solve_seconds", {})
        method = method or doc.get("method")
    method = method or "unknown"
    timer = Timer()
    rows = []
    with timer.stage("eval"):
        for item_id in ids:
            label_path = label_dir / f"{item_id}.sphc"
            if not label_path.exists():
                raise DataError(f"no label for scene id {item_id} in {label_dir}")
            recon = read_image(recon_dir / f"{item_id}.sphc")
            label = read_image(label_path).real
            if recon.shape != label.shape:
                raise DimensionError(f"{item_id}: recon {recon.shape} vs label {label.shape}")
            reg = args.region
            if reg is None:
                try:
                    reg = find_uniform_region(label)
                except DataError as exc:
                    print(f"warning: {item_id}: {exc}; ENL and gamma skipped", file=sys.stderr)
            row = evaluate(recon, label, reg)
            row.update(scene_id=item_id, method=method, time_s=times.get(item_id, math.nan))
            rows.append(row)
    mean = aggregate(rows)
    mean.update(scene_id="mean", method=method)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows + [mean], out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", args, timer,
                   [recon_dir, label_dir], [out])
    print(f"wrote metrics for {len(rows)} scene(s) to {out}")
    return EXIT_OK


# export -----------------------------------------------------------------

def to_gray(img, dynamic_range: float = 40.0) -> np.ndarray:
    """dB-scaled magnitude mapped to 8 bits; ``dynamic_range`` below peak is black."""
    if not dynamic_range > 0:
        raise ParameterError("dynamic range must be positive")
    mag = np.abs(np.asarray(img))
    peak = float(mag.max()) if mag.size else 0.0
    if peak == 0.0:
        return np.zeros(mag.shape, dtype=np.uint8)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / peak)
    db = np.clip(db, -dynamic_range, 0.0)
    return np.round(255.0 * (db + dynamic_range) / dynamic_range).astype(np.uint8)


def cmd_export(args) -> int:
    timer = Timer()
    with timer.stage("export"):
        img = read_image(args.input)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _magnitude_pgm(img, out, args.dynamic_range)
    write_manifest(out.with_name(out.name + ".manifest.json"), "export", args, timer,
                   [args.input], [out])
    return EXIT_OK


# parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True)
    common.add_argument("--dims", type=_dims, default=(128, 128))
    common.add_argument("--threads", type=int, default=1)

    parser = argparse.ArgumentParser(prog="nltvsar", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a simulated dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--snr", type=_snr, default=5.0)
    p.add_argument("--az-drop", type=_fraction, default=0.0)
    p.add_argument("--rg-drop", type=_fraction, default=0.0)
    p.add_argument("--split", type=float, default=0.9)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", parents=[common], help="form an image from echoes")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--echo")
    p.add_argument("--mask")
    p.add_argument("--dataset")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--stop-tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", parents=[common], help="train the unrolled network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--layers", type=int, default=10)
    p.add_argument("--spsa-step", type=float, default=0.3)
    p.add_argument("--spsa-perturb", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score reconstructions against labels")
    p.add_argument("--recon", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--region", type=_parse_region, default=None)
    p.add_argument("--method")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="write a dB-scaled graymap")
    p.add_argument("--input", required=True)
    p.add_argument("--dynamic-range", type=float, default=40.0)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ParameterError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FormatError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
