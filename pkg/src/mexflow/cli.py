"""Command-line interface: train, eval, sample, audit, bench-matexp.

Exit codes: 0 success, 1 I/O failure, 2 usage or config error, 3 audit
tolerance breach. Config files are key=value lines with # comments; flags
override file values; the effective config is echoed as comment lines atop
every CSV output. MEXFLOW_SEED serves as the seed fallback.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import audit as audit_mod
from . import data as data_mod
from . import matexp
from .checkpoint import CheckpointError
from .data import DatasetSpec
from .model import FlowModel, ModelConfig
from .rng import Rng
from .tensor import Tensor
from .train import (
    ConfigMismatchError,
    RunConfig,
    TrainingAbortedError,
    config_echo,
    evaluate_nll,
    load_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_AUDIT = 3


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    mapping = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"--config {path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                mapping[key.strip()] = value.strip()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from exc
    return mapping


def env_seed(default=0) -> int:
    raw = os.environ.get("MEXFLOW_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"MEXFLOW_SEED must be an integer, got {raw!r}") from exc


def resolve_data_spec(arg, mapping) -> DatasetSpec:
    """--data is a generator name or a dataset file path (.idx / .bin)."""
    if arg is None:
        raise UsageError("--data: required")
    seed = int(mapping.get("data.seed", mapping.get("run.seed", env_seed())))
    count = int(mapping.get("data.count", 5000))
    if arg in data_mod.GENERATED_KINDS:
        return DatasetSpec(arg, seed=seed, count=count)
    kind = "idx-images" if arg.endswith(".idx") else "cifar-binary" if arg.endswith(".bin") else None
    if kind is None:
        raise UsageError(
            f"--data: expected one of {data_mod.GENERATED_KINDS} or a .idx/.bin path, got {arg!r}"
        )
    if not os.path.exists(arg):
        raise UsageError(f"--data: dataset file not found: {arg}")
    return DatasetSpec(kind, path=arg, seed=seed, count=count)


def model_config_for(ds, mapping) -> ModelConfig:
    mapping = dict(mapping)
    if ds.is_image:
        h, w, c = ds.sample_shape
        mapping.update({"model.kind": "image", "model.height": h, "model.width": w,
                        "model.channels": c})
        mapping.setdefault("model.levels", "2")
        mapping.setdefault("model.depths", "2,2")
    else:
        mapping.update({"model.kind": "vector", "model.dim": ds.sample_shape[0]})
    return ModelConfig.from_mapping(mapping)


# --- image output ----------------------------------------------------------------


def tile_grid(images: np.ndarray) -> np.ndarray:
    n, h, w, c = images.shape
    per_row = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / per_row))
    canvas = np.zeros((rows * h, per_row * w, c), dtype=images.dtype)
    for i in range(n):
        r, q = divmod(i, per_row)
        canvas[r * h : (r + 1) * h, q * w : (q + 1) * w] = images[i]
    return canvas


def write_pnm(path, grid: np.ndarray):
    """P5 for one channel, P6 for three; binary, maxval 255."""
    height, width, channels = grid.shape
    if channels == 1:
        header = f"P5\n{width} {height}\n255\n"
        payload = grid[:, :, 0]
    elif channels == 3:
        header = f"P6\n{width} {height}\n255\n"
        payload = grid
    else:
        raise UsageError(f"--out: PGM/PPM supports 1 or 3 channels, model emits {channels}")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.astype(np.uint8).tobytes())


# --- subcommands --------------------------------------------------------------------


def cmd_train(args) -> int:
    mapping = read_config(args.config) if args.config else {}
    if args.seed is not None:
        mapping["run.seed"] = str(args.seed)
        mapping.setdefault("data.seed", str(args.seed))
    mapping.setdefault("run.seed", str(env_seed()))
    if args.lr is not None:
        mapping["run.lr"] = str(args.lr)
    if args.epochs is not None:
        mapping["run.epochs"] = str(args.epochs)
    if args.coupling is not None:
        mapping["model.coupling"] = args.coupling
    if args.conv is not None:
        mapping["model.conv"] = args.conv
    spec = resolve_data_spec(args.data, mapping)
    try:
        ds = data_mod.load(spec)
        run = RunConfig.from_mapping(mapping)
        model_cfg = model_config_for(ds, mapping)
        FlowModel(model_cfg, seed=run.seed)  # construction-time validation
    except (ValueError, data_mod.FormatError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        result = train(run, model_cfg, spec, args.out)
    except TrainingAbortedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"metrics: {exc.result.metrics_path}")
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    bpd = f" final_test_bpd={result.final_test_bpd:.6g}" if result.final_test_bpd is not None else ""
    print(
        f"coupling={model_cfg.coupling} conv={model_cfg.conv} "
        f"init_test_nll={result.init_test_nll:.10g} "
        f"final_test_nll={result.final_test_nll:.10g}{bpd} retries={result.retries}"
    )
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _eval_split(model, xs, label, discrete_levels):
    mean, std = evaluate_nll(model, xs)
    line = f"{label}: nll_nats={mean:.10g} +/- {std:.4g}"
    if discrete_levels:
        bpd = mean / (model.total_dim * math.log(2)) + math.log2(discrete_levels)
        line += f" bpd={bpd:.6g}"
    print(line)
    return mean


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    spec = resolve_data_spec(args.data, dict(bundle.mapping))
    ds = data_mod.load(spec)
    want = bundle.model.cfg
    got_shape = ds.sample_shape
    if ds.is_image:
        if (want.kind, want.height, want.width, want.channels) != ("image",) + tuple(got_shape):
            raise UsageError(
                f"checkpoint expects {want.kind} {(want.height, want.width, want.channels)}, "
                f"data is image {tuple(got_shape)}"
            )
    elif (want.kind, want.dim) != ("vector", got_shape[0]):
        raise UsageError(f"checkpoint expects {want.kind} dim={want.dim}, data is {got_shape}")
    run = bundle.run
    train_x, test_x = data_mod.train_test_split(ds.x, seed=run.seed, test_fraction=run.test_fraction)
    if ds.is_image:
        from .train import STREAM_TEST_DEQUANT

        train_x = data_mod.dequantize(train_x, Rng(run.seed, stream=STREAM_TEST_DEQUANT - 1),
                                      ds.discrete_levels)
        test_x = data_mod.dequantize(test_x, Rng(run.seed, stream=STREAM_TEST_DEQUANT),
                                     ds.discrete_levels)
    _eval_split(bundle.model, train_x, "train", ds.discrete_levels)
    _eval_split(bundle.model, test_x, "test", ds.discrete_levels)
    return EXIT_OK


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.model
    rng = Rng(env_seed(bundle.run.seed), stream=900)
    x = model.sample(args.count, rng, temperature=args.temperature)
    out = args.out
    if model.cfg.kind == "vector":
        if not out.endswith(".csv"):
            raise UsageError(f"--out: 2-D models write CSV points, got {out!r}")
        try:
            with open(out, "w") as fh:
                for line in config_echo(bundle.run, model.cfg, bundle.spec):
                    fh.write(f"# {line}\n")
                fh.write(f"# sample.count={args.count}\n# sample.temperature={args.temperature:g}\n")
                for row in x:
                    fh.write(f"{row[0]:.10g},{row[1]:.10g}\n")
        except OSError as exc:
            print(f"I/O error: cannot write {out}: {exc.strerror}", file=sys.stderr)
            return EXIT_IO
        print(f"wrote {args.count} points to {out}")
        return EXIT_OK
    if not (out.endswith(".pgm") or out.endswith(".ppm")):
        raise UsageError(f"--out: image models write .pgm or .ppm grids, got {out!r}")
    channels = model.cfg.channels
    if out.endswith(".pgm") and channels != 1:
        raise UsageError(f"--out: .pgm needs a 1-channel model, this one has {channels}")
    if out.endswith(".ppm") and channels != 3:
        raise UsageError(f"--out: .ppm needs a 3-channel model, this one has {channels}")
    pixels = np.clip(np.floor(x * 256.0), 0, 255)
    grid = tile_grid(pixels)
    try:
        write_pnm(out, grid)
    except OSError as exc:
        print(f"I/O error: cannot write {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.count}-tile grid {grid.shape[1]}x{grid.shape[0]} to {out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt).model
    else:
        # identity-initialized desk model (zero conv init keeps every layer
        # an exact identity after actnorm standardization)
        cfg = ModelConfig(kind="image", height=4, width=4, channels=2, levels=2,
                          depths=(2, 1), hidden=8, blocks=1, conv_init_scale=0.0)
        model = FlowModel(cfg, seed=env_seed())
    report = audit_mod.audit_model(model, Rng(env_seed(), stream=901))
    for row in report.layers:
        print(row.describe())
    ld = f"{report.model_logdet_err:.3e}" if report.model_logdet_err is not None else "skipped"
    print(f"model: roundtrip={report.model_roundtrip:.3e} logdet={ld}")
    if report.ok:
        print("audit: OK")
        return EXIT_OK
    print("audit: FAILED " + ", ".join(report.offenders()), file=sys.stderr)
    return EXIT_AUDIT


def cmd_bench(args) -> int:
    try:
        norms = [float(tok) for tok in args.norms.split(",") if tok]
    except ValueError as exc:
        raise UsageError(f"--norms: expected comma-separated floats, got {args.norms!r}") from exc
    if not norms:
        raise UsageError("--norms: at least one value required")
    seed = args.seed if args.seed is not None else env_seed()
    header = [
        f"bench.norms={args.norms}", f"bench.trials={args.trials}", f"bench.eps={args.eps:g}",
        f"bench.dim={args.dim}", f"bench.seed={seed}",
    ]
    if args.out:
        try:
            stats = matexp.write_bench_csv(args.out, norms, args.trials, eps=args.eps,
                                           n=args.dim, seed=seed, header_lines=header)
        except OSError as exc:
            print(f"I/O error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
            return EXIT_IO
        print(f"wrote {len(norms) * args.trials} rows to {args.out}")
    else:
        import csv

        for line in header:
            print(f"# {line}")
        stats = matexp.expm_bench(norms, args.trials, eps=args.eps, n=args.dim, seed=seed,
                                  writer=csv.writer(sys.stdout))
    print(
        f"m: mean={stats['mean']:.4g} std={stats['std']:.4g} "
        f"max={stats['max']} min={stats['min']} count={stats['count']}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mexflow",
                                     description="Matrix-exponential normalizing flows")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow and write metrics + checkpoints")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="moons|rings|checkerboard|path.idx|path.bin")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--coupling", choices=["affine", "matexp", "matexp-lowrank"])
    p.add_argument("--conv", choices=["matexp", "standard", "plu"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="print NLL/bpd of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="sample a checkpoint into a PGM/PPM grid or CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("audit", help="invertibility and log-det report")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt")
    group.add_argument("--random-config", action="store_true")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("bench-matexp", help="coefficient m statistics over random matrices")
    p.add_argument("--norms", required=True, help="comma-separated target 1-norms")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=matexp.DEFAULT_EPS)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, data_mod.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
