"""Command-line entry point: ``ratiomatch <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 runtime error or divergence.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .bench import DEFAULT_DIMS, format_table, rows_as_dicts, run_bench
from .datasets import (SUPPORTED, BitDataset, DatasetFormatError, GrayCodec, Synthetic2DSpec,
                       codec_from_manifest, encode_dataset, gen_ising_data, load_dataset, save_dataset)
from .energy import DimensionError, IsingEnergy, MlpEnergy
from .metrics import energy_landscape
from .objectives import EstimatorKind, EstimatorSpec
from .samplers import make_rng
from .trainer import (STREAM_DATA, STREAM_INIT, CheckpointError, DivergenceError, TrainConfig,
                      evaluate, load_checkpoint, objective_callback, rmse_callback, train)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ENV_OUT_DIR = "RATIOMATCH_OUT_DIR"
ENV_THREADS = "RATIOMATCH_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _out_path(path: str) -> str:
    """Relative output paths land under $RATIOMATCH_OUT_DIR when it is set."""
    base = os.environ.get(ENV_OUT_DIR)
    if base and not os.path.isabs(path):
        path = os.path.join(base, path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    return path


def write_manifest(primary_output: str, command: str, args: argparse.Namespace, started: float,
                   outputs: list[str]) -> str:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "code_version": __version__,
        "started_utc": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    path = primary_output + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def true_model_from_manifest(manifest: dict) -> IsingEnergy | None:
    if manifest.get("source") != "ising" or "model_side" not in manifest:
        return None
    return IsingEnergy.lattice(int(manifest["model_side"]), float(manifest["model_sigma"]),
                               manifest.get("model_encoding", "spin"))


def _load_true_model(path: str | None, data_manifest: dict) -> IsingEnergy | None:
    if path is None:
        return true_model_from_manifest(data_manifest)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"RMCKPT"):
        return load_checkpoint(path).model()
    return true_model_from_manifest(load_dataset(path).manifest)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    started = time.time()
    if args.ising == bool(args.dist):
        raise UsageError("give exactly one of --dist NAME or --ising")
    if args.n < 1:
        raise UsageError("--n must be positive")
    rng = make_rng(args.seed, STREAM_DATA)
    if args.ising:
        if args.side < 3 or args.steps < 1:
            raise UsageError("--side must be >= 3 and --steps positive")
        true = IsingEnergy.lattice(args.side, args.sigma, args.encoding)
        ds = gen_ising_data(true, args.n, args.steps, rng, seed=args.seed)
    else:
        if args.bits < 1:
            raise UsageError("--bits must be positive")
        spec = Synthetic2DSpec(args.dist, args.n, GrayCodec(args.bits, args.lo, args.hi))
        ds = encode_dataset(spec, rng, seed=args.seed)
    out = _out_path(args.out)
    save_dataset(ds, out)
    write_manifest(out, "gen-data", args, started, [out])
    print(f"wrote {out}: n={ds.n} d={ds.d}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    spec = EstimatorSpec(args.estimator, s=args.s, exponent_clamp=args.clamp, term=args.term)
    return TrainConfig(spec, lr=args.lr, beta1=args.beta1, beta2=args.beta2, eps=args.eps,
                       batch_size=args.batch, iterations=args.iterations, seed=args.seed,
                       eval_every=args.eval_every, l1_strength=args.l1, checkpoint_every=args.checkpoint_every)


def cmd_train(args) -> int:
    started = time.time()
    ds = load_dataset(args.data)
    try:
        config = _train_config(args)
        config.estimator.check(ds.d)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out_dir = _out_path(os.path.join(args.out_dir, "final.ckpt"))
    out_dir = os.path.dirname(out_dir)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume).state()
        model = resume.model
    elif args.model == "ising":
        side = ds.manifest.get("model_side")
        model = IsingEnergy.learnable_zero(ds.d, args.encoding, None if side is None else int(side))
    else:
        model = MlpEnergy(ds.d, args.width, args.depth, rng=make_rng(args.seed, STREAM_INIT))
    if model.d != ds.d:
        raise DimensionError(f"dataset dimension {ds.d} != model dimension {model.d}")
    callbacks = []
    metrics = [m for m in args.eval_metrics.split(",") if m]
    if "objective" in metrics:
        callbacks.append(objective_callback(ds.bits[:args.n_eval]))
    true = true_model_from_manifest(ds.manifest)
    if "rmse" in metrics and true is not None and isinstance(model, IsingEnergy):
        callbacks.append(rmse_callback(true.J))
    log_path = os.path.join(out_dir, "metrics.jsonl")
    if resume is None and os.path.exists(log_path):
        os.unlink(log_path)
    result = train(config, ds, model, callbacks=callbacks, resume=resume, log_path=log_path,
                   checkpoint_dir=out_dir)
    final = os.path.join(out_dir, "final.ckpt")
    outputs = sorted(os.path.join(out_dir, f) for f in os.listdir(out_dir) if f.endswith(".ckpt"))
    write_manifest(final, "train", args, started, outputs + [log_path])
    last = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": final, **last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ck = load_checkpoint(args.checkpoint)
    model = ck.model()
    ds = load_dataset(args.data)
    if ds.d != model.d:
        raise DimensionError(f"dataset dimension {ds.d} != model dimension {model.d}")
    metrics = args.metric or ["objective"]
    J_true = None
    if "rmse" in metrics:
        true = _load_true_model(args.true_model, ds.manifest)
        if true is None:
            raise UsageError("rmse needs --true-model or an Ising dataset")
        J_true = true.J
    report = evaluate(model, ds, metrics, n_samples=args.n_samples, seed=args.seed, J_true=J_true,
                      gibbs={"chains": args.chains, "burn_in": args.burn_in, "thin": args.thin})
    report = {"checkpoint": os.path.abspath(args.checkpoint), "n_samples": args.n_samples, **report}
    if "mmd_sq" in report:
        report["mmd_kernel"] = "d - Hamming (linear), biased V-statistic; value is MMD^2"
    out = _out_path(args.out)
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2)
    write_manifest(out, "eval", args, started, [out])
    print(json.dumps(report))
    return EXIT_OK


def cmd_landscape(args) -> int:
    started = time.time()
    if args.resolution < 1:
        raise UsageError("--resolution must be >= 1")
    model = load_checkpoint(args.checkpoint).model()
    if args.data:
        codec = codec_from_manifest(load_dataset(args.data).manifest)
    else:
        if model.d % 2:
            raise DimensionError("landscape needs an even-dimensional model")
        codec = GrayCodec(args.bits or model.d // 2, args.lo, args.hi)
    grid = energy_landscape(model, codec, args.resolution)
    out = _out_path(args.out)
    grid.to_csv(out)
    write_manifest(out, "landscape", args, started, [out])
    print(f"wrote {out}: {args.resolution ** 2} rows")
    return EXIT_OK


def cmd_bench(args) -> int:
    started = time.time()
    dims = [int(x) for x in args.dims.split(",") if x]
    if not dims or min(dims) < 1 or args.timed < 1 or args.warmup < 0:
        raise UsageError("bad --dims, --timed or --warmup")
    rows = run_bench(dims, args.batch, args.s, args.width, args.depth, args.warmup, args.timed, args.seed,
                     measure_memory=not args.no_memory,
                     progress=lambda r: print(f"d={r.d} done", file=sys.stderr))
    print(format_table(rows))
    out = _out_path(args.out)
    with open(out, "w") as fh:
        json.dump({"rows": rows_as_dicts(rows), "memory_note": "best effort, non-normative"}, fh, indent=2)
    write_manifest(out, "bench", args, started, [out])
    return EXIT_OK


def cmd_rerun(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    ns = argparse.Namespace(**manifest["config"])
    for key in ("out", "out_dir"):
        value = getattr(args, key)
        if value is not None:
            if not hasattr(ns, key):
                raise UsageError(f"--{key.replace('_', '-')} does not apply to {command}")
            setattr(ns, key, value)
    return COMMANDS[command](ns)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "landscape": cmd_landscape,
            "bench": cmd_bench}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratiomatch", description="Ratio matching for binary energy-based models.")
    p.add_argument("--threads", type=int, default=None, help=f"cap on BLAS threads (env {ENV_THREADS})")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file; explicit flags take precedence")
        sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-data", help="generate a synthetic or Ising dataset")
    common(g)
    g.add_argument("--dist", choices=SUPPORTED)
    g.add_argument("--ising", action="store_true")
    g.add_argument("--bits", type=int, default=16, help="Gray-code bits per coordinate")
    g.add_argument("--lo", type=float, default=-4.0)
    g.add_argument("--hi", type=float, default=4.0)
    g.add_argument("--n", type=int, default=100000)
    g.add_argument("--side", type=int, default=25)
    g.add_argument("--sigma", type=float, default=0.25)
    g.add_argument("--steps", type=int, default=1_000_000, help="single-site Gibbs updates per chain")
    g.add_argument("--encoding", choices=("spin", "binary"), default="spin")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an energy model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--estimator", choices=[k.value for k in EstimatorKind], default="rmwggis-adv")
    t.add_argument("--s", type=int, default=10)
    t.add_argument("--term", choices=("ratio", "g"), default="ratio")
    t.add_argument("--clamp", type=float, default=30.0, help="bound on the ratio-term exponent")
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--iterations", type=int, default=1000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--beta1", type=float, default=0.9)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--eps", type=float, default=1e-8)
    t.add_argument("--l1", type=float, default=0.0, help="l1 strength on Ising couplings")
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--eval-metrics", default="objective,rmse")
    t.add_argument("--n-eval", type=int, default=4000)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--model", choices=("mlp", "ising"), default="mlp")
    t.add_argument("--width", type=int, default=256)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--encoding", choices=("spin", "binary"), default="spin")
    t.add_argument("--resume")
    t.add_argument("--out-dir", default="run")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", action="append", choices=("objective", "mmd", "rmse"))
    e.add_argument("--n-samples", type=int, default=4000)
    e.add_argument("--chains", type=int, default=100)
    e.add_argument("--burn-in", type=int, default=1000)
    e.add_argument("--thin", type=int, default=10)
    e.add_argument("--true-model", help="checkpoint or Ising dataset holding the true couplings")
    e.add_argument("--out", default="eval.json")

    la = sub.add_parser("landscape", help="export an energy grid")
    common(la)
    la.add_argument("--checkpoint", required=True)
    la.add_argument("--data", help="dataset whose manifest gives the Gray codec")
    la.add_argument("--bits", type=int, default=None)
    la.add_argument("--lo", type=float, default=-4.0)
    la.add_argument("--hi", type=float, default=4.0)
    la.add_argument("--resolution", type=int, default=100)
    la.add_argument("--out", default="landscape.csv")

    b = sub.add_parser("bench", help="time full ratio matching against the gradient-guided estimator")
    common(b)
    b.add_argument("--dims", default=",".join(map(str, DEFAULT_DIMS)))
    b.add_argument("--batch", type=int, default=256)
    b.add_argument("--s", type=int, default=10)
    b.add_argument("--width", type=int, default=256)
    b.add_argument("--depth", type=int, default=3)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--timed", type=int, default=50)
    b.add_argument("--no-memory", action="store_true")
    b.add_argument("--out", default="bench.json")

    r = sub.add_parser("rerun", help="repeat a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", default=None)
    r.add_argument("--out-dir", default=None)

    for name, sp in (("gen-data", g), ("train", t), ("eval", e), ("landscape", la), ("bench", b)):
        sp.set_defaults(func=COMMANDS[name])
    r.set_defaults(func=cmd_rerun)
    return p


def read_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    subs = parser._subparsers._group_actions[0].choices
    required = [a for sp in subs.values() for a in sp._actions if a.required]
    # first pass only locates the subcommand and --config; required flags may live in the file
    for a in required:
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in required:
            a.required = True
    path = getattr(args, "config", None)
    if not path:
        return parser.parse_args(argv)
    values = read_config_file(path)
    sub = subs[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in values.items():
        if k not in actions:
            raise UsageError(f"unknown config key {k!r} for {args.command}")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes")
        else:
            defaults[k] = a.type(v) if a.type else v
            if a.choices is not None and defaults[k] not in a.choices:
                raise UsageError(f"config value {v!r} not allowed for {k}")
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (UsageError, OSError) as e:
        print(f"ratiomatch: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    threads = args.threads or (int(os.environ[ENV_THREADS]) if os.environ.get(ENV_THREADS) else None)
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, DimensionError) as e:
        print(f"ratiomatch: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"ratiomatch: diverged: {e} (diagnostic checkpoint: {e.checkpoint})", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, DatasetFormatError, CheckpointError, ValueError, FloatingPointError) as e:
        print(f"ratiomatch: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
