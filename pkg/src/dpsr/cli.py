"""Command-line front end for the whole pipeline.

Subcommands: make-synth, degrade, train, sr-stream, eval, profile,
simulate. Every run drops a manifest next to its outputs with the resolved
configuration, so results can be reproduced from the artifacts alone.

Exit codes: 0 ok, 1 numeric failure, 2 I/O failure, 3 contract violation,
4 config parse failure.
"""

import argparse
import json
import os
import sys
import time

# Cap numeric-library threading before numpy loads anywhere.
_threads = os.environ.get("DPSR_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

from .errors import ConfigError, ContractError, NumericError

EXIT_NUMERIC = 1
EXIT_IO = 2
EXIT_CONTRACT = 3
EXIT_CONFIG = 4

MODEL_KEYS = {
    "bands": int, "features": int, "expand": int, "state_size": int,
    "kernel_lines": int, "up_features": int, "scale": int, "n_clff": int,
    "memory_kind": str, "ca_reduction": int,
}
TRAIN_KEYS = {
    "lr": float, "alpha_s": float, "alpha_g": float, "batch_size": int,
    "max_steps": int, "patch": int, "seed": int, "eval_every": int,
    "patience": int,
}


def parse_config_file(path, schema):
    """Strict key=value parser; unknown keys are rejected by name and line."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise e
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = schema[key](val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from e
    return values


def write_manifest(out_dir, command, args_ns, resolved, config_path=None):
    manifest = {
        "command": command,
        "config_file": config_path or "",
        "seed": getattr(args_ns, "seed", None),
        "inputs": resolved.pop("_inputs", []),
        "outputs": resolved.pop("_outputs", []),
        "resolved_config": resolved,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = os.path.join(out_dir, f"{command.replace('-', '_')}.manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _model_config(args, file_values):
    from .model import DpsrConfig

    merged = dict(file_values)
    for key in MODEL_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    if "bands" not in merged:
        raise ConfigError("model config needs at least 'bands'")
    return DpsrConfig(**merged)


def _add_model_flags(sub):
    sub.add_argument("--config", help="key=value model config file")
    sub.add_argument("--bands", type=int)
    sub.add_argument("--features", type=int)
    sub.add_argument("--expand", type=int)
    sub.add_argument("--state-size", dest="state_size", type=int)
    sub.add_argument("--kernel-lines", dest="kernel_lines", type=int)
    sub.add_argument("--up-features", dest="up_features", type=int)
    sub.add_argument("--scale", type=int)
    sub.add_argument("--n-clff", dest="n_clff", type=int)
    sub.add_argument("--memory-kind", dest="memory_kind",
                     choices=("mamba", "causalconv"))
    sub.add_argument("--ca-reduction", dest="ca_reduction", type=int)


def cmd_make_synth(args):
    from .dataio import make_synthetic, write_cube

    os.makedirs(args.out_dir, exist_ok=True)
    probe = os.path.join(args.out_dir, ".write_probe")
    try:
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError:
        raise OSError(f"output directory {args.out_dir!r} is not writable")
    names = []
    for i in range(args.count):
        cube = make_synthetic(args.seed + i, args.height, args.width,
                              args.bands, smoothness=args.smoothness)
        name = f"synth_{args.seed + i:05d}.hsc"
        write_cube(cube, os.path.join(args.out_dir, name))
        names.append(name)
    resolved = {
        "count": args.count, "height": args.height, "width": args.width,
        "bands": args.bands, "smoothness": args.smoothness, "seed": args.seed,
        "_outputs": names,
    }
    write_manifest(args.out_dir, "make-synth", args, resolved)
    print(f"wrote {args.count} cubes to {args.out_dir}")
    return 0


def cmd_degrade(args):
    from .dataio import bicubic_downsample, read_cube, write_cube

    cube = read_cube(args.input)
    lr = bicubic_downsample(cube, args.factor)
    write_cube(lr, args.output)
    resolved = {"factor": args.factor, "_inputs": [args.input],
                "_outputs": [args.output]}
    write_manifest(os.path.dirname(os.path.abspath(args.output)),
                   "degrade", args, resolved, None)
    print(f"{cube.height}x{cube.width}x{cube.bands} -> "
          f"{lr.height}x{lr.width}x{lr.bands}")
    return 0


def _load_cubes(directory):
    from .dataio import read_cube

    names = sorted(n for n in os.listdir(directory) if n.endswith(".hsc"))
    if not names:
        raise ContractError(f"no .hsc cubes in {directory!r}")
    return [read_cube(os.path.join(directory, n)) for n in names]


def cmd_train(args):
    from .model import save_params
    from .train import TrainConfig, fit, write_log

    file_values = parse_config_file(args.config, MODEL_KEYS) if args.config else {}
    mcfg = _model_config(args, file_values)
    tfile = parse_config_file(args.train_config, TRAIN_KEYS) if args.train_config else {}
    if args.seed is not None:
        tfile["seed"] = args.seed
    if args.steps is not None:
        tfile["max_steps"] = args.steps
    if args.lr is not None:
        tfile["lr"] = args.lr
    if args.patch is not None:
        tfile["patch"] = args.patch
    tcfg = TrainConfig(**tfile)

    train_cubes = _load_cubes(args.data_dir)
    val_cubes = _load_cubes(args.val_dir) if args.val_dir else []
    params, log = fit(train_cubes, val_cubes, mcfg, tcfg)
    save_params(params, args.out)
    log_path = args.out + ".log.csv"
    write_log(log, log_path)

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    resolved = {**{k: getattr(mcfg, k) for k in MODEL_KEYS},
                **{k: getattr(tcfg, k) for k in TRAIN_KEYS},
                "_inputs": [args.data_dir, args.val_dir or ""],
                "_outputs": [args.out, log_path]}
    write_manifest(out_dir, "train", args, resolved, args.config)
    best = max((r.val_mpsnr for r in log if r.val_mpsnr is not None),
               default=float("nan"))
    print(f"trained {len(log)} steps; best val MPSNR {best:.2f} dB; saved {args.out}")
    return 0


def cmd_sr_stream(args):
    from .dataio import read_cube, write_cube
    from .model import load_params
    from .stream import run_stream

    params = load_params(args.model)
    cube = read_cube(args.input)
    sr, report = run_stream(cube, params, budget_ms=args.budget_ms)
    write_cube(sr, args.output)
    if args.report:
        report.write_csv(args.report)
    out_dir = os.path.dirname(os.path.abspath(args.output)) or "."
    resolved = {"budget_ms": args.budget_ms,
                "_inputs": [args.model, args.input],
                "_outputs": [args.output] + ([args.report] if args.report else [])}
    write_manifest(out_dir, "sr-stream", args, resolved)
    print(report.table())
    return 0


def cmd_eval(args):
    from .dataio import read_cube
    from .metrics import EvalReport, evaluate

    pred = read_cube(args.pred)
    ref = read_cube(args.ref)
    report = evaluate(pred, ref, args.factor)
    print(report)
    row = report.row(dataset=args.dataset, config=args.config_name,
                     scale=args.factor)
    if args.csv:
        new = not os.path.exists(args.csv)
        with open(args.csv, "a", encoding="utf-8") as fh:
            if new:
                fh.write(EvalReport.header() + "\n")
            fh.write(row + "\n")
    else:
        print(EvalReport.header())
        print(row)
    return 0


def cmd_profile(args):
    from .profiler import profile

    file_values = parse_config_file(args.config, MODEL_KEYS) if args.config else {}
    cfg = _model_config(args, file_values)
    report = profile(cfg, width=args.width)
    print(report.table())
    print()
    print(report.row_header())
    print(report.row())
    return 0


def cmd_simulate(args):
    from .dataio import read_cube
    from .model import load_params
    from .stream import LineSource, run_stream

    params = load_params(args.model)
    cube = read_cube(args.input)
    _, report = run_stream(cube, params, budget_ms=args.budget_ms)
    print(report.table())
    if args.cadence_ms:
        # virtual fixed-cadence timeline: line y is acquired at y*cadence
        source = LineSource(cube, cadence_ms=args.cadence_ms)
        done, late = 0.0, 0
        while True:
            item = source.next_line()
            if item is None:
                break
            y, _, stamp = item
            if y == 0:
                done = stamp + report.first_line_ms
                continue
            start = max(done, stamp)
            done = start + report.latencies_ms[y - 1]
            if done > stamp + args.cadence_ms:
                late += 1
        print(f"cadence {args.cadence_ms:.3f} ms: {late} lines finished "
              f"after the next acquisition")
    if args.report:
        report.write_csv(args.report)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dpsr",
        description="Line-by-line streaming super-resolution for pushbroom sensors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synth", help="generate synthetic hyperspectral cubes")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--bands", type=int, default=8)
    s.add_argument("--smoothness", type=float, default=3.0)
    s.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("degrade", help="bicubic-downsample a cube")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--factor", type=int, required=True)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train a model on cube files")
    _add_model_flags(s)
    s.add_argument("--train-config", help="key=value training config file")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--val-dir")
    s.add_argument("--out", required=True, help="output model container")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patch", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sr-stream", help="stream a cube through a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--budget-ms", dest="budget_ms", type=float, default=4.32)
    s.add_argument("--report", help="write per-line latency CSV here")
    s.set_defaults(func=cmd_sr_stream)

    s = sub.add_parser("eval", help="score a prediction against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--factor", type=int, required=True)
    s.add_argument("--csv", help="append the result row to this file")
    s.add_argument("--dataset", default="")
    s.add_argument("--config-name", dest="config_name", default="")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="parameter/FLOPs/state accounting")
    _add_model_flags(s)
    s.add_argument("--width", type=int, default=32)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("simulate", help="replay a stream against a line budget")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--budget-ms", dest="budget_ms", type=float, default=4.32)
    s.add_argument("--cadence-ms", dest="cadence_ms", type=float)
    s.add_argument("--report")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
