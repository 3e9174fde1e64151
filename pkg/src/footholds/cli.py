"""Command-line pipeline driver.

Subcommands: terrain (synthetic heightmaps), label (dataset generation),
train (fit the network), eval (held-out metrics table), infer (one
decision on a map), bench (single-patch latency).  Every run writes one
JSON manifest next to its primary output echoing the resolved
configuration, paths, seed, tool version and wall-clock time.

Flags mirror the config dataclasses one-to-one; `--config FILE` reads the
same keys from `key = value` lines, with explicit flags taking precedence.
Exit codes: 0 success, 1 usage, 2 bad data or config, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import ast
import csv
import dataclasses
import json
import os
import platform
import struct
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .collision import leg_to_world
from .inference import (InferenceConfig, InferenceError, NetworkEvaluator,
                        OracleEvaluator, format_decision, nominal_stance,
                        predict_cost_classes, save_debug_maps,
                        select_foothold)
from .kinematics import default_legs, load_leg_config
from .labeler import (LabelError, LabelParams, SamplerConfig, draw_sample,
                      generate_dataset, load_dataset)
from .net import (DivergenceError, NetConfig, NetError, TrainConfig, evaluate,
                  full_scale_config, load_model, save_model, split_dataset,
                  train)
from .terrain import (TerrainSpec, extract_patch, generate_terrain,
                      load_heightmap, rotate_crop, save_heightmap)

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract wants 1
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run manifest

@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: list
    outputs: list
    seed: int | None
    version: str = __version__
    timings: dict | None = None
    results: dict | None = None
    host: dict | None = None

    def write(self, path) -> None:
        body = {k: v for k, v in dataclasses.asdict(self).items()
                if v is not None or k in ("seed", "timings")}
        with open(path, "w") as f:
            json.dump(body, f, indent=2, sort_keys=True)
            f.write("\n")


def _finish(manifest: RunManifest, path, t0: float, deterministic: bool):
    if not deterministic:
        manifest.timings = {"wall_s": round(time.perf_counter() - t0, 3)}
    manifest.write(path)


# ---------------------------------------------------------------------------
# config file + flag resolution

def _read_config_file(path) -> dict:
    """`key = value` lines; values are python literals or bare strings."""
    conf = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"bad config line {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            conf[key.replace("-", "_")] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            conf[key.replace("-", "_")] = val
    return conf


def _build(base, conf: dict, args: argparse.Namespace):
    """Dataclass defaults < config file < explicit flags."""
    vals = {}
    for f in dataclasses.fields(base):
        v = getattr(args, f.name, None)
        if v is None and f.name in conf:
            v = conf[f.name]
        if v is None:
            continue
        if isinstance(getattr(base, f.name), tuple) and isinstance(v, list):
            v = tuple(v)
        vals[f.name] = v
    return dataclasses.replace(base, **vals)


def _opt(args, conf, name, default):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return conf.get(name, default)


def _pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


# ---------------------------------------------------------------------------
# subcommands

def _cmd_terrain(args) -> int:
    t0 = time.perf_counter()
    conf = _read_config_file(args.config) if args.config else {}
    spec = _build(TerrainSpec(), conf, args)
    width = int(_opt(args, conf, "width", 200))
    height = int(_opt(args, conf, "height", 200))
    cell = float(_opt(args, conf, "cell_size", 0.02))
    origin = tuple(_opt(args, conf, "origin", (0.0, 0.0)))
    emap = generate_terrain(spec, width, height, cell, origin)
    save_heightmap(emap, args.out)
    man = RunManifest(
        "terrain",
        {"spec": spec.to_dict(), "width": width, "height": height,
         "cell_size": cell, "origin": list(origin)},
        inputs=[], outputs=[str(args.out)], seed=spec.seed)
    _finish(man, f"{args.out}.run.json", t0, args.deterministic)
    print(f"wrote {args.out}: {width}x{height} cells, kind={spec.kind}")
    return 0


def _cmd_label(args) -> int:
    t0 = time.perf_counter()
    conf = _read_config_file(args.config) if args.config else {}
    config = _build(SamplerConfig(), conf, args)
    params = _build(LabelParams(), conf, args)
    legs = _load_legs(args.legs_dir)
    jobs = int(_opt(args, conf, "jobs",
                    os.environ.get("FOOTHOLDS_JOBS", "1")))
    out = Path(args.out)
    manifest = generate_dataset(config, legs, out, params, jobs=jobs)
    man = RunManifest(
        "label",
        {"sampler": config.to_dict(), "label_params": params.to_dict(),
         "jobs": jobs},
        inputs=[], outputs=[str(out)], seed=config.seed,
        results={"samples": manifest["samples"],
                 "class_histogram": manifest["class_histogram"]})
    _finish(man, out / "run.json", t0, args.deterministic)
    print(f"wrote {manifest['samples']} pairs for {config.leg} to {out}")
    return 0


def _cmd_train(args) -> int:
    t0 = time.perf_counter()
    conf = _read_config_file(args.config) if args.config else {}
    base_net = full_scale_config() if args.full_scale else NetConfig()
    images, labels, manifest = load_dataset(args.data)
    net_cfg = _build(base_net, conf, args)
    net_cfg = dataclasses.replace(net_cfg, input_size=images.shape[-1])
    train_cfg = _build(TrainConfig(), conf, args)
    class_w = np.asarray(manifest["class_weights"], dtype=np.float32)

    csv_path = args.metrics or str(Path(args.out).with_suffix(".csv"))
    fields = ["epoch", "lr", "loss", "train_accuracy", "train_mean_iou",
              "val_accuracy", "val_mean_iou"]
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()

        def log(rec):
            writer.writerow({k: rec.get(k, "") for k in fields})
            print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  "
                  f"val acc {rec.get('val_accuracy', float('nan')):.4f}  "
                  f"val mIoU {rec.get('val_mean_iou', float('nan')):.4f}")

        params, history = train(images, labels, class_w, net_cfg, train_cfg,
                                log=log)

    save_model(args.out, params, net_cfg, class_w)
    _, va = split_dataset(len(images), train_cfg.val_fraction, train_cfg.seed)
    final = (evaluate(params, net_cfg, images[va], labels[va])
             if len(va) else {"accuracy": float("nan"),
                              "mean_iou": float("nan"), "iou": []})
    man = RunManifest(
        "train",
        {"net": net_cfg.to_dict(), "train": train_cfg.to_dict()},
        inputs=[str(args.data)], outputs=[str(args.out), csv_path],
        seed=train_cfg.seed,
        results={"epochs": len(history),
                 "final_loss": history[-1]["loss"] if history else None,
                 "heldout_accuracy": final["accuracy"],
                 "heldout_mean_iou": final["mean_iou"]})
    _finish(man, f"{args.out}.run.json", t0, args.deterministic)
    print(f"wrote {args.out}; held-out acc {final['accuracy']:.4f}, "
          f"mean IoU {final['mean_iou']:.4f}")
    return 0


def _iou_table(m: dict) -> str:
    lines = ["class    IoU", "-" * 13]
    for k, v in enumerate(np.atleast_1d(m["iou"])):
        lines.append(f"{k:5d}    {'  n/a' if np.isnan(v) else f'{v:.3f}'}")
    lines += ["-" * 13,
              f"pixel accuracy {m['accuracy']:.4f}",
              f"mean IoU       {m['mean_iou']:.4f}"]
    return "\n".join(lines) + "\n"


def _cmd_eval(args) -> int:
    t0 = time.perf_counter()
    conf = _read_config_file(args.config) if args.config else {}
    images, labels, manifest = load_dataset(args.data)
    seed = int(_opt(args, conf, "seed", TrainConfig().seed))
    vf = float(_opt(args, conf, "val_fraction", TrainConfig().val_fraction))
    _, va = split_dataset(len(images), vf, seed)
    if args.limit:
        va = va[:args.limit]
    if not len(va):
        raise UsageError("validation split is empty")

    if args.predictor == "network":
        params, net_cfg, _ = load_model(args.model)
        m = evaluate(params, net_cfg, images[va], labels[va])
        model_in = [str(args.model)]
    else:
        # oracle as predictor: re-derive the labels from the manifest's
        # sampler config; agreement with the stored maps is the identity
        # check that the dataset is reproducible
        config = SamplerConfig.from_dict(manifest["config"])
        params_ = LabelParams.from_dict(manifest["label_params"])
        root = Path(args.data)
        legs = {name: load_leg_config(root / fname)
                for name, fname in manifest["leg_files"].items()}
        from .net import metrics as _metrics
        preds = np.stack([draw_sample(config, legs, int(i), params_)[1]
                          for i in va])
        m = _metrics(preds, labels[va])
        model_in = []

    table = _iou_table(m)
    out = args.out or str(Path(args.data) / f"eval_{args.predictor}.txt")
    Path(out).write_text(table)
    print(table, end="")
    man = RunManifest(
        "eval",
        {"predictor": args.predictor, "seed": seed, "val_fraction": vf,
         "limit": args.limit},
        inputs=[str(args.data)] + model_in, outputs=[out], seed=seed,
        results={"accuracy": m["accuracy"], "mean_iou": m["mean_iou"],
                 "iou": [None if np.isnan(v) else float(v)
                         for v in np.atleast_1d(m["iou"])],
                 "evaluated": int(len(va))})
    _finish(man, f"{out}.run.json", t0, False)
    return 0


def _load_legs(legs_dir):
    if legs_dir is None:
        return default_legs()
    root = Path(legs_dir)
    legs = {}
    for p in sorted(root.glob("leg_*.cfg")):
        leg = load_leg_config(p)
        legs[leg.name] = leg
    if not legs:
        raise UsageError(f"no leg_*.cfg files under {legs_dir}")
    return legs


def _make_evaluator(args, legs):
    if args.evaluator == "oracle":
        return OracleEvaluator(legs)
    if args.model is None:
        raise UsageError("--model is required with the network evaluator")
    params, net_cfg, _ = load_model(args.model)
    return NetworkEvaluator(legs, params, net_cfg, args.model_leg)


def _cmd_infer(args) -> int:
    t0 = time.perf_counter()
    conf = _read_config_file(args.config) if args.config else {}
    icfg = _build(InferenceConfig(), conf, args)
    emap = load_heightmap(args.map)
    legs = _load_legs(args.legs_dir)
    if args.leg not in legs:
        raise UsageError(f"unknown leg {args.leg!r}")
    evaluator = _make_evaluator(args, legs)
    pose = nominal_stance(emap, legs, args.leg, tuple(args.base),
                          yaw=args.yaw, hip=args.hip)

    # spelled out instead of evaluate_leg so the label map is at hand
    # for the optional dumps
    leg = legs[args.leg]
    origin = leg_to_world(leg, np.zeros(3), pose.base_xyz, pose.base_yaw)
    patch51 = extract_patch(emap, (float(origin[0]), float(origin[1])), 51)
    patch = rotate_crop(patch51, pose.base_yaw)
    labels = predict_cost_classes(evaluator, pose, args.leg, patch, icfg)
    decision = select_foothold(labels, patch.known, icfg, patch,
                               side=leg.side)
    line = format_decision(args.leg, decision)

    outputs = [str(args.out)]
    Path(args.out).write_text(line + "\n")
    print(line)
    if args.dump_labels or args.dump_cost:
        lp = args.dump_labels or f"{args.out}.labels.pgm"
        cp = args.dump_cost or f"{args.out}.cost.pgm"
        save_debug_maps(labels, icfg, patch, lp, cp)
        outputs += [str(lp), str(cp)]
    man = RunManifest(
        "infer",
        {"inference": icfg.to_dict(), "leg": args.leg,
         "base": list(args.base), "yaw": args.yaw, "hip": args.hip,
         "evaluator": args.evaluator, "model_leg": args.model_leg},
        inputs=[str(args.map)] + ([str(args.model)] if args.model else []),
        outputs=outputs, seed=None,
        results={"decision": line})
    _finish(man, f"{args.out}.run.json", t0, False)
    return 0


def _cpu_name() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def _cmd_bench(args) -> int:
    t0 = time.perf_counter()
    legs = _load_legs(args.legs_dir)
    evaluator = _make_evaluator(args, legs)
    spec = TerrainSpec(kind="rough", seed=args.seed, amplitude=0.05)
    emap = generate_terrain(spec, 200, 200)
    # a few distinct stances so the patch path is not served from a
    # single warm cache line; each iteration runs the full pipeline
    bases = [(2.0 + 0.07 * (i % 5), 2.0 + 0.05 * (i % 3)) for i in range(15)]
    poses = [nominal_stance(emap, legs, args.leg, b) for b in bases]

    def once(i):
        pose = poses[i % len(poses)]
        leg = legs[args.leg]
        origin = leg_to_world(leg, np.zeros(3), pose.base_xyz, pose.base_yaw)
        patch51 = extract_patch(emap, (float(origin[0]), float(origin[1])),
                                51)
        patch = rotate_crop(patch51, pose.base_yaw)
        labels = predict_cost_classes(evaluator, pose, args.leg, patch,
                                      InferenceConfig())
        return select_foothold(labels, patch.known, InferenceConfig(), patch,
                               side=leg.side)

    for i in range(args.warmup):
        once(i)
    times = np.empty(args.n)
    for i in range(args.n):
        s = time.perf_counter()
        once(i)
        times[i] = time.perf_counter() - s
    ms = times * 1e3
    stats = {"n": args.n, "warmup": args.warmup,
             "mean_ms": float(ms.mean()),
             "p50_ms": float(np.percentile(ms, 50)),
             "p99_ms": float(np.percentile(ms, 99)),
             "min_ms": float(ms.min()), "max_ms": float(ms.max())}
    host = {"platform": platform.platform(), "machine": platform.machine(),
            "cpu": _cpu_name(), "cpu_count": os.cpu_count(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "threads": {v: os.environ.get(v) for v in _THREAD_VARS}}
    man = RunManifest(
        "bench",
        {"evaluator": args.evaluator, "leg": args.leg,
         "model_leg": args.model_leg, "n": args.n, "warmup": args.warmup},
        inputs=[str(args.model)] if args.model else [],
        outputs=[str(args.out)], seed=args.seed,
        results=stats, host=host)
    _finish(man, args.out, t0, False)
    print(f"single-patch latency over n={args.n}: "
          f"mean {stats['mean_ms']:.2f} ms, p50 {stats['p50_ms']:.2f} ms, "
          f"p99 {stats['p99_ms']:.2f} ms  ({host['cpu']})")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_common(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--deterministic", action="store_const", const=True,
                   default=False,
                   help="omit wall-clock timings so outputs are byte-stable")


def build_parser() -> _Parser:
    parser = _Parser(prog="footholds",
                     description="foothold cost maps and selection")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("terrain", help="generate a synthetic heightmap")
    _add_common(p)
    p.add_argument("--kind", choices=("flat", "slope", "stairs", "boxes",
                                      "rough"))
    p.add_argument("--seed", type=int)
    p.add_argument("--inclination", type=float)
    p.add_argument("--rise", type=float)
    p.add_argument("--run", type=float)
    p.add_argument("--box-count", type=int, dest="box_count")
    p.add_argument("--box-height", type=_pair, dest="box_height")
    p.add_argument("--box-extent", type=_pair, dest="box_extent")
    p.add_argument("--amplitude", type=float)
    p.add_argument("--octaves", type=int)
    p.add_argument("--persistence", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--cell-size", type=float, dest="cell_size")
    p.add_argument("--origin", type=_pair)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_terrain)

    p = sub.add_parser("label", help="generate an image/label dataset")
    _add_common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--leg", choices=("LF", "RF", "LH", "RH"))
    p.add_argument("--map-cells", type=int, dest="map_cells")
    p.add_argument("--cell-size", type=float, dest="cell_size")
    p.add_argument("--hip-height", type=_pair, dest="hip_height")
    p.add_argument("--max-attempts", type=int, dest="max_attempts")
    p.add_argument("--margin-scale", type=float, dest="margin_scale")
    p.add_argument("--jobs", type=int,
                   help="worker processes (default $FOOTHOLDS_JOBS or 1)")
    p.add_argument("--legs-dir", dest="legs_dir")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("train", help="fit the network on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--widths", type=_ints)
    p.add_argument("--mid-blocks", type=int, dest="mid_blocks")
    p.add_argument("--deep-blocks", type=int, dest="deep_blocks")
    p.add_argument("--up-blocks", type=_ints, dest="up_blocks")
    p.add_argument("--dilation-cycle", type=_ints, dest="dilation_cycle")
    p.add_argument("--full-scale", action="store_const", const=True,
                   default=False, dest="full_scale",
                   help="start from the full-size widths instead of the "
                        "desk-scale default")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float, dest="lr_decay")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--eval-cap", type=int, dest="eval_cap")
    p.add_argument("--metrics", help="per-epoch CSV (default <out>.csv)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="held-out metrics table")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--predictor", choices=("network", "oracle"),
                   default="network")
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--limit", type=int,
                   help="cap the number of held-out samples")
    p.add_argument("-o", "--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="one foothold decision on a heightmap")
    _add_common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--leg", default="LF")
    p.add_argument("--base", type=_pair, required=True,
                   help="base x,y in map coordinates")
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--hip", type=float, default=0.45)
    p.add_argument("--evaluator", choices=("network", "oracle"),
                   default="network")
    p.add_argument("--model")
    p.add_argument("--model-leg", default="LF", dest="model_leg")
    p.add_argument("--legs-dir", dest="legs_dir")
    p.add_argument("--k", type=float)
    p.add_argument("--nominal-offset", type=_pair, dest="nominal_offset")
    p.add_argument("--norm-factor", type=float, dest="norm_factor")
    p.add_argument("--dump-labels", dest="dump_labels")
    p.add_argument("--dump-cost", dest="dump_cost")
    p.add_argument("-o", "--out", default="decision.txt")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("bench", help="single-patch inference latency")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--evaluator", choices=("network", "oracle"),
                   default="network")
    p.add_argument("--leg", default="LF")
    p.add_argument("--model-leg", default="LF", dest="model_leg")
    p.add_argument("--legs-dir", dest="legs_dir")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", default="bench.json")
    p.set_defaults(func=_cmd_bench)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:                      # --help / --version
        return int(e.code or 0)
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (LabelError, NetError, InferenceError, OSError, ValueError,
            KeyError, struct.error) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    # bench pins itself to one BLAS thread by re-entering with the thread
    # env set before numpy spins up its pools
    if (len(sys.argv) > 1 and sys.argv[1] == "bench"
            and any(os.environ.get(v) != "1" for v in _THREAD_VARS)):
        env = dict(os.environ)
        for v in _THREAD_VARS:
            env[v] = "1"
        os.execve(sys.executable,
                  [sys.executable, "-m", "footholds"] + sys.argv[1:], env)
    sys.exit(run(sys.argv[1:]))
