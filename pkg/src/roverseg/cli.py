"""Command-line entry point.

Subcommands: gen, train, eval, infer, gradcheck, bench.  Every command
echoes its effective configuration, validates inputs before writing
anything, and on failure prints a single machine-parsable line
``error=<kind> detail=<text>`` to stderr and exits nonzero.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from . import config as cfgmod
from . import gradprobe, metrics, scenegen, storage, training
from .errors import ConfigError, RoverSegError, ShapeError
from .network import EncoderConfig, NetworkParams, Stage2Network
from .training import TrainConfig


def _echo(cfg):
    for line in cfgmod.echo_lines(cfg):
        print(line)


def _train_config(cfg: cfgmod.RunConfig, seed_override=None) -> TrainConfig:
    return TrainConfig(
        lr0=cfg.lr0,
        momentum=cfg.momentum,
        decay=cfg.decay,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        tau=cfg.tau,
        seed=cfg.seed if seed_override is None else seed_override,
    )


def cmd_gen(args) -> int:
    cfg = cfgmod.load_config(args.config)
    _echo(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    rows = scenegen.gen_dataset(
        args.out,
        args.per_preset,
        seed,
        split=args.split,
        width=cfg.width,
        height=cfg.height,
        n_craters=(cfg.craters_min, cfg.craters_max),
        n_rocks=(cfg.rocks_min, cfg.rocks_max),
        jobs=args.jobs,
    )
    for preset in scenegen.PRESET_ORDER:
        sub = [r for r in rows if r.preset == preset]
        if not sub:
            continue
        crater = float(np.mean([r.crater_px_ratio for r in sub]))
        rock = float(np.mean([r.rock_px_ratio for r in sub]))
        print(f"preset={preset} background={1.0 - crater - rock:.6f} crater={crater:.6f} rock={rock:.6f}")
    print(f"samples={len(rows)} split={args.split} out={args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    _echo(cfg)
    if args.stage == 2 and not args.init:
        raise ConfigError("stage 2 requires --init with a stage-1 checkpoint")
    seed = cfg.seed if args.seed is None else args.seed
    tcfg = _train_config(cfg, seed)
    samples = storage.load_split(args.data, args.split)
    if args.stage == 1:
        enc_cfg = EncoderConfig(3, cfg.stage_channels, cfg.kernel_size)
        net, log = training.train_stage1(samples, tcfg, enc_cfg, cfg.num_classes, progress=print)
        storage.save_stage1(net, args.out)
    else:
        reference = storage.load_stage1(args.init)
        net, log = training.train_stage2(samples, reference, tcfg, contrast=not args.no_contrast, progress=print)
        storage.save_stage2(net, args.out)
        drift = training.frozen_drift(net, reference)
        print(f"frozen_check={'passed' if drift == 0.0 else 'FAILED'} drift={drift!r}")
        if drift != 0.0:
            raise RoverSegError(f"frozen encoder drifted by {drift!r}")
    with open(str(args.out) + ".log", "w", encoding="utf-8") as fh:
        fh.write("\n".join(log.lines()) + ("\n" if log.records else ""))
    print(f"checkpoint={args.out}")
    return 0


def _report_block(cm, title):
    report = metrics.compute_report(cm)
    print(metrics.format_report(report, title))
    for line in metrics.report_lines(report):
        print(f"{title} {line}")


def cmd_eval(args) -> int:
    net = storage.load_network(args.ckpt)
    samples = storage.load_split(args.data, args.split)
    overall, by_preset = training.evaluate(net, samples)
    _report_block(overall, "overall")
    if args.per_scenario:
        ordered = [p for p in scenegen.PRESET_ORDER if p in by_preset]
        ordered += sorted(set(by_preset) - set(scenegen.PRESET_ORDER))
        for preset in ordered:
            _report_block(by_preset[preset], preset)
    return 0


def cmd_infer(args) -> int:
    net = storage.load_network(args.ckpt)
    rgb8 = storage.read_rgb_png(args.rgb)
    depth16 = None
    if isinstance(net, Stage2Network) or (isinstance(net, NetworkParams) and net.modality == "depth"):
        if not args.depth:
            raise ConfigError("this checkpoint consumes depth; pass --depth")
        depth16 = storage.read_depth_png(args.depth)
        if depth16.shape != rgb8.shape[:2]:
            raise ShapeError(f"rgb {rgb8.shape[:2]} and depth {depth16.shape} are not aligned")
    rgb8 = storage.crop_to_grid(rgb8, "rgb input")
    sample = storage.SegSample(
        sample_id="cli",
        rgb=np.ascontiguousarray(rgb8.transpose(2, 0, 1).astype(np.float64) / 255.0),
        depth=(
            np.ascontiguousarray(storage.crop_to_grid(depth16, "depth input")[None].astype(np.float64) / 65535.0)
            if depth16 is not None
            else np.zeros((1, rgb8.shape[0], rgb8.shape[1]))
        ),
        labels=np.zeros(rgb8.shape[:2], dtype=np.uint8),
    )
    mask = training.predict_mask(net, sample)
    storage.write_mask_png(args.out, mask)
    print(f"mask={args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    if args.ops == "all":
        names = list(gradprobe.ALL_OPS)
    elif args.ops in gradprobe.known_ops():
        names = [args.ops]
    else:
        raise ConfigError(f"unknown op {args.ops!r}; choose all or one of {', '.join(gradprobe.known_ops())}")
    failures = []
    for name in names:
        err = gradprobe.run_op(name, args.trials, seed=args.seed)
        status = "ok" if err < gradprobe.TOLERANCE else "FAIL"
        print(f"op={name} max_rel_err={err:.3e} trials={args.trials} status={status}")
        if err >= gradprobe.TOLERANCE:
            failures.append(name)
    if failures:
        raise RoverSegError(f"gradient check failed for: {', '.join(failures)}")
    return 0


def cmd_bench(args) -> int:
    if args.frames < 1:
        raise ConfigError(f"--frames must be >= 1, got {args.frames}")
    net = storage.load_network(args.ckpt)
    samples = storage.load_split(args.data, args.split)
    for i in range(5):
        training.predict_mask(net, samples[i % len(samples)])
    times_ms = []
    for i in range(args.frames):
        s = samples[i % len(samples)]
        t0 = time.perf_counter()
        training.predict_mask(net, s)
        times_ms.append((time.perf_counter() - t0) * 1000.0)
    mean_ms = statistics.fmean(times_ms)
    median_ms = statistics.median(times_ms)
    print(f"frames={args.frames} mean_ms={mean_ms:.3f} median_ms={median_ms:.3f} fps={1000.0 / mean_ms:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="roverseg",
        description="Two-stage contrastive RGB-D obstacle segmentation on procedurally generated lunar scenes.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset split across the four scene presets")
    g.add_argument("--config", default=None, help="key=value config file (defaults used when omitted)")
    g.add_argument("--out", required=True, help="dataset root directory")
    g.add_argument("--seed", type=int, default=None, help="master seed (default: config seed)")
    g.add_argument("--per-preset", type=int, default=60, help="samples per preset (default 60)")
    g.add_argument("--split", default="train", help="split name to write (default train)")
    g.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train stage 1 (RGB) or stage 2 (RGB-D with contrastive alignment)")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True, help="training stage")
    t.add_argument("--data", required=True, help="dataset root directory")
    t.add_argument("--split", default="train", help="split to train on (default train)")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--init", default=None, help="stage-1 checkpoint (required for --stage 2)")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--seed", type=int, default=None, help="seed override (default: config seed)")
    t.add_argument("--no-contrast", action="store_true", help="stage 2 ablation: drop the contrastive term")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset root directory")
    e.add_argument("--split", default="test", help="split to evaluate (default test)")
    e.add_argument("--per-scenario", action="store_true", help="also report one block per preset tag")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a label mask for one RGB(-D) input")
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    i.add_argument("--rgb", required=True, help="input RGB png")
    i.add_argument("--depth", default=None, help="input 16-bit depth png (required for stage-2 checkpoints)")
    i.add_argument("--out", required=True, help="output mask png path")
    i.set_defaults(func=cmd_infer)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument(
        "--ops",
        default="all",
        help="'all' (= " + ", ".join(gradprobe.ALL_OPS) + ") or one op name; "
        "'negative_control' (never in 'all') must fail by design",
    )
    gc.add_argument("--trials", type=int, default=10, help="random points per op (default 10)")
    gc.add_argument("--seed", type=int, default=0, help="probe seed (default 0)")
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="inference timing over dataset frames")
    b.add_argument("--ckpt", required=True, help="checkpoint path")
    b.add_argument("--data", required=True, help="dataset root directory")
    b.add_argument("--split", default="test", help="split to draw frames from (default test)")
    b.add_argument("--frames", type=int, default=50, help="timed frames after 5 warm-ups (default 50)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RoverSegError as e:
        print(f"error={e.kind} detail={e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error=io detail={e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
