"""Command-line interface: preprocess, train, infer, eval, plot, selftest, synth.

Exit codes: 0 success, 1 user error (bad input, config or data), 2 internal
error (including a diverged training run).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import evaluation as ev
from . import pipeline
from . import selftest
from . import synthetic

log = logging.getLogger("multistream3d")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are user errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="default", help="base configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration value, e.g. train.lr=0.001 (repeatable)")
    p.add_argument("--data-root", help=f"dataset root (default: data.root or ${pipeline.DATA_ENV})")
    p.add_argument("--cache", help="preprocessing cache root (default: data.cache_dir)")
    p.add_argument("--jobs", type=int, default=1, help="parallel frame workers")
    p.add_argument("--no-pillar", action="store_true", help="disable the pillar stream")
    p.add_argument("--no-hc", action="store_true", help="disable the height-compression stream")
    p.add_argument("--no-mm", action="store_true", help="disable the multimodal stream")
    p.add_argument("--no-rgb", action="store_true", help="use LiDAR only (no pseudo points)")
    p.add_argument("--allow-missing-pseudo", action="store_true", help="treat absent pseudo-point files as empty")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="multistream3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="build the per-frame voxel/pillar cache")
    _common(p)
    p.add_argument("--skip-missing", action="store_true", help="skip frames with missing files instead of failing")

    p = sub.add_parser("train", help="train and write checkpoint + loss log")
    _common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")

    p = sub.add_parser("infer", help="write KITTI-format detections and a latency log")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--frames", nargs="*", help="frame ids (default: the split)")

    p = sub.add_parser("eval", help="AP/AOS table and PR curves")
    _common(p)
    p.add_argument("--results", required=True, help="results directory from infer")
    p.add_argument("--labels", help="label directory (default: the dataset's label_2 for the split)")
    p.add_argument("--out", required=True, help="evaluation output directory")
    p.add_argument("--r11", action="store_true", help="11-point interpolation instead of 40-point")

    p = sub.add_parser("plot", help="redraw curve SVGs from an evaluation directory or a loss log")
    p.add_argument("--eval", dest="eval_dir", help="evaluation directory")
    p.add_argument("--loss", help="loss.csv from a training run")
    p.add_argument("--out", help="SVG path for --loss (default: next to the CSV)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(selftest.SUITES), help="run only these suites")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic KITTI-layout dataset with planted cars")
    p.add_argument("root")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    base = cfgmod.PRESETS[args.preset]()
    overrides = list(args.overrides)
    if args.data_root:
        overrides.append(f"data.root={args.data_root}")
    for flag, key in (("no_pillar", "use_pillar"), ("no_hc", "use_hc"), ("no_mm", "use_mm"), ("no_rgb", "use_rgb")):
        if getattr(args, flag):
            overrides.append(f"streams.{key}=false")
    if args.allow_missing_pseudo:
        overrides.append("data.allow_missing_pseudo=true")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"train.max_steps={args.steps}")
    if getattr(args, "r11", False):
        overrides.append("eval.r11=true")
    cfg = cfgmod.load_config(args.config, overrides, base)
    if not cfg.data.root and os.environ.get(pipeline.DATA_ENV):
        cfg.data.root = os.environ[pipeline.DATA_ENV]
    log.info("resolved configuration (hash %s):\n%s", cfg.hash(), cfg.dump())
    return cfg


def cmd_preprocess(args):
    cfg = resolve_config(args)
    rep = pipeline.preprocess(cfg, args.cache, args.skip_missing, args.jobs)
    print(f"cache {rep.directory}: built {len(rep.built)}, up to date {len(rep.skipped)}, missing {len(rep.missing)}")
    for fid, files in sorted(rep.missing.items()):
        print(f"  skipped {fid}: missing {', '.join(files)}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)

    def progress(step, total, loss):
        if step % 10 == 0 or step + 1 == total:
            log.info("step %d/%d loss %.6f", step + 1, total, loss)

    rep = pipeline.train(cfg, args.out, args.cache, args.resume, progress)
    print(f"trained {rep.steps} steps; checkpoint {rep.checkpoint}")
    return EXIT_OK


def cmd_infer(args):
    cfg = resolve_config(args)
    rows = pipeline.infer(cfg, args.checkpoint, args.out, args.frames, args.cache, args.jobs)
    total = sum(n for _, n, _ in rows)
    print(f"wrote {len(rows)} result files ({total} detections) to {os.path.join(args.out, 'data')}")
    return EXIT_OK


def cmd_eval(args):
    cfg = resolve_config(args)
    res = pipeline.evaluate(cfg, args.results, args.out, args.labels)
    print(ev.format_table(res))
    return EXIT_OK


def cmd_plot(args):
    if not args.eval_dir and not args.loss:
        raise pipeline.UserError("plot needs --eval and/or --loss")
    if args.eval_dir:
        for path in ev.plot_eval_dir(args.eval_dir):
            print(path)
    if args.loss:
        losses = pipeline.read_loss_log(args.loss)
        out = args.out or os.path.splitext(args.loss)[0] + ".svg"
        hi = max(losses) if losses else 1.0
        svg = ev.lines_svg([("loss", list(range(len(losses))), losses)], "training loss", "step", "loss",
                           (0.0, float(max(len(losses) - 1, 1))), (0.0, hi if hi > 0 else 1.0))
        with open(out, "w") as f:
            f.write(svg)
        print(out)
    return EXIT_OK


def cmd_selftest(args):
    rows = selftest.run(args.suite)
    print(selftest.format_report(rows))
    return EXIT_OK if all(ok for _, ok, _, _ in rows) else EXIT_USER


def cmd_synth(args):
    ids = synthetic.write_dataset(args.root, args.frames, args.seed)
    print(f"wrote {len(ids)} frames to {args.root}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "selftest": cmd_selftest,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (pipeline.UserError, cfgmod.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except pipeline.NaNLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # report, then signal an internal failure
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
