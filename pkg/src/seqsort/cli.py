"""``seqsort`` command line: synth, mine, train, eval, ablate, export-filters, flow-dump.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluator, mining
from .config import ConfigError, load_config, write_resolved
from .flow import clip_flows, magnitude_to_u8
from .model import CheckpointFormatError, OrderNet, load_checkpoint, model_from_checkpoint, save_checkpoint
from .synth import ClipFormatError, SceneError, generate_clips, load_clip, save_clip
from .tensor import NumericError
from .trainer import Trainer, TrainLog

log = logging.getLogger("seqsort")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "SEQSORT_THREADS"


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _clip_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if (p / "meta.txt").is_file())
    if not dirs:
        raise FileNotFoundError(f"no clips found under {root}")
    return dirs


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = generate_clips(cfg.scene, args.seed, args.count, start_id=args.start_id, shortcut_hue=cfg.shortcut_hue)
    for c in clips:
        save_clip(c, out / f"clip_{c.clip_id:05d}")
    write_resolved(cfg, out)
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def cmd_mine(args, cfg) -> int:
    clips = [load_clip(d) for d in _clip_dirs(Path(args.clips))]
    samples = mining.mine_clips(clips, cfg.mining, args.seed, threads=args.threads,
                                limit=args.limit if args.limit is not None else cfg.max_tuples)
    if not samples:
        raise mining.MiningError("no tuples mined")
    path = mining.write_dataset(args.out, samples, cfg.mining)
    write_resolved(cfg, Path(args.out).parent)
    print(f"mined {len(samples)} tuples from {len(clips)} clips into {path}")
    return EXIT_OK


def _load_xy(path):
    _, samples = mining.read_dataset(path)
    return mining.stack_samples(samples)


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x, y = _load_xy(args.data)
    eval_data = _load_xy(args.heldout) if args.heldout else None
    if args.resume:
        if args.steps is not None:
            raise ConfigError("--steps cannot change the schedule of a resumed run")
        trainer = Trainer.from_checkpoint(load_checkpoint(args.resume))
    else:
        model_cfg = replace(cfg.model, n=x.shape[1], patch_size=x.shape[-1])
        tcfg = replace(cfg.train, seed=args.seed)
        if args.steps is not None:
            tcfg = replace(tcfg, total_steps=args.steps)
        trainer = Trainer(OrderNet(model_cfg, seed=args.seed), tcfg)
    start = trainer.step
    tlog = trainer.run(x, y, eval_data=eval_data, checkpoint_dir=out)
    log_path = out / "train_log.csv"
    if args.resume and log_path.exists():
        # keep the resumed run's history up to the checkpoint, then append
        prev = TrainLog.read_csv(log_path)
        keep = sum(1 for s in prev.steps if s < start)
        head = TrainLog(prev.steps[:keep], prev.lr[:keep], prev.loss[:keep], prev.train_acc[:keep],
                        [s for s in prev.eval_steps if s < start], prev.eval_acc[:sum(1 for s in prev.eval_steps if s < start)])
        head.extend(tlog)
        tlog = head
    tlog.write_csv(log_path)
    ckpt = save_checkpoint(out / "final.opnc", trainer.checkpoint())
    write_resolved(cfg, out)
    msg = f"trained to step {trainer.step}; final loss {tlog.loss[-1]:.4f}" if tlog.loss else "no steps run"
    if eval_data is not None:
        msg += f"; held-out order accuracy {evaluator.order_accuracy(trainer.model, *eval_data):.4f}"
    print(f"{msg}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lines = []
    if args.data:
        model = model_from_checkpoint(ckpt)
        acc = evaluator.order_accuracy(model, *_load_xy(args.data))
        lines.append(f"order_accuracy={acc:.6f}")
    if args.downstream:
        tcfg = replace(cfg.transfer, freeze_trunk=args.frozen)
        res = evaluator.downstream_transfer(ckpt, tcfg, cfg.scene, seed=args.seed)
        base = evaluator.downstream_transfer(None, tcfg, cfg.scene, seed=args.seed, model_cfg=ckpt.model_config())
        lines.append(f"downstream_accuracy={res.accuracy:.6f}")
        lines.append(f"downstream_random_init_accuracy={base.accuracy:.6f}")
    if not lines:
        raise ConfigError("eval needs --data and/or --downstream")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.txt").write_text(text)
        write_resolved(cfg, out)
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    default_levels = {
        "sampling_strategy": "random,motion,motion_direction",
        "channel_strategy": "split,swap,drop,gray,rgb",
        "jitter": "0,2,4",
        "head_type": "opn,concat",
        "tuple_length": "3,4,5",
        "patch_size": "24,32",
        "dataset_size": "1000,2500,5000",
    }
    levels = (args.levels or default_levels[args.axis]).split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    spec = evaluator.AblationSpec(args.axis, levels, seeds, args.metric, cfg)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    report = evaluator.run_ablation(spec, threads=args.threads)
    csv_path, _ = report.write(args.out)
    write_resolved(cfg, args.out)
    print(report.to_text(), end="")
    print(f"report written to {csv_path.parent}")
    return EXIT_IO if report.failed else EXIT_OK


def cmd_export_filters(args, cfg) -> int:
    path = evaluator.export_conv1_filters(load_checkpoint(args.checkpoint), args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_flow_dump(args, cfg) -> int:
    clip = load_clip(args.clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flows = clip_flows(clip.frames)
    scale = max(float(f.magnitude.max()) for f in flows) or 1.0
    for t, f in enumerate(flows):
        evaluator.write_pnm(out / f"flow_{t:03d}.pgm", magnitude_to_u8(f.magnitude, scale))
    np.save(out / "flow_uv.npy", np.stack([np.stack([f.u, f.v]) for f in flows]))
    print(f"wrote {len(flows)} flow magnitude images to {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="seqsort", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.add_argument("--config", help="sectioned key=value config file (defaults used if omitted)")
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker processes for parallel stages (default: ${THREADS_ENV} or 1)")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic clips")
    sp.add_argument("--out", required=True, help="output directory (one subdirectory per clip)")
    sp.add_argument("--count", type=int, default=64, help="number of clips")
    sp.add_argument("--start-id", type=int, default=0, help="first clip id (use disjoint ranges for held-out sets)")

    sp = add("mine", cmd_mine, "mine shuffled tuples from clips into a dataset file")
    sp.add_argument("--clips", required=True, help="directory written by 'synth'")
    sp.add_argument("--out", required=True, help="dataset file to write")
    sp.add_argument("--limit", type=int, default=None, help="maximum tuples (default: data.max_tuples)")

    sp = add("train", cmd_train, "train an order prediction network")
    sp.add_argument("--data", required=True, help="training dataset file")
    sp.add_argument("--heldout", help="held-out dataset file for evaluation")
    sp.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    sp.add_argument("--steps", type=int, default=None, help="total steps (default: train.total_steps)")
    sp.add_argument("--resume", help="checkpoint to resume from; its stored settings are used")

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="held-out dataset file for order accuracy")
    sp.add_argument("--downstream", action="store_true", help="also run downstream transfer vs random init")
    sp.add_argument("--frozen", action="store_true", help="freeze the transferred convolutional layers")
    sp.add_argument("--out", help="directory for eval.txt")

    sp = add("ablate", cmd_ablate, "run an ablation over one axis")
    sp.add_argument("--axis", required=True, choices=evaluator.ABLATION_AXES)
    sp.add_argument("--levels", help="comma-separated levels (default depends on the axis)")
    sp.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    sp.add_argument("--metric", default="order_acc", choices=evaluator.METRICS)
    sp.add_argument("--out", required=True, help="report directory")

    sp = add("export-filters", cmd_export_filters, "write conv1 filters as a PPM tile grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="image file (.ppm)")

    sp = add("flow-dump", cmd_flow_dump, "write optical-flow magnitude images for one clip")
    sp.add_argument("--clip", required=True, help="clip directory")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.threads is None:
            args.threads = default_threads()
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, SceneError) as e:
        print(f"seqsort: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, mining.DatasetFormatError, CheckpointFormatError, ClipFormatError, mining.MiningError) as e:
        print(f"seqsort: I/O or format error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"seqsort: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
