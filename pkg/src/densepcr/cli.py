"""``densepcr`` command line: datagen, train, eval, infer, upsample, inspect, selftest.

Exit codes: 0 success, 1 usage, 2 runtime failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, selftest
from .model import DensePCRModel, ModelConfig, dense_reconstruct, forward_pyramid
from .pointset import EMDConvergenceError
from .training import (LOG_HEADER, PHASES, CheckpointError, TrainConfig, TrainingDiverged, TrainState,
                       format_log_line, load_checkpoint, read_checkpoint_header, save_checkpoint,
                       train_phase)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 1, 2, 3
STAGE_FILES = ("stage1", "stage2", "stage3")

log = logging.getLogger("densepcr")


class UsageError(Exception):
    """Bad invocation detected after parsing (e.g. inputs that do not fit the checkpoint)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> _Parser:
    p = _Parser(prog="densepcr", description="Pyramidal single-view point cloud reconstruction.",
                allow_abbrev=False)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False)
        sp.add_argument("--config", type=Path, help="JSON file of flag defaults; explicit flags win")
        return sp

    sp = add("datagen", "render a synthetic dataset with ground-truth ladders")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--num-shapes", type=int, required=True)
    sp.add_argument("--base-n", type=int, default=256)
    sp.add_argument("--views", type=int, default=24)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train", "pretrain stages and fine-tune end to end")
    sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--stage", choices=("1", "2", "3", "all", "finetune"), default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split", choices=("train", "test", "all"), default="train")
    sp.add_argument("--iters", type=int, help="iteration count for every selected phase")
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--resume", type=Path, help="checkpoint to continue from")

    sp = add("eval", "score a checkpoint on a dataset split")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--out", type=Path, required=True, help="report path; .csv/.txt/.png siblings are added")
    sp.add_argument("--resolution", choices=metrics.RESOLUTIONS, default="dense")
    sp.add_argument("--views", type=_csv_ints, help="comma-separated view indices (default: all)")

    sp = add("infer", "reconstruct every hierarchy stage from one image")
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--ply", action="store_true", help="also write ASCII PLY files")
    sp.add_argument("--no-render", action="store_true", help="skip PNG scatter renders")

    sp = add("upsample", "run one dense reconstruction stage on a cloud file")
    sp.add_argument("--cloud", type=Path, required=True, help=".pcb or .ply input")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--stage", type=int, choices=(2, 3), required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--ply", action="store_true")
    sp.add_argument("--no-render", action="store_true")

    sp = add("inspect", "summarize a checkpoint")
    sp.add_argument("--checkpoint", type=Path, required=True)

    sp = add("selftest", "run the oracle suites")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _peek_config(argv) -> tuple[str | None, str | None]:
    """(subcommand, --config value) found by a plain scan, ahead of real parsing."""
    command = next((a for a in argv if not a.startswith("-")), None)
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if a.startswith("--config="):
            return command, a.split("=", 1)[1]
    return command, None


def parse_args(argv, parser=None) -> argparse.Namespace:
    """Parse ``argv``; values from a --config JSON file act as defaults under explicit flags."""
    parser = parser or build_parser()
    command, config = _peek_config(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if config is not None and command in subparsers:
        try:
            overrides = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("--config must hold a JSON object")
        sub = subparsers[command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("help", "config"):
                parser.error(f"--config key {key!r} is not a flag of {command}")
            action = known[dest]
            if isinstance(value, str) and action.type is not None:
                value = action.type(value)
            if action.choices is not None and value not in action.choices:
                parser.error(f"--config {key}: {value!r} not in {list(action.choices)}")
            defaults[dest] = value
            action.required = False  # satisfied by the file
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- commands

def _write_cloud(out: Path, stem: str, points, ply: bool) -> list[Path]:
    written = [out / f"{stem}.pcb"]
    data.write_pcb(written[0], points)
    if ply:
        written.append(out / f"{stem}.ply")
        data.write_ply(written[1], points)
    return written


def cmd_datagen(args) -> int:
    man = data.generate_dataset(args.out, args.num_shapes, base_n=args.base_n, views=args.views,
                                image_size=args.image_size, seed=args.seed)
    print(f"wrote {len(man.samples)} shapes to {args.out} "
          f"({len(man.ids('train'))} train / {len(man.ids('test'))} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import save_loss_curve

    man = data.load_manifest(args.data)
    if args.resume is not None:
        state, tcfg = load_checkpoint(args.resume)
        if tcfg.preset != args.preset:
            raise UsageError(f"--resume checkpoint uses preset {tcfg.preset!r}, not {args.preset!r}")
    else:
        tcfg = TrainConfig.from_preset(args.preset, seed=args.seed)
        state = None
    overrides = {}
    phases = PHASES if args.stage == "all" else (("finetune",) if args.stage == "finetune"
                                                 else (f"stage{args.stage}",))
    if args.iters is not None:
        overrides.update({f"{ph}_iters": args.iters for ph in phases})
    for flag in ("learning_rate", "batch_size", "checkpoint_every"):
        if getattr(args, flag) is not None:
            overrides[flag] = getattr(args, flag)
    tcfg = TrainConfig.from_dict({**tcfg.to_dict(), **overrides})

    model_cfg = ModelConfig.from_preset(args.preset)
    if man.meta["image_size"] != model_cfg.image_size or man.meta["base_n"] != model_cfg.base_n:
        raise UsageError(f"dataset has image size {man.meta['image_size']} and base N {man.meta['base_n']}; "
                         f"preset {args.preset} needs {model_cfg.image_size} and {model_cfg.base_n}")
    if state is None:
        state = TrainState.fresh(DensePCRModel.init(model_cfg, tcfg.seed))
    shapes = data.load_split(man, args.split)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint(st):
        phase = max(PHASES, key=lambda p: (st.phase_steps[p] > 0, PHASES.index(p)))
        save_checkpoint(out / f"ckpt_{phase}_{st.phase_steps[phase]:06d}.ckpt", st, tcfg)

    log_path = out / "loss.log"
    fresh_log = args.resume is None or not log_path.exists()
    with open(log_path, "w" if fresh_log else "a") as fh:
        if fresh_log:
            fh.write(LOG_HEADER + "\n")
        try:
            for phase in phases:
                state = train_phase(state, shapes, tcfg, phase, on_checkpoint=checkpoint, log_file=fh)
        except TrainingDiverged as exc:
            save_checkpoint(out / "diverged.ckpt", exc.state, tcfg)
            raise
    save_checkpoint(out / "model.ckpt", state, tcfg)
    history = [line.split() for line in log_path.read_text().splitlines()[1:]]
    history = [(h[0], int(h[1])) + tuple(float(x) for x in h[2:]) for h in history]
    if history:
        save_loss_curve(history, out / "loss.png")
    last = history[-1] if history else None
    print(f"trained {', '.join(phases)} -> {out / 'model.ckpt'}"
          + (f" (final loss {last[2]:.6g})" if last else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import save_report_figure

    state, _ = load_checkpoint(args.checkpoint)
    man = data.load_manifest(args.data)
    shapes = data.load_split(man, args.split)
    if not shapes:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    report = metrics.evaluate_dataset(state.model, shapes, args.resolution, views=args.views)
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.emit_report(report, out, "json")
    metrics.emit_report(report, out.with_suffix(".csv"), "csv")
    metrics.emit_report(report, out.with_suffix(".txt"), "table")
    save_report_figure(report, out.with_suffix(".png"))
    sys.stdout.write(metrics.report_table(report))
    return EXIT_OK


def cmd_infer(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    model = state.model
    img = data.read_ppm(args.image)
    size = model.cfg.image_size
    if img.shape != (3, size, size):
        raise UsageError(f"image is {img.shape[2]}x{img.shape[1]} but the checkpoint expects {size}x{size}")
    clouds = [c.data for c in forward_pyramid(img, model)]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for stem, pts in zip(STAGE_FILES, clouds):
        _write_cloud(out, stem, pts, args.ply)
    if not args.no_render:
        from .plotting import save_cloud_views, save_hierarchy

        for stem, pts in zip(STAGE_FILES, clouds):
            save_cloud_views(pts, out / f"{stem}.png", f"{stem} ({len(pts)} points)")
        save_hierarchy(clouds, out / "hierarchy.png", image=img)
    print(" ".join(f"{stem}:{len(p)}" for stem, p in zip(STAGE_FILES, clouds)) + f" -> {out}")
    return EXIT_OK


def cmd_upsample(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    model = state.model
    pts = data.read_ply(args.cloud) if args.cloud.suffix == ".ply" else data.read_pcb(args.cloud)
    expected = model.cfg.resolutions()[args.stage - 2]
    if len(pts) != expected:
        raise UsageError(f"stage {args.stage} expects {expected} input points, got {len(pts)}")
    dense = dense_reconstruct(pts, model, args.stage).data
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    stem = f"upsampled_stage{args.stage}"
    _write_cloud(out, stem, dense, args.ply)
    if not args.no_render:
        from .plotting import save_cloud_views

        save_cloud_views(dense, out / f"{stem}.png", f"stage {args.stage} ({len(dense)} points)")
    print(f"{len(pts)} -> {len(dense)} points -> {out / (stem + '.pcb')}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    header, _ = read_checkpoint_header(args.checkpoint)
    state, tcfg = load_checkpoint(args.checkpoint)
    model = state.model
    print(f"checkpoint   {args.checkpoint}")
    print(f"version      {header['version']}")
    print(f"preset       {model.cfg.preset}")
    print(f"config hash  {header['config_hash']}")
    print("phase steps  " + ", ".join(f"{p}={state.phase_steps[p]}" for p in PHASES))
    print(f"ladder       {'/'.join(str(n) for n in model.cfg.resolutions())}")
    for scope in ("encoder", "sparse_decoder", "dense_stage2", "dense_stage3", "total"):
        print(f"params {scope:<15} {model.count_params(scope):>12,}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    ok = selftest.run(seed=args.seed, echo=lambda line: print(line, flush=True))
    print("selftest " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "upsample": cmd_upsample, "inspect": cmd_inspect, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"densepcr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, EMDConvergenceError, FloatingPointError) as exc:
        print(f"densepcr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CheckpointError, data.DatasetError, OSError, ValueError) as exc:
        print(f"densepcr {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
