"""Command-line driver: ``sparselstm <command> [flags]``.

Commands write delimited text to stdout (and to ``--out`` files) and, where a
report has a natural picture, a PNG next to it.
"""

from __future__ import annotations

import os
import sys

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("SSD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import dataclasses  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, RunConfig, dump_config, load_config, parse_config  # noqa: E402
from .data import (SequenceFormatError, dataset_paths, generate_dataset,  # noqa: E402
                   read_sequence, write_dataset, write_sequence)
from .evaltrack import evaluate, track_sequence  # noqa: E402
from .net import MODES, DetectorModel  # noqa: E402
from .ops.checkpoint import CheckpointError, load_arrays, save_arrays  # noqa: E402


class CliError(Exception):
    """Failure reported as one line on stderr with exit status 1."""


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    model, scene, train = cfg.model, cfg.scene, cfg.train
    if getattr(args, "mode", None):
        model = dataclasses.replace(model, mode=args.mode)
    if getattr(args, "frames", None) is not None:
        if args.command == "gen-data":
            scene = dataclasses.replace(scene, frames=args.frames)
        else:
            model = dataclasses.replace(model, frames=args.frames)
    if getattr(args, "seed", None) is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        train = dataclasses.replace(train, steps=args.steps)
    ev = cfg.eval
    if getattr(args, "iou", None) is not None:
        ev = dataclasses.replace(ev, iou_threshold=args.iou)
    return dataclasses.replace(cfg, model=model, scene=scene, train=train, eval=ev)


def _load_split(data: str | None, cfg: RunConfig, split: str):
    if data is None:
        raise CliError("--data is required")
    paths = dataset_paths(data)
    if not paths:
        raise CliError(f"no sequence files in {data}")
    seqs = [read_sequence(p) for p in paths]
    held = min(cfg.dataset.held_out, len(seqs))
    cut = len(seqs) - held
    if split == "train":
        chosen = list(zip(paths, seqs))[:cut]
    elif split == "held-out":
        chosen = list(zip(paths, seqs))[cut:]
    else:
        chosen = list(zip(paths, seqs))
    if not chosen:
        raise CliError(f"split '{split}' of {data} is empty")
    return chosen


def _sidecar(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".ini")


def _load_model(args, cfg: RunConfig) -> tuple[DetectorModel, RunConfig]:
    if args.checkpoint is None:
        raise CliError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    side = _sidecar(ckpt)
    if side.is_file():
        # the model shape comes from training; eval settings stay with the caller
        trained = parse_config(side.read_text())
        cfg = dataclasses.replace(cfg, model=trained.model)
    model = DetectorModel(cfg.model)
    try:
        model.load_arrays(load_arrays(ckpt))
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint does not fit the model: {exc}") from None
    return model, cfg


def _emit(text: str, out: Path | None) -> None:
    sys.stdout.write(text)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.out is None:
        raise CliError("--out is required")
    seqs = generate_dataset(cfg.scene, cfg.dataset.count)
    for i, s in enumerate(seqs):
        s.name = f"seed{cfg.scene.seed + i}"
    paths = write_dataset(args.out, seqs)
    (Path(args.out) / "config.ini").write_text(dump_config(cfg))
    for p in paths:
        print(p)
    return 0


def cmd_train(args) -> int:
    from .report import plot_training
    from .train import train

    cfg = _config(args)
    if args.checkpoint is None:
        raise CliError("--checkpoint is required")
    seqs = [s for _, s in _load_split(args.data, cfg, "train")]
    model = DetectorModel(cfg.model, seed=cfg.train.seed)
    out = Path(args.out) if args.out else None
    log_file = out.open("w") if out else None

    def line(text):
        print(text, flush=True)
        if log_file:
            log_file.write(text + "\n")

    try:
        result = train(model, seqs, cfg.train, on_line=line)
    except FloatingPointError as exc:
        raise CliError(str(exc)) from None
    finally:
        if log_file:
            log_file.close()
    ckpt = Path(args.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_arrays(ckpt, model.state_arrays())
    _sidecar(ckpt).write_text(dump_config(cfg))
    if out is not None and result.log:
        plot_training(result.log, out.with_suffix(".png"))
    return 0


def cmd_infer(args) -> int:
    from .train import infer_sequences

    cfg = _config(args)
    if args.out is None:
        raise CliError("--out is required")
    model, cfg = _load_model(args, cfg)
    chosen = _load_split(args.data, cfg, args.split)
    dets = infer_sequences(model, [s for _, s in chosen])
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    for (path, seq), per_frame in zip(chosen, dets):
        for frame, d in zip(seq.frames, per_frame):
            frame.detections = d
        target = root / path.name
        write_sequence(seq, target)
        print(f"{target}, {sum(len(d) for d in per_frame)}")
    return 0


def _stored_detections(chosen, last_frame: bool):
    dets, gts, counts = [], [], []
    for path, seq in chosen:
        frames = seq.frames[-1:] if last_frame else seq.frames
        for f in frames:
            if f.detections is None:
                raise CliError(f"{path}: frames carry no detections (run infer or track first)")
            dets.append(f.detections)
            gts.append(f.gt_boxes)
            counts.append(f.gt_counts)
    return dets, gts, counts


def cmd_eval(args) -> int:
    from .report import plot_pr_curves

    cfg = _config(args)
    if args.checkpoint is not None:
        model, cfg = _load_model(args, cfg)
        from .train import infer_sequences
        chosen = _load_split(args.data, cfg, args.split)
        per_seq = infer_sequences(model, [s for _, s in chosen])
        for (_, seq), per_frame in zip(chosen, per_seq):
            for frame, d in zip(seq.frames, per_frame):
                frame.detections = d
    else:
        chosen = _load_split(args.data, cfg, args.split)
    dets, gts, counts = _stored_detections(chosen, args.last_frame)
    try:
        res = evaluate(dets, gts, cfg.eval, counts)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out) if args.out else None
    _emit(res.report(iou=cfg.eval.iou_threshold, frames=len(dets), sequences=len(chosen)),
          out / "eval.txt" if out else None)
    if out is not None:
        (out / "pr.csv").write_text(res.pr_rows())
        plot_pr_curves({"detections": res}, out / "pr.png", cfg.eval.iou_threshold)
    return 0


def cmd_track(args) -> int:
    cfg = _config(args)
    if args.out is None:
        raise CliError("--out is required")
    chosen = _load_split(args.data, cfg, args.split)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    for path, seq in chosen:
        raw = [f.detections for f in seq.frames]
        if any(d is None for d in raw):
            raise CliError(f"{path}: frames carry no detections (run infer first)")
        result = track_sequence(raw, cfg.tracker)
        for frame, d in zip(seq.frames, result.frames):
            frame.detections = d
        target = root / path.name
        write_sequence(seq, target)
        tracks = len({i for ids in result.track_ids for i in ids})
        print(f"{target}, {tracks}")
    return 0


def cmd_gradcheck(args) -> int:
    from .diagnostics import corrupt_gradients, run_gradchecks

    seed = 0 if args.seed is None else args.seed
    results = run_gradchecks(seed, pipeline=not args.primitives_only,
                             corrupt=corrupt_gradients if args.corrupt_grad else None)
    text = "check, max_rel_error, tolerance, status\n" + "".join(r.line + "\n" for r in results)
    _emit(text, Path(args.out) if args.out else None)
    failed = [r.name for r in results if not r.report.passed]
    if failed:
        print(f"error: gradient check failed for {len(failed)} of {len(results)} graphs",
              file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    from .diagnostics import bench_csv, bench_rows
    from .report import plot_cell_counts

    cfg = _config(args)
    rows = bench_rows(cfg.scene, cfg.model, args.count, frames=args.scene_frames,
                      seed=cfg.train.seed)
    out = Path(args.out) if args.out else None
    _emit(bench_csv(rows), out / "bench.csv" if out else None)
    if out is not None and rows:
        plot_cell_counts(rows, out / "bench.png")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="overrides scene and training seeds")
    common.add_argument("--out", help="output file or directory")

    p = argparse.ArgumentParser(prog="sparselstm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text, *flags):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(fn=fn)
        for f in flags:
            f(sp)
        return sp

    def frames(sp):
        sp.add_argument("--frames", type=int, help="frames per clip (gen-data) or per model input")

    def mode(sp):
        sp.add_argument("--mode", choices=MODES)

    def data(sp):
        sp.add_argument("--data", help="directory of sequence files")

    def ckpt(sp):
        sp.add_argument("--checkpoint", help="model parameter file")

    def split(sp):
        sp.add_argument("--split", choices=("train", "held-out", "all"), default="held-out")

    def steps(sp):
        sp.add_argument("--steps", type=int, help="training steps")

    def iou(sp):
        sp.add_argument("--iou", type=float, help="IoU threshold for a true positive")

    add("gen-data", cmd_gen_data, "write a synthetic dataset", frames)
    add("train", cmd_train, "train a detector", frames, mode, data, ckpt, steps)
    add("infer", cmd_infer, "attach detections to sequences", frames, mode, data, ckpt, split)
    ev = add("eval", cmd_eval, "mAP report, PR table and PR figure", frames, mode, data, ckpt,
             split, iou)
    ev.add_argument("--last-frame", action="store_true", help="score only each clip's final frame")
    add("track", cmd_track, "refine stored detections with the tracker", data, split)
    gc = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    gc.add_argument("--corrupt-grad", action="store_true",
                    help="test hook: perturb analytic gradients (must fail)")
    gc.add_argument("--primitives-only", action="store_true", help="skip the end-to-end check")
    bn = add("bench", cmd_bench, "occupied cells per frame by input mode", mode)
    bn.add_argument("--count", type=int, default=5, help="benchmark scenes")
    bn.add_argument("--scene-frames", type=int, default=8, help="frames per benchmark scene")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, SequenceFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
