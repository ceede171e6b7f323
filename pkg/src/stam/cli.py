"""Command-line entry point: ``stam gen-data | train | ablate | explain``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 missing
prerequisite, 5 too many failed ablation cells.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from stam.config import RunConfig, load_config, with_overrides
from stam.data.dataset import INDEX_NAME, MANIFEST_NAME, build_dataset, load_dataset, read_manifest
from stam.errors import CheckpointError, ConfigurationError, DatasetFormatError
from stam.model.checkpoint import atomic_write, load_checkpoint, save_checkpoint
from stam.training.ablation import format_summary, run_ablation
from stam.training.core import evaluate, train

logger = logging.getLogger("stam")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_GRID = 0, 2, 3, 4, 5
LOCK_NAME = ".lock"
RESOLVED_NAME = "resolved.cfg"
CHECKPOINT_NAME = "checkpoint.stam"
MIN_COMPLETED = 0.9


class MissingPrerequisite(Exception):
    """An input the command depends on does not exist."""


class GridFailure(Exception):
    pass


@contextlib.contextmanager
def locked(directory: Path):
    """Hold ``directory/.lock`` for the duration of a command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _echo_config(config: RunConfig, directory: Path, extra: str = "") -> None:
    atomic_write(directory / RESOLVED_NAME, (config.render() + extra).encode())


def _dataset(config: RunConfig):
    root = Path(config.data_dir)
    if not (root / INDEX_NAME).exists() or not (root / MANIFEST_NAME).exists():
        raise MissingPrerequisite(f"no dataset at {root}; run 'stam gen-data' first")
    return load_dataset(root)


def cmd_gen_data(config: RunConfig) -> int:
    manifest = config.manifest()
    root = Path(config.data_dir)
    with locked(root):
        if (root / INDEX_NAME).exists() and (root / MANIFEST_NAME).exists():
            try:
                current = read_manifest(root).digest()
            except (DatasetFormatError, ValueError, TypeError, KeyError):
                current = None
            if current == manifest.digest():
                print(f"up-to-date: {root} (manifest {current})")
                return EXIT_OK
        build_dataset(manifest, root, overwrite=True)
    dataset = load_dataset(root)
    counts = {split: len(dataset.ids(split)) for split in ("train", "val", "test")}
    print(f"classes={manifest.n_classes} sequences={len(dataset.records)} "
          f"train={counts['train']} val={counts['val']} test={counts['test']} "
          f"manifest={manifest.digest()}")
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    dataset = _dataset(config)
    train_config = config.train_config()
    out = Path(config.out_dir)
    with locked(out):
        _echo_config(config, out, f"# dataset manifest {dataset.manifest.digest()}\n")
        result = train(train_config, dataset)
        save_checkpoint(result.params, out / CHECKPOINT_NAME)
        rows = ["epoch\ttrain_loss\ttrain_accuracy\tval_accuracy"]
        rows += [f"{m.epoch}\t{m.train_loss!r}\t{m.train_accuracy!r}\t{m.val_accuracy!r}"
                 for m in result.history]
        rows.append(f"# best_epoch={result.best_epoch} initial_loss={result.initial_loss!r}")
        atomic_write(out / "metrics.tsv", ("\n".join(rows) + "\n").encode())
        accuracy, confusion = evaluate(result.params, dataset, "test", train_config)
        table = "\n".join("\t".join(str(v) for v in row) for row in confusion) + "\n"
        atomic_write(out / "confusion.tsv", table.encode())
    print(f"test_accuracy={accuracy!r}")
    return EXIT_OK


def cmd_ablate(config: RunConfig) -> int:
    dataset = _dataset(config)
    out = Path(config.out_dir)
    with locked(out):
        _echo_config(config, out, f"# dataset manifest {dataset.manifest.digest()}\n")

        def progress(cell):
            logger.info("%s n=%d %s seed=%d acc=%.3f %s %.1fs", cell.variant, cell.n, cell.window,
                        cell.seed, cell.accuracy, cell.status, cell.seconds)

        report = run_ablation(config.train_config(), dataset, config.ablate_variants,
                              config.ablate_n, config.ablate_windows, config.ablate_seeds,
                              progress=progress)
        report.write(out / "ablation.tsv")
        try:
            summary = format_summary(report)
        except KeyError as exc:  # grid without both baseline and full model
            summary = f"no gap summary: missing cell {exc}\n"
        atomic_write(out / "summary.txt", summary.encode())
    sys.stdout.write(summary)
    done = report.completed
    print(f"cells={len(report.cells)} completed={done:.3f}")
    if done < MIN_COMPLETED:
        raise GridFailure(f"only {done:.0%} of cells completed")
    return EXIT_OK


def cmd_explain(config: RunConfig, checkpoint: Optional[str], sample: Optional[int]) -> int:
    from stam.explain import export_heatmap, format_inspection, grad_cam_all, inspect_temporal_attention

    dataset = _dataset(config)
    path = Path(checkpoint) if checkpoint else Path(config.out_dir) / CHECKPOINT_NAME
    if not path.exists():
        raise MissingPrerequisite(f"checkpoint {path} not found")
    params = load_checkpoint(path, requires_grad=False)
    sample = dataset.ids("test")[0] if sample is None else sample
    try:
        dataset.record(sample)
    except (KeyError, IndexError):
        raise MissingPrerequisite(f"sample {sample} not in dataset {config.data_dir}") from None
    n = params.config.n_frames
    frames, _, _, used = dataset.windows([sample], config.window, n)
    if not used:
        raise MissingPrerequisite(f"sample {sample} is shorter than the {config.window} window of {n}")
    sequence = frames[0]
    out = Path(config.out_dir) / f"explain_{sample:05d}"
    with locked(out):
        maps = grad_cam_all(params, sequence, config.target_class)
        for cam in maps:
            export_heatmap(cam.values, sequence[cam.frame_index], out / f"frame{cam.frame_index}_cam.pgm",
                           config.upscale)
        print(f"sample={sample} target_class={maps[0].target_class} frames={len(maps)}")
        if params.config.has_temporal:
            inspection = inspect_temporal_attention(params, sequence, config.query_token, config.top_k)
            text = format_inspection(inspection)
            atomic_write(out / "attention.tsv", text.encode())
            sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("gen-data", "generate the synthetic tactile dataset"),
                       ("train", "train one model and report test accuracy"),
                       ("ablate", "run the variant x length x window grid"),
                       ("explain", "Grad-CAM and attention inspection for one sample")]:
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", help="key = value config file (defaults apply when omitted)")
        cmd.add_argument("--out", help="output directory (for gen-data: the dataset directory)")
        cmd.add_argument("--seed", type=int, help="override the training seed")
        if name == "explain":
            cmd.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.stam)")
            cmd.add_argument("--sample", type=int, help="sequence id (default: first test sequence)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config) if args.config else RunConfig()
        target = "data_dir" if args.command == "gen-data" else "out_dir"
        config = with_overrides(config, seed=args.seed, **{target: args.out}).validate()
        if args.command == "gen-data":
            return cmd_gen_data(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "ablate":
            return cmd_ablate(config)
        return cmd_explain(config, args.checkpoint, args.sample)
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except GridFailure as exc:
        logger.error("%s", exc)
        return EXIT_GRID
    except (OSError, CheckpointError, DatasetFormatError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
