"""Variant x sequence length x window grid with a plain-text report."""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from stam.data.dataset import WINDOWS, TactileDataset
from stam.errors import DatasetFormatError
from stam.model.params import VARIANTS, StamParams, count_params
from stam.training.core import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

CLEAN, NOISY = "from_onset", "from_start"
BASELINE, FULL = "cnn-only", "full-stam"
DEFAULT_N = tuple(range(2, 8))
DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class AblationCell:
    variant: str
    n: int
    window: str
    seed: int
    accuracy: float = float("nan")
    train_accuracy: float = float("nan")
    params: int = 0
    epochs: int = 0
    seconds: float = 0.0
    config_hash: str = ""
    status: str = "ok"
    model: Optional[StamParams] = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def key(self) -> tuple:
        return self.variant, self.n, self.window, self.seed


_COLUMNS = [f.name for f in fields(AblationCell) if f.name != "model"]
_CASTS = {"n": int, "seed": int, "params": int, "epochs": int,
          "accuracy": float, "train_accuracy": float, "seconds": float}


@dataclass
class AblationReport:
    cells: list[AblationCell]

    @property
    def seeds(self) -> list[int]:
        return sorted({c.seed for c in self.cells})

    @property
    def completed(self) -> float:
        """Fraction of cells that trained and evaluated without error."""
        return float(np.mean([c.ok for c in self.cells])) if self.cells else 0.0

    def lookup(self, variant: str, n: int, window: str, seed: int) -> AblationCell:
        for cell in self.cells:
            if cell.key == (variant, n, window, seed):
                return cell
        raise KeyError((variant, n, window, seed))

    def accuracy(self, variant: str, n: int, window: str, seed: Optional[int] = None) -> float:
        """Test accuracy of one cell, or the mean over seeds when ``seed`` is None."""
        seeds = self.seeds if seed is None else [seed]
        values = [self.lookup(variant, n, window, s).accuracy for s in seeds]
        return float(np.mean(values))

    def n_values(self) -> list[int]:
        return sorted({c.n for c in self.cells})

    def write(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
            writer.writerow(_COLUMNS)
            for cell in self.cells:
                writer.writerow([repr(v) if isinstance(v, float) else v
                                 for v in (getattr(cell, name) for name in _COLUMNS)])

    @classmethod
    def read(cls, path) -> "AblationReport":
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle, delimiter="\t"))
        if not rows or rows[0] != _COLUMNS:
            raise DatasetFormatError(f"{path}: not an ablation report (header {rows[:1]})")
        cells = []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(_COLUMNS):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(_COLUMNS)} fields")
            values = {name: _CASTS.get(name, str)(raw) for name, raw in zip(_COLUMNS, row)}
            cells.append(AblationCell(**values))
        return cls(cells)


def gap_summary(report: AblationReport, seed: Optional[int] = None) -> dict:
    """Headline comparisons between full-stam and cnn-only.

    ``clean_gap`` and ``noisy_gap`` are the mean (full-stam - cnn-only)
    accuracy over n in each window; ``drop`` maps variant -> n -> the clean
    minus noisy accuracy. With ``seed=None`` cell values are seed means.
    """
    ns = report.n_values()
    gap = {w: [report.accuracy(FULL, n, w, seed) - report.accuracy(BASELINE, n, w, seed) for n in ns]
           for w in (CLEAN, NOISY)}
    drop = {v: {n: report.accuracy(v, n, CLEAN, seed) - report.accuracy(v, n, NOISY, seed) for n in ns}
            for v in (BASELINE, FULL)}
    clean_gap, noisy_gap = float(np.mean(gap[CLEAN])), float(np.mean(gap[NOISY]))
    return {
        "clean_gap": clean_gap,
        "noisy_gap": noisy_gap,
        "gap_increase": noisy_gap - clean_gap,
        "clean_gap_by_n": dict(zip(ns, gap[CLEAN])),
        "noisy_gap_by_n": dict(zip(ns, gap[NOISY])),
        "drop": drop,
    }


def format_summary(report: AblationReport) -> str:
    lines = []
    for seed in [None] + report.seeds:
        s = gap_summary(report, seed)
        tag = "mean" if seed is None else f"seed={seed}"
        lines.append(f"{tag}\tclean_gap={s['clean_gap']:.4f}\tnoisy_gap={s['noisy_gap']:.4f}"
                     f"\tgap_increase={s['gap_increase']:.4f}")
    return "\n".join(lines) + "\n"


def _run_cell(base: TrainConfig, dataset: TactileDataset, variant: str, n: int, window: str,
              seed: int, keep: bool = False) -> AblationCell:
    config = replace(base, variant=variant, n=n, window=window, seed=seed)
    cell = AblationCell(variant, n, window, seed, config_hash=config.digest())
    started = time.perf_counter()
    try:
        result = train(config, dataset)
        cell.accuracy = evaluate(result.params, dataset, "test", config)[0]
        cell.train_accuracy = evaluate(result.params, dataset, "train", config)[0]
        cell.params = count_params(result.params)
        cell.epochs = result.epochs_run
        if keep:
            cell.model = result.params
    except Exception as exc:  # a failed cell is reported, not fatal
        logger.warning("cell %s failed: %s", cell.key, exc)
        cell.status = f"failed: {type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " ")
    cell.seconds = time.perf_counter() - started
    return cell


_WORKER_STATE: dict = {}


def _init_worker(base: TrainConfig, dataset: TactileDataset) -> None:
    _WORKER_STATE["args"] = (base, dataset)


def _worker(job: tuple) -> AblationCell:
    key, keep = job
    return _run_cell(*_WORKER_STATE["args"], *key, keep=keep)


def thread_cap(default: Optional[int] = None) -> int:
    """Parallel cells allowed: ``STAM_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("STAM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer STAM_THREADS=%r", raw)
    return default or os.cpu_count() or 1


def run_ablation(base: TrainConfig, dataset: TactileDataset,
                 variants: Sequence[str] = VARIANTS,
                 n_values: Iterable[int] = DEFAULT_N,
                 windows: Sequence[str] = WINDOWS,
                 seeds: Sequence[int] = DEFAULT_SEEDS,
                 workers: Optional[int] = None,
                 progress: Optional[Callable[[AblationCell], None]] = None,
                 keep: Optional[Callable[[tuple], bool]] = None) -> AblationReport:
    """Train and test every (variant, n, window, seed) cell.

    Cells are independent and reproducible from their own config, so they may
    run in worker processes; the report keeps grid order either way. Cells
    whose key satisfies ``keep`` retain their trained parameters in ``model``.
    """
    keys = [(v, n, w, s) for v in variants for n in n_values for w in windows for s in seeds]
    workers = min(workers or thread_cap(), len(keys)) if keys else 1
    jobs = [(key, bool(keep and keep(key))) for key in keys]
    cells: list[AblationCell] = []
    if workers <= 1:
        for key, kept in jobs:
            cells.append(_run_cell(base, dataset, *key, keep=kept))
            if progress:
                progress(cells[-1])
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(base, dataset)) as pool:
            for cell in pool.map(_worker, jobs):
                cells.append(cell)
                if progress:
                    progress(cell)
    return AblationReport(cells)


