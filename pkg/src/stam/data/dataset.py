"""On-disk synthetic datasets: manifest, TSEQ1 frame files, index and window loading."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from stam.data.render import MOTIONS, RenderParams, SequenceSample, generate_sequence
from stam.data.texture import default_classes
from stam.errors import ConfigurationError, DatasetFormatError, ParameterError

logger = logging.getLogger(__name__)

TSEQ_MAGIC = b"TSEQ1"
SPLITS = ("train", "val", "test")
WINDOWS = ("from_onset", "from_start")
INDEX_NAME = "index.tsv"
MANIFEST_NAME = "manifest.json"
INDEX_HEADER = ("id", "label", "motion", "onset_index", "split", "path")


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    n_classes: int = 10
    sequences_per_class: int = 60
    frames_per_sequence: int = 12
    frame_size: tuple[int, int] = (32, 32)
    motion_mix: tuple[int, int, int] = (7, 1, 2)
    noise_prefix: tuple[int, int] = (1, 3)
    split_ratio: tuple[int, int, int] = (7, 2, 1)
    micro_noise: float = 0.1
    # indices into the default texture ladder used as labels 0..K-1; empty = the first K
    texture_classes: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("frame_size", "motion_mix", "noise_prefix", "split_ratio", "texture_classes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n_classes < 2 or self.sequences_per_class < 1:
            raise ConfigurationError("need >= 2 classes and >= 1 sequence per class")
        lo, hi = self.noise_prefix
        if not 0 <= lo <= hi < self.frames_per_sequence:
            raise ConfigurationError(
                f"noise prefix range {self.noise_prefix} must satisfy 0 <= a <= b < frames_per_sequence")
        if min(self.frame_size) < 16:
            raise ConfigurationError("frames must be at least 16x16")
        if len(self.motion_mix) != 3 or sum(self.motion_mix) <= 0 or min(self.motion_mix) < 0:
            raise ConfigurationError("motion_mix needs three non-negative weights")
        if len(self.split_ratio) != 3 or sum(self.split_ratio) <= 0 or min(self.split_ratio) < 0:
            raise ConfigurationError("split_ratio needs three non-negative weights")
        if self.texture_classes:
            if len(self.texture_classes) != self.n_classes:
                raise ConfigurationError("texture_classes must list exactly n_classes textures")
            if min(self.texture_classes) < 0 or len(set(self.texture_classes)) != self.n_classes:
                raise ConfigurationError("texture_classes must be distinct non-negative indices")

    @property
    def n_sequences(self) -> int:
        return self.n_classes * self.sequences_per_class

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def render_params(self) -> RenderParams:
        return RenderParams(frame_size=self.frame_size)

    def classes(self) -> list:
        """Texture class of each label."""
        ids = self.texture_classes or tuple(range(self.n_classes))
        ladder = default_classes(max(ids) + 1, micro_noise=self.micro_noise)
        return [ladder[i] for i in ids]


def _apportion(total: int, weights: Sequence[int]) -> list[int]:
    """Largest-remainder split of ``total`` into parts proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass(frozen=True)
class SequenceRecord:
    id: int
    label: int
    motion: str
    onset_index: int
    split: str
    path: str


def plan_sequences(manifest: DatasetManifest) -> list[tuple[SequenceRecord, int]]:
    """Labels, motions, onsets and splits for every sequence, plus per-sequence seeds.

    Split and motion counts are apportioned within each class, so splits are
    stratified by construction.
    """
    rng = np.random.default_rng([manifest.seed, 101])
    per_class = manifest.sequences_per_class
    split_counts = _apportion(per_class, manifest.split_ratio)
    motion_counts = _apportion(per_class, manifest.motion_mix)
    lo, hi = manifest.noise_prefix
    plan = []
    seq_id = 0
    for label in range(manifest.n_classes):
        splits = np.repeat(np.arange(3), split_counts)
        motions = np.repeat(np.arange(3), motion_counts)
        rng.shuffle(splits)
        rng.shuffle(motions)
        onsets = rng.integers(lo, hi + 1, size=per_class)
        for j in range(per_class):
            record = SequenceRecord(seq_id, label, MOTIONS[motions[j]], int(onsets[j]),
                                    SPLITS[splits[j]], f"frames/seq_{seq_id:05d}.tseq")
            seed = int(np.random.SeedSequence([manifest.seed, seq_id]).generate_state(1)[0])
            plan.append((record, seed))
            seq_id += 1
    return plan


def write_tseq(path, frames: np.ndarray, masks: np.ndarray) -> None:
    """TSEQ1: magic, H, W, n as uint32 LE, frames as float64 LE, masks as bytes."""
    frames = np.asarray(frames, dtype="<f8")
    if frames.ndim == 4:
        frames = frames[..., 0]
    n, height, width = frames.shape
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != frames.shape:
        raise DatasetFormatError(f"mask shape {masks.shape} != frame shape {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(TSEQ_MAGIC)
        fh.write(struct.pack("<III", height, width, n))
        fh.write(frames.tobytes(order="C"))
        fh.write(masks.astype(np.uint8).tobytes(order="C"))


def read_tseq(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns frames ``[n, H, W]`` float64 and masks ``[n, H, W]`` bool."""
    blob = Path(path).read_bytes()
    head = len(TSEQ_MAGIC) + 12
    if blob[: len(TSEQ_MAGIC)] != TSEQ_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    if len(blob) < head:
        raise DatasetFormatError(f"{path}: truncated header")
    height, width, n = struct.unpack("<III", blob[len(TSEQ_MAGIC):head])
    count = n * height * width
    if len(blob) != head + 9 * count:
        raise DatasetFormatError(f"{path}: expected {head + 9 * count} bytes, found {len(blob)}")
    frames = np.frombuffer(blob, dtype="<f8", count=count, offset=head).reshape(n, height, width)
    masks = np.frombuffer(blob, dtype=np.uint8, count=count, offset=head + 8 * count)
    return frames.astype(np.float64), masks.reshape(n, height, width).astype(bool)


def write_index(path, records: Iterable[SequenceRecord]) -> None:
    lines = ["\t".join(INDEX_HEADER)]
    for r in records:
        lines.append("\t".join(str(v) for v in (r.id, r.label, r.motion, r.onset_index, r.split, r.path)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_index(path) -> list[SequenceRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != INDEX_HEADER:
        raise DatasetFormatError(f"{path}: missing or unexpected header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(INDEX_HEADER):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(INDEX_HEADER)} fields")
        out.append(SequenceRecord(int(parts[0]), int(parts[1]), parts[2], int(parts[3]), parts[4], parts[5]))
    return out


def generate_dataset(manifest: DatasetManifest) -> "TactileDataset":
    """Render every sequence of ``manifest`` in memory."""
    classes = manifest.classes()
    params = manifest.render_params()
    plan = plan_sequences(manifest)
    frames, masks = [], []
    for record, seed in plan:
        sample = generate_sequence(classes[record.label], record.motion, manifest.frames_per_sequence,
                                   record.onset_index, seed, params)
        frames.append(sample.frame_array[..., 0])
        masks.append(sample.mask_array)
    return TactileDataset(manifest, [r for r, _ in plan], np.stack(frames), np.stack(masks))


def build_dataset(manifest: DatasetManifest, out_dir, overwrite: bool = False) -> Path:
    """Render every sequence of ``manifest`` into ``out_dir``.

    Writes ``manifest.json``, ``index.tsv`` and one TSEQ1 file per sequence.
    Refuses to write into a directory that already holds a dataset unless
    ``overwrite`` is set.
    """
    out = Path(out_dir)
    if (out / INDEX_NAME).exists() and not overwrite:
        raise FileExistsError(f"{out} already contains a dataset")
    data = generate_dataset(manifest)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, record in enumerate(data.records):
        write_tseq(out / record.path, data.frames[i], data.masks[i])
    write_index(out / INDEX_NAME, data.records)
    payload = {"manifest": manifest.to_dict(), "digest": manifest.digest()}
    (out / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d sequences to %s", len(data.records), out)
    return out


def read_manifest(dataset_dir) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    data = json.loads(path.read_text())
    return DatasetManifest.from_dict(data["manifest"])


@dataclass
class TactileDataset:
    """All sequences of a dataset held in memory."""

    manifest: DatasetManifest
    records: list[SequenceRecord]
    frames: np.ndarray   # [N, T, H, W]
    masks: np.ndarray    # [N, T, H, W] bool
    root: Optional[Path] = None
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {r.id: i for i, r in enumerate(self.records)}

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])

    @property
    def onsets(self) -> np.ndarray:
        return np.array([r.onset_index for r in self.records])

    def ids(self, split: Optional[str] = None) -> list[int]:
        return [r.id for r in self.records if split is None or r.split == split]

    def record(self, seq_id: int) -> SequenceRecord:
        return self.records[self._by_id[seq_id]]

    def row(self, seq_id: int) -> int:
        return self._by_id[seq_id]

    def window_start(self, seq_id: int, window: str) -> int:
        if window not in WINDOWS:
            raise ParameterError(f"window must be one of {WINDOWS}, got {window!r}")
        return self.record(seq_id).onset_index if window == "from_onset" else 0

    def windows(self, ids: Sequence[int], window: str, n: int):
        """Stacked windows for ``ids``: frames ``[B, n, H, W, 1]``, labels, masks, used ids.

        Sequences too short for the window are skipped and logged.
        """
        rows, starts, used = [], [], []
        total = self.frames.shape[1]
        for seq_id in ids:
            start = self.window_start(seq_id, window)
            if start + n > total:
                logger.warning("sequence %d: only %d frames from %d, need %d; skipped",
                               seq_id, total - start, start, n)
                continue
            rows.append(self.row(seq_id))
            starts.append(start)
            used.append(seq_id)
        if not rows:
            h, w = self.frames.shape[2:]
            return np.zeros((0, n, h, w, 1)), np.zeros(0, dtype=int), np.zeros((0, n, h, w), bool), []
        rows = np.asarray(rows)
        idx = np.asarray(starts)[:, None] + np.arange(n)[None, :]
        frames = self.frames[rows[:, None], idx][..., None]
        masks = self.masks[rows[:, None], idx]
        labels = np.array([self.records[r].label for r in rows])
        return frames, labels, masks, used


def load_dataset(dataset_dir) -> TactileDataset:
    root = Path(dataset_dir)
    if not (root / INDEX_NAME).exists():
        raise FileNotFoundError(f"no dataset index in {root}")
    manifest = read_manifest(root)
    records = read_index(root / INDEX_NAME)
    frames, masks = zip(*(read_tseq(root / r.path) for r in records))
    return TactileDataset(manifest, records, np.stack(frames), np.stack(masks), root)


def dataset_from_samples(samples: Sequence[SequenceSample], splits: Sequence[str],
                         manifest: Optional[DatasetManifest] = None) -> TactileDataset:
    """In-memory dataset from already generated sequences (no files involved)."""
    records = [SequenceRecord(i, s.label, s.motion, s.onset_index, split, "")
               for i, (s, split) in enumerate(zip(samples, splits))]
    frames = np.stack([s.frame_array[..., 0] for s in samples])
    masks = np.stack([s.mask_array for s in samples])
    return TactileDataset(manifest or DatasetManifest(), records, frames, masks)


def load_batch(index, ids: Sequence[int], window: str, n: int):
    """``(frames [n, H, W, 1], label)`` pairs for ``ids`` plus the list of skipped ids.

    ``index`` is a :class:`TactileDataset` or a dataset directory.
    """
    data = index if isinstance(index, TactileDataset) else load_dataset(index)
    frames, labels, _, used = data.windows(ids, window, n)
    skipped = [i for i in ids if i not in set(used)]
    return [(f, int(y)) for f, y in zip(frames, labels)], skipped
