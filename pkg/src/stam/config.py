"""Plain-text run configuration: one ``key = value`` per line, ``#`` starts a comment."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from stam.data.dataset import DatasetManifest
from stam.errors import ConfigurationError
from stam.training.core import TrainConfig


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.replace(",", " ").split())


def _strs(raw: str) -> tuple[str, ...]:
    return tuple(part for part in raw.replace(",", " ").split())


def _opt_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("auto", "none", "") else int(raw)


def _show(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _key(default, parse, doc: str):
    return field(default=default, metadata={"parse": parse, "doc": doc})


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str = _key("data", str, "dataset directory (written by gen-data, read by the rest)")
    out_dir: str = _key("runs", str, "output directory for train / ablate / explain")
    # dataset
    data_seed: int = _key(0, int, "seed of the synthetic dataset")
    n_classes: int = _key(10, int, "texture classes")
    sequences_per_class: int = _key(60, int, "sequences generated per class")
    frames_per_sequence: int = _key(12, int, "frames per stored sequence, noise prefix included")
    frame_size: tuple = _key((32, 32), _ints, "frame height, width")
    motion_mix: tuple = _key((7, 1, 2), _ints, "press, slip, twist weights")
    noise_prefix: tuple = _key((1, 3), _ints, "inclusive range of pre-contact frames")
    split_ratio: tuple = _key((7, 2, 1), _ints, "train, val, test weights")
    micro_noise: float = _key(0.1, float, "texture micro-noise amplitude")
    texture_classes: tuple = _key((), _ints, "texture ladder indices used as classes (empty = first n_classes)")
    # model
    variant: str = _key("full-stam", str, "cnn-only, cnn+spatial or full-stam")
    n_heads: int = _key(10, int, "temporal attention heads")
    head_dim: Optional[int] = _key(None, _opt_int, "query/key width; auto = channels // 2")
    widths: tuple = _key((8, 16, 32), _ints, "backbone channel widths")
    hidden: tuple = _key((), _ints, "hidden classifier layer sizes (empty = linear)")
    # training
    seed: int = _key(0, int, "training seed (initial weights, shuffle order)")
    n: int = _key(4, int, "frames per input window")
    window: str = _key("from_onset", str, "from_onset (clean) or from_start (noisy prefix)")
    lr: float = _key(0.01, float, "learning rate")
    momentum: float = _key(0.9, float, "SGD momentum")
    batch_size: int = _key(16, int, "sequences per step")
    epochs: int = _key(60, int, "maximum epochs")
    patience: int = _key(10, int, "early stop after this many epochs without validation gain")
    # ablation
    ablate_variants: tuple = _key(("cnn-only", "cnn+spatial", "full-stam"), _strs, "grid variants")
    ablate_n: tuple = _key((2, 3, 4, 5, 6, 7), _ints, "grid window lengths")
    ablate_windows: tuple = _key(("from_onset", "from_start"), _strs, "grid window modes")
    ablate_seeds: tuple = _key((0, 1, 2), _ints, "grid training seeds")
    # explain
    query_token: int = _key(0, int, "token whose attention row is inspected")
    top_k: int = _key(3, int, "most attended tokens to report")
    upscale: int = _key(8, int, "nearest-neighbour upscale of saliency PGMs")
    target_class: Optional[int] = _key(None, _opt_int, "class explained by Grad-CAM; auto = predicted")

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            seed=self.data_seed, n_classes=self.n_classes,
            sequences_per_class=self.sequences_per_class,
            frames_per_sequence=self.frames_per_sequence, frame_size=self.frame_size,
            motion_mix=self.motion_mix, noise_prefix=self.noise_prefix,
            split_ratio=self.split_ratio, micro_noise=self.micro_noise,
            texture_classes=self.texture_classes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, n=self.n, window=self.window,
                           variant=self.variant, n_heads=self.n_heads, patience=self.patience,
                           widths=self.widths, head_dim=self.head_dim, hidden=self.hidden)

    def validate(self) -> "RunConfig":
        """Raise :class:`ConfigurationError` if any derived config is invalid."""
        self.manifest()
        self.train_config()
        return self

    def render(self) -> str:
        """The fully resolved configuration in the same ``key = value`` syntax."""
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_show(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


KEYS = {f.name: f for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text; unknown or repeated keys and bad values are errors with line numbers."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: {key!r} given twice")
        try:
            values[key] = KEYS[key].metadata["parse"](raw)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def with_overrides(config: RunConfig, **changes) -> RunConfig:
    """Copy of ``config`` with the non-None ``changes`` applied."""
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
