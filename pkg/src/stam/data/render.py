"""GelSight-like frame rendering, sequence generation and contact-onset detection."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from stam.data.texture import TextureClass, generate_texture
from stam.errors import ParameterError

MOTIONS = ("press", "slip", "twist")
# lateral slip directions; axis-aligned so per-frame offsets stay whole pixels
_SLIP_DIRECTIONS = ((1, 0), (0, 1), (-1, 0), (0, -1))


@dataclass(frozen=True)
class RenderParams:
    """Sensor and motion model. Lengths are in pixels of a 32x32 frame and scale with it."""

    frame_size: tuple[int, int] = (32, 32)
    background_level: float = 0.35
    illumination: float = 0.10        # left-to-right brightness ramp of the idle gel
    sensor_noise: float = 0.01        # Gaussian noise everywhere
    contact_noise: float = 0.12       # extra per-frame noise inside the contact patch
    contact_gain: float = 0.45        # texture contrast inside the contact patch
    press_shade: float = 0.25         # dome brightening from indentation depth
    radius_start: float = 7.0
    radius_growth: float = 2.0
    radius_max: float = 15.0
    center_jitter: float = 5.0
    slip_velocity: int = 2
    twist_step_deg: float = 5.0
    marker_spacing: int = 8
    marker_depth: float = 0.3

    @property
    def scale(self) -> float:
        return min(self.frame_size) / 32.0

    def radius(self, t: int) -> float:
        return min(self.radius_max, self.radius_start + self.radius_growth * t) * self.scale


@dataclass
class SequenceSample:
    frames: list[np.ndarray]          # each [H, W, 1] in [0, 1]
    label: int
    motion: str
    onset_index: int
    contact_masks: list[np.ndarray]   # each [H, W] bool

    def __post_init__(self):
        if not 0 <= self.onset_index < len(self.frames):
            raise ParameterError("onset_index must index a frame")

    @property
    def frame_array(self) -> np.ndarray:
        return np.stack(self.frames)

    @property
    def mask_array(self) -> np.ndarray:
        return np.stack(self.contact_masks)


def _marker_mask(height: int, width: int, spacing: int) -> np.ndarray:
    y, x = np.mgrid[0:height, 0:width]
    off = spacing // 2
    return ((y % spacing == off) & (x % spacing == off))


def idle_frame(params: RenderParams = RenderParams()) -> np.ndarray:
    """Noise-free image of the unloaded sensor, ``[H, W]``."""
    height, width = params.frame_size
    ramp = np.linspace(-0.5, 0.5, width)[None, :] * params.illumination
    base = np.full((height, width), params.background_level) + ramp
    spacing = max(2, int(round(params.marker_spacing * params.scale)))
    base = np.where(_marker_mask(height, width, spacing), base * (1 - params.marker_depth), base)
    return base


def render_contact_frame(heightmap: np.ndarray, motion: str, t: int,
                         params: RenderParams = RenderParams(),
                         center: Optional[tuple[float, float]] = None,
                         slip_direction: tuple[int, int] = (1, 0),
                         rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Render contact step ``t`` (0 = first contact frame).

    ``heightmap`` is a texture canvas at least as large as the frame; the
    frame window is taken around the canvas centre. Returns the frame
    ``[H, W, 1]`` clipped to [0, 1] and the boolean contact mask ``[H, W]``.
    """
    if t < 0:
        raise ParameterError("contact step t must be >= 0")
    if motion not in MOTIONS:
        raise ParameterError(f"motion must be one of {MOTIONS}, got {motion!r}")
    height, width = params.frame_size
    ch, cw = heightmap.shape
    if ch < height or cw < width:
        raise ParameterError("heightmap canvas smaller than the frame")
    rng = rng if rng is not None else np.random.default_rng(0)
    cy, cx = center if center is not None else ((height - 1) / 2.0, (width - 1) / 2.0)

    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    radius = params.radius(t)
    dist2 = (y - cy) ** 2 + (x - cx) ** 2
    mask = dist2 <= radius ** 2

    # frame pixel -> canvas coordinate for the current motion
    oy, ox = (ch - height) / 2.0, (cw - width) / 2.0
    sy, sx = y, x
    if motion == "slip":
        dx, dy = slip_direction
        sx = x + dx * params.slip_velocity * t
        sy = y + dy * params.slip_velocity * t
    elif motion == "twist":
        angle = np.deg2rad(params.twist_step_deg * t)
        c, s = np.cos(angle), np.sin(angle)
        sx = cx + c * (x - cx) - s * (y - cy)
        sy = cy + s * (x - cx) + c * (y - cy)
    texture = map_coordinates(heightmap, [sy + oy, sx + ox], order=1, mode="reflect")

    idle = idle_frame(params)
    lighting = 1.0 + params.illumination * np.linspace(-1.0, 1.0, width)[None, :]
    dome = np.clip(1.0 - dist2 / max(radius ** 2, 1e-9), 0.0, 1.0)
    contact = (params.press_shade * dome
               + params.contact_gain * lighting * (texture - 0.5)
               + params.contact_noise * rng.standard_normal((height, width)))
    frame = idle + np.where(mask, contact, 0.0)
    frame = frame + params.sensor_noise * rng.standard_normal((height, width))
    return np.clip(frame, 0.0, 1.0)[..., None], mask


def noise_frame(params: RenderParams, rng: np.random.Generator) -> np.ndarray:
    """Pre-contact frame: idle sensor plus sensor noise, ``[H, W, 1]``."""
    height, width = params.frame_size
    frame = idle_frame(params) + params.sensor_noise * rng.standard_normal((height, width))
    return np.clip(frame, 0.0, 1.0)[..., None]


def canvas_size(params: RenderParams) -> tuple[int, int]:
    height, width = params.frame_size
    return 3 * height, 3 * width


def generate_sequence(cls: TextureClass, motion: str, n_total: int, noise_prefix: int, seed: int,
                      params: RenderParams = RenderParams()) -> SequenceSample:
    """``noise_prefix`` idle frames followed by ``n_total - noise_prefix`` contact frames."""
    if not 0 <= noise_prefix < n_total:
        raise ParameterError(f"need 0 <= noise_prefix < n_total, got {noise_prefix}, {n_total}")
    rng = np.random.default_rng([int(seed), 7919])
    heightmap = generate_texture(cls, canvas_size(params), seed)
    height, width = params.frame_size
    jitter = params.center_jitter * params.scale
    center = ((height - 1) / 2.0 + rng.uniform(-jitter, jitter),
              (width - 1) / 2.0 + rng.uniform(-jitter, jitter))
    direction = _SLIP_DIRECTIONS[rng.integers(len(_SLIP_DIRECTIONS))]
    frames, masks = [], []
    for i in range(n_total):
        if i < noise_prefix:
            frames.append(noise_frame(params, rng))
            masks.append(np.zeros((height, width), dtype=bool))
        else:
            frame, mask = render_contact_frame(heightmap, motion, i - noise_prefix, params,
                                               center=center, slip_direction=direction, rng=rng)
            frames.append(frame)
            masks.append(mask)
    return SequenceSample(frames, cls.class_id, motion, noise_prefix, masks)


def frame_energy(frames, background: Optional[np.ndarray] = None,
                 params: RenderParams = RenderParams()) -> np.ndarray:
    """Mean absolute deviation of each frame from the idle sensor image."""
    arr = np.asarray([np.asarray(f, dtype=np.float64).reshape(np.shape(f)[:2]) for f in frames])
    if background is None:
        background = idle_frame(replace(params, frame_size=arr.shape[1:3]))
    return np.abs(arr - background[None]).mean(axis=(1, 2))


def detect_first_contact(frames: Sequence, tau: float = 0.018, background: Optional[np.ndarray] = None,
                         params: RenderParams = RenderParams()) -> int:
    """Index of the first frame whose deviation from the idle sensor exceeds ``tau``.

    Returns ``len(frames)`` when no frame crosses the threshold. ``background``
    defaults to the noise-free idle image for the frames' size.
    """
    if len(frames) == 0:
        raise ParameterError("need at least one frame")
    energy = frame_energy(frames, background, params)
    hits = np.flatnonzero(energy > tau)
    return int(hits[0]) if hits.size else len(frames)
