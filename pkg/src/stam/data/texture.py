"""Procedural fabric-like height maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from stam.errors import ParameterError


@dataclass(frozen=True)
class TextureClass:
    class_id: int
    weave_period_u: float
    weave_period_v: float
    ridge_amplitude: float = 1.0
    orientation: float = 0.0
    phase_jitter: float = 1.0
    micro_noise: float = 0.1

    def validate(self) -> None:
        if self.weave_period_u < 2 or self.weave_period_v < 2:
            raise ParameterError(
                f"weave periods must be >= 2 px, got {self.weave_period_u}, {self.weave_period_v}")
        for name in ("ridge_amplitude", "phase_jitter", "micro_noise"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")


# (u-period, v-period / u-period, orientation in multiples of pi/8); neighbouring
# entries are deliberately close so that classes are confusable frame by frame
_CLASS_GRID = [
    (3.0, 1.6, 0), (3.4, 1.6, 0), (4.0, 1.5, 2), (4.5, 1.5, 2), (5.2, 1.4, 4),
    (5.8, 1.4, 4), (6.6, 1.3, 6), (7.4, 1.3, 6), (3.7, 1.8, 1), (4.9, 1.8, 3),
    (6.2, 1.7, 5), (8.2, 1.3, 7), (3.2, 2.0, 3), (4.2, 2.0, 5), (5.5, 1.9, 7),
    (7.0, 1.6, 1),
]


def default_classes(k: int = 10, micro_noise: float = 0.1) -> list[TextureClass]:
    """``k`` texture classes with pairwise distinct period/orientation tuples.

    Beyond the 16 hand-spaced entries, periods continue on a geometric ladder.
    """
    out = []
    for i in range(k):
        if i < len(_CLASS_GRID):
            pu, ratio, octant = _CLASS_GRID[i]
        else:
            pu, ratio, octant = 3.0 * 1.07 ** (i - len(_CLASS_GRID) + 1), 1.5, i % 8
        out.append(TextureClass(class_id=i, weave_period_u=pu, weave_period_v=pu * ratio,
                                ridge_amplitude=1.0, orientation=octant * np.pi / 8,
                                phase_jitter=1.0, micro_noise=micro_noise))
    return out


def generate_texture(cls: TextureClass, size: tuple[int, int], seed: int) -> np.ndarray:
    """Height map in [0, 1]: two orthogonal oriented gratings plus a smooth noise field.

    The u grating dominates (weight 1 vs 0.6), which puts the strongest
    Fourier peak at spatial frequency 1 / weave_period_u along ``orientation``.
    Identical ``(cls, seed)`` always give identical maps.
    """
    cls.validate()
    height, width = size
    if height < 16 or width < 16:
        raise ParameterError(f"texture size must be at least 16x16, got {size}")
    rng = np.random.default_rng([int(seed), int(cls.class_id)])
    phase_u, phase_v = rng.uniform(0.0, 2.0 * np.pi, size=2) * cls.phase_jitter
    noise = rng.standard_normal((height, width))

    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    c, s = np.cos(cls.orientation), np.sin(cls.orientation)
    u = x * c + y * s
    v = -x * s + y * c
    weave = (np.sin(2 * np.pi * u / cls.weave_period_u + phase_u)
             + 0.6 * np.sin(2 * np.pi * v / cls.weave_period_v + phase_v)) / 1.6

    field = cls.ridge_amplitude * weave
    if cls.micro_noise > 0:
        smooth = gaussian_filter(noise, sigma=1.0, mode="wrap")
        smooth /= smooth.std()
        field = field + cls.micro_noise * smooth
    peak = np.abs(field).max()
    if peak > 1.0:
        field = field / peak
    return 0.5 + 0.5 * field
