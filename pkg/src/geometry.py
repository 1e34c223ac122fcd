"""Polar grid geometry and the object location similarity (OLS) kernel."""
import math
import logging
from dataclasses import dataclass
from typing import Tuple, Union

from .errors import ConfigError, DataError
from .radar_data import ObjectAnnotation, Detection, DEFAULT_CLASSES

logger = logging.getLogger(__name__)

PointLike = Union[Detection, ObjectAnnotation]

DEFAULT_KAPPA = (0.5, 0.7, 1.0)


@dataclass(frozen=True)
class PolarGrid:
    """Range-azimuth grid extents.

    Bins use a start-of-bin convention: index i maps to ``min + i * (max - min) / grid_size``
    for range, and azimuth bin ``grid_size // 2`` is boresight.
    """
    range_min: float = 1.0
    range_max: float = 25.0
    azimuth_min: float = -math.pi / 3
    azimuth_max: float = math.pi / 3
    grid_size: int = 128

    def __post_init__(self):
        if not self.range_max > self.range_min >= 0:
            raise ConfigError(f"PolarGrid needs range_max > range_min >= 0, got [{self.range_min}, {self.range_max}]")
        if not math.isclose(self.azimuth_min, -self.azimuth_max, abs_tol=1e-12) or self.azimuth_max <= 0:
            raise ConfigError(f"PolarGrid azimuth bounds must be symmetric about 0, got "
                              f"[{self.azimuth_min}, {self.azimuth_max}]")
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be >= 2, got {self.grid_size}")

    @property
    def range_step(self) -> float:
        return (self.range_max - self.range_min) / self.grid_size

    @property
    def azimuth_step(self) -> float:
        return (self.azimuth_max - self.azimuth_min) / self.grid_size

    def range_of(self, range_idx: float) -> float:
        return self.range_min + range_idx * self.range_step

    def azimuth_of(self, azimuth_idx: float) -> float:
        return (azimuth_idx - self.grid_size // 2) * self.azimuth_step

    def check_index(self, range_idx: float, azimuth_idx: float) -> None:
        if not (0 <= range_idx <= self.grid_size - 1 and 0 <= azimuth_idx <= self.grid_size - 1):
            raise DataError(f"grid index ({range_idx}, {azimuth_idx}) outside grid of size {self.grid_size}")


@dataclass(frozen=True)
class OlsParams:
    """Per-class localisation tolerance."""
    kappa: Tuple[float, ...] = DEFAULT_KAPPA

    def __post_init__(self):
        kappa = tuple(float(k) for k in self.kappa)
        if not kappa or any(k <= 0 for k in kappa):
            raise ConfigError(f"every kappa must be positive, got {kappa}")
        object.__setattr__(self, 'kappa', kappa)

    def for_class(self, class_id: int) -> float:
        if not 0 <= class_id < len(self.kappa):
            raise DataError(f"no kappa configured for class {class_id}")
        return self.kappa[class_id]

    @classmethod
    def from_mapping(cls, table: dict, classes=DEFAULT_CLASSES) -> 'OlsParams':
        missing = [name for name in classes if name not in table]
        if missing:
            raise ConfigError(f"kappa table is missing classes {missing}")
        return cls(tuple(float(table[name]) for name in classes))


def grid_to_cartesian(grid: PolarGrid, range_idx: float, azimuth_idx: float) -> Tuple[float, float]:
    """Bird's-eye (x, y) in meters; x lateral, y along boresight.

    Fractional indices are accepted so interpolated track points can be measured too.
    """
    grid.check_index(range_idx, azimuth_idx)
    r = grid.range_of(range_idx)
    theta = grid.azimuth_of(azimuth_idx)
    return r * math.sin(theta), r * math.cos(theta)


def ols_kernel(distance: float, scale: float, kappa: float) -> float:
    """exp(-d^2 / (2 (s * kappa)^2)); a zero scale only matches exact coincidence."""
    tolerance = scale * kappa
    if tolerance <= 0.0:
        return 1.0 if distance == 0.0 else 0.0
    return math.exp(-(distance * distance) / (2.0 * tolerance * tolerance))


def ols(a: PointLike, b: PointLike, grid: PolarGrid, params: OlsParams) -> float:
    """Location similarity of b to a; the range and class tolerance come from a."""
    ax, ay = grid_to_cartesian(grid, a.range_idx, a.azimuth_idx)
    bx, by = grid_to_cartesian(grid, b.range_idx, b.azimuth_idx)
    distance = math.hypot(ax - bx, ay - by)
    return ols_kernel(distance, grid.range_of(a.range_idx), params.for_class(a.class_id))
