import logging
import math
from typing import Optional

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from wedgefill.core.config import GeometryConfig
from wedgefill.core.errors import InvalidInputError

logger = logging.getLogger(__name__)

# Square attenuation grid (size x size), optionally with leading batch axes
Image = npt.NDArray[np.floating]
# Projection grid (num_angles x detector_bins), optionally with leading batch axes
Sinogram = npt.NDArray[np.floating]


class ScanGeometry(BaseModel):
    """Parallel-beam scan: angles i * angle_step_deg for i < num_angles, centered detector"""

    model_config = ConfigDict(frozen=True)

    image_size: int = Field(ge=16)
    num_angles: int = Field(ge=1)
    angle_step_deg: float = Field(gt=0)
    detector_bins: int = Field(ge=1)
    detector_spacing: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def check_coverage(self) -> "ScanGeometry":
        if self.num_angles * self.angle_step_deg > 180.0 + 1e-9:
            raise ValueError(f"coverage {self.coverage_deg} deg exceeds a half rotation")
        needed = math.ceil(self.image_size * math.sqrt(2.0))
        if self.detector_bins * self.detector_spacing < needed:
            raise ValueError(
                f"detector covers {self.detector_bins * self.detector_spacing} pixels, "
                f"image support needs {needed}"
            )
        return self

    @classmethod
    def from_config(cls, config: GeometryConfig) -> "ScanGeometry":
        try:
            return cls(
                image_size=config.image_size,
                num_angles=config.num_angles,
                angle_step_deg=config.angle_step_deg,
                detector_bins=config.detector_bins,
                detector_spacing=config.detector_spacing,
            )
        except ValueError as e:
            raise InvalidInputError(f"Invalid scan geometry: {e}") from e

    @property
    def coverage_deg(self) -> float:
        return self.num_angles * self.angle_step_deg

    @property
    def is_half_turn(self) -> bool:
        return abs(self.coverage_deg - 180.0) <= 1e-9

    @property
    def sinogram_shape(self) -> tuple:
        return (self.num_angles, self.detector_bins)

    @property
    def image_shape(self) -> tuple:
        return (self.image_size, self.image_size)

    def angles_rad(self) -> np.ndarray:
        return np.deg2rad(np.arange(self.num_angles) * self.angle_step_deg)

    def detector_positions(self) -> np.ndarray:
        """Bin centers in pixel units, symmetric about zero"""
        return (np.arange(self.detector_bins) - (self.detector_bins - 1) / 2.0) * self.detector_spacing


class AngleMask(BaseModel):
    """Limited-angle degradation: one contiguous (cyclic) block of angle rows is missing"""

    model_config = ConfigDict(frozen=True)

    geometry: ScanGeometry
    missing_deg: float = Field(ge=0)
    missing_start_deg: Optional[float] = None

    @model_validator(mode="after")
    def check_block(self) -> "AngleMask":
        missing_rows = self.missing_rows
        if self.missing_deg > 0 and missing_rows == 0:
            raise ValueError(f"missing_deg={self.missing_deg} is below one angle step")
        if missing_rows >= self.geometry.num_angles:
            raise ValueError(f"missing_deg={self.missing_deg} leaves no kept rows")
        return self

    @classmethod
    def trailing(cls, geometry: ScanGeometry, missing_deg: float) -> "AngleMask":
        """Missing block [coverage - missing_deg, coverage)"""
        return cls(geometry=geometry, missing_deg=missing_deg)

    @classmethod
    def full(cls, geometry: ScanGeometry) -> "AngleMask":
        """Keep every row (identity operator)"""
        return cls(geometry=geometry, missing_deg=0.0)

    @classmethod
    def from_config(cls, geometry: ScanGeometry, config: GeometryConfig, missing_deg: float) -> "AngleMask":
        start = None if config.missing_start_deg == "trailing" else float(config.missing_start_deg)
        try:
            return cls(geometry=geometry, missing_deg=missing_deg, missing_start_deg=start)
        except ValueError as e:
            raise InvalidInputError(f"Invalid angle mask: {e}") from e

    @property
    def missing_rows(self) -> int:
        return int(round(self.missing_deg / self.geometry.angle_step_deg))

    @property
    def start_row(self) -> int:
        geo = self.geometry
        if self.missing_start_deg is None:
            return geo.num_angles - self.missing_rows
        return int(round(self.missing_start_deg / geo.angle_step_deg)) % geo.num_angles

    @property
    def kept(self) -> np.ndarray:
        """Boolean per angle row"""
        kept = np.ones(self.geometry.num_angles, dtype=bool)
        rows = (self.start_row + np.arange(self.missing_rows)) % self.geometry.num_angles
        kept[rows] = False
        kept.setflags(write=False)
        return kept

    @property
    def effective_missing_deg(self) -> float:
        """count(not kept) * angle_step_deg"""
        return self.missing_rows * self.geometry.angle_step_deg

    @property
    def row_weights(self) -> np.ndarray:
        """Kept rows as a (num_angles, 1) float column for broadcasting"""
        return self.kept.astype(np.float64)[:, None]

    @classmethod
    def from_kept(cls, geometry: ScanGeometry, kept: np.ndarray) -> "AngleMask":
        """Rebuild a mask from a stored kept-row vector"""
        kept = np.asarray(kept).astype(bool).ravel()
        if kept.shape != (geometry.num_angles,):
            raise InvalidInputError(f"kept vector has {kept.size} rows, geometry has {geometry.num_angles}")
        missing = np.flatnonzero(~kept)
        if missing.size == 0:
            return cls.full(geometry)
        # first missing row whose predecessor (cyclically) is kept
        starts = [row for row in missing if kept[(row - 1) % geometry.num_angles]]
        if len(starts) != 1:
            raise InvalidInputError("kept vector does not describe one contiguous missing block")
        mask = cls(geometry=geometry, missing_deg=missing.size * geometry.angle_step_deg,
                   missing_start_deg=starts[0] * geometry.angle_step_deg)
        if not np.array_equal(mask.kept, kept):
            raise InvalidInputError("kept vector does not describe one contiguous missing block")
        return mask
