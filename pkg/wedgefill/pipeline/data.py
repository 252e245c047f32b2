import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.ndimage

from wedgefill.core.config import RunConfig
from wedgefill.core.errors import InvalidInputError, TensorFormatError
from wedgefill.core.tensor_store import hu_window, read_raw_slice
from wedgefill.tomo.geometry import AngleMask, ScanGeometry, Sinogram
from wedgefill.tomo.operators import apply_mask, radon_forward
from wedgefill.tomo.phantoms import phantom_set

logger = logging.getLogger(__name__)


def scenario_key(missing_deg: float) -> str:
    return f"{float(missing_deg):g}"


@dataclass
class SinogramDataset:
    """
    Train/test phantoms with their full sinograms and the missing-wedge masks

    Sinograms are stored in raw line-integral units; the diffusion and
    network stages work on sinograms divided by sinogram_scale (the largest
    training value), so the stationary std refers to data in [0, 1].
    """

    geometry: ScanGeometry
    train_images: np.ndarray
    train_sinograms: np.ndarray
    test_images: np.ndarray
    test_sinograms: np.ndarray
    sinogram_scale: float
    masks: Dict[str, AngleMask] = field(default_factory=dict)

    @property
    def scenarios_deg(self) -> List[float]:
        return [mask.missing_deg for mask in self.masks.values()]

    def mask_for(self, missing_deg: float) -> AngleMask:
        key = scenario_key(missing_deg)
        if key not in self.masks:
            raise InvalidInputError(f"no mask for scenario {missing_deg} deg; known: {list(self.masks)}")
        return self.masks[key]

    def normalize(self, sino: Sinogram) -> np.ndarray:
        return np.asarray(sino, dtype=np.float64) / self.sinogram_scale

    def denormalize(self, sino: Sinogram) -> np.ndarray:
        return np.asarray(sino, dtype=np.float64) * self.sinogram_scale

    def kept_stack(self, keys: Sequence[str]) -> np.ndarray:
        """(len(keys), num_angles) boolean kept rows"""
        return np.stack([self.masks[key].kept for key in keys])

    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        tensors["train/images"] = self.train_images
        tensors["train/sinograms"] = self.train_sinograms
        tensors["test/images"] = self.test_images
        tensors["test/sinograms"] = self.test_sinograms
        tensors["meta/sinogram_scale"] = np.array([self.sinogram_scale])
        for key, mask in self.masks.items():
            tensors[f"mask/{key}"] = mask.kept.astype(np.float32)
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], config: RunConfig) -> "SinogramDataset":
        geometry = ScanGeometry.from_config(config.geometry)
        try:
            dataset = cls(
                geometry=geometry,
                train_images=np.asarray(tensors["train/images"]),
                train_sinograms=np.asarray(tensors["train/sinograms"]),
                test_images=np.asarray(tensors["test/images"]),
                test_sinograms=np.asarray(tensors["test/sinograms"]),
                sinogram_scale=float(np.asarray(tensors["meta/sinogram_scale"]).ravel()[0]),
            )
        except KeyError as e:
            raise TensorFormatError(f"dataset container lacks entry {e}") from e
        if dataset.train_sinograms.shape[1:] != geometry.sinogram_shape:
            raise InvalidInputError(
                f"dataset sinograms have shape {dataset.train_sinograms.shape[1:]}, "
                f"[geometry] describes {geometry.sinogram_shape}; regenerate the dataset"
            )
        for name, kept in tensors.items():
            if name.startswith("mask/"):
                dataset.masks[name[len("mask/"):]] = AngleMask.from_kept(geometry, np.asarray(kept) > 0.5)
        return dataset


def _load_raw_slices(directory: Path, size: int, image_size: int) -> np.ndarray:
    paths = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
    if not paths:
        raise InvalidInputError(f"raw_slices_dir {directory} holds no slices")
    images = []
    for path in paths:
        window = hu_window(read_raw_slice(path, size))
        if size != image_size:
            window = scipy.ndimage.zoom(window, image_size / size, order=1)
        images.append(np.clip(window, 0.0, 1.0))
    logger.info(f"Imported {len(images)} raw slices from {directory}")
    return np.stack(images)


def build_dataset(config: RunConfig, seed: int) -> SinogramDataset:
    """
    Phantoms (synthetic or imported), their sinograms and one mask per scenario

    Synthetic phantom i uses the stream (seed, i); test phantoms continue the
    numbering after the training ones.
    """
    geometry = ScanGeometry.from_config(config.geometry)
    cfg = config.dataset
    n = geometry.image_size

    if cfg.raw_slices_dir:
        images = _load_raw_slices(Path(cfg.raw_slices_dir), cfg.raw_slice_size, n)
        needed = cfg.train_count + cfg.test_count
        if images.shape[0] < needed:
            raise InvalidInputError(f"raw_slices_dir holds {images.shape[0]} slices, {needed} requested")
        train_images, test_images = images[:cfg.train_count], images[cfg.train_count:needed]
    else:
        train_images = phantom_set(n, cfg.train_count, seed)
        test_images = phantom_set(n, cfg.test_count, seed, start=cfg.train_count)

    train_sinograms = radon_forward(train_images, geometry)
    test_sinograms = radon_forward(test_images, geometry)
    scale = float(train_sinograms.max())
    if not scale > 0:
        raise InvalidInputError("training sinograms are all zero")

    dataset = SinogramDataset(
        geometry=geometry,
        train_images=train_images.astype(np.float32),
        train_sinograms=train_sinograms.astype(np.float32),
        test_images=test_images.astype(np.float32),
        test_sinograms=test_sinograms.astype(np.float32),
        # stored as float32, so round it the same way up front
        sinogram_scale=float(np.float32(scale)),
    )
    for deg in sorted(set(cfg.scenarios_deg) | set(config.eval.scenarios_deg)):
        dataset.masks[scenario_key(deg)] = AngleMask.from_config(geometry, config.geometry, deg)
    logger.info(
        f"Dataset ready: {len(train_images)} train / {len(test_images)} test, "
        f"sinogram scale {dataset.sinogram_scale:.4f}, scenarios {list(dataset.masks)}"
    )
    return dataset


def masked_rows(sino: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """apply_mask with one kept vector per batch entry: kept (B, A), sino (B, A, bins)"""
    return np.where(kept[:, :, None], sino, np.zeros((), dtype=np.asarray(sino).dtype))


def _fetch_rows(mu: np.ndarray, unwrapped: np.ndarray) -> np.ndarray:
    """Rows at unwrapped indices; every wrap past the last row is a half turn, so the detector flips"""
    num_angles = mu.shape[-2]
    rows = mu[..., unwrapped % num_angles, :]
    flip = (np.floor_divide(unwrapped, num_angles) % 2).astype(bool)
    return np.where(flip[:, None], rows[..., ::-1], rows)


def low_fidelity_inpaint(mu: Sinogram, mask: AngleMask) -> Sinogram:
    """
    Fill the missing wedge by per-bin linear interpolation between the nearest kept rows

    The interpolation runs in angle, across the end of the scan if the wedge
    wraps: a projection at theta + 180 deg equals the one at theta with the
    detector axis reversed. Kept rows are returned untouched.

    Raises:
        InvalidInputError: if the mask keeps no rows
    """
    mu = apply_mask(mu, mask)
    geo = mask.geometry
    if not mask.kept.any():
        raise InvalidInputError("mask keeps no rows, nothing to interpolate from")
    missing = mask.missing_rows
    if missing == 0:
        return mu.copy()

    step = geo.angle_step_deg
    period = 180.0 / step
    start = mask.start_row
    lower = start - 1
    upper = start + missing
    lower_rows = _fetch_rows(mu, np.array([lower]))
    upper_rows = _fetch_rows(mu, np.array([upper]))

    # angular position in row units, one half turn counting as `period` rows
    def position(unwrapped: int) -> float:
        turns, row = divmod(unwrapped, geo.num_angles)
        return turns * period + row

    lo_pos, hi_pos = position(lower), position(upper)
    out = mu.astype(np.float64, copy=True)
    gap_rows = start + np.arange(missing)
    for unwrapped in gap_rows:
        weight = (position(int(unwrapped)) - lo_pos) / (hi_pos - lo_pos)
        value = (1.0 - weight) * lower_rows[..., 0, :] + weight * upper_rows[..., 0, :]
        row = int(unwrapped) % geo.num_angles
        if (int(unwrapped) // geo.num_angles) % 2:
            value = value[..., ::-1]
        out[..., row, :] = value
    return np.where(mask.kept[:, None], mu, out)


def low_fidelity_batch(mu: np.ndarray, masks: Sequence[AngleMask]) -> np.ndarray:
    """low_fidelity_inpaint for a batch with one mask per entry"""
    return np.stack([low_fidelity_inpaint(m, mask) for m, mask in zip(mu, masks)])


def sample_scenarios(dataset: SinogramDataset, keys: Sequence[str], count: int,
                     rng: np.random.Generator) -> Tuple[List[str], np.ndarray]:
    """Draw one scenario key per batch entry and return it with the kept rows"""
    picks = [keys[int(i)] for i in rng.integers(0, len(keys), size=count)]
    return picks, dataset.kept_stack(picks)
