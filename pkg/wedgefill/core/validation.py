import logging
from typing import Sequence, Tuple

import numpy as np

from wedgefill.core.errors import InvalidInputError

logger = logging.getLogger(__name__)


class ArrayGuard:
    """Input validation for arrays entering the numerical kernels"""

    MIN_IMAGE_SIZE = 16

    def require_finite(self, array: np.ndarray, name: str = "array") -> np.ndarray:
        """
        Reject arrays holding NaN or infinite values

        Args:
            array: array to check
            name: label used in the error message

        Returns:
            np.ndarray: the same array, for chaining

        Raises:
            InvalidInputError: if any value is not finite
        """
        array = np.asarray(array)
        if not np.all(np.isfinite(array)):
            bad = int(np.count_nonzero(~np.isfinite(array)))
            logger.warning(f"Rejected {name}: {bad} non-finite values")
            raise InvalidInputError(f"{name} contains {bad} non-finite values")
        return array

    def require_shape(self, array: np.ndarray, trailing: Tuple[int, ...], name: str = "array") -> np.ndarray:
        """Check the trailing dimensions of an array (leading batch dimensions are free)"""
        array = np.asarray(array)
        if array.ndim < len(trailing) or tuple(array.shape[array.ndim - len(trailing):]) != tuple(trailing):
            raise InvalidInputError(f"{name} has shape {array.shape}, expected (..., {', '.join(map(str, trailing))})")
        return array

    def require_same_shape(self, *arrays: np.ndarray, names: Sequence[str] = ()) -> None:
        shapes = [np.shape(a) for a in arrays]
        if any(shape != shapes[0] for shape in shapes[1:]):
            label = ", ".join(names) if names else "inputs"
            raise InvalidInputError(f"Shape mismatch between {label}: {shapes}")

    def require_image(self, image: np.ndarray, size: int, name: str = "image") -> np.ndarray:
        """Square image of the declared size with finite values"""
        if size < self.MIN_IMAGE_SIZE:
            raise InvalidInputError(f"Image size {size} below minimum {self.MIN_IMAGE_SIZE}")
        image = self.require_shape(image, (size, size), name)
        return self.require_finite(image, name)

    def require_step(self, t: int, low: int, high: int, name: str = "t") -> int:
        """Integer step within [low, high]"""
        if int(t) != t or not low <= t <= high:
            raise InvalidInputError(f"{name}={t} outside [{low}, {high}]")
        return int(t)


# Global instance
array_guard = ArrayGuard()
