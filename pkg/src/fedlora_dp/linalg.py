"""Dense float64 matrix primitives: norms, products, stacking, seeded Gaussian draws.

Matrices are plain 2-D ``numpy.ndarray`` values in C (row-major) order.  Every
public operation validates its inputs and guarantees a finite result, so the
rest of the package can treat arrays as immutable well-formed values.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngStream",
    "as_matrix",
    "frobenius_norm",
    "matmul",
    "stack_h",
    "stack_v",
    "sample_gaussian",
]


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by a root seed and an integer path.

    Two streams with distinct paths are statistically independent; the same
    (root_seed, stream_path) always reproduces the same sequence, no matter
    how concurrently the streams are consumed.  ``generator()`` returns a
    fresh generator positioned at the start of the stream, so a stream used
    for two different draws must be split first via ``child``.
    """

    root_seed: int
    stream_path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.root_seed < 2**64:
            raise ValueError(f"root_seed must be a 64-bit unsigned integer, got {self.root_seed}")
        object.__setattr__(self, "stream_path", tuple(int(p) for p in self.stream_path))

    def child(self, *path: int) -> "RngStream":
        """Derive an independent sub-stream by extending the path."""
        return RngStream(self.root_seed, self.stream_path + path)

    def generator(self) -> np.random.Generator:
        """Fresh generator at the origin of this stream."""
        seq = np.random.SeedSequence(self.root_seed, spawn_key=self.stream_path)
        return np.random.Generator(np.random.PCG64(seq))


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-ordered float64 2-D array, rejecting non-finite entries."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got {m.ndim} dimension(s)")
    if m.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def frobenius_norm(m: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    m = as_matrix(m)
    return float(np.linalg.norm(m, "fro"))


def matmul(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Matrix product, rejecting shape mismatches with both shapes reported."""
    left = as_matrix(left, "left operand")
    right = as_matrix(right, "right operand")
    if left.shape[1] != right.shape[0]:
        raise ValueError(
            f"cannot multiply {left.shape[0]}x{left.shape[1]} by {right.shape[0]}x{right.shape[1]}: "
            f"inner dimensions differ"
        )
    return left @ right


def _check_parts(parts, axis_name: str, axis: int) -> list[np.ndarray]:
    if not parts:
        raise ValueError("need at least one matrix to stack")
    arrays = [as_matrix(p, f"part {i}") for i, p in enumerate(parts)]
    extent = arrays[0].shape[axis]
    for i, a in enumerate(arrays):
        if a.shape[axis] != extent:
            raise ValueError(
                f"part {i} has {a.shape[axis]} {axis_name}, expected {extent} to match part 0"
            )
    return arrays


def stack_h(parts) -> np.ndarray:
    """Concatenate columns of equal-height matrices, in list order."""
    arrays = _check_parts(list(parts), "rows", 0)
    return np.ascontiguousarray(np.hstack(arrays))


def stack_v(parts) -> np.ndarray:
    """Concatenate rows of equal-width matrices, in list order."""
    arrays = _check_parts(list(parts), "cols", 1)
    return np.ascontiguousarray(np.vstack(arrays))


def sample_gaussian(rows: int, cols: int, sigma: float, rng: RngStream) -> np.ndarray:
    """i.i.d. N(0, sigma^2) matrix; sigma == 0 returns an exact zero matrix."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got {rows}x{cols}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros((rows, cols))
    return sigma * rng.generator().standard_normal((rows, cols))
