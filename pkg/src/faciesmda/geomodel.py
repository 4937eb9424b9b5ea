"""Synthetic channelized facies realizations and the facies data model.

Realizations are produced by an object-based generator: each channel is a
sinusoidal centerline ``y(x) = y0 + A sin(2 pi x / wavelength + phase)``
thickened to a width and rasterized onto the grid.  Grids are stored as
``(ny, nx)`` integer arrays, row-major with x varying fastest, so
``codes[j, i]`` is the facies of cell ``(i, j)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "FaciesGrid",
    "ChannelGenParams",
    "DatasetFormatError",
    "DatasetLengthError",
    "derive_seed",
    "channel_fraction",
    "channel_object_mask",
    "generate_channel_realization",
    "generate_dataset",
    "to_one_hot",
    "from_soft",
    "write_dataset",
    "read_dataset",
]

_MASK64 = (1 << 64) - 1

DATASET_MAGIC = b"FCDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetFormatError(ValueError):
    """Bad magic bytes, unknown version or inconsistent header."""


class DatasetLengthError(DatasetFormatError):
    """Payload length does not match the header."""


@dataclass(frozen=True)
class FaciesGrid:
    """Categorical facies grid.

    Parameters
    ----------
    codes : ndarray of shape (ny, nx)
        Integer facies codes in ``[0, n_facies - 1]``.
    n_facies : int
        Number of facies categories ``K``.
    """

    codes: np.ndarray
    n_facies: int = 2

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.uint8, copy=True)
        if codes.ndim != 2 or codes.size == 0:
            raise ValueError(f"codes must be a nonempty 2D array, got shape {codes.shape}")
        if self.n_facies < 2:
            raise ValueError("n_facies must be >= 2")
        if codes.max() >= self.n_facies:
            raise ValueError(f"facies code {int(codes.max())} outside [0, {self.n_facies - 1}]")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def nx(self) -> int:
        return self.codes.shape[1]

    @property
    def ny(self) -> int:
        return self.codes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FaciesGrid):
            return NotImplemented
        return self.n_facies == other.n_facies and np.array_equal(self.codes, other.codes)

    def __hash__(self):
        return hash((self.n_facies, self.codes.shape, self.codes.tobytes()))


@dataclass(frozen=True)
class ChannelGenParams:
    """Bands the channel generator samples from (all lengths in cells).

    ``orientation`` is the axis the channels traverse: ``"x"`` gives
    channels running left to right, ``"y"`` bottom to top.  Realizations
    whose channel fraction falls outside ``fraction_band`` are redrawn up
    to ``max_attempts`` times; the last draw is then accepted.
    """

    nx: int = 32
    ny: int = 32
    n_channels: tuple[int, int] = (2, 2)
    width: tuple[float, float] = (3.0, 6.0)
    amplitude: tuple[float, float] = (2.0, 6.0)
    wavelength: tuple[float, float] = (16.0, 48.0)
    orientation: str = "x"
    fraction_band: tuple[float, float] = (0.15, 0.40)
    max_attempts: int = 100

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError(f"grid {self.nx}x{self.ny} too small for channel geometry (min 8x8)")
        for name in ("n_channels", "width", "amplitude", "wavelength", "fraction_band"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} exceeds max {hi}")
        if self.n_channels[0] < 1:
            raise ValueError("need at least one channel")
        if self.width[0] < 1:
            raise ValueError("channel width must be >= 1 cell")
        if self.amplitude[0] < 0 or self.wavelength[0] <= 0:
            raise ValueError("amplitude must be >= 0 and wavelength > 0")
        lo, hi = self.fraction_band
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"fraction_band {self.fraction_band} must lie inside (0, 1)")
        if self.orientation not in ("x", "y"):
            raise ValueError(f"orientation must be 'x' or 'y', got {self.orientation!r}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


def derive_seed(seed: int, index: int) -> int:
    """Mix ``(seed, index)`` into a child 64-bit seed.

    SplitMix64 finalizer applied to ``seed * golden + index``; stable across
    platforms and independent of evaluation order.
    """
    z = ((int(seed) & _MASK64) * 0x9E3779B97F4A7C15 + (int(index) & _MASK64) + 1) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def channel_fraction(grid: FaciesGrid | np.ndarray, channel_code: int = 1) -> float:
    codes = grid.codes if isinstance(grid, FaciesGrid) else np.asarray(grid)
    return float(np.mean(codes == channel_code))


def _draw_channel(rng: np.random.Generator, params: ChannelGenParams, across: int):
    width = rng.uniform(*params.width)
    amplitude = rng.uniform(*params.amplitude)
    wavelength = rng.uniform(*params.wavelength)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    y0 = rng.uniform(0.0, across)
    return y0, amplitude, wavelength, phase, width


def channel_object_mask(length: int, across: int, y0: float, amplitude: float,
                        wavelength: float, phase: float, width: float):
    """Rasterize one channel on a canvas padded so nothing is clipped.

    Returns ``(mask, offset)`` where ``mask`` has shape
    ``(across + 2 * offset, length)`` and grid row ``j`` is canvas row
    ``j + offset``.
    """
    x = np.arange(length) + 0.5
    arg = 2.0 * np.pi * x / wavelength + phase
    center = y0 + amplitude * np.sin(arg)
    slope = amplitude * 2.0 * np.pi / wavelength * np.cos(arg)
    # vertical half-thickness giving a constant width normal to the centerline
    half = 0.5 * width * np.sqrt(1.0 + slope**2)
    offset = int(np.ceil(max(-y0, y0 - across, 0.0) + amplitude + half.max())) + 1
    y = np.arange(-offset, across + offset)[:, None] + 0.5
    mask = np.abs(y - center[None, :]) <= half[None, :]
    return mask, offset


def _realization_codes(params: ChannelGenParams, rng: np.random.Generator) -> np.ndarray:
    if params.orientation == "x":
        length, across = params.nx, params.ny
    else:
        length, across = params.ny, params.nx
    codes = np.zeros((across, length), dtype=np.uint8)
    n = int(rng.integers(params.n_channels[0], params.n_channels[1] + 1))
    for _ in range(n):
        mask, off = channel_object_mask(length, across, *_draw_channel(rng, params, across))
        codes[mask[off:off + across]] = 1
    return codes if params.orientation == "x" else codes.T.copy()


def generate_channel_realization(params: ChannelGenParams, seed: int) -> FaciesGrid:
    """Draw one binary channel realization (0 = background, 1 = channel).

    Deterministic for fixed ``(params, seed)``.
    """
    rng = np.random.default_rng(int(seed) & _MASK64)
    lo, hi = params.fraction_band
    for _ in range(params.max_attempts):
        codes = _realization_codes(params, rng)
        if lo <= codes.mean() <= hi:
            break
    return FaciesGrid(codes, n_facies=2)


def generate_dataset(params: ChannelGenParams, count: int, seed: int) -> list[FaciesGrid]:
    """``count`` realizations; member ``i`` uses ``derive_seed(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_channel_realization(params, derive_seed(seed, i)) for i in range(count)]


def to_one_hot(grid, k: int | None = None) -> np.ndarray:
    """One-hot encode facies codes into channel-first images.

    Accepts a ``FaciesGrid``, a sequence of them, or an integer array of
    shape ``(..., ny, nx)``.  Returns float64 of shape ``(..., k, ny, nx)``.
    """
    if isinstance(grid, FaciesGrid):
        codes, k = grid.codes, grid.n_facies if k is None else k
    elif isinstance(grid, (list, tuple)) and grid and isinstance(grid[0], FaciesGrid):
        codes = np.stack([g.codes for g in grid])
        k = grid[0].n_facies if k is None else k
    else:
        codes = np.asarray(grid)
        k = int(codes.max()) + 1 if k is None else k
    if k < 2:
        raise ValueError("k must be >= 2")
    if codes.size and int(codes.max()) >= k:
        raise ValueError(f"facies code {int(codes.max())} does not fit in {k} channels")
    eye = np.eye(k)
    return np.moveaxis(eye[codes.astype(np.intp)], -1, -3)


def from_soft(image: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis (``-3``); ties go to the lowest channel."""
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-3] < 2:
        raise ValueError(f"expected (..., k>=2, ny, nx), got {image.shape}")
    return np.argmax(image, axis=-3).astype(np.uint8)


def write_dataset(path, dataset: Sequence[FaciesGrid]) -> None:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ny, nx, k = dataset[0].ny, dataset[0].nx, dataset[0].n_facies
    for g in dataset:
        if (g.ny, g.nx, g.n_facies) != (ny, nx, k):
            raise ValueError("all grids must share nx, ny and K")
    payload = np.stack([g.codes for g in dataset]).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), nx, ny, k))
        fh.write(payload.tobytes(order="C"))


def read_dataset(path) -> list[FaciesGrid]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetLengthError(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, count, nx, ny, k = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if k < 2 or nx < 1 or ny < 1:
        raise DatasetFormatError(f"{path}: invalid header nx={nx} ny={ny} K={k}")
    expected = _HEADER.size + count * nx * ny
    if len(raw) != expected:
        raise DatasetLengthError(f"{path}: expected {expected} bytes, found {len(raw)}")
    codes = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, ny, nx)
    return [FaciesGrid(c, n_facies=k) for c in codes]
