"""Dense NCHW float32 arrays, splitmix64 randomness and small array utilities.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and ndim 4
(batch, channel, row, col).  The helpers here validate that contract rather
than wrapping the array in another class.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import NonFiniteError, ParameterError, ShapeError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_POW_M53 = 1.0 / (1 << 53)


def rng_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once.

    Returns ``(value, new_state)``; the input state is never modified.
    """
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31), state


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful splitmix64 generator.

    Each instance is owned by one caller; use :meth:`copy` to hand an
    independent replay to somebody else.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"SplitMix64(state=0x{self.state:016X})"

    def copy(self) -> "SplitMix64":
        return SplitMix64(self.state)

    def next_u64(self) -> int:
        value, self.state = rng_next(self.state)
        return value

    def integers(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array, identical to ``n`` calls of next_u64."""
        n = int(n)
        if n < 0:
            raise ParameterError(f"count must be non-negative, got {n}")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = steps * np.uint64(GOLDEN_GAMMA) + np.uint64(self.state)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return _mix(states)

    def uniform(self, n: int) -> np.ndarray:
        """Float64 samples strictly inside (0, 1) built from the top 53 bits."""
        v = self.integers(n) >> np.uint64(11)
        return (v.astype(np.float64) + 0.5) * _TWO_POW_M53

    def below(self, bound: int) -> int:
        """An integer in ``[0, bound)`` (multiply-shift, negligible bias)."""
        if bound <= 0:
            raise ParameterError(f"bound must be positive, got {bound}")
        return (self.next_u64() * bound) >> 64

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def derive_seed(base: int, index: int) -> int:
    """First splitmix64 output of state ``base + index``; used to fan out job seeds."""
    return rng_next((int(base) + int(index)) & MASK64)[0]


def standard_normal(rng: SplitMix64, n: int) -> np.ndarray:
    """Box-Muller normals from consecutive pairs of uniforms, float64."""
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log(u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = radius * np.cos(angle)
    z[:, 1] = radius * np.sin(angle)
    return z.reshape(-1)[:n]


def randn_tensor(rng: SplitMix64, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    """Gaussian float32 tensor with i.i.d. entries, consuming ``rng`` deterministically."""
    if stddev < 0:
        raise ParameterError(f"stddev must be >= 0, got {stddev}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ShapeError(f"expected a 4-tuple of non-negative sizes, got {shape}")
    z = standard_normal(rng, int(np.prod(shape)))
    return (mean + stddev * z).astype(np.float32).reshape(shape)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float32 NCHW array and check finiteness."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channel, row, col), got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or infinite values")
    return arr


def spatial_shift(t: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate every channel by ``(dy, dx)`` pixels, zero-filling vacated pixels."""
    t = np.asarray(t)
    out = np.zeros_like(t)
    h, w = t.shape[-2:]
    dy, dx = int(dy), int(dx)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = t[..., src_r, src_c]
    return out


class Rect(NamedTuple):
    """Inclusive pixel rectangle; coordinates may lie outside an image."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return max(0, self.bottom - self.top + 1)

    @property
    def width(self) -> int:
        return max(0, self.right - self.left + 1)

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def empty(self) -> bool:
        return self.area == 0

    def intersect(self, other: "Rect") -> "Rect":
        return Rect(
            max(self.top, other.top),
            max(self.left, other.left),
            min(self.bottom, other.bottom),
            min(self.right, other.right),
        )

    def shifted(self, dy: int, dx: int) -> "Rect":
        return Rect(self.top + dy, self.left + dx, self.bottom + dy, self.right + dx)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom + 1), slice(self.left, self.right + 1)

    @classmethod
    def image(cls, height: int, width: int) -> "Rect":
        return cls(0, 0, height - 1, width - 1)


def rms_distance(a: np.ndarray, b: np.ndarray, region: Rect | None = None) -> float:
    """Root-mean-square difference of ``a`` and ``b`` over ``region`` (all channels).

    ``region`` defaults to the whole spatial extent.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    bounds = Rect.image(h, w)
    if region is None:
        region = bounds
    region = Rect(*region)
    if region.empty:
        raise ShapeError(f"empty region {tuple(region)}")
    if region.intersect(bounds) != region:
        raise ShapeError(f"region {tuple(region)} exceeds image bounds {h}x{w}")
    rows, cols = region.slices()
    diff = a[..., rows, cols].astype(np.float64) - b[..., rows, cols].astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))
