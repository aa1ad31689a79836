"""Deterministic numeric primitives shared by every module.

Conventions used throughout the package:
  * pixel tensors are numpy arrays of shape (channels, height, width) holding
    real values on the 0..255 scale (channels is always 3 here);
  * feature vectors are 1-d numpy arrays, dimensionless;
  * all randomness flows through SeededRng so a single root seed reproduces
    every artifact bit for bit.
"""

import hashlib

import numpy as np

from .errors import ArgumentError, NumericalError

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def check_pixel_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a (C, H, W) pixel array: 3 dims, finite values."""
    arr = np.asarray(t)
    if arr.ndim != 3:
        raise ArgumentError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    return arr


def l1_norm(t: np.ndarray) -> float:
    """Sum of absolute values of all elements, accumulated in double precision."""
    return float(np.sum(np.abs(np.asarray(t, dtype=np.float64))))


def linf_norm(t: np.ndarray) -> float:
    """Largest absolute element (0 for an empty tensor)."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    return float(np.max(np.abs(arr)))


def clip_elementwise(t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Element-wise min(max(x, lo), hi). Raises if lo > hi."""
    if lo > hi:
        raise ArgumentError(f"clip bounds inverted: lo={lo} > hi={hi}")
    return np.clip(t, lo, hi)


def sign_elementwise(t: np.ndarray) -> np.ndarray:
    """Element-wise sign with sign(0) = 0; values in {-1, 0, +1}."""
    return np.sign(t)


def finite_diff_input_grad(f, t: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient oracle: (f(t + h e_i) - f(t - h e_i)) / 2h.

    Slow by design (two evaluations per element); used only to cross-check
    hand-written backward passes. All arithmetic is double precision.
    """
    if h <= 0:
        raise ArgumentError(f"finite difference step must be positive, got {h}")
    base = np.asarray(t, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(
                f"finite-difference oracle hit a non-finite value at element {i}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


_SEED_MASK = (1 << 63) - 1


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a 63-bit child seed from a root seed and a stage label.

    Hash-based so that stages (data/train/attack/...) get independent streams
    and the mapping is stable across platforms and releases.
    """
    digest = hashlib.blake2b(
        f"{int(root_seed)}|{label}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") & _SEED_MASK


class SeededRng:
    """Deterministic random generator with labeled splitting.

    Wraps a counter-based Philox generator keyed by a hash of the seed, so
    identical seeds give bit-identical streams on every platform. ``split``
    derives an independent generator from a text label without consuming
    state from the parent.
    """

    ALGORITHM = "philox-4x64/blake2b-split"

    def __init__(self, seed: int):
        self.seed = int(seed)
        key = int.from_bytes(
            hashlib.blake2b(
                f"xmodal/{self.seed}".encode("utf-8"), digest_size=16
            ).digest(),
            "little",
        )
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, label))

    # Thin pass-throughs for the common draws; anything fancier can use .gen.
    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
