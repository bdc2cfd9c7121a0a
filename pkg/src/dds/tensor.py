"""Dense tensor core: dtype policy, unitary 2-D FFTs, seeded Gaussian streams.

Signals are plain numpy arrays restricted to float64 / complex128. Public
operations reject non-finite values so that divergence is caught where it
happens rather than three modules later.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericalError

REAL = np.float64
COMPLEX = np.complex128


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce to a float64/complex128 ndarray and validate finiteness."""
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif np.iscomplexobj(arr):
        arr = arr.astype(COMPLEX)
    else:
        arr = arr.astype(REAL)
    check_finite(arr, "as_tensor")
    return arr


def check_finite(x: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {context}")
    return x


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_fft_axes(x: np.ndarray, axes) -> tuple[int, int]:
    ax = tuple(int(a) for a in axes)
    if len(ax) != 2:
        raise ConfigError("fft2 expects exactly two axes")
    for a in ax:
        if not is_pow2(x.shape[a]):
            raise ConfigError(
                f"fft2 requires power-of-two extents, got {x.shape[a]} on axis {a}"
            )
    return ax


def fft2(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Unitary 2-D FFT over two power-of-two axes (norm split as 1/sqrt(HW))."""
    x = np.asarray(x, dtype=COMPLEX)
    ax = _check_fft_axes(x, axes)
    out = np.fft.fft2(x, axes=ax, norm="ortho")
    return check_finite(out, "fft2")


def ifft2(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Inverse of :func:`fft2`; also unitary."""
    x = np.asarray(x, dtype=COMPLEX)
    ax = _check_fft_axes(x, axes)
    out = np.fft.ifft2(x, axes=ax, norm="ortho")
    return check_finite(out, "ifft2")


def inner(a: np.ndarray, b: np.ndarray):
    """Inner product, conjugate-linear in the first argument.

    Real inputs give the Euclidean dot product; complex inputs give
    sum(conj(a) * b), so inner(x, x) is the squared 2-norm.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ConfigError(f"inner: shape mismatch {a.shape} vs {b.shape}")
    val = np.sum(np.conj(a) * b)
    if np.iscomplexobj(a) or np.iscomplexobj(b):
        return complex(val)
    return float(val)


def norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(x).ravel()))


class RngStream:
    """Deterministic Gaussian stream with a draw counter.

    Backed by PCG64 + numpy's ziggurat ``standard_normal``; a fixed seed
    replays the exact draw sequence. Draw order is documented so traces are
    replayable: real draws fill row-major; complex draws consume one real
    block then one imaginary block, each N(0, 1/2) so E|z|^2 = 1. The
    ``uniform`` helper maps one Gaussian draw through the normal CDF.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    def randn(self, shape, dtype=REAL) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ConfigError(f"randn: invalid shape {shape}")
        n = int(np.prod(shape))
        dtype = np.dtype(dtype)
        if dtype == COMPLEX:
            re = self._gen.standard_normal(n)
            im = self._gen.standard_normal(n)
            self.draws += 2 * n
            out = ((re + 1j * im) / math.sqrt(2.0)).reshape(shape)
        elif dtype == REAL:
            out = self._gen.standard_normal(n).reshape(shape)
            self.draws += n
        else:
            raise ConfigError(f"randn: unsupported dtype {dtype}")
        return out

    def uniform(self) -> float:
        """One U(0,1) variate via the normal CDF of a single Gaussian draw."""
        z = self._gen.standard_normal()
        self.draws += 1
        return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))

    def child(self, index: int) -> "RngStream":
        """Independent stream derived deterministically from (seed, index)."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(index),))
        derived = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RngStream(derived)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, draws={self.draws})"
