"""Real-input Fourier transforms and the learnable spectral filter.

Conventions: the forward transform is unnormalized and the inverse carries
the 1/L factor. Only the ``L // 2 + 1`` non-negative bins are kept.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, _node, scale


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, sign: int) -> np.ndarray:
    return np.exp(sign * 1j * np.pi * np.arange(m) / m)


@lru_cache(maxsize=None)
def _dft_matrix(n: int, sign: int) -> np.ndarray:
    k = np.arange(n)
    # reduce kn mod n before scaling so large products keep full precision
    return np.exp(sign * 2j * np.pi * ((np.outer(k, k) % n) / n))


def fft_radix2(z: np.ndarray, sign: int = -1) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis (length must be a power of two)."""
    n = z.shape[-1]
    if not _is_pow2(n):
        raise DimensionError(f"radix-2 FFT needs a power-of-two length, got {n}")
    out = np.asarray(z, dtype=np.complex128)[..., _bitrev(n)]
    lead = out.shape[:-1]
    m = 1
    while m < n:
        blocks = out.reshape(*lead, n // (2 * m), 2, m)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * _twiddles(m, sign)
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return out


def dft_naive(z: np.ndarray, sign: int = -1) -> np.ndarray:
    """O(L^2) transform by explicit DFT matrix along the last axis."""
    n = z.shape[-1]
    return np.asarray(z, dtype=np.complex128) @ _dft_matrix(n, sign).T


def full_dft(z: np.ndarray, sign: int = -1) -> np.ndarray:
    """Unnormalized complex DFT along the last axis: radix-2 when possible, naive otherwise."""
    if _is_pow2(z.shape[-1]):
        return fft_radix2(z, sign)
    return dft_naive(z, sign)


def num_bins(length: int) -> int:
    return length // 2 + 1


def _hermitian_weights(length: int) -> np.ndarray:
    w = np.full(num_bins(length), 2.0)
    w[0] = 1.0
    if length % 2 == 0:
        w[-1] = 1.0
    return w


@lru_cache(maxsize=None)
def _real_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    """cos and sin of 2 pi k t / n, shape (n, n // 2 + 1)."""
    kn = np.outer(np.arange(n), np.arange(num_bins(n))) % n
    ang = 2 * np.pi * kn / n
    return np.cos(ang), np.sin(ang)


@lru_cache(maxsize=None)
def _half_twiddle(n: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(n // 2 + 1) / n)


def real_dft(x: np.ndarray) -> np.ndarray:
    """Half spectrum of real input along the last axis.

    Power-of-two lengths pack even/odd samples into one complex signal of
    half length and run the radix-2 FFT on it; other lengths use real
    cos/sin bases.
    """
    n = x.shape[-1]
    if _is_pow2(n) and n >= 4:
        h = n // 2
        z = fft_radix2(x[..., 0::2] + 1j * x[..., 1::2], -1)
        zk = np.concatenate([z, z[..., :1]], axis=-1)          # Z[k], k = 0..h
        zc = np.conj(zk[..., ::-1])                              # conj Z[h - k]
        even = 0.5 * (zk + zc)
        odd = -0.5j * (zk - zc)
        return even + _half_twiddle(n) * odd
    if _is_pow2(n):
        return fft_radix2(x, -1)[..., : num_bins(n)]
    cos, sin = _real_basis(n)
    return x @ cos - 1j * (x @ sin)


def _synthesize(re: np.ndarray, im: np.ndarray, length: int) -> np.ndarray:
    """Re(sum_k c_k e^{+2 pi i k n / L}) over the first bins, c = re + i im."""
    bins = re.shape[-1]
    if _is_pow2(length) and length >= 4 and bins == num_bins(length):
        # treat c (interior bins halved, edge bins real) as the half spectrum of a
        # real signal and invert it with one half-length complex FFT
        h = length // 2
        c = (re + 1j * im).copy()
        c[..., 1:h] *= 0.5
        c[..., 0] = c[..., 0].real
        c[..., h] = c[..., h].real
        cc = np.conj(c[..., ::-1])
        even = 0.5 * (c + cc)
        odd = 0.5 * (c - cc) * np.conj(_half_twiddle(length))
        z = (even + 1j * odd)[..., :h]
        zt = fft_radix2(z, +1)
        out = np.empty(re.shape[:-1] + (length,))
        out[..., 0::2] = zt.real
        out[..., 1::2] = zt.imag
        return 2.0 * out
    cos, sin = _real_basis(length)
    return re @ cos[:, :bins].T - im @ sin[:, :bins].T


@dataclass
class ComplexSpectrum:
    """Per-channel half spectrum of a real signal, held as two real tensors."""

    re: Tensor
    im: Tensor
    length: int

    @property
    def bins(self) -> int:
        return self.re.shape[-1]

    @property
    def channels(self) -> int:
        return self.re.shape[-2] if self.re.ndim >= 2 else 1

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re.data, self.im.data)


class SpectralWeight:
    """Learnable complex filter, one coefficient per channel per bin.

    Starts as the identity filter (1 + 0i) so the input spectrum passes unchanged.
    """

    def __init__(self, channels: int, length: int):
        bins = num_bins(length)
        self.length = length
        self.re = Tensor(np.ones((channels, bins)), requires_grad=True)
        self.im = Tensor(np.zeros((channels, bins)), requires_grad=True)

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re.data, self.im.data)


def rdft(x: Tensor) -> ComplexSpectrum:
    """Half-spectrum DFT along the last axis of a real tensor."""
    length = x.shape[-1]
    if length < 2:
        raise DimensionError(f"rdft needs length >= 2, got {length}")
    bins = num_bins(length)
    spec = real_dft(x.data)
    zeros = np.zeros(x.shape[:-1] + (bins,))

    # dL/dx[n] = Re(sum_k G_k e^{+i theta}) with G = g_re + i g_im
    def back_re(g):
        return (_synthesize(g, zeros, length),)

    def back_im(g):
        return (_synthesize(zeros, g, length),)

    re = _node(np.ascontiguousarray(spec.real), (x,), "rdft.re", back_re)
    im = _node(np.ascontiguousarray(spec.imag), (x,), "rdft.im", back_im)
    return ComplexSpectrum(re, im, length)


def irdft(s: ComplexSpectrum) -> Tensor:
    """Inverse of :func:`rdft`; imaginary parts of the DC and Nyquist bins are ignored."""
    length = s.length
    if s.bins != num_bins(length):
        raise DimensionError(f"spectrum has {s.bins} bins, expected {num_bins(length)} for L={length}")
    w = _hermitian_weights(length) / length
    out = _synthesize(s.re.data * w, s.im.data * w, length)

    def rule(g):
        spec = real_dft(g) * w
        return spec.real, spec.imag

    return _node(out, (s.re, s.im), "irdft", rule)


def complex_hadamard(s: ComplexSpectrum, w: SpectralWeight) -> ComplexSpectrum:
    """Bin-wise complex product of a spectrum with a (batch-shared) spectral weight."""
    if s.re.shape[-2:] != w.shape:
        raise DimensionError(f"spectrum {s.re.shape} does not match weight {w.shape}")
    a, b = s.re.data, s.im.data
    wr, wi = w.re.data, w.im.data
    batched = a.ndim == 3

    def red(arr):
        return arr.sum(axis=0) if batched else arr

    def back_re(g):
        return g * wr, -g * wi, red(g * a), red(-g * b)

    def back_im(g):
        return g * wi, g * wr, red(g * b), red(g * a)

    parents = (s.re, s.im, w.re, w.im)
    re = _node(a * wr - b * wi, parents, "chad.re", back_re)
    im = _node(a * wi + b * wr, parents, "chad.im", back_im)
    return ComplexSpectrum(re, im, s.length)


def far_reconstruct(x: Tensor, w: SpectralWeight, gamma: float) -> Tensor:
    """gamma * irdft(W (.) rdft(x)); residual addition is left to the caller."""
    if x.shape[-1] != w.length:
        raise DimensionError(f"input length {x.shape[-1]} does not match filter length {w.length}")
    return scale(irdft(complex_hadamard(rdft(x), w)), gamma)


def write_spectrum_csv(path, spec: ComplexSpectrum | np.ndarray, sample_rate: float,
                       length: int | None = None) -> None:
    """Columns: channel, bin, frequency_hz, re, im, magnitude.

    ``spec`` may be a :class:`ComplexSpectrum` (batch axis dropped if present)
    or a complex array of shape channels x bins together with ``length``.
    """
    if isinstance(spec, ComplexSpectrum):
        z = spec.re.data + 1j * spec.im.data
        length = spec.length
    else:
        z = np.asarray(spec)
    if z.ndim == 3:
        z = z[0]
    z = np.atleast_2d(z)
    freqs = np.arange(z.shape[-1]) * sample_rate / length
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["channel", "bin", "frequency_hz", "re", "im", "magnitude"])
        for c in range(z.shape[0]):
            for k in range(z.shape[1]):
                v = z[c, k]
                wr.writerow([c, k, repr(float(freqs[k])), repr(float(v.real)), repr(float(v.imag)),
                             repr(float(abs(v)))])
