"""Continuous wavelet transform and scalogram construction.

Two mother wavelets are supported: the real Morlet psi(t) = exp(-t^2/2)*cos(5t)
for PCG, and the complex Morlet psi(t) = (pi*fb)^(-1/2) * exp(2i*pi*fc*t)
* exp(-t^2/fb) for ECG. Coefficients at scale a are the convolution of the
signal with the time-reversed conjugate wavelet sampled at integer lags,
amplitude factor 1/sqrt(a):

    C[a, b] = (1/sqrt(a)) * sum_k x[k] * conj(psi((k - b) / a))

so a pure tone at frequency f peaks at scale a = fc_wavelet * fs / f.
Scalograms are |C| min-max normalized to [0, 1] and block-mean pooled to a
fixed image geometry for the CNN.
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

# Truncating the Gaussian envelope at 8 effective standard deviations keeps
# the dropped tail below 1e-14 of peak amplitude.
SUPPORT_SIGMAS = 8.0

MORLET_REAL_OMEGA = 5.0

# Default analysis settings: scale ranges per modality, 96 log-spaced scales,
# pooled image geometry for the CNN input.
PCG_SCALE_RANGE = (7.0, 130.0)
ECG_SCALE_RANGE = (20.0, 500.0)
N_SCALES = 96
IMAGE_HEIGHT = 64
IMAGE_WIDTH = 128

SGM_MAGIC = b"SGM1"


@dataclass(frozen=True)
class MorletReal:
    """Classical real Morlet: exp(-t^2/2) * cos(5 t); parameter-free."""

    def sample(self, t: np.ndarray) -> np.ndarray:
        return np.exp(-0.5 * t * t) * np.cos(MORLET_REAL_OMEGA * t)

    @property
    def envelope_std(self) -> float:
        return 1.0

    @property
    def center_frequency(self) -> float:
        # cycles per unit time: omega / (2 pi)
        return MORLET_REAL_OMEGA / (2.0 * math.pi)

    @property
    def is_complex(self) -> bool:
        return False


@dataclass(frozen=True)
class ComplexMorlet:
    """Complex Morlet with bandwidth fb and center frequency fc (cycles/unit)."""

    fb: float = 1.5
    fc: float = 1.0

    def __post_init__(self):
        if self.fb <= 0:
            raise ValueError(f"fb must be positive, got {self.fb}")
        if self.fc <= 0:
            raise ValueError(f"fc must be positive, got {self.fc}")

    def sample(self, t: np.ndarray) -> np.ndarray:
        norm = 1.0 / math.sqrt(math.pi * self.fb)
        return norm * np.exp(2j * math.pi * self.fc * t) * np.exp(-(t * t) / self.fb)

    @property
    def envelope_std(self) -> float:
        # exp(-t^2/fb) = exp(-t^2 / (2 * fb/2))
        return math.sqrt(self.fb / 2.0)

    @property
    def center_frequency(self) -> float:
        return self.fc

    @property
    def is_complex(self) -> bool:
        return True


@dataclass(frozen=True)
class ScaleGrid:
    """Strictly ascending positive CWT scales."""

    scales: tuple

    def __post_init__(self):
        arr = np.asarray(self.scales, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("scales must be a non-empty 1-D sequence")
        if arr[0] <= 0 or np.any(np.diff(arr) <= 0):
            raise ValueError("scales must be strictly ascending and positive")
        object.__setattr__(self, "scales", tuple(float(s) for s in arr))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scales, dtype=np.float64)

    def __len__(self):
        return len(self.scales)


@dataclass
class Scalogram:
    """Nonnegative float32 matrix (scales x time) plus free-form metadata."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if self.data.ndim != 2:
            raise ValueError(f"scalogram must be 2-D, got shape {self.data.shape}")
        if self.data.size and (not np.all(np.isfinite(self.data)) or self.data.min() < 0):
            raise ValueError("scalogram entries must be finite and >= 0")


def make_scales(lo: float, hi: float, count: int) -> ScaleGrid:
    """Logarithmically spaced grid from lo to hi inclusive; count==1 gives [lo]."""
    if not (0 < lo <= hi):
        raise ValueError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if count == 1:
        return ScaleGrid((float(lo),))
    return ScaleGrid(tuple(np.geomspace(lo, hi, count)))


def wavelet_kernel(spec, scale: float) -> np.ndarray:
    """Convolution kernel g[m] = conj(psi(-m/a)) / sqrt(a) on |m| <= 8*sigma*a."""
    half = int(math.ceil(SUPPORT_SIGMAS * spec.envelope_std * scale))
    m = np.arange(-half, half + 1, dtype=np.float64)
    return np.conj(spec.sample(-m / scale)) / math.sqrt(scale)


def cwt(w, grid: ScaleGrid, spec) -> np.ndarray:
    """CWT coefficient matrix, one row per scale, same length as the signal.

    Each row is an FFT-based 'same' convolution (zero-padded boundaries) of
    the signal with the scale's kernel; MorletReal gives real rows,
    ComplexMorlet complex ones.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot transform an empty signal")
    max_scale = grid.scales[-1]
    support = 2 * int(math.ceil(SUPPORT_SIGMAS * spec.envelope_std * max_scale)) + 1
    if support > 8 * x.size:
        raise ValueError(
            f"wavelet support {support} at scale {max_scale} exceeds "
            f"8x signal length ({8 * x.size})"
        )
    dtype = np.complex128 if spec.is_complex else np.float64
    out = np.empty((len(grid), x.size), dtype=dtype)
    for i, a in enumerate(grid.scales):
        out[i] = sps.fftconvolve(x, wavelet_kernel(spec, a), mode="same")
    return out


def scalogram_of(coeffs: np.ndarray, meta: dict | None = None) -> Scalogram:
    """Entry-wise magnitude, min-max normalized to [0, 1].

    Zero dynamic range (constant magnitude, including all-zero input) maps to
    an all-zero matrix rather than dividing by zero.
    """
    mag = np.abs(np.asarray(coeffs))
    lo = float(mag.min())
    hi = float(mag.max())
    if hi > lo:
        data = (mag - lo) / (hi - lo)
    else:
        data = np.zeros_like(mag, dtype=np.float64)
    return Scalogram(data, dict(meta or {}))


def _block_edges(n: int, blocks: int):
    # even partition, remainder spread over the leading blocks
    base, rem = divmod(n, blocks)
    sizes = np.full(blocks, base, dtype=np.int64)
    sizes[:rem] += 1
    edges = np.zeros(blocks, dtype=np.int64)
    np.cumsum(sizes[:-1], out=edges[1:])
    return edges, sizes


def pool_to(s: Scalogram, out_h: int, out_w: int) -> Scalogram:
    """Block-mean pool to exactly (out_h, out_w); values stay in [0, 1]."""
    n_h, n_w = s.data.shape
    if not (1 <= out_h <= n_h and 1 <= out_w <= n_w):
        raise ValueError(
            f"output dims ({out_h}, {out_w}) must be within input dims ({n_h}, {n_w})"
        )
    row_edges, row_sizes = _block_edges(n_h, out_h)
    col_edges, col_sizes = _block_edges(n_w, out_w)
    acc = np.add.reduceat(s.data.astype(np.float64), row_edges, axis=0)
    acc = np.add.reduceat(acc, col_edges, axis=1)
    acc /= np.outer(row_sizes, col_sizes)
    return Scalogram(acc, dict(s.meta))


def save_sgm(path, s: Scalogram) -> None:
    """Write the .sgm cache format: magic, u32 dims, f32 payload, JSON meta."""
    meta_blob = json.dumps(s.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    rows, cols = s.data.shape
    with open(path, "wb") as fh:
        fh.write(SGM_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def load_sgm(path) -> Scalogram:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != SGM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    header = buf.read(8)
    if len(header) != 8:
        raise ValueError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", header)
    payload = buf.read(4 * rows * cols)
    if len(payload) != 4 * rows * cols:
        raise ValueError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    (meta_len,) = struct.unpack("<I", buf.read(4))
    meta_blob = buf.read(meta_len)
    if len(meta_blob) != meta_len:
        raise ValueError(f"{path}: truncated metadata")
    return Scalogram(data.copy(), json.loads(meta_blob.decode("utf-8")))
