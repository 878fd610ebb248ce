"""Transform primitives: constant-Q kernel and transform, STFT power, mel, DCT.

The CQT is evaluated per bin as

    X[k] = (1/N[k]) * sum_n W[k, n] x[n] exp(-j w_k n),   w_k = 2 pi Q / N[k]

with the window for every bin centred on the frame position ``t * hop``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import fft as sp_fft
from scipy import signal

from .corpus_io import AudioBuffer

KINDS = ("magnitude", "power", "log-power", "cepstral")
CONTAINER_MAGIC = b"CQTFM\x00"
CONTAINER_VERSION = 1


@dataclass
class CqtConfig:
    bins_per_octave: int = 3
    hop: int = 64
    f_min: float = 32.7
    f_max: Optional[float] = None  # None -> Nyquist
    sample_rate: int = 16000

    def __post_init__(self):
        if self.f_max is None:
            self.f_max = self.sample_rate / 2
        self.validate()

    def validate(self):
        if self.bins_per_octave < 1 or int(self.bins_per_octave) != self.bins_per_octave:
            raise ValueError(f"bins_per_octave must be a positive integer, got {self.bins_per_octave}")
        if self.hop < 1 or int(self.hop) != self.hop:
            raise ValueError(f"hop must be a positive integer, got {self.hop}")
        if not 0 < self.f_min < self.f_max:
            raise ValueError(f"need 0 < f_min < f_max, got {self.f_min}, {self.f_max}")
        if self.f_max > self.sample_rate / 2:
            raise ValueError(f"f_max {self.f_max} Hz exceeds Nyquist {self.sample_rate / 2} Hz")


@dataclass
class CqtKernel:
    center_freqs: np.ndarray
    window_lengths: np.ndarray
    q_factor: float
    windows: list
    omegas: np.ndarray
    config: CqtConfig

    _atoms: Optional[list] = field(default=None, repr=False, compare=False)

    @property
    def n_bins(self) -> int:
        return self.center_freqs.size

    def atoms(self) -> list:
        """Per-bin complex analysis atoms W[k, n] exp(-j w_k n) / N[k]."""
        if self._atoms is None:
            self._atoms = []
            for w, n_k, om in zip(self.windows, self.window_lengths, self.omegas):
                n = np.arange(n_k)
                self._atoms.append(w * np.exp(-1j * om * n) / n_k)
        return self._atoms


@dataclass
class TimeFreqMatrix:
    values: np.ndarray
    bin_freqs: np.ndarray
    hop: int
    sample_rate: int
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.bin_freqs = np.asarray(self.bin_freqs, dtype=np.float64)
        if self.kind not in KINDS:
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] != self.bin_freqs.size:
            raise ValueError(
                f"values shape {self.values.shape} does not match {self.bin_freqs.size} bins")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("time-frequency matrix contains non-finite values")

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def with_values(self, values, kind=None, bin_freqs=None) -> "TimeFreqMatrix":
        return TimeFreqMatrix(values, self.bin_freqs if bin_freqs is None else bin_freqs,
                              self.hop, self.sample_rate, kind or self.kind)


@dataclass
class MelConfig:
    n_filters: int = 24
    hop: int = 64
    n_fft: int = 512
    win_length: int = 400
    f_low: float = 0.0
    f_high: Optional[float] = None
    sample_rate: int = 16000

    def __post_init__(self):
        if self.f_high is None:
            self.f_high = self.sample_rate / 2
        self.validate()

    def validate(self):
        if self.n_filters < 1:
            raise ValueError("n_filters must be >= 1")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.n_fft < 1 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.win_length > self.n_fft:
            raise ValueError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if not 0 <= self.f_low < self.f_high:
            raise ValueError(f"need 0 <= f_low < f_high, got {self.f_low}, {self.f_high}")
        if self.f_high > self.sample_rate / 2:
            raise ValueError(f"f_high {self.f_high} Hz exceeds Nyquist {self.sample_rate / 2} Hz")


# --------------------------------------------------------------------------
# windows and the constant-Q kernel

def hann(n: int) -> np.ndarray:
    """Hann window sampled at sample midpoints, so every tap is positive."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * (np.arange(n) + 0.5) / n)


def q_factor(bins_per_octave: int) -> float:
    return 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)


def build_cqt_kernel(cfg: CqtConfig) -> CqtKernel:
    cfg.validate()
    b = cfg.bins_per_octave
    n_bins = math.ceil(b * math.log2(cfg.f_max / cfg.f_min))
    k = np.arange(n_bins)
    # in-octave ratio times an exact power of two, so f[k + b] == 2 * f[k] bit for bit
    freqs = cfg.f_min * 2.0 ** ((k % b) / b) * 2.0 ** (k // b)
    freqs = freqs[freqs <= cfg.f_max]
    q = q_factor(b)
    lengths = np.ceil(q * cfg.sample_rate / freqs).astype(np.int64)
    if np.any(np.diff(lengths) >= 0):
        # two top bins rounding to the same length; only happens near Nyquist at tiny Q
        keep = np.concatenate([[True], np.diff(lengths) < 0])
        keep = np.cumprod(keep).astype(bool)
        freqs, lengths = freqs[keep], lengths[keep]
    windows = [hann(int(n)) / hann(int(n)).sum() for n in lengths]
    omegas = 2 * np.pi * q / lengths
    return CqtKernel(freqs, lengths, q, windows, omegas, cfg)


def frame_count(n_samples: int, hop: int) -> int:
    return n_samples // hop + 1


def _cqt_complex(x: np.ndarray, kernel: CqtKernel, hop: int, method: str) -> np.ndarray:
    n_frames = frame_count(x.size, hop)
    n0 = int(kernel.window_lengths[0])
    pad = (n0 + 1) // 2
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    centers = pad + hop * np.arange(n_frames)
    out = np.empty((kernel.n_bins, n_frames), dtype=np.complex128)
    for k, atom in enumerate(kernel.atoms()):
        n_k = atom.size
        starts = centers - n_k // 2
        use_fft = method == "fft" or (
            method == "auto" and n_k * n_frames > 4 * xp.size * math.log2(xp.size))
        if use_fft:
            # correlation with the atom == valid convolution with the reversed atom
            corr = signal.oaconvolve(xp, atom[::-1], mode="valid")
            out[k] = corr[starts]
        else:
            frames = np.lib.stride_tricks.as_strided(
                xp[starts[0]:], shape=(n_frames, n_k),
                strides=(hop * xp.strides[0], xp.strides[0]), writeable=False)
            ri = frames @ np.stack([atom.real, atom.imag], axis=1)
            out[k] = ri[:, 0] + 1j * ri[:, 1]
    return out


def cqt(buf: AudioBuffer, kernel: CqtKernel, hop: Optional[int] = None,
        method: str = "auto") -> TimeFreqMatrix:
    """Constant-Q magnitude spectrogram, one column per ``hop`` samples.

    ``method`` selects the evaluation path: "direct" (strided dot products),
    "fft" (per-bin overlap-add correlation) or "auto" (cheapest per bin).
    """
    hop = kernel.config.hop if hop is None else hop
    if buf.sample_rate != kernel.config.sample_rate:
        raise ValueError(
            f"buffer rate {buf.sample_rate} Hz does not match kernel rate {kernel.config.sample_rate} Hz")
    if method not in ("auto", "direct", "fft"):
        raise ValueError(f"unknown method {method!r}")
    mags = np.abs(_cqt_complex(buf.samples, kernel, hop, method))
    return TimeFreqMatrix(mags, kernel.center_freqs, hop, buf.sample_rate, "magnitude")


# --------------------------------------------------------------------------
# STFT / mel

def dft_power_frame(frame, n_fft: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size > n_fft:
        raise ValueError(f"frame of {frame.size} samples exceeds n_fft {n_fft}")
    spec = np.fft.rfft(frame * hann(frame.size), n=n_fft)
    return spec.real ** 2 + spec.imag ** 2


def stft_power(x: np.ndarray, win_length: int, n_fft: int, hop: int) -> np.ndarray:
    """Power spectrogram (n_fft//2+1, frames), frames centred on ``t * hop``."""
    n_frames = frame_count(x.size, hop)
    half = win_length // 2
    xp = np.concatenate([np.zeros(half), x, np.zeros(win_length)])
    frames = np.lib.stride_tricks.as_strided(
        xp, shape=(n_frames, win_length), strides=(hop * xp.strides[0], xp.strides[0]),
        writeable=False)
    spec = np.fft.rfft(frames * hann(win_length), n=n_fft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_bins(cfg: MelConfig) -> np.ndarray:
    """FFT-bin indices of the n_filters + 2 triangle knots (edges included)."""
    mels = np.linspace(hz_to_mel(cfg.f_low), hz_to_mel(cfg.f_high), cfg.n_filters + 2)
    return np.round(mel_to_hz(mels) * cfg.n_fft / cfg.sample_rate).astype(np.int64)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters with knots snapped to FFT bins; each peaks at exactly 1."""
    cfg.validate()
    knots = mel_center_bins(cfg)
    if np.any(np.diff(knots) <= 0):
        i = int(np.argmax(np.diff(knots) <= 0))
        raise ValueError(
            f"{cfg.n_filters} mel filters are too many for n_fft={cfg.n_fft}: "
            f"knots {i} and {i + 1} collide at FFT bin {knots[i]}")
    n_bins = cfg.n_fft // 2 + 1
    fb = np.zeros((cfg.n_filters, n_bins))
    j = np.arange(n_bins)
    for i in range(cfg.n_filters):
        lo, mid, hi = knots[i], knots[i + 1], knots[i + 2]
        rise = (j - lo) / (mid - lo)
        fall = (hi - j) / (hi - mid)
        fb[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def mel_center_freqs(cfg: MelConfig) -> np.ndarray:
    return mel_center_bins(cfg)[1:-1] * cfg.sample_rate / cfg.n_fft


# --------------------------------------------------------------------------
# DCT

def dct2_orthonormal(vec, n_out: Optional[int] = None, axis: int = 0) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    length = vec.shape[axis]
    n_out = length if n_out is None else n_out
    if not 1 <= n_out <= length:
        raise ValueError(f"n_out must be in [1, {length}], got {n_out}")
    out = sp_fft.dct(vec, type=2, norm="ortho", axis=axis)
    return np.take(out, np.arange(n_out), axis=axis)


def idct2_orthonormal(coeffs, axis: int = 0) -> np.ndarray:
    return sp_fft.idct(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho", axis=axis)


# --------------------------------------------------------------------------
# serialisation

def save_matrix(path, m: TimeFreqMatrix):
    with open(path, "wb") as fh:
        fh.write(matrix_to_bytes(m))


def matrix_to_bytes(m: TimeFreqMatrix) -> bytes:
    out = io.BytesIO()
    out.write(CONTAINER_MAGIC)
    out.write(struct.pack("<HBIIId", CONTAINER_VERSION, KINDS.index(m.kind), m.n_bins,
                          m.n_frames, m.hop, float(m.sample_rate)))
    out.write(m.bin_freqs.astype("<f8").tobytes())
    out.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())
    return out.getvalue()


def matrix_from_bytes(data: bytes) -> TimeFreqMatrix:
    if data[:len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise ValueError("not a time-frequency matrix container")
    off = len(CONTAINER_MAGIC)
    header = struct.Struct("<HBIIId")
    version, kind, bins, frames, hop, rate = header.unpack_from(data, off)
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    off += header.size
    freqs = np.frombuffer(data, "<f8", bins, off)
    off += 8 * bins
    values = np.frombuffer(data, "<f4", bins * frames, off).reshape(bins, frames)
    return TimeFreqMatrix(values.astype(np.float64), freqs.copy(), hop, int(rate), KINDS[kind])


def load_matrix(path) -> TimeFreqMatrix:
    with open(path, "rb") as fh:
        return matrix_from_bytes(fh.read())


def matrix_to_csv(m: TimeFreqMatrix) -> str:
    lines = ["bin_index,center_freq_hz," + ",".join(f"t{t}" for t in range(m.n_frames))]
    for k in range(m.n_bins):
        row = ",".join(repr(float(v)) for v in m.values[k])
        lines.append(f"{k},{float(m.bin_freqs[k])!r},{row}")
    return "\n".join(lines) + "\n"
