"""Feature extraction pipeline: extract -> SAD -> CMVN -> chunk.

Spectral kinds (CQT, MFSC) are log-compressed; cepstral kinds (CQCC, MFCC)
add an orthonormal DCT on top.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus_io import AudioBuffer
from .dsp_core import (CqtConfig, MelConfig, TimeFreqMatrix, build_cqt_kernel, cqt,
                       dct2_orthonormal, mel_center_freqs, mel_filterbank, stft_power)

FEATURE_KINDS = ("CQT", "CQCC", "MFSC", "MFCC")


class UnusableUtteranceError(ValueError):
    pass


@dataclass
class SadConfig:
    margin_db: float = 40.0
    floor_db: float = -60.0
    enabled: bool = True

    def __post_init__(self):
        if self.margin_db <= 0:
            raise ValueError("SAD margin_db must be positive")


@dataclass
class FeatureConfig:
    kind: str = "CQT"
    cqt: Optional[CqtConfig] = None
    mel: Optional[MelConfig] = None
    n_ceps: Optional[int] = None  # None -> all bins
    log_floor: float = 1e-10
    sad: SadConfig = field(default_factory=SadConfig)
    chunk_len: int = 100

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind in ("CQT", "CQCC"):
            if self.cqt is None:
                self.cqt = CqtConfig()
            self.mel = None
        else:
            if self.mel is None:
                self.mel = MelConfig()
            self.cqt = None
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if self.n_ceps is not None and not 1 <= self.n_ceps <= self.n_source_bins:
            raise ValueError(f"n_ceps {self.n_ceps} exceeds {self.n_source_bins} source bins")

    @property
    def hop(self) -> int:
        return self.cqt.hop if self.cqt is not None else self.mel.hop

    @property
    def sample_rate(self) -> int:
        return self.cqt.sample_rate if self.cqt is not None else self.mel.sample_rate

    @property
    def n_source_bins(self) -> int:
        if self.cqt is not None:
            return _kernel_for(self.cqt).n_bins
        return self.mel.n_filters

    @property
    def dim(self) -> int:
        if self.kind in ("CQCC", "MFCC") and self.n_ceps is not None:
            return self.n_ceps
        return self.n_source_bins


@dataclass
class FeatureChunk:
    values: np.ndarray
    label: int
    utterance_id: str


_KERNELS: dict = {}


def _kernel_for(cfg: CqtConfig):
    key = (cfg.bins_per_octave, cfg.f_min, cfg.f_max, cfg.sample_rate)
    if key not in _KERNELS:
        _KERNELS[key] = build_cqt_kernel(cfg)
    return _KERNELS[key]


def log_compress(m: TimeFreqMatrix, eps: float = 1e-10) -> TimeFreqMatrix:
    if m.kind == "magnitude":
        vals = np.log(m.values ** 2 + eps)
    elif m.kind == "power":
        vals = np.log(m.values + eps)
    else:
        raise ValueError(f"log_compress expects magnitude or power input, got {m.kind}")
    return m.with_values(vals, kind="log-power")


def log_cqt(buf: AudioBuffer, cfg: FeatureConfig) -> TimeFreqMatrix:
    mags = cqt(buf, _kernel_for(cfg.cqt), cfg.cqt.hop)
    return log_compress(mags, cfg.log_floor)


def uniform_resample(m: TimeFreqMatrix) -> TimeFreqMatrix:
    """Linearly interpolate each column onto a uniform grid spanning the same bins."""
    if m.n_bins < 2:
        raise ValueError("uniform resampling needs at least 2 bins")
    grid = np.linspace(m.bin_freqs[0], m.bin_freqs[-1], m.n_bins)
    out = np.empty_like(m.values)
    for t in range(m.n_frames):
        out[:, t] = np.interp(grid, m.bin_freqs, m.values[:, t])
    return m.with_values(out, bin_freqs=grid)


def cepstra(m: TimeFreqMatrix, n_ceps: Optional[int]) -> TimeFreqMatrix:
    n = m.n_bins if n_ceps is None else n_ceps
    coeffs = dct2_orthonormal(m.values, n, axis=0)
    return TimeFreqMatrix(coeffs, np.arange(n, dtype=np.float64), m.hop, m.sample_rate, "cepstral")


def extract_cqcc(buf: AudioBuffer, cfg: FeatureConfig) -> TimeFreqMatrix:
    if cfg.kind != "CQCC":
        raise ValueError(f"extract_cqcc called with kind {cfg.kind}")
    spec = log_cqt(buf, cfg)
    if spec.n_bins < 2:
        raise ValueError("CQCC needs at least 2 CQT bins")
    return cepstra(uniform_resample(spec), cfg.n_ceps)


def extract_mfsc(buf: AudioBuffer, cfg: FeatureConfig) -> TimeFreqMatrix:
    mel = cfg.mel
    if cfg.kind not in ("MFSC", "MFCC"):
        raise ValueError(f"extract_mfsc called with kind {cfg.kind}")
    if buf.sample_rate != mel.sample_rate:
        raise ValueError(f"buffer rate {buf.sample_rate} does not match mel config {mel.sample_rate}")
    power = stft_power(buf.samples, mel.win_length, mel.n_fft, mel.hop)
    energies = mel_filterbank(mel) @ power
    return TimeFreqMatrix(np.log(energies + cfg.log_floor), mel_center_freqs(mel), mel.hop,
                          mel.sample_rate, "log-power")


def extract_mfcc(buf: AudioBuffer, cfg: FeatureConfig) -> TimeFreqMatrix:
    if cfg.kind != "MFCC":
        raise ValueError(f"extract_mfcc called with kind {cfg.kind}")
    return cepstra(extract_mfsc(buf, cfg), cfg.n_ceps)


def extract(buf: AudioBuffer, cfg: FeatureConfig) -> TimeFreqMatrix:
    if cfg.kind == "CQT":
        return log_cqt(buf, cfg)
    if cfg.kind == "CQCC":
        return extract_cqcc(buf, cfg)
    if cfg.kind == "MFSC":
        return extract_mfsc(buf, cfg)
    return extract_mfcc(buf, cfg)


def frame_energy_db(buf: AudioBuffer, hop: int, n_frames: int) -> np.ndarray:
    """Mean-square energy (dB) of a 2*hop window centred on each frame position."""
    x = buf.samples
    xp = np.concatenate([np.zeros(hop), x, np.zeros(2 * hop)])
    frames = np.lib.stride_tricks.as_strided(
        xp, shape=(n_frames, 2 * hop), strides=(hop * xp.strides[0], xp.strides[0]),
        writeable=False)
    return 10.0 * np.log10(np.mean(frames ** 2, axis=1) + 1e-30)


def sad_mask(buf: AudioBuffer, cfg: SadConfig, hop: int, n_frames: int) -> np.ndarray:
    expected = len(buf) // hop + 1
    if n_frames != expected:
        raise ValueError(f"matrix has {n_frames} frames but audio implies {expected} at hop {hop}")
    db = frame_energy_db(buf, hop, n_frames)
    return (db > db.max() - cfg.margin_db) & (db > cfg.floor_db)


def sad_filter(m: TimeFreqMatrix, buf: AudioBuffer, cfg: SadConfig, hop: Optional[int] = None):
    keep = sad_mask(buf, cfg, m.hop if hop is None else hop, m.n_frames)
    if not keep.any():
        raise UnusableUtteranceError("speech activity detection removed every frame")
    return m.with_values(m.values[:, keep])


def cmvn(m: TimeFreqMatrix) -> TimeFreqMatrix:
    if m.n_frames < 2:
        raise ValueError("CMVN needs at least 2 frames")
    mu = m.values.mean(axis=1, keepdims=True)
    sd = m.values.std(axis=1, keepdims=True)
    return m.with_values((m.values - mu) / np.maximum(sd, 1e-8))


def chunk(m: TimeFreqMatrix, chunk_len: int, label: int, utt_id: str) -> list:
    if m.n_frames < 1:
        raise ValueError("cannot chunk an empty matrix")
    v = m.values
    if m.n_frames < chunk_len:
        idx = np.arange(chunk_len) % m.n_frames
        return [FeatureChunk(v[:, idx].copy(), label, utt_id)]
    return [FeatureChunk(v[:, s:s + chunk_len].copy(), label, utt_id)
            for s in range(0, m.n_frames - chunk_len + 1, chunk_len)]


def process_utterance(buf: AudioBuffer, cfg: FeatureConfig) -> TimeFreqMatrix:
    """extract -> SAD -> CMVN; the model-ready full-utterance matrix."""
    m = extract(buf, cfg)
    if cfg.sad.enabled:
        m = sad_filter(m, buf, cfg.sad, cfg.hop)
    if m.n_frames < 2:
        raise UnusableUtteranceError(f"only {m.n_frames} frame(s) left after SAD")
    return cmvn(m)


def f_ratio(features: Sequence) -> np.ndarray:
    """Per-bin F-ratio over (matrix, label) pairs, classes weighted equally.

    Between-class variance of class means divided by the mean within-class
    variance, both computed over frames. A bin with zero within-class variance
    in every class gets ``inf``.
    """
    by_class: dict = {}
    n_bins = None
    for m, label in features:
        vals = m.values if isinstance(m, TimeFreqMatrix) else np.asarray(m, dtype=np.float64)
        if n_bins is None:
            n_bins = vals.shape[0]
        elif vals.shape[0] != n_bins:
            raise ValueError("all matrices must share the same bin count")
        by_class.setdefault(label, []).append(vals)
    if len(by_class) < 2:
        raise ValueError("F-ratio needs at least 2 classes")
    means, variances = [], []
    for label in sorted(by_class, key=str):
        frames = np.concatenate(by_class[label], axis=1)
        if frames.shape[1] == 0:
            raise ValueError(f"class {label!r} has no frames")
        means.append(frames.mean(axis=1))
        variances.append(frames.var(axis=1))
    means = np.array(means)
    between = means.var(axis=0)
    within = np.mean(variances, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = between / within
    ratio[within == 0] = np.inf
    return ratio


def f_ratio_csv(ratios: np.ndarray, bin_freqs: np.ndarray) -> str:
    lines = ["bin_index,center_freq_hz,f_ratio"]
    for i, (f, r) in enumerate(zip(bin_freqs, ratios)):
        lines.append(f"{i},{float(f)!r},{'inf' if np.isinf(r) else repr(float(r))}")
    return "\n".join(lines) + "\n"
