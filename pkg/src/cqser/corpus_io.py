"""Audio and corpus-manifest loading.

Everything downstream assumes 16 kHz mono float64 audio; this module is the
only place that deals with file formats and sample-rate conversion.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

TARGET_RATE = 16000

# Resampler: Kaiser-windowed sinc, 64 output-rate zero crossings per side.
KAISER_BETA = 8.6
ZERO_CROSSINGS = 64

MANIFEST_COLUMNS = ("id", "audio_path", "speaker_id", "emotion", "corpus_id")


class AudioFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio buffer must be a non-empty 1-D sequence")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio buffer contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    speaker_id: str
    emotion: str
    corpus_id: str
    split_hint: Optional[str] = None


@dataclass
class Manifest:
    records: list
    label_set: list
    corpus_id: str = ""
    root: str = "."

    def __post_init__(self):
        if not self.label_set:
            raise ManifestError("label set is empty")
        if len(set(self.label_set)) != len(self.label_set):
            raise ManifestError(f"duplicate labels in label set {self.label_set}")
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate utterance id {rec.id!r}")
            seen.add(rec.id)
            if rec.emotion not in self.label_set:
                raise ManifestError(
                    f"utterance {rec.id!r} has emotion {rec.emotion!r} not in label set {self.label_set}")

    def speakers(self) -> list:
        return sorted({r.speaker_id for r in self.records})

    def label_index(self, emotion: str) -> int:
        return self.label_set.index(emotion)

    def resolve(self, rec: UtteranceRecord) -> str:
        if os.path.isabs(rec.audio_path):
            return rec.audio_path
        return os.path.join(self.root, rec.audio_path)

    def by_id(self) -> dict:
        return {r.id: r for r in self.records}


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM or 32-bit float WAV file as a mono buffer.

    Stereo input is averaged; 16-bit samples are scaled by 1/32768.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError/struct.error on bad headers
        raise AudioFormatError(f"{path}: malformed WAV ({exc})") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    if data.ndim == 2:
        if data.shape[1] not in (1, 2):
            raise AudioFormatError(f"{path}: {data.shape[1]} channels not supported")
        data = data.mean(axis=1)
    if data.size == 0:
        raise AudioFormatError(f"{path}: empty audio")
    return AudioBuffer(data, int(rate))


def write_wav(path, buf: AudioBuffer, encoding: str = "float32"):
    if encoding == "float32":
        data = buf.samples.astype(np.float32)
    elif encoding == "int16":
        data = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(path, buf.sample_rate, data)


def resampling_filter(up: int, down: int) -> np.ndarray:
    """Lowpass prototype for rational resampling by up/down, at rate fs*up."""
    ratio = max(up, down)
    half = ZERO_CROSSINGS * ratio
    n = np.arange(-half, half + 1)
    # cutoff at the lower of the two Nyquist rates, normalised to the upsampled rate
    cutoff = 1.0 / (2.0 * ratio)
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.kaiser(n.size, KAISER_BETA)
    return h * up


def resample_to_16k(buf: AudioBuffer) -> AudioBuffer:
    if buf.sample_rate == TARGET_RATE:
        return buf
    if buf.sample_rate < TARGET_RATE:
        raise ValueError(
            f"source rate {buf.sample_rate} Hz is below {TARGET_RATE} Hz; refusing to upsample")
    frac = Fraction(TARGET_RATE, buf.sample_rate)
    up, down = frac.numerator, frac.denominator
    h = resampling_filter(up, down)
    out = signal.resample_poly(buf.samples, up, down, window=h)
    expected = math.ceil(len(buf) * up / down)
    return AudioBuffer(out[:expected], TARGET_RATE)


def load_audio(path) -> AudioBuffer:
    return resample_to_16k(read_wav(path))


def load_manifest(path, label_set: Optional[Sequence[str]] = None) -> Manifest:
    """Parse a manifest CSV with header ``id,audio_path,speaker_id,emotion,corpus_id``.

    An optional ``split_hint`` column is kept; other extra columns are ignored.
    Relative audio paths resolve against the manifest's directory.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        records = []
        for row in reader:
            records.append(UtteranceRecord(
                id=row["id"].strip(),
                audio_path=row["audio_path"].strip(),
                speaker_id=row["speaker_id"].strip(),
                emotion=row["emotion"].strip(),
                corpus_id=row["corpus_id"].strip(),
                split_hint=(row.get("split_hint") or "").strip() or None,
            ))
    if not records:
        raise ManifestError(f"{path}: manifest has no rows")
    labels = list(label_set) if label_set is not None else sorted({r.emotion for r in records})
    corpora = sorted({r.corpus_id for r in records})
    return Manifest(records, labels, corpus_id=",".join(corpora),
                    root=os.path.dirname(os.path.abspath(path)))


def write_manifest(path, records: Sequence[UtteranceRecord]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.id, r.audio_path, r.speaker_id, r.emotion, r.corpus_id])
