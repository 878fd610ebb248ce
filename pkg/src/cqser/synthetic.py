"""Synthetic emotion-like corpus: class-specific low-frequency AM/FM tone signatures.

Four classes, each a harmonic tone complex whose temporal dynamics differ:

    steady   slow shallow amplitude drift
    vibrato  ~6 Hz frequency modulation
    tremolo  ~9 Hz deep amplitude modulation
    glide    repeated upward pitch sweeps

Speakers shift the fundamental and modulation rates; every utterance gets
background noise and leading/trailing silence.
"""
from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .augment import stable_seed
from .corpus_io import AudioBuffer, Manifest, UtteranceRecord, write_manifest, write_wav

CLASSES = ("steady", "vibrato", "tremolo", "glide")
RATE = 16000


def _harmonics(phase: np.ndarray, n_harm: int = 4) -> np.ndarray:
    return sum(np.sin(h * phase) / h for h in range(1, n_harm + 1))


def synth_utterance(cls: str, speaker_scale: float, rate_scale: float, duration: float,
                    rng: np.random.Generator, snr_db: float = 20.0) -> np.ndarray:
    n = int(duration * RATE)
    t = np.arange(n) / RATE
    jitter = rng.uniform(0.9, 1.1)
    f0 = 150.0 * speaker_scale
    amp = np.ones(n)
    if cls == "steady":
        freq = np.full(n, f0)
        amp = 1.0 + 0.2 * np.sin(2 * np.pi * 1.5 * rate_scale * jitter * t + rng.uniform(0, 2 * np.pi))
    elif cls == "vibrato":
        freq = f0 * (1.0 + 0.12 * np.sin(2 * np.pi * 6.0 * rate_scale * jitter * t + rng.uniform(0, 2 * np.pi)))
    elif cls == "tremolo":
        freq = np.full(n, 1.4 * f0)
        amp = 0.55 + 0.45 * np.sin(2 * np.pi * 9.0 * rate_scale * jitter * t + rng.uniform(0, 2 * np.pi))
    elif cls == "glide":
        saw = (1.5 * rate_scale * jitter * t + rng.uniform(0, 1)) % 1.0
        freq = f0 * 2.0 ** (1.2 * saw - 0.4)
    else:
        raise ValueError(f"unknown synthetic class {cls!r}")
    phase = 2 * np.pi * np.cumsum(freq) / RATE + rng.uniform(0, 2 * np.pi)
    x = amp * _harmonics(phase)
    x = x / np.sqrt(np.mean(x ** 2))
    x += rng.standard_normal(n) * 10 ** (-snr_db / 20)
    pad = int(0.2 * RATE)
    x = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    return 0.1 * x


def make_corpus(n_speakers: int = 8, utts_per_speaker: int = 10, seed: int = 0,
                classes=CLASSES, duration_range=(2.0, 4.0), corpus_id: str = "synth"):
    """Build a balanced synthetic corpus in memory; returns (Manifest, {id: AudioBuffer})."""
    records, audio = [], {}
    for s in range(n_speakers):
        spk = f"spk{s:02d}"
        srng = np.random.default_rng(stable_seed(corpus_id, seed, spk))
        speaker_scale = srng.uniform(0.8, 1.25)
        rate_scale = srng.uniform(0.9, 1.1)
        for u in range(utts_per_speaker):
            cls = classes[u % len(classes)]
            uid = f"{spk}_u{u:02d}_{cls}"
            rng = np.random.default_rng(stable_seed(corpus_id, seed, uid))
            dur = rng.uniform(*duration_range)
            audio[uid] = AudioBuffer(
                synth_utterance(cls, speaker_scale, rate_scale, dur, rng), RATE)
            records.append(UtteranceRecord(uid, f"wav/{uid}.wav", spk, cls, corpus_id))
    return Manifest(records, list(classes), corpus_id), audio


def write_corpus(out_dir, manifest: Manifest, audio: dict, name: Optional[str] = None) -> str:
    """Write WAVs (32-bit float) and ``manifest.csv`` under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    for rec in manifest.records:
        write_wav(os.path.join(out_dir, rec.audio_path), audio[rec.id])
    path = os.path.join(out_dir, name or "manifest.csv")
    write_manifest(path, manifest.records)
    return path
