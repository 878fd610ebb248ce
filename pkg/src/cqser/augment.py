"""Training-set augmentation with synthetic noise and reverberation.

Each training utterance yields five copies: the clean original plus one
white-noise, one pink-noise, one babble and one reverberated version. The
augmented copies carry ids of the form ``<id>#aug<k>``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .corpus_io import AudioBuffer

AUG_KINDS = ("identity", "white_noise", "pink_noise", "babble", "reverb")
SNR_CHOICES = (0.0, 5.0, 10.0, 15.0, 20.0)
RT60_RANGE = (0.2, 0.8)
N_FOLDS = 5
BABBLE_TALKERS = 6
NOISE_CLIP_SIGMA = 3.0
AUG_SEP = "#aug"


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "identity"
    snr_db: Optional[float] = None
    rt60_s: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind in ("white_noise", "pink_noise", "babble"):
            if self.snr_db is None or not 0.0 <= self.snr_db <= 30.0:
                raise ValueError(f"snr_db must be in [0, 30], got {self.snr_db}")
        if self.kind == "reverb" and (self.rt60_s is None or not 0.0 < self.rt60_s <= 2.0):
            raise ValueError(f"rt60_s must be in (0, 2], got {self.rt60_s}")


def stable_seed(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def augmented_id(utt_id: str, k: int) -> str:
    return utt_id if k == 0 else f"{utt_id}{AUG_SEP}{k}"


def is_augmented(utt_id: str) -> bool:
    return AUG_SEP in utt_id


def base_id(utt_id: str) -> str:
    return utt_id.split(AUG_SEP, 1)[0]


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _peak_limit(n: np.ndarray) -> np.ndarray:
    # crest factor <= NOISE_CLIP_SIGMA, so |g n| <= 3 rms(x) and |x + g n| <= 4
    n = n / rms(n)
    level = NOISE_CLIP_SIGMA
    while True:
        clipped = np.clip(n, -level, level)
        if np.max(np.abs(clipped)) <= NOISE_CLIP_SIGMA * rms(clipped):
            return clipped
        level *= 0.98


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n)


def babble_noise(n: int, pool: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    if not pool:
        raise ValueError("babble noise needs a pool of other training utterances")
    picks = rng.choice(len(pool), size=BABBLE_TALKERS, replace=len(pool) < BABBLE_TALKERS)
    out = np.zeros(n)
    for i in picks:
        src = np.asarray(pool[i], dtype=np.float64)
        src = np.resize(src, n)  # tile or truncate to length
        out += np.roll(src, int(rng.integers(0, n)))
    return out


def recorded_noise(n: int, pool: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    src = np.resize(np.asarray(pool[int(rng.integers(0, len(pool)))], dtype=np.float64), n)
    return np.roll(src, int(rng.integers(0, n)))


def add_noise(buf: AudioBuffer, kind: str, snr_db: float, seed: int,
              babble_pool: Optional[Sequence[np.ndarray]] = None,
              noise_pool: Optional[Sequence[np.ndarray]] = None) -> AudioBuffer:
    """Mix noise into ``buf`` at ``snr_db``.

    With ``noise_pool`` (external noise recordings), the white-noise fold
    draws a random recording at a random offset instead of synthesising.
    """
    x = buf.samples
    p_x = float(np.mean(x ** 2))
    if p_x <= 0:
        raise ValueError("cannot set an SNR against a silent signal")
    if np.isinf(snr_db):
        return AudioBuffer(x.copy(), buf.sample_rate)
    rng = np.random.default_rng(seed)
    if kind == "white_noise" and noise_pool:
        n = recorded_noise(x.size, noise_pool, rng)
    elif kind == "white_noise":
        n = white_noise(x.size, rng)
    elif kind == "pink_noise":
        n = pink_noise(x.size, rng)
    elif kind == "babble":
        n = babble_noise(x.size, babble_pool or [], rng)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    if rms(n) == 0:
        raise ValueError("generated noise is silent")
    n = _peak_limit(n)
    g = np.sqrt(p_x / (np.mean(n ** 2) * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(x + g * n, buf.sample_rate)


def rir_envelope(t: np.ndarray, rt60_s: float) -> np.ndarray:
    """Amplitude envelope whose energy falls 60 dB over ``rt60_s`` seconds."""
    return 10.0 ** (-3.0 * t / rt60_s)


def synth_rir(rt60_s: float, seed: int, sample_rate: int = 16000) -> np.ndarray:
    if not 0.0 < rt60_s <= 2.0:
        raise ValueError(f"rt60_s must be in (0, 2], got {rt60_s}")
    n = max(1, int(round(1.5 * rt60_s * sample_rate)))
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(n) * rir_envelope(np.arange(n) / sample_rate, rt60_s)
    return h / np.max(np.abs(h))


def apply_reverb(buf: AudioBuffer, rir: np.ndarray) -> AudioBuffer:
    x = buf.samples
    y = signal.oaconvolve(x, np.asarray(rir, dtype=np.float64))[: x.size]
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return AudioBuffer(y, buf.sample_rate)


def make_augment_plan(train_ids: Sequence[str], seed: int) -> list:
    """Five entries per utterance: identity followed by one of each corruption."""
    if not train_ids:
        raise ValueError("augmentation plan needs at least one training utterance")
    plan = []
    for utt in train_ids:
        rng = np.random.default_rng(stable_seed("plan", seed, utt))
        plan.append((utt, AugmentSpec("identity", seed=stable_seed(seed, utt, 0))))
        for k, kind in enumerate(AUG_KINDS[1:], start=1):
            spec_seed = stable_seed(seed, utt, k)
            if kind == "reverb":
                rt60 = float(rng.uniform(*RT60_RANGE))
                plan.append((utt, AugmentSpec(kind, rt60_s=rt60, seed=spec_seed)))
            else:
                snr = float(rng.choice(SNR_CHOICES))
                plan.append((utt, AugmentSpec(kind, snr_db=snr, seed=spec_seed)))
    return plan


def plan_to_json(plan) -> str:
    return json.dumps([{"utterance_id": u, **asdict(s)} for u, s in plan], indent=1)


def apply_spec(buf: AudioBuffer, spec: AugmentSpec,
               babble_pool: Optional[Sequence[np.ndarray]] = None,
               noise_pool: Optional[Sequence[np.ndarray]] = None) -> AudioBuffer:
    if spec.kind == "identity":
        return buf
    if spec.kind == "reverb":
        return apply_reverb(buf, synth_rir(spec.rt60_s, spec.seed, buf.sample_rate))
    return add_noise(buf, spec.kind, spec.snr_db, spec.seed, babble_pool, noise_pool)
