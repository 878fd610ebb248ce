"""Run configuration: INI-style files with sections, presets and env overrides.

Sections and keys::

    [feature]  kind, bins_per_octave, hop, f_min, f_max, n_filters, n_fft,
               win_length, f_low, f_high, n_ceps, log_floor, chunk_len,
               sad_margin_db, sad_floor_db, sad_enabled, sample_rate
    [train]    lr, batch_size, epochs, dropout, beta1, beta2, adam_eps
    [augment]  enabled, noise_manifest
    [run]      preset, manifest, output_dir, alias_table, seeds, n_val, jobs

Precedence (lowest first): preset, config file, ``CQSER_<SECTION>_<KEY>``
environment variables, explicit ``section.key=value`` overrides.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Optional

from .dsp_core import CqtConfig, MelConfig
from .features import FeatureConfig, SadConfig
from .nn import TrainConfig

ENV_PREFIX = "CQSER_"


class ConfigError(ValueError):
    pass


PRESETS = {
    "cqt-optimized": {"kind": "CQT", "bins_per_octave": "3", "hop": "64"},
    "cqcc-optimized": {"kind": "CQCC", "bins_per_octave": "3", "hop": "64"},
    "mfsc-optimized": {"kind": "MFSC", "n_filters": "24", "hop": "64"},
    "mfcc-optimized": {"kind": "MFCC", "n_filters": "24", "hop": "64"},
    # 128 snapped mel filters need finer FFT resolution than 512 points give
    "mfsc-baseline": {"kind": "MFSC", "n_filters": "128", "hop": "160", "n_fft": "2048"},
}

SCHEMA = {
    "feature": {
        "kind": str, "bins_per_octave": int, "hop": int, "f_min": float, "f_max": float,
        "n_filters": int, "n_fft": int, "win_length": int, "f_low": float, "f_high": float,
        "n_ceps": int, "log_floor": float, "chunk_len": int, "sad_margin_db": float,
        "sad_floor_db": float, "sad_enabled": bool, "sample_rate": int,
    },
    "train": {"lr": float, "batch_size": int, "epochs": int, "dropout": float,
              "beta1": float, "beta2": float, "adam_eps": float},
    "augment": {"enabled": bool, "noise_manifest": str},
    "run": {"preset": str, "manifest": str, "output_dir": str, "alias_table": str,
            "seeds": str, "n_val": int, "jobs": int},
}


@dataclass
class AugmentParams:
    enabled: bool = True
    noise_manifest: Optional[str] = None


@dataclass
class RunConfig:
    feature: FeatureConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    manifest: Optional[str] = None
    output_dir: str = "out"
    alias_table: Optional[str] = None
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    n_val: int = 2
    jobs: int = 1
    preset: Optional[str] = None


def parse_seeds(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    seeds = [int(s) for s in str(text).replace(" ", "").split(",") if s]
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


def _convert(section, key, raw):
    typ = SCHEMA[section][key]
    raw = str(raw).strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def _merge(target: dict, section: str, items):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    for key, raw in items:
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        target.setdefault(section, {})[key] = raw


def collect_settings(path=None, preset=None, overrides=None, environ=None) -> dict:
    settings: dict = {}
    file_settings: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            _merge(file_settings, section, parser.items(section))
    environ = os.environ if environ is None else environ
    env_settings: dict = {}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        _merge(env_settings, section, [(key, value)])
    cli_settings: dict = {}
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        _merge(cli_settings, section.strip(), [(key.strip(), value)])
    chosen = preset
    for layer in (file_settings, env_settings, cli_settings):
        chosen = layer.get("run", {}).get("preset", chosen)
    if chosen is not None:
        if chosen not in PRESETS:
            raise ConfigError(f"unknown preset {chosen!r}; choose from {', '.join(PRESETS)}")
        _merge(settings, "feature", PRESETS[chosen].items())
        settings.setdefault("run", {})["preset"] = chosen
    for layer in (file_settings, env_settings, cli_settings):
        for section, items in layer.items():
            _merge(settings, section, items.items())
    return settings


def build_config(settings: dict) -> RunConfig:
    conv = {s: {k: _convert(s, k, v) for k, v in items.items()} for s, items in settings.items()}
    f = conv.get("feature", {})
    kind = f.get("kind", "CQT").upper()
    rate = f.get("sample_rate", 16000)
    try:
        sad = SadConfig(f.get("sad_margin_db", 40.0), f.get("sad_floor_db", -60.0),
                        f.get("sad_enabled", True))
        if kind in ("CQT", "CQCC"):
            cqt = CqtConfig(f.get("bins_per_octave", 3), f.get("hop", 64), f.get("f_min", 32.7),
                            f.get("f_max"), rate)
            mel = None
        else:
            cqt = None
            mel = MelConfig(f.get("n_filters", 24), f.get("hop", 64), f.get("n_fft", 512),
                            f.get("win_length", 400), f.get("f_low", 0.0), f.get("f_high"), rate)
        feature = FeatureConfig(kind, cqt, mel, f.get("n_ceps"), f.get("log_floor", 1e-10), sad,
                                f.get("chunk_len", 100))
        if mel is not None:
            from .dsp_core import mel_filterbank
            mel_filterbank(mel)  # fail early on colliding filters
        train = TrainConfig(**conv.get("train", {}))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    a = conv.get("augment", {})
    run = conv.get("run", {})
    return RunConfig(
        feature=feature, train=train,
        augment=AugmentParams(a.get("enabled", True), a.get("noise_manifest")),
        manifest=run.get("manifest"), output_dir=run.get("output_dir", "out"),
        alias_table=run.get("alias_table"),
        seeds=parse_seeds(run.get("seeds", "1,2,3")), n_val=run.get("n_val", 2),
        jobs=run.get("jobs", 1), preset=run.get("preset"))


def load_config(path=None, preset=None, overrides=None, environ=None) -> RunConfig:
    return build_config(collect_settings(path, preset, overrides, environ))


def preset_feature(name: str) -> FeatureConfig:
    return load_config(preset=name, environ={}).feature
