"""Evaluation protocol: metrics, leave-one-speaker-out folds, cross-corpus runs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, is_dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import augment as aug
from .corpus_io import AudioBuffer, Manifest, UtteranceRecord, load_audio
from .dsp_core import TimeFreqMatrix
from .features import FeatureConfig, UnusableUtteranceError, chunk, process_utterance
from .nn import Checkpoint, TdnnModel, TrainConfig, predict_utterance, train

log = logging.getLogger(__name__)

CROSS_CORPUS_CLASSES = ("angry", "happy", "sad", "neutral")


class LabelMappingError(ValueError):
    def __init__(self, label, corpus=""):
        super().__init__(f"no alias for emotion label {label!r}" + (f" in corpus {corpus}" if corpus else ""))
        self.label = label


# --------------------------------------------------------------------------
# metrics

@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"confusion matrix shape {self.counts.shape} does not match {k} classes")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, labels, preds, class_names):
        k = len(class_names)
        a = np.zeros((k, k), dtype=np.int64)
        np.add.at(a, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
        return cls(a, list(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other):
        if list(other.class_names) != list(self.class_names):
            raise ValueError("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def _counts(a) -> tuple:
    if isinstance(a, ConfusionMatrix):
        return a.counts, a.class_names
    a = np.asarray(a)
    return a, [str(i) for i in range(a.shape[0])]


def per_class_recall(a) -> np.ndarray:
    """Recall per class; NaN for classes with no test samples."""
    counts, _ = _counts(a)
    rows = counts.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(counts) / rows, np.nan)


def uar(a, skip_empty: bool = False) -> float:
    """Unweighted average recall: mean over classes of A_ii / sum_j A_ij."""
    counts, names = _counts(a)
    rows = counts.sum(axis=1)
    if not skip_empty and np.any(rows == 0):
        missing = names[int(np.argmax(rows == 0))]
        raise ValueError(f"class {missing!r} has no test samples; UAR undefined")
    recalls = per_class_recall(counts)
    return float(np.nanmean(recalls))


def accuracy(a) -> float:
    counts, _ = _counts(a)
    total = counts.sum()
    if total < 1:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(counts) / total)


@dataclass
class EvalReport:
    accuracy: float
    uar: float
    confusion: ConfusionMatrix
    per_class_recall: list
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, **metadata):
        recalls = per_class_recall(cm)
        return cls(accuracy(cm), uar(cm, skip_empty=True), cm,
                   [None if np.isnan(r) else float(r) for r in recalls], dict(metadata))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "uar": self.uar,
            "class_names": list(self.confusion.class_names),
            "confusion": self.confusion.counts.tolist(),
            "confusion_normalized": self.confusion.row_normalized().tolist(),
            "per_class_recall": self.per_class_recall,
            "metadata": self.metadata,
        }

    def table_cell(self) -> str:
        """Formatted as ``accuracy / UAR`` to two decimals."""
        return f"{self.accuracy:.2f} / {self.uar:.2f}"


def confusion_csv(cm: ConfusionMatrix, normalized: bool = False) -> str:
    vals = cm.row_normalized() if normalized else cm.counts
    lines = ["true\\pred," + ",".join(cm.class_names)]
    for name, row in zip(cm.class_names, vals):
        lines.append(name + "," + ",".join(repr(float(v)) if normalized else str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# LOSO splits

@dataclass
class Fold:
    test_speakers: list
    val_speakers: list
    train_speakers: list


@dataclass
class SplitPlan:
    folds: list

    def to_dict(self):
        return {"folds": [asdict(f) for f in self.folds]}


def make_loso_plan(speakers: Sequence[str], n_val: int = 2, seed: int = 0) -> SplitPlan:
    """One fold per test speaker; validation speakers rotate round-robin.

    For fold i the remaining speakers (sorted) supply validation speakers at
    positions ``(i + seed + j) mod (S - 1)`` for ``j < n_val``.
    """
    spk = sorted(set(speakers))
    if len(spk) < 4:
        raise ValueError(f"LOSO needs at least 4 speakers, got {len(spk)}")
    if n_val < 1 or n_val >= len(spk) - 1:
        raise ValueError(f"n_val={n_val} leaves no training speakers out of {len(spk)}")
    folds = []
    for i, test in enumerate(spk):
        rest = [s for s in spk if s != test]
        val_idx = {(i + seed + j) % len(rest) for j in range(n_val)}
        val = [rest[j] for j in sorted(val_idx)]
        folds.append(Fold([test], val, [s for s in rest if s not in val]))
    return SplitPlan(folds)


def validation_speakers(speakers: Sequence[str], fraction: float = 0.2, seed: int = 0) -> list:
    spk = sorted(set(speakers))
    if len(spk) < 2:
        raise ValueError("a speaker-disjoint validation slice needs at least 2 speakers")
    n = min(len(spk) - 1, max(1, int(round(fraction * len(spk)))))
    rng = np.random.default_rng(aug.stable_seed("val-slice", seed))
    return sorted(rng.choice(spk, size=n, replace=False).tolist())


# --------------------------------------------------------------------------
# corpora and the shared train/test pipeline

class Corpus:
    """A manifest plus lazily loaded 16 kHz audio, keyed by utterance id.

    ``noise_pool`` optionally holds external noise recordings for augmentation.
    """

    def __init__(self, manifest: Manifest, audio: Optional[dict] = None,
                 noise_pool: Optional[list] = None):
        self.manifest = manifest
        self._audio = dict(audio or {})
        self._records = manifest.by_id()
        self.noise_pool = noise_pool

    def audio(self, utt_id: str) -> AudioBuffer:
        if utt_id not in self._audio:
            self._audio[utt_id] = load_audio(self.manifest.resolve(self._records[utt_id]))
        return self._audio[utt_id]

    def records_for(self, speakers) -> list:
        speakers = set(speakers)
        return [r for r in self.manifest.records if r.speaker_id in speakers]

    def label(self, rec: UtteranceRecord) -> int:
        return self.manifest.label_index(rec.emotion)


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) if is_dataclass(c) else c for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class FeatureCache:
    """Processed (extract -> SAD -> CMVN) utterance features, shared across folds."""

    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        self._store: dict = {}
        self.failures: list = []

    def get(self, key, make_audio: Callable[[], AudioBuffer]):
        if key not in self._store:
            try:
                self._store[key] = process_utterance(make_audio(), self.cfg).values.astype(np.float32)
            except UnusableUtteranceError as exc:
                log.warning("skipping %s: %s", key, exc)
                self.failures.append(str(key))
                self._store[key] = None
        return self._store[key]


def training_chunks(corpus: Corpus, records: Sequence[UtteranceRecord], cache: FeatureCache,
                    seed: int, augment: bool = True) -> list:
    ids = [r.id for r in records]
    rec_by_id = {r.id: r for r in records}
    if augment:
        plan = aug.make_augment_plan(ids, seed)
    else:
        plan = [(u, aug.AugmentSpec("identity")) for u in ids]
    out, k_of = [], {}
    for utt, spec in plan:
        k = k_of.get(utt, 0)
        k_of[utt] = k + 1
        if spec.kind == "babble":
            others = tuple(sorted(u for u in ids if u != utt))
            key = (corpus.manifest.corpus_id, utt, spec, others)

            def make(utt=utt, spec=spec, others=others):
                pool = [corpus.audio(o).samples for o in others]
                return aug.apply_spec(corpus.audio(utt), spec, pool)
        else:
            key = (corpus.manifest.corpus_id, utt, spec if spec.kind != "identity" else "clean")

            def make(utt=utt, spec=spec):
                return aug.apply_spec(corpus.audio(utt), spec, noise_pool=corpus.noise_pool)
        feats = cache.get(key, make)
        if feats is None:
            continue
        out.extend(chunk(_wrap(feats, cache.cfg), cache.cfg.chunk_len,
                         corpus.label(rec_by_id[utt]), aug.augmented_id(utt, k)))
    return out


def _wrap(values, cfg):
    return TimeFreqMatrix(values, np.arange(values.shape[0], dtype=np.float64), cfg.hop,
                          cfg.sample_rate, "log-power")


def clean_features(corpus: Corpus, records: Sequence[UtteranceRecord], cache: FeatureCache) -> list:
    """(utt_id, features, label) for unaugmented utterances that survive SAD."""
    out = []
    for r in records:
        if aug.is_augmented(r.id):
            raise ValueError(f"augmented utterance {r.id!r} in an evaluation set")
        feats = cache.get((corpus.manifest.corpus_id, r.id, "clean"), lambda r=r: corpus.audio(r.id))
        if feats is not None:
            out.append((r.id, feats, corpus.label(r)))
    return out


def check_disjoint(train_ids, val_ids, test_ids):
    tr, va, te = set(map(aug.base_id, train_ids)), set(val_ids), set(test_ids)
    if tr & va or tr & te or va & te:
        raise AssertionError("utterance ids overlap between train/val/test")
    if any(aug.is_augmented(u) for u in va | te):
        raise AssertionError("augmented utterances leaked into validation/test")


def train_and_test(train_corpus: Corpus, train_recs, val_recs, test_corpus: Corpus, test_recs,
                   feature_cfg: FeatureConfig, train_cfg: TrainConfig, seed: int,
                   augment: bool = True, train_cache: Optional[FeatureCache] = None,
                   test_cache: Optional[FeatureCache] = None, log_fh=None, split_id: str = "",
                   disjoint: bool = True):
    """Train on augmented chunks, select by validation UAR, test on full utterances."""
    train_cache = train_cache or FeatureCache(feature_cfg)
    test_cache = test_cache or (train_cache if test_corpus is train_corpus else FeatureCache(feature_cfg))
    chunks = training_chunks(train_corpus, train_recs, train_cache, seed, augment)
    val = clean_features(train_corpus, val_recs, train_cache)
    test = clean_features(test_corpus, test_recs, test_cache)
    if not test:
        raise ValueError(f"split {split_id!r}: no test utterances survived feature extraction")
    if not chunks or not val:
        raise ValueError(f"split {split_id!r}: empty training or validation set")
    if disjoint:
        # ids are only comparable within one corpus; prefix the test side when corpora differ
        te = "" if test_corpus is train_corpus else "test:"
        check_disjoint([c.utterance_id for c in chunks], [u for u, _, _ in val],
                       [te + u for u, _, _ in test])
    names = list(train_corpus.manifest.label_set)
    model = TdnnModel(feature_cfg.dim, len(names), seed=aug.stable_seed("init", seed, split_id),
                      dropout_p=train_cfg.dropout)
    tcfg = TrainConfig(**{**asdict(train_cfg), "seed": aug.stable_seed("train", seed, split_id) % 2**32})
    ckpt = train(model, chunks, [(f, l) for _, f, l in val], tcfg, log_fh=log_fh)
    best = ckpt.to_model()
    preds = [predict_utterance(best, f)[0] for _, f, _ in test]
    cm = ConfusionMatrix.from_predictions([l for _, _, l in test], preds, names)
    report = EvalReport.from_confusion(
        cm, config_hash=config_hash(feature_cfg, train_cfg), seed=seed, split_id=split_id,
        best_epoch=ckpt.epoch, val_uar=ckpt.val_uar, n_train_chunks=len(chunks),
        test_ids=[u for u, _, _ in test])
    return report, ckpt


# --------------------------------------------------------------------------
# LOSO

@dataclass
class LosoResult:
    aggregate: EvalReport
    folds: list

    def to_dict(self):
        return {"aggregate": self.aggregate.to_dict(), "folds": [f.to_dict() for f in self.folds]}


def _run_fold(corpus, fold_index, fold, feature_cfg, train_cfg, seed, augment, cache):
    train_recs = corpus.records_for(fold.train_speakers)
    val_recs = corpus.records_for(fold.val_speakers)
    test_recs = corpus.records_for(fold.test_speakers)
    report, _ = train_and_test(corpus, train_recs, val_recs, corpus, test_recs, feature_cfg,
                               train_cfg, seed, augment, train_cache=cache,
                               split_id=f"fold{fold_index}")
    report.metadata["test_speakers"] = list(fold.test_speakers)
    report.metadata["val_speakers"] = list(fold.val_speakers)
    return report


def run_loso(corpus, feature_cfg: FeatureConfig, train_cfg: TrainConfig,
             plan: Optional[SplitPlan] = None, seed: int = 0, augment: bool = True,
             jobs: int = 1, n_val: int = 2) -> LosoResult:
    """Full LOSO: per fold augment, extract, train, test; confusions summed over folds."""
    if isinstance(corpus, Manifest):
        corpus = Corpus(corpus)
    plan = plan or make_loso_plan(corpus.manifest.speakers(), n_val=n_val)
    covered = {s for f in plan.folds for s in f.test_speakers + f.val_speakers + f.train_speakers}
    missing = set(corpus.manifest.speakers()) - covered
    if missing:
        raise ValueError(f"split plan does not cover speakers {sorted(missing)}")
    if jobs == 1:
        cache = FeatureCache(feature_cfg)
        reports = [_run_fold(corpus, i, f, feature_cfg, train_cfg, seed, augment, cache)
                   for i, f in enumerate(plan.folds)]
    else:
        from joblib import Parallel, delayed
        reports = Parallel(n_jobs=jobs)(
            delayed(_run_fold)(corpus, i, f, feature_cfg, train_cfg, seed, augment,
                               FeatureCache(feature_cfg))
            for i, f in enumerate(plan.folds))
    total = reports[0].confusion
    for r in reports[1:]:
        total = total + r.confusion
    agg = EvalReport.from_confusion(total, config_hash=config_hash(feature_cfg, train_cfg),
                                    seed=seed, split_id="loso", n_folds=len(reports))
    return LosoResult(agg, reports)


def summarize_seeds(reports: Sequence[EvalReport]) -> dict:
    accs = np.array([r.accuracy for r in reports])
    uars = np.array([r.uar for r in reports])
    return {
        "seeds": [r.metadata.get("seed") for r in reports],
        "accuracy_mean": float(accs.mean()), "accuracy_std": float(accs.std()),
        "uar_mean": float(uars.mean()), "uar_std": float(uars.std()),
        "accuracy": [float(a) for a in accs], "uar": [float(u) for u in uars],
    }


# --------------------------------------------------------------------------
# cross-corpus

def load_alias_table(path) -> dict:
    """CSV ``raw_label,canonical_label``; an empty canonical label excludes the raw label."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"raw_label", "canonical_label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: alias table needs columns raw_label,canonical_label")
        for row in reader:
            table[row["raw_label"].strip().lower()] = (row["canonical_label"] or "").strip().lower()
    return table


def map_labels(manifest: Manifest, aliases: dict,
               classes: Sequence[str] = CROSS_CORPUS_CLASSES) -> Manifest:
    """Restrict a manifest to ``classes`` via the alias table (case-insensitive)."""
    classes = [c.lower() for c in classes]
    out = []
    for r in manifest.records:
        raw = r.emotion.strip().lower()
        if raw in aliases:
            canon = aliases[raw]
        elif raw in classes:
            canon = raw
        else:
            raise LabelMappingError(r.emotion, manifest.corpus_id)
        if not canon:
            continue
        if canon not in classes:
            raise LabelMappingError(f"{r.emotion}->{canon}", manifest.corpus_id)
        out.append(UtteranceRecord(r.id, r.audio_path, r.speaker_id, canon, r.corpus_id, r.split_hint))
    return Manifest(out, list(classes), manifest.corpus_id, manifest.root)


def run_cross_corpus(train_corpus, test_corpus, feature_cfg: FeatureConfig,
                     train_cfg: TrainConfig, aliases: Optional[dict] = None, seed: int = 0,
                     augment: bool = True, val_fraction: float = 0.2) -> EvalReport:
    """Train on one corpus (speaker-disjoint validation slice), test on all of another."""
    aliases = aliases or {}
    if isinstance(train_corpus, Manifest):
        train_corpus = Corpus(train_corpus)
    if isinstance(test_corpus, Manifest):
        test_corpus = Corpus(test_corpus)
    same = train_corpus is test_corpus or train_corpus.manifest is test_corpus.manifest
    tr = Corpus(map_labels(train_corpus.manifest, aliases), train_corpus._audio,
                train_corpus.noise_pool)
    te = tr if same else Corpus(map_labels(test_corpus.manifest, aliases), test_corpus._audio)
    val_spk = validation_speakers(tr.manifest.speakers(), val_fraction, seed)
    train_recs = [r for r in tr.manifest.records if r.speaker_id not in val_spk]
    val_recs = tr.records_for(val_spk)
    # identical train/test corpora degrade to a closed-set evaluation over every utterance
    report, _ = train_and_test(tr, train_recs, val_recs, te, te.manifest.records,
                               feature_cfg, train_cfg, seed, augment, split_id="cross",
                               disjoint=not same)
    report.metadata.update(train_corpus=tr.manifest.corpus_id, test_corpus=te.manifest.corpus_id,
                           val_speakers=val_spk, closed_set=same)
    return report
