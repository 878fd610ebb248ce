"""``cqser`` command line: extract, fratio, sweep, train, eval, cross and synth.

Every subcommand takes ``--config`` (INI file), ``--preset`` and repeatable
``--set section.key=value`` overrides; ``CQSER_<SECTION>_<KEY>`` environment
variables sit between the file and the flags. Tables are CSV, reports JSON.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or labels.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import augment as aug
from .config import ConfigError, PRESETS, RunConfig, load_config
from .corpus_io import AudioFormatError, ManifestError, load_audio, load_manifest
from .dsp_core import load_matrix, matrix_to_bytes
from .eval_harness import (Corpus, EvalReport, FeatureCache, LabelMappingError, ConfusionMatrix,
                           clean_features, config_hash, confusion_csv, load_alias_table,
                           run_cross_corpus, run_loso, summarize_seeds, training_chunks,
                           validation_speakers)
from .features import UnusableUtteranceError, cmvn, extract, f_ratio, f_ratio_csv, sad_filter
from .nn import TdnnModel, load_checkpoint, predict_utterance, save_checkpoint, train

log = logging.getLogger("cqser")

INDEX_FIELDS = ["id", "feature_path", "speaker_id", "emotion", "n_bins", "n_frames"]
STAGES = ("log", "sad", "normalized")


class CliError(RuntimeError):
    """Runtime failure reported with exit code 1."""


# --------------------------------------------------------------------------
# helpers

def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path, text: str):
    """Write via a temporary file so readers never see a partial file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_bytes(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    for attr, key in (("manifest", "run.manifest"), ("out", "run.output_dir"),
                      ("jobs", "run.jobs"), ("aliases", "run.alias_table")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    seeds = getattr(args, "seeds", None)
    if seeds is not None:
        overrides.append(f"run.seeds={seeds}")
    return load_config(args.config, args.preset, overrides)


def _load_noise_pool(path):
    """Noise recordings from a CSV with the corpus manifest schema (emotion ignored)."""
    if not path:
        return None
    root = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if "audio_path" not in (reader.fieldnames or []):
            raise ConfigError(f"noise manifest {path} needs an audio_path column")
        pool = [load_audio(os.path.join(root, row["audio_path"])).samples for row in reader]
    if not pool:
        raise ConfigError(f"noise manifest {path} lists no recordings")
    return pool


def _corpus(cfg: RunConfig, manifest_path=None) -> Corpus:
    path = manifest_path or cfg.manifest
    if not path:
        raise ConfigError("no manifest given (use --manifest or run.manifest)")
    return Corpus(load_manifest(path), noise_pool=_load_noise_pool(cfg.augment.noise_manifest))


def _emit(args, payload: dict, text: str):
    if getattr(args, "json", False):
        sys.stdout.write(_dump_json(payload))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _seed_block(reports) -> dict:
    block = summarize_seeds(reports)
    block["summary"] = (f"accuracy {block['accuracy_mean']:.4f} ± {block['accuracy_std']:.4f}, "
                        f"UAR {block['uar_mean']:.4f} ± {block['uar_std']:.4f}")
    return block


# --------------------------------------------------------------------------
# extract

def _extract_one(rec, root, feature_cfg, stage, out_dir):
    """Returns (record, n_bins, n_frames, relpath) or (record, error message)."""
    try:
        buf = load_audio(os.path.join(root, rec.audio_path))
        m = extract(buf, feature_cfg)
        if stage != "log" and feature_cfg.sad.enabled:
            m = sad_filter(m, buf, feature_cfg.sad, feature_cfg.hop)
        if m.n_frames < 1:
            raise UnusableUtteranceError("no frames left after SAD")
        if stage == "normalized":
            m = cmvn(m)
    except (AudioFormatError, UnusableUtteranceError, OSError, ValueError) as exc:
        return rec, f"{type(exc).__name__}: {exc}"
    rel = os.path.join("features", f"{rec.id}.cqtfm")
    _write_bytes(os.path.join(out_dir, rel), matrix_to_bytes(m))
    return rec, m.n_bins, m.n_frames, rel


def cmd_extract(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest or cfg.manifest)
    out_dir = args.out or cfg.output_dir
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    root = manifest.root
    recs = manifest.records
    if cfg.jobs > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=cfg.jobs)(
            delayed(_extract_one)(r, root, cfg.feature, args.stage, out_dir) for r in recs)
    else:
        results = [_extract_one(r, root, cfg.feature, args.stage, out_dir) for r in recs]
    rows, failures = [], []
    for res in results:
        if len(res) == 2:
            failures.append((res[0].id, res[1]))
            log.warning("skipping %s: %s", res[0].id, res[1])
            continue
        rec, n_bins, n_frames, rel = res
        rows.append([rec.id, rel, rec.speaker_id, rec.emotion, n_bins, n_frames])
    if failures and args.strict:
        raise CliError(f"{len(failures)} utterance(s) failed, first {failures[0][0]}: "
                       f"{failures[0][1]}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(INDEX_FIELDS)
    writer.writerows(rows)
    index_path = os.path.join(out_dir, "index.csv")
    _write_text(index_path, buf.getvalue())
    payload = {"index": index_path, "n_written": len(rows), "skipped": [u for u, _ in failures],
               "config_hash": config_hash(cfg.feature), "stage": args.stage}
    _emit(args, payload, f"wrote {len(rows)} feature files, skipped {len(failures)}; index {index_path}")
    return 0


# --------------------------------------------------------------------------
# fratio

def read_index(path) -> list:
    root = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(INDEX_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: feature index lacks columns {sorted(missing)}")
        rows = list(reader)
    for row in rows:
        row["feature_path"] = os.path.join(root, row["feature_path"])
    return rows


def cmd_fratio(args) -> int:
    rows = read_index(args.index)
    if args.text_filter:
        rows = [r for r in rows if args.text_filter in r["id"]]
        if not rows:
            raise ConfigError(f"--text-filter {args.text_filter!r} selects no utterances")
    if args.classes:
        wanted = set(args.classes.split(","))
        rows = [r for r in rows if r["emotion"] in wanted]
    if not rows:
        raise ConfigError("no utterances to score")
    mats = [(load_matrix(r["feature_path"]), r["emotion"]) for r in rows]
    ratios = f_ratio(mats)
    text = f_ratio_csv(ratios, mats[0][0].bin_freqs)
    if args.out:
        _write_text(args.out, text)
    best = int(np.argmax(ratios))
    payload = {"n_utterances": len(rows), "n_bins": int(ratios.size), "argmax_bin": best,
               "argmax_freq_hz": float(mats[0][0].bin_freqs[best]), "output": args.out}
    _emit(args, payload, text if not args.out else
          f"{len(rows)} utterances, {ratios.size} bins, argmax bin {best}; wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# sweep

def _grid_feature(feature, bins: int, hop: int):
    if feature.kind in ("CQT", "CQCC"):
        return replace(feature, cqt=replace(feature.cqt, bins_per_octave=bins, hop=hop))
    return replace(feature, mel=replace(feature.mel, n_filters=bins, hop=hop))


def _sweep_point(manifest_path, feature, train_cfg, seeds, augment, n_val, noise_manifest):
    corpus = Corpus(load_manifest(manifest_path), noise_pool=_load_noise_pool(noise_manifest))
    reports = [run_loso(corpus, feature, train_cfg, seed=s, augment=augment, n_val=n_val).aggregate
               for s in seeds]
    return _seed_block(reports)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if not cfg.manifest:
        raise ConfigError("no manifest given (use --manifest or run.manifest)")
    bins = sorted({int(b) for b in args.bins.split(",") if b})
    hops = sorted({int(h) for h in args.hops.split(",") if h})
    # validate every grid point before any audio is read
    grid = [(b, h, _grid_feature(cfg.feature, b, h)) for b in bins for h in hops]
    out_dir = cfg.output_dir
    cache_dir = os.path.join(out_dir, "sweep_cache")
    os.makedirs(cache_dir, exist_ok=True)
    manifest_sig = config_hash(open(cfg.manifest, encoding="utf-8").read())
    todo, results = [], {}
    for b, h, feat in grid:
        key = config_hash(feat, cfg.train, cfg.seeds, cfg.augment, cfg.n_val, manifest_sig)
        path = os.path.join(cache_dir, f"{key}.json")
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                results[(b, h)] = json.load(fh)
        else:
            todo.append((b, h, feat, path))

    def finish(point, block):
        b, h, _, path = point
        _write_text(path, _dump_json(block))
        results[(b, h)] = block

    run_args = (cfg.train, cfg.seeds, cfg.augment.enabled, cfg.n_val, cfg.augment.noise_manifest)
    if cfg.jobs > 1 and len(todo) > 1:
        from joblib import Parallel, delayed
        blocks = Parallel(n_jobs=cfg.jobs)(
            delayed(_sweep_point)(cfg.manifest, p[2], *run_args) for p in todo)
        for p, block in zip(todo, blocks):
            finish(p, block)
    else:
        for p in todo:
            log.info("sweep point bins=%d hop=%d", p[0], p[1])
            finish(p, _sweep_point(cfg.manifest, p[2], *run_args))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    label = "bins_per_octave" if cfg.feature.kind in ("CQT", "CQCC") else "n_filters"
    writer.writerow([label, "hop", "accuracy", "uar"])
    for b, h, _ in grid:
        r = results[(b, h)]
        writer.writerow([b, h, repr(r["accuracy_mean"]), repr(r["uar_mean"])])
    table = os.path.join(out_dir, "sweep.csv")
    _write_text(table, buf.getvalue())
    payload = {"table": table, "n_points": len(grid), "computed": len(todo),
               "cached": len(grid) - len(todo)}
    _emit(args, payload, buf.getvalue())
    return 0


# --------------------------------------------------------------------------
# train / eval

def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _corpus(cfg)
    seed = cfg.seeds[0]
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    val_spk = validation_speakers(corpus.manifest.speakers(), args.val_fraction, seed)
    train_recs = [r for r in corpus.manifest.records if r.speaker_id not in val_spk]
    val_recs = corpus.records_for(val_spk)
    if cfg.augment.enabled:
        plan = aug.make_augment_plan([r.id for r in train_recs], seed)
        _write_text(os.path.join(out_dir, "augment_plan.json"), aug.plan_to_json(plan))
    cache = FeatureCache(cfg.feature)
    chunks = training_chunks(corpus, train_recs, cache, seed, cfg.augment.enabled)
    val = clean_features(corpus, val_recs, cache)
    names = list(corpus.manifest.label_set)
    model = TdnnModel(cfg.feature.dim, len(names), seed=aug.stable_seed("init", seed, "train"),
                      dropout_p=cfg.train.dropout)
    tcfg = replace(cfg.train, seed=aug.stable_seed("train", seed, "train") % 2**32)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        ckpt = train(model, chunks, [(f, l) for _, f, l in val], tcfg, log_fh=fh)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(ckpt_path, ckpt)
    meta = {"class_names": names, "feature": asdict(cfg.feature), "train": asdict(cfg.train),
            "config_hash": config_hash(cfg.feature, cfg.train), "seed": seed,
            "val_speakers": val_spk, "best_epoch": ckpt.epoch, "val_uar": ckpt.val_uar,
            "n_train_chunks": len(chunks),
            # relative to the output directory so reruns elsewhere stay byte-identical
            "checkpoint": "model.ckpt", "log": "train_log.jsonl"}
    _write_text(os.path.join(out_dir, "model.json"), _dump_json(meta))
    _emit(args, meta, f"best epoch {ckpt.epoch} (val UAR {ckpt.val_uar:.4f}); wrote {ckpt_path}")
    return 0


def _eval_checkpoint(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.n_in != cfg.feature.dim:
        raise ConfigError(f"checkpoint expects {ckpt.n_in}-dim features, config gives "
                          f"{cfg.feature.dim}")
    corpus = _corpus(cfg)
    names = list(corpus.manifest.label_set)
    if len(names) != ckpt.n_classes:
        raise ConfigError(f"checkpoint has {ckpt.n_classes} classes, manifest {len(names)}")
    model = ckpt.to_model()
    test = clean_features(corpus, corpus.manifest.records, FeatureCache(cfg.feature))
    preds = [predict_utterance(model, f)[0] for _, f, _ in test]
    cm = ConfusionMatrix.from_predictions([l for _, _, l in test], preds, names)
    report = EvalReport.from_confusion(cm, checkpoint_epoch=ckpt.epoch,
                                       config_hash=config_hash(cfg.feature))
    os.makedirs(cfg.output_dir, exist_ok=True)
    _write_text(os.path.join(cfg.output_dir, "report.json"), _dump_json(report.to_dict()))
    _write_text(os.path.join(cfg.output_dir, "confusion.csv"), confusion_csv(cm))
    _emit(args, report.to_dict(), report.table_cell())
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        return _eval_checkpoint(args, cfg)
    corpus = _corpus(cfg)
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    per_seed, total = [], None
    for seed in cfg.seeds:
        res = run_loso(corpus, cfg.feature, cfg.train, seed=seed, augment=cfg.augment.enabled,
                       jobs=cfg.jobs, n_val=cfg.n_val)
        per_seed.append(res)
        _write_text(os.path.join(out_dir, f"confusion_seed{seed}.csv"),
                    confusion_csv(res.aggregate.confusion))
        total = res.aggregate.confusion if total is None else total + res.aggregate.confusion
    _write_text(os.path.join(out_dir, "confusion.csv"), confusion_csv(total))
    block = _seed_block([r.aggregate for r in per_seed])
    report = {"protocol": "loso", "preset": cfg.preset, "n_val": cfg.n_val,
              "config_hash": config_hash(cfg.feature, cfg.train),
              "feature": asdict(cfg.feature), "train": asdict(cfg.train),
              "augment": cfg.augment.enabled, "seeds": block,
              "runs": {str(s): r.to_dict() for s, r in zip(cfg.seeds, per_seed)}}
    _write_text(os.path.join(out_dir, "report.json"), _dump_json(report))
    lines = [f"seed {s}: {r.aggregate.table_cell()}" for s, r in zip(cfg.seeds, per_seed)]
    lines.append(block["summary"])
    _emit(args, report, "\n".join(lines))
    return 0


# --------------------------------------------------------------------------
# cross-corpus

def cmd_cross(args) -> int:
    cfg = _config(args)
    aliases = load_alias_table(cfg.alias_table) if cfg.alias_table else {}
    pool = _load_noise_pool(cfg.augment.noise_manifest)
    train_c = Corpus(load_manifest(args.train_manifest), noise_pool=pool)
    same = os.path.abspath(args.train_manifest) == os.path.abspath(args.test_manifest)
    test_c = train_c if same else Corpus(load_manifest(args.test_manifest))
    reports = [run_cross_corpus(train_c, test_c, cfg.feature, cfg.train, aliases, seed=s,
                                augment=cfg.augment.enabled) for s in cfg.seeds]
    total = reports[0].confusion
    for r in reports[1:]:
        total = total + r.confusion
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    block = _seed_block(reports)
    cell = f"{block['accuracy_mean']:.2f} / {block['uar_mean']:.2f}"
    report = {"protocol": "cross-corpus", "cell": cell, "seeds": block,
              "train_corpus": reports[0].metadata["train_corpus"],
              "test_corpus": reports[0].metadata["test_corpus"],
              "closed_set": reports[0].metadata["closed_set"],
              "config_hash": config_hash(cfg.feature, cfg.train),
              "runs": {str(s): r.to_dict() for s, r in zip(cfg.seeds, reports)}}
    _write_text(os.path.join(out_dir, "cross_report.json"), _dump_json(report))
    _write_text(os.path.join(out_dir, "cross_confusion.csv"), confusion_csv(total))
    text = f"{report['train_corpus']} -> {report['test_corpus']}: {cell}  (accuracy / UAR)"
    _emit(args, report, text)
    return 0


# --------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    from .synthetic import make_corpus, write_corpus
    manifest, audio = make_corpus(args.speakers, args.utts, seed=args.seed,
                                  corpus_id=args.corpus_id)
    path = write_corpus(args.out, manifest, audio)
    _emit(args, {"manifest": path, "n_utterances": len(manifest.records),
                 "speakers": manifest.speakers(), "classes": list(manifest.label_set)},
          f"wrote {len(manifest.records)} utterances; manifest {path}")
    return 0


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file with [feature]/[train]/[augment]/[run]")
    common.add_argument("--preset", choices=sorted(PRESETS), help="feature preset")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--json", action="store_true", help="print a JSON document to stdout")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cqser", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common], help="write one feature file per utterance")
    s.add_argument("--manifest")
    s.add_argument("--out", help="output directory")
    s.add_argument("--stage", choices=STAGES, default="sad",
                   help="log features, after SAD (default), or SAD + CMVN")
    s.add_argument("--strict", action="store_true", help="abort on the first unreadable utterance")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("fratio", parents=[common], help="per-bin F-ratio CSV from a feature index")
    s.add_argument("--index", required=True)
    s.add_argument("--out", help="CSV path (default: print)")
    s.add_argument("--text-filter", help="keep utterances whose id contains this text")
    s.add_argument("--classes", help="comma-separated emotions to keep")
    s.set_defaults(func=cmd_fratio)

    s = sub.add_parser("sweep", parents=[common], help="LOSO over a bins x hop grid")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--bins", required=True, help="bins per octave (or mel filters), e.g. 2,3,6")
    s.add_argument("--hops", required=True, help="hop lengths in samples, e.g. 64,128,192")
    s.add_argument("--seeds")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("train", parents=[common], help="train one model on a whole corpus")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--seeds", help="the first seed is used")
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="LOSO evaluation over seeds")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--seeds", help="comma-separated, e.g. 1,2,3")
    s.add_argument("--checkpoint", help="score a trained checkpoint instead of running LOSO")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cross", parents=[common], help="train on one corpus, test on another")
    s.add_argument("--train-manifest", required=True)
    s.add_argument("--test-manifest", required=True)
    s.add_argument("--aliases", help="CSV raw_label,canonical_label")
    s.add_argument("--out")
    s.add_argument("--seeds")
    s.set_defaults(func=cmd_cross)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic 4-class corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=8)
    s.add_argument("--utts", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corpus-id", default="synth")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LabelMappingError as exc:
        print(f"error: no alias for label {exc.label!r}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CliError, AudioFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
