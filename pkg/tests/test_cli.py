import csv
import json
import os

import numpy as np
import pytest

from cqser.cli import main
from cqser.corpus_io import AudioBuffer, UtteranceRecord, write_manifest, write_wav
from cqser.dsp_core import CqtConfig, build_cqt_kernel
from cqser.synthetic import make_corpus, write_corpus

FS = 16000
FAST = ["--set", "train.epochs=1", "--set", "train.batch_size=32"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    manifest, audio = make_corpus(n_speakers=4, utts_per_speaker=4, seed=0, duration_range=(1.0, 1.5))
    write_corpus(str(d), manifest, audio)
    return d


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _subset_manifest(corpus_dir, path, n):
    with open(corpus_dir / "manifest.csv") as fh:
        rows = list(csv.reader(fh))
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows[:n + 1])


# --------------------------------------------------------------------------
# extract

def test_extract_three_utterances_deterministic(corpus_dir, tmp_path, capsys):
    m = corpus_dir / "three.csv"
    _subset_manifest(corpus_dir, m, 3)
    out = tmp_path / "ex"
    code, text, _ = _run(capsys, "extract", "--manifest", m, "--out", out, "--json")
    assert code == 0 and json.loads(text)["n_written"] == 3
    files = sorted(os.listdir(out / "features"))
    assert len(files) == 3
    index = (out / "index.csv").read_text().splitlines()
    assert len(index) == 4 and index[0] == "id,feature_path,speaker_id,emotion,n_bins,n_frames"
    snapshot = {f: (out / "features" / f).read_bytes() for f in files}
    snapshot["index"] = (out / "index.csv").read_bytes()
    assert _run(capsys, "extract", "--manifest", m, "--out", out)[0] == 0
    again = {f: (out / "features" / f).read_bytes() for f in files}
    again["index"] = (out / "index.csv").read_bytes()
    assert again == snapshot


def test_extract_strict_and_lenient(corpus_dir, tmp_path, capsys):
    (tmp_path / "broken.wav").write_bytes(b"RIFF\x00\x00\x00\x00WAVEnot audio")
    recs = [UtteranceRecord("good", str(corpus_dir / "wav" / "spk00_u00_steady.wav"), "s", "x", "c"),
            UtteranceRecord("bad", "broken.wav", "s", "x", "c")]
    m = tmp_path / "m.csv"
    write_manifest(m, recs)
    strict = tmp_path / "strict"
    code, _, err = _run(capsys, "extract", "--manifest", m, "--out", strict, "--strict")
    assert code != 0 and "bad" in err
    assert not (strict / "index.csv").exists()
    lenient = tmp_path / "lenient"
    code, text, _ = _run(capsys, "extract", "--manifest", m, "--out", lenient, "--json")
    assert code == 0 and json.loads(text)["skipped"] == ["bad"]
    assert len((lenient / "index.csv").read_text().splitlines()) == 2


def test_config_rejected_before_audio(tmp_path, capsys):
    code, _, err = _run(capsys, "extract", "--manifest", tmp_path / "missing.csv", "--out", tmp_path,
                        "--set", "feature.f_max=9000")
    assert code == 2 and "Nyquist" in err


# --------------------------------------------------------------------------
# fratio

def test_fratio_planted_bin(tmp_path, capsys):
    kernel = build_cqt_kernel(CqtConfig())
    planted = 12
    rng = np.random.default_rng(0)
    t = np.arange(FS // 2) / FS
    recs = []
    (tmp_path / "wav").mkdir()
    for i in range(8):
        label = "tone" if i % 2 else "plain"
        x = 0.3 * rng.standard_normal(t.size)
        if label == "tone":
            x += 0.3 * 10 ** 0.5 * np.sin(2 * np.pi * kernel.center_freqs[planted] * t)
        write_wav(tmp_path / "wav" / f"u{i}.wav", AudioBuffer(x, FS))
        recs.append(UtteranceRecord(f"u{i}_a02" if i < 6 else f"u{i}", f"wav/u{i}.wav", "s", label, "c"))
    write_manifest(tmp_path / "m.csv", recs)
    assert _run(capsys, "extract", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "ex")[0] == 0
    code, text, _ = _run(capsys, "fratio", "--index", tmp_path / "ex" / "index.csv",
                         "--out", tmp_path / "fr.csv", "--text-filter", "a02", "--json")
    assert code == 0
    info = json.loads(text)
    assert info["argmax_bin"] == planted and info["n_utterances"] == 6
    rows = (tmp_path / "fr.csv").read_text().splitlines()
    assert rows[0] == "bin_index,center_freq_hz,f_ratio" and len(rows) - 1 == kernel.n_bins
    code, _, err = _run(capsys, "fratio", "--index", tmp_path / "ex" / "index.csv", "--text-filter", "zzz")
    assert code == 2 and "zzz" in err


# --------------------------------------------------------------------------
# sweep

def test_sweep_table_and_resume(corpus_dir, tmp_path, capsys):
    args = ["sweep", "--manifest", corpus_dir / "manifest.csv", "--out", tmp_path, "--bins", "3,2",
            "--hops", "64", "--seeds", "1", "--set", "run.n_val=1", "--set", "augment.enabled=false",
            "--json", *FAST]
    code, text, _ = _run(capsys, *args)
    assert code == 0 and json.loads(text)["computed"] == 2
    table = (tmp_path / "sweep.csv").read_text().splitlines()
    assert table[0] == "bins_per_octave,hop,accuracy,uar"
    assert [r.split(",")[:2] for r in table[1:]] == [["2", "64"], ["3", "64"]]
    first = (tmp_path / "sweep.csv").read_bytes()
    cache = sorted((tmp_path / "sweep_cache").iterdir())
    assert len(cache) == 2
    cache[0].unlink()  # simulate an interrupted sweep
    code, text, _ = _run(capsys, *args)
    assert json.loads(text)["computed"] == 1 and json.loads(text)["cached"] == 1
    assert (tmp_path / "sweep.csv").read_bytes() == first


# --------------------------------------------------------------------------
# train / eval / cross

def test_train_then_score_checkpoint(corpus_dir, tmp_path, capsys):
    m = corpus_dir / "manifest.csv"
    code, text, _ = _run(capsys, "train", "--manifest", m, "--out", tmp_path, "--json", *FAST)
    assert code == 0
    meta = json.loads(text)
    assert (tmp_path / "model.ckpt").exists() and (tmp_path / "augment_plan.json").exists()
    log = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in log] == [1] and meta["best_epoch"] == 1
    code, text, _ = _run(capsys, "eval", "--manifest", m, "--out", tmp_path / "scored",
                         "--checkpoint", tmp_path / "model.ckpt")
    assert code == 0 and " / " in text
    assert (tmp_path / "scored" / "confusion.csv").exists()


def test_eval_seeds_block_and_determinism(corpus_dir, tmp_path, capsys):
    args = ["eval", "--manifest", corpus_dir / "manifest.csv", "--seeds", "1,2",
            "--set", "run.n_val=1", "--set", "augment.enabled=false", *FAST]
    code, text, _ = _run(capsys, *args, "--out", tmp_path / "a", "--json")
    assert code == 0
    report = json.loads(text)
    block = report["seeds"]
    assert block["seeds"] == [1, 2] and "±" in block["summary"]
    assert block["uar_mean"] == pytest.approx(np.mean(block["uar"]))
    assert block["uar_std"] == pytest.approx(np.std(block["uar"]))
    assert _run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    for name in ("report.json", "confusion.csv", "confusion_seed1.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def _labelled_manifest(corpus_dir, path, mapping, corpus_id):
    with open(corpus_dir / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    recs = [UtteranceRecord(r["id"], os.path.join(str(corpus_dir), r["audio_path"]), r["speaker_id"],
                            mapping[r["emotion"]], corpus_id) for r in rows]
    write_manifest(path, recs)


def test_cross_line_and_missing_alias(corpus_dir, tmp_path, capsys):
    emo = tmp_path / "emo.csv"
    rav = tmp_path / "rav.csv"
    _labelled_manifest(corpus_dir, emo, {"steady": "neutral", "vibrato": "happiness", "tremolo": "anger",
                                         "glide": "sadness"}, "emodb")
    _labelled_manifest(corpus_dir, rav, {"steady": "neutral", "vibrato": "happy", "tremolo": "angry",
                                         "glide": "sad"}, "ravdess")
    aliases = tmp_path / "aliases.csv"
    aliases.write_text("raw_label,canonical_label\nhappiness,happy\nanger,angry\nsadness,sad\n")
    code, text, _ = _run(capsys, "cross", "--train-manifest", emo, "--test-manifest", rav,
                         "--aliases", aliases, "--seeds", "1", "--out", tmp_path / "x", *FAST)
    assert code == 0
    import re
    assert re.search(r"emodb -> ravdess: \d\.\d\d / \d\.\d\d", text)
    report = json.loads((tmp_path / "x" / "cross_report.json").read_text())
    assert re.fullmatch(r"\d\.\d\d / \d\.\d\d", report["cell"])
    aliases.write_text("raw_label,canonical_label\nhappiness,happy\nanger,angry\n")
    code, _, err = _run(capsys, "cross", "--train-manifest", emo, "--test-manifest", rav,
                        "--aliases", aliases, "--seeds", "1", "--out", tmp_path / "y", *FAST)
    assert code == 2 and "sadness" in err


def test_synth_command(tmp_path, capsys):
    code, text, _ = _run(capsys, "synth", "--out", tmp_path, "--speakers", "2", "--utts", "3", "--json")
    assert code == 0 and json.loads(text)["n_utterances"] == 6
    assert len(os.listdir(tmp_path / "wav")) == 6


def test_noise_manifest_option(corpus_dir, tmp_path, capsys):
    noise = tmp_path / "noise.csv"
    write_manifest(noise, [UtteranceRecord("n0", str(corpus_dir / "wav" / "spk01_u00_steady.wav"),
                                           "-", "-", "noise")])
    code, _, _ = _run(capsys, "train", "--manifest", corpus_dir / "manifest.csv", "--out", tmp_path / "t",
                      "--set", f"augment.noise_manifest={noise}", *FAST)
    assert code == 0
