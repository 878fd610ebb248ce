import numpy as np
import pytest
from hypothesis import given, strategies as st

from cqser.corpus_io import Manifest, UtteranceRecord
from cqser.eval_harness import (ConfusionMatrix, Corpus, EvalReport, LabelMappingError, accuracy,
                                check_disjoint, confusion_csv, load_alias_table, make_loso_plan,
                                map_labels, per_class_recall, run_cross_corpus, run_loso,
                                summarize_seeds, uar, validation_speakers)
from cqser.features import FeatureConfig
from cqser.nn import TrainConfig
from cqser.synthetic import make_corpus

FAST_TRAIN = TrainConfig(epochs=2, batch_size=32)


# --------------------------------------------------------------------------
# metrics

def test_uar_and_accuracy_reference_matrix():
    a = np.array([[9, 1], [4, 6]])
    assert uar(a) == 0.75
    assert accuracy(a) == 0.75 == 15 / 20
    eye = np.diag([3, 5, 2])
    assert uar(eye) == 1.0 and accuracy(eye) == 1.0


def test_uar_empty_class_named():
    cm = ConfusionMatrix([[3, 0], [0, 0]], ["angry", "sad"])
    with pytest.raises(ValueError, match="sad"):
        uar(cm)
    assert uar(cm, skip_empty=True) == 1.0
    with pytest.raises(ValueError):
        accuracy(np.zeros((2, 2)))


@pytest.mark.parametrize("k", [2, 4, 7])
def test_uar_chance_level_monte_carlo(k):
    r = np.random.default_rng(k)
    labels = r.integers(0, k, 10000)
    preds = r.integers(0, k, 10000)
    cm = ConfusionMatrix.from_predictions(labels, preds, [str(i) for i in range(k)])
    assert abs(uar(cm) - 1 / k) < 0.02


@given(st.integers(2, 6), st.integers(1, 30), st.integers(0, 2**16))
def test_accuracy_equals_uar_for_equal_row_sums(k, row_sum, seed):
    r = np.random.default_rng(seed)
    a = np.stack([r.multinomial(row_sum, np.ones(k) / k) for _ in range(k)])
    assert abs(accuracy(a) - uar(a)) < 1e-12


@given(st.integers(2, 6), st.integers(0, 2**16))
def test_permutation_equivariance(k, seed):
    r = np.random.default_rng(seed)
    a = r.integers(1, 20, (k, k))
    p = r.permutation(k)
    b = a[np.ix_(p, p)]
    assert abs(uar(a) - uar(b)) < 1e-12 and accuracy(a) == accuracy(b)
    np.testing.assert_allclose(per_class_recall(b), per_class_recall(a)[p])


def test_confusion_bookkeeping():
    cm = ConfusionMatrix.from_predictions([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], ["a", "b", "c"])
    assert cm.total == 5
    np.testing.assert_allclose(cm.row_normalized().sum(axis=1), 1.0, atol=1e-9)
    both = cm + cm
    assert both.total == 10
    with pytest.raises(ValueError):
        cm + ConfusionMatrix(np.zeros((3, 3)), ["x", "y", "z"])
    text = confusion_csv(cm)
    assert text.splitlines()[0] == "true\\pred,a,b,c" and text.splitlines()[1] == "a,1,1,0"


def test_report_invariants():
    cm = ConfusionMatrix([[9, 1, 0], [4, 6, 0], [0, 0, 0]], ["a", "b", "c"])
    rep = EvalReport.from_confusion(cm, seed=1)
    assert rep.uar == 0.75 and rep.accuracy == 0.75
    assert rep.per_class_recall[2] is None
    assert rep.table_cell() == "0.75 / 0.75"
    d = rep.to_dict()
    assert d["metadata"]["seed"] == 1 and d["confusion"][0] == [9, 1, 0]
    block = summarize_seeds([rep, EvalReport.from_confusion(ConfusionMatrix(np.eye(3, dtype=int), ["a", "b", "c"]))])
    assert block["uar_mean"] == pytest.approx(0.875) and block["uar_std"] == pytest.approx(0.125)


# --------------------------------------------------------------------------
# split plans

def test_loso_plan_ten_speakers():
    spk = [f"s{i:02d}" for i in range(10)]
    plan = make_loso_plan(spk, n_val=2, seed=0)
    assert len(plan.folds) == 10
    tested = []
    for f in plan.folds:
        assert (len(f.test_speakers), len(f.val_speakers), len(f.train_speakers)) == (1, 2, 7)
        sets = [set(f.test_speakers), set(f.val_speakers), set(f.train_speakers)]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert set().union(*sets) == set(spk)
        tested += f.test_speakers
    assert sorted(tested) == spk
    assert make_loso_plan(spk, 2, 0) == plan
    assert make_loso_plan(list(reversed(spk)), 2, 0) == plan


def test_loso_plan_validation_rotation():
    spk = ["a", "b", "c", "d", "e"]
    plan = make_loso_plan(spk, n_val=1, seed=0)
    # fold i takes the (i mod 4)-th remaining speaker for validation
    assert [f.val_speakers for f in plan.folds] == [["b"], ["c"], ["d"], ["e"], ["a"]]
    shifted = make_loso_plan(spk, n_val=1, seed=1)
    assert [f.val_speakers for f in shifted.folds] == [["c"], ["d"], ["e"], ["a"], ["b"]]


def test_loso_plan_errors():
    with pytest.raises(ValueError):
        make_loso_plan(["a", "b", "c"], 1)
    with pytest.raises(ValueError):
        make_loso_plan(["a", "b", "c", "d"], 3)
    with pytest.raises(ValueError):
        make_loso_plan(["a", "b", "c", "d"], 0)


def test_validation_slice():
    spk = [f"s{i}" for i in range(10)]
    v = validation_speakers(spk, 0.2, seed=4)
    assert len(v) == 2 and set(v) <= set(spk)
    assert v == validation_speakers(spk, 0.2, seed=4)
    with pytest.raises(ValueError):
        validation_speakers(["only"], 0.2)


def test_check_disjoint():
    check_disjoint(["a", "a#aug1"], ["b"], ["c"])
    with pytest.raises(AssertionError):
        check_disjoint(["a#aug2"], ["a"], ["c"])
    with pytest.raises(AssertionError):
        check_disjoint(["a"], ["b"], ["c#aug1"])


# --------------------------------------------------------------------------
# end-to-end protocol on a tiny synthetic corpus

@pytest.fixture(scope="module")
def tiny():
    return make_corpus(n_speakers=4, utts_per_speaker=4, seed=0, duration_range=(1.0, 1.5))


def test_run_loso_bookkeeping_and_reproducibility(tiny):
    manifest, audio = tiny
    res = run_loso(Corpus(manifest, audio), FeatureConfig(), FAST_TRAIN, seed=1, n_val=1)
    assert len(res.folds) == 4
    assert res.aggregate.confusion.total == len(manifest.records)
    summed = sum((f.confusion.counts for f in res.folds), np.zeros((4, 4), dtype=int))
    np.testing.assert_array_equal(summed, res.aggregate.confusion.counts)
    assert res.aggregate.uar == uar(summed) and res.aggregate.accuracy == accuracy(summed)
    for f in res.folds:
        assert all("#aug" not in u for u in f.metadata["test_ids"])
        assert {u.split("_")[0] for u in f.metadata["test_ids"]} == set(f.metadata["test_speakers"])
    again = run_loso(Corpus(manifest, audio), FeatureConfig(), FAST_TRAIN, seed=1, n_val=1)
    assert again.to_dict() == res.to_dict()


def test_run_loso_rejects_uncovered_plan(tiny):
    manifest, audio = tiny
    plan = make_loso_plan(["spk00", "spk01", "spk02", "zz"], n_val=1)
    with pytest.raises(ValueError, match="spk03"):
        run_loso(Corpus(manifest, audio), FeatureConfig(), FAST_TRAIN, plan=plan)


def test_alias_table(tmp_path):
    p = tmp_path / "alias.csv"
    p.write_text("raw_label,canonical_label\nAnger,angry\nhappiness,happy\nexcited,happy\nboredom,\n")
    table = load_alias_table(p)
    assert table["anger"] == "angry" and table["excited"] == "happy" and table["boredom"] == ""
    recs = [UtteranceRecord("1", "a.wav", "s", "anger", "c"), UtteranceRecord("2", "b.wav", "s", "boredom", "c"),
            UtteranceRecord("3", "c.wav", "s", "Sad", "c")]
    m = map_labels(Manifest(recs, ["Sad", "anger", "boredom"], "c"), table)
    assert [r.emotion for r in m.records] == ["angry", "sad"]
    assert m.label_set == ["angry", "happy", "sad", "neutral"]
    bad = Manifest([UtteranceRecord("4", "d.wav", "s", "fear", "c")], ["fear"], "c")
    with pytest.raises(LabelMappingError) as info:
        map_labels(bad, table)
    assert info.value.label == "fear"
    (tmp_path / "bad.csv").write_text("from,to\n")
    with pytest.raises(ValueError):
        load_alias_table(tmp_path / "bad.csv")


def _as_emotions(manifest, audio, mapping, corpus_id):
    recs = [UtteranceRecord(r.id, r.audio_path, r.speaker_id, mapping[r.emotion], corpus_id)
            for r in manifest.records]
    return Corpus(Manifest(recs, sorted(set(mapping.values())), corpus_id), audio)


def test_cross_corpus_and_closed_set(tiny):
    manifest, audio = tiny
    src = _as_emotions(manifest, audio, {"steady": "neutral", "vibrato": "happiness",
                                         "tremolo": "anger", "glide": "sad"}, "A")
    m2, a2 = make_corpus(n_speakers=2, utts_per_speaker=4, seed=5, duration_range=(1.0, 1.5),
                         corpus_id="other")
    dst = _as_emotions(m2, a2, {"steady": "neutral", "vibrato": "happy",
                                "tremolo": "angry", "glide": "sad"}, "B")
    aliases = {"happiness": "happy", "anger": "angry"}
    rep = run_cross_corpus(src, dst, FeatureConfig(), FAST_TRAIN, aliases, seed=0)
    assert rep.confusion.total == len(m2.records)
    assert rep.confusion.class_names == ["angry", "happy", "sad", "neutral"]
    assert rep.metadata["train_corpus"] == "A" and rep.metadata["test_corpus"] == "B"
    assert len(rep.metadata["val_speakers"]) == 1
    closed = run_cross_corpus(src, src, FeatureConfig(), FAST_TRAIN, aliases, seed=0)
    assert closed.metadata["closed_set"] and closed.confusion.total == len(manifest.records)
    with pytest.raises(LabelMappingError):
        run_cross_corpus(src, dst, FeatureConfig(), FAST_TRAIN, {}, seed=0)
