import json
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uwbdar.bench import (
    DRIVE,
    LABELS,
    Corpus,
    EvalReport,
    ExperimentConfig,
    Fold,
    SplitError,
    TrainCache,
    _folds_for_seed,
    _shot_ids,
    cell_issue,
    compare_fusion_cost,
    default_factory,
    make_loso_splits,
    model_encoder_estimate,
    prepare_inputs,
    run_ablation,
    score,
    synthetic_corpus,
    trend_statistic,
    with_shots,
    _vit_macs,
)
from uwbdar.model import EncoderConfig, encoder_macs, random_bundle

from helpers import fusion_batch, fusion_model


def ids_for(subjects, per):
    sid, sub = [], []
    for s in subjects:
        for i in range(per):
            sid.append(f"s{s}-{i}")
            sub.append(s)
    return sid, sub


# -- splits -----------------------------------------------------------------


def test_loso_examples():
    plan = make_loso_splits(*ids_for([1, 2, 3, 4], 3))
    assert plan.subjects == (1, 2, 3, 4)
    plan = make_loso_splits(*ids_for([7, 9], 10))
    for f in plan.folds:
        assert len(f.train_ids) == 10 and len(f.test_ids) == 10
    with pytest.raises(SplitError, match="duplicate"):
        make_loso_splits(["a", "b", "a"], [1, 2, 2])
    with pytest.raises(SplitError, match="at least 2"):
        make_loso_splits(*ids_for([5], 4))
    with pytest.raises(ValueError):
        make_loso_splits(["a"], [1, 2])


@settings(max_examples=60)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=60), st.data())
def test_loso_partition_properties(subjects, data):
    if len(set(subjects)) < 2:
        return
    sid = [f"x{i}" for i in range(len(subjects))]
    reserved = data.draw(st.sets(st.sampled_from(sid), max_size=len(sid) // 3))
    plan = make_loso_splits(sid, subjects, reserved)
    tested = [i for f in plan.folds for i in f.test_ids]
    # every unreserved sample is tested exactly once, reserved ones never
    assert sorted(tested) == sorted(set(sid) - reserved)
    for f in plan.folds:
        assert set(f.train_ids) | set(f.test_ids) == set(sid) - reserved
        assert not {plan.subject_of[i] for i in f.train_ids} & {f.held_out}
        pool = [i for i in reserved if plan.subject_of[i] == f.held_out]
        with_shots(f, pool, plan.subject_of).check(plan.subject_of)


def test_adversarial_folds_are_rejected():
    sid, sub = ids_for([1, 2, 3], 4)
    plan = make_loso_splits(sid, sub, reserved=["s1-3", "s2-3"])
    of = plan.subject_of
    f1 = plan.fold(1)
    cases = {
        "train and test": Fold(1, f1.train_ids + ("s1-0",), f1.test_ids),
        "held-out subject appears in train": Fold(1, f1.train_ids + ("s1-3",), f1.test_ids),
        "subjects [2]": Fold(1, tuple(i for i in f1.train_ids if i != "s2-0"), f1.test_ids + ("s2-0",)),
        "duplicate": Fold(1, f1.train_ids + f1.train_ids[:1], f1.test_ids),
        "unknown": Fold(1, f1.train_ids + ("ghost",), f1.test_ids),
        "left in test": Fold(1, f1.train_ids, f1.test_ids + ("s1-3",), ("s1-3",)),
        "shot samples in train": Fold(1, f1.train_ids, f1.test_ids, (f1.train_ids[0],)),
    }
    for msg, fold in cases.items():
        with pytest.raises(SplitError, match=re.escape(msg)):
            fold.check(of)
    with pytest.raises(SplitError, match="not from the held-out subject"):
        with_shots(f1, ["s2-3"], of)
    with pytest.raises(SplitError, match="not in the sample list"):
        make_loso_splits(sid, sub, reserved=["nope"])
    shot = with_shots(f1, ["s1-3"], of)
    assert "s1-3" not in shot.test_ids and shot.shot_ids == ("s1-3",)
    # a test sample used as a shot leaves the test set
    moved = with_shots(f1, ["s1-0"], of)
    assert "s1-0" not in moved.test_ids


def test_fold_rotation_and_shot_nesting():
    assert _folds_for_seed([0, 1, 2, 3, 4, 5], 0, 2) == [0, 1]
    assert _folds_for_seed([0, 1, 2, 3, 4, 5], 2, 2) == [4, 5]
    assert _folds_for_seed([0, 1, 2], 1, None) == [0, 1, 2]
    c = synthetic_corpus(n_subjects=2, per_class=1, shot_pool=2, shot_labels=LABELS, window_s=1.0)
    a, b = _shot_ids(c, 1, 3, seed=1), _shot_ids(c, 1, 10, seed=1)
    assert b[:3] == a and _shot_ids(c, 1, 0, 1) == []
    assert all(c.pulses[c.index()[i]].subject_id == 1 for i in b)
    # labels take turns: the first 7 shots cover every label once
    assert len({c.pulses[c.index()[i]].label for i in b[:7]}) == 7
    with pytest.raises(ValueError):
        _shot_ids(c, 1, 15, seed=1)


# -- metrics ----------------------------------------------------------------

TRUE = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4, 5, 5, 6, 6, 6]
PRED = [0, 0, 1, 1, 1, 0, 2, 2, 2, 3, 4, 3, 4, 4, 4, 5, 6, 6, 6, 0]


def test_metrics_hand_computed_fixture():
    r = score(PRED, TRUE)
    np.testing.assert_allclose(r.precision, [1 / 2, 2 / 3, 1, 1, 3 / 4, 1, 2 / 3], rtol=1e-12)
    np.testing.assert_allclose(r.recall, [2 / 3, 2 / 3, 1, 2 / 3, 1, 1 / 2, 2 / 3], rtol=1e-12)
    np.testing.assert_allclose(r.f1, [4 / 7, 2 / 3, 1, 4 / 5, 6 / 7, 2 / 3, 2 / 3], rtol=1e-12)
    assert r.accuracy == 15 / 20
    assert r.confusion.sum() == 20 and np.trace(r.confusion) == 15
    assert r.confusion[1, 0] == 1 and r.confusion[5, 6] == 1
    # Drive (code 1) vs rest: two disagreements (index 2 and 5)
    assert DRIVE == 1
    assert r.binary_distracted_accuracy == 18 / 20
    assert r.zero_precision == ()


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=80))
def test_binary_collapse_identity(pairs):
    p, t = map(np.array, zip(*pairs))
    r = score(p, t)
    # binary accuracy equals accuracy of the 2x2 collapse of the confusion matrix
    c = r.confusion
    nd = c[DRIVE, DRIVE]
    dd = c.sum() - c[DRIVE].sum() - c[:, DRIVE].sum() + c[DRIVE, DRIVE]
    assert r.binary_distracted_accuracy == pytest.approx((nd + dd) / c.sum(), abs=1e-12)
    assert r.accuracy == pytest.approx(np.trace(c) / c.sum(), abs=1e-12)
    assert r.binary_distracted_accuracy >= r.accuracy - 1e-12
    np.testing.assert_array_equal(c.sum(axis=1), np.bincount(t, minlength=7))


def test_score_examples():
    y = np.arange(7).repeat(3)
    r = score(y, y)
    assert r.accuracy == 1.0 and np.all(r.f1 == 1.0)
    r = score(np.full(21, 3), y)
    assert r.accuracy == pytest.approx(1 / 7)
    assert set(r.zero_precision) == set(range(7)) - {3}
    assert r.precision[0] == 0.0
    with pytest.raises(ValueError):
        score([0, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        score([0, 9], [0, 1])


def test_report_round_trip_and_confusion_text():
    r = score(PRED, TRUE, fingerprint="abc", seed=3, extras={"cell": {"window": 5}})
    back = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
    np.testing.assert_array_equal(back.confusion, r.confusion)
    assert back.accuracy == r.accuracy and back.extras == r.extras and back.seed == 3
    text = r.confusion_text()
    assert text.splitlines()[0].split() == list(LABELS)


def test_trend_statistic():
    t = trend_statistic([10, 1, 5], [0.9, 0.5, 0.7])
    assert t["kendall_tau"] == 1.0 and t["non_decreasing"] and t["x"] == [1, 5, 10]
    t = trend_statistic([1, 2, 3], [0.5, 0.4, 0.6])
    assert not t["non_decreasing"] and t["kendall_tau"] == pytest.approx(1 / 3)


# -- experiments ------------------------------------------------------------

TINY = ExperimentConfig(window=1, domain="range", epochs=1, batch=7, seeds=(0,), folds_per_seed=1, adapt_epochs=1)


@pytest.fixture(scope="module")
def tiny_corpus():
    return synthetic_corpus(n_subjects=2, per_class=1, shot_pool=1, shot_labels=("Relax", "Nod"), window_s=1.0)


@pytest.fixture(scope="module")
def tiny_factory():
    return default_factory(random_bundle(EncoderConfig(d=8, layers=1, heads=2), seed=0))


def test_synthetic_corpus_layout(tiny_corpus):
    c = tiny_corpus
    assert len(c) == 2 * (7 + 2)
    assert len(c.reserved) == 4
    assert sorted(c.pulses[c.index()[i]].label for i in c.reserved) == ["Nod", "Nod", "Relax", "Relax"]
    assert c.maps("range").shape == (18, 51, 100)
    assert c.maps("freq").shape == (18, 89, 100)
    assert c.for_window(0.5).maps("range").shape[-1] == 50
    with pytest.raises(ValueError):
        Corpus(c.pulses[:1], recipe=None).for_window(2.0)


def test_prepare_inputs_branches(tiny_corpus):
    x, br = prepare_inputs(tiny_corpus, TINY.replace(domain="fusion"), [0, 1])
    assert [b.kind for b in br] == ["vit", "light"] and x[1].shape == (2, 89, 100)
    x, br = prepare_inputs(tiny_corpus, TINY.replace(domain="fusion", fusion="early"), [0])
    assert x[0].shape == (1, 196, 2 * 256)
    x, br = prepare_inputs(tiny_corpus, TINY.replace(domain="fusion", fusion="late"), [0])
    assert [b.source for b in br] == ["range", "freq"]


def test_cell_issue():
    assert cell_issue({"domain": "range", "band": "lower"}, ["band"])
    assert cell_issue({"domain": "range", "band": "lower"}, []) is None
    assert cell_issue({"domain": "freq", "crop": "full"}, ["crop"])
    assert cell_issue({"domain": "fusion", "fusion": "early", "adapt": "isa"}, ["adapt"])
    assert cell_issue({"domain": "fusion", "adapt": "isa"}, ["adapt"]) is None


def test_ablation_empty_invalid_and_window_trend(tiny_corpus, tiny_factory, tmp_path):
    assert run_ablation({}, tiny_corpus, tiny_factory, TINY) == []
    notes = []
    reps = run_ablation({"band": ["lower"]}, tiny_corpus, tiny_factory, TINY, notice=notes.append)
    assert reps == [] and "no effect" in notes[0]
    with pytest.raises(ValueError, match="unknown ablation axis"):
        run_ablation({"colour": [1]}, tiny_corpus, tiny_factory, TINY)
    out = tmp_path / "r.jsonl"
    reps = run_ablation({"window": [1, 2, 5, 10]}, tiny_corpus, tiny_factory, TINY, report_path=out)
    assert [r.extras["cell"]["window"] for r in reps] == [1, 2, 5, 10]
    assert all(r.extras["trend"]["x"] == [1, 2, 5, 10] for r in reps)
    assert all(r.n == 7 for r in reps)  # one held-out subject, 7 unreserved windows
    assert len(out.read_text().splitlines()) == 4


def test_ablation_is_reproducible_and_caches(tiny_corpus, tiny_factory):
    cache = TrainCache()
    a = run_ablation({"shots": [0, 2]}, tiny_corpus, tiny_factory, TINY, cache=cache)
    assert len(cache) == 1  # the shot sweep shares one base model
    b = run_ablation({"shots": [0, 2]}, tiny_corpus, tiny_factory, TINY)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.confusion, y.confusion)
        assert x.fingerprint == y.fingerprint
    assert a[0].fingerprint != a[1].fingerprint
    assert a[1].n == 7 and a[1].extras["runs"][0]["folds"][0]["n_shots"] == 2


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(domain="sound")
    with pytest.raises(ValueError):
        ExperimentConfig(fusion="middle")
    cfg = ExperimentConfig(seeds=[4, 5])
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": 1})


# -- fusion cost ------------------------------------------------------------


def test_mac_counter_matches_analytic_count():
    model, _ = fusion_model(d=8)
    x, _, _ = fusion_batch(model, n=2)
    counted = _vit_macs(model, x)
    est = model_encoder_estimate(model, batch=2)
    assert abs(counted - est) / est < 0.05, (counted, est)
    blocks = _vit_macs(model, x, blocks_only=True)
    assert blocks == 2 * encoder_macs(197, model.spec.encoder)


def test_identical_models_cost_the_same():
    model, _ = fusion_model(d=8)
    x, _, _ = fusion_batch(model, n=2)
    cost = compare_fusion_cost(model, model, x, x, repeats=1)
    assert cost.early_macs == cost.late_macs and cost.ratio == 1.0
    assert cost.early_estimate == cost.late_estimate
    assert set(cost.to_dict()) >= {"ratio", "early_seconds_per_sample"}
