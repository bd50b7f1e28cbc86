"""Metric hand cases, brute-force oracles and diagnostic checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewdiff.corpus import Cohort, CohortConfig, PatientRecord, Visit, generate_cohort
from viewdiff.errors import DomainError, MetricUndefined
from viewdiff.metrics import (auprc_binary, auroc_binary, code_frequencies,
                              compute_task_metrics, gradient_contribution,
                              group_report, jsd, multiclass_metrics,
                              multilabel_metrics, report_rows)
from viewdiff.rng import substream

# -- brute-force oracles -------------------------------------------------------


def auroc_pairs(scores, labels):
    """All-pairs concordance count (ties count half)."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auroc_hand_case():
    # one concordant and one discordant positive/negative pair
    assert auroc_binary(np.array([0.9, 0.8, 0.1]), np.array([1, 0, 1])) == 0.5


def test_auroc_matches_brute_force():
    g = substream(1, "auroc")
    for trial in range(5):
        n = 100
        scores = np.round(g.random(n), 2)  # duplicates force tie handling
        labels = g.random(n) > 0.4
        if labels.all() or not labels.any():
            continue
        assert auroc_binary(scores, labels) == pytest.approx(
            auroc_pairs(scores, labels), abs=1e-12)


def test_auprc_perfect_and_simple():
    assert auprc_binary(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])) == 1.0
    # ranking [pos, neg, pos]: thresholds give precision 1 @ recall .5,
    # then precision 2/3 @ recall 1 -> AP = .5*1 + .5*(2/3)
    ap = auprc_binary(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1]))
    assert ap == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)


# -- multilabel ----------------------------------------------------------------


def test_jaccard_hand_case():
    # sample 1: pred {B}, true {B, C} -> intersection 1, union 2 -> 1/2;
    # sample 2 is exact -> 1; the example-based mean is 3/4
    m = multilabel_metrics([(1,), (0,)], [(1, 2), (0,)],
                           np.array([[0.1, 0.9, 0.4], [0.8, 0.2, 0.1]]))
    assert m["jaccard"] == pytest.approx((0.5 + 1.0) / 2, abs=1e-12)
    assert m["f1"] == pytest.approx((2 / 3 + 1.0) / 2, abs=1e-12)


def test_perfect_multilabel():
    true = [(0,), (1,), (0, 1)]
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.9]])
    m = multilabel_metrics(true, true, scores)
    assert all(m[k] == pytest.approx(1.0, abs=1e-12) for k in m)


def test_multilabel_skips_single_class_labels():
    # label 1 is always positive -> excluded from macro AUROC/AUPRC
    m = multilabel_metrics([(1,), (0, 1)], [(1,), (0, 1)],
                           np.array([[0.1, 0.9], [0.8, 0.9]]))
    assert m["auroc"] == 1.0
    with pytest.raises(MetricUndefined):
        multilabel_metrics([(0,)], [(0,)], np.array([[0.9]]))
    with pytest.raises(DomainError):
        multilabel_metrics([], [], np.zeros((0, 2)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sets(st.integers(0, 5)), st.sets(st.integers(0, 5))),
                min_size=1, max_size=8))
def test_jaccard_never_exceeds_f1(pairs):
    for pred, true in pairs:
        union = len(pred | true)
        inter = len(pred & true)
        jac = inter / union if union else 1.0
        denom = len(pred) + len(true)
        f1 = 2 * inter / denom if denom else 1.0
        assert jac <= f1 + 1e-12


def test_multilabel_in_range_random():
    g = substream(2, "ml")
    n, L = 40, 6
    scores = g.random((n, L))
    true = [tuple(np.flatnonzero(g.random(L) > 0.6)) for _ in range(n)]
    pred = [tuple(np.flatnonzero(s > 0.5)) for s in scores]
    m = multilabel_metrics(pred, true, scores)
    for k, v in m.items():
        assert 0.0 <= v <= 1.0, k


# -- multiclass ----------------------------------------------------------------


def test_multiclass_perfect():
    true = [0, 1, 2, 1]
    scores = np.eye(3)[true]
    m = multiclass_metrics(true, true, scores)
    assert m["accuracy"] == 1.0
    assert m["kappa"] == pytest.approx(1.0, abs=1e-12)
    assert m["f1_macro"] == pytest.approx(1.0, abs=1e-12)


def test_kappa_hand_case_confusion():
    # confusion [[2,1],[1,2]]: p_o = 4/6, p_e = (3*3 + 3*3)/36 = 1/2 -> 1/3
    true = [0, 0, 0, 1, 1, 1]
    pred = [0, 0, 1, 0, 1, 1]
    scores = np.eye(2)[pred]
    m = multiclass_metrics(pred, true, scores)
    assert m["kappa"] == pytest.approx(1 / 3, abs=1e-12)
    assert m["accuracy"] == pytest.approx(4 / 6, abs=1e-12)


def test_kappa_constant_predictor_is_zero():
    true = [0, 1, 0, 1]
    pred = [0, 0, 0, 0]
    scores = np.column_stack([np.full(4, 0.9), np.full(4, 0.1)])
    m = multiclass_metrics(pred, true, scores)
    assert m["kappa"] == pytest.approx(0.0, abs=1e-12)


def test_kappa_undefined_when_chance_is_one():
    with pytest.raises(MetricUndefined):
        multiclass_metrics([1, 1], [1, 1], np.array([[0.1, 0.9], [0.2, 0.8]]))


def test_kappa_range_random():
    g = substream(3, "mc")
    true = g.integers(0, 4, size=60)
    pred = g.integers(0, 4, size=60)
    scores = g.random((60, 4))
    m = multiclass_metrics(pred, true, scores)
    assert -1.0 <= m["kappa"] <= 1.0
    assert 0.0 <= m["accuracy"] <= 1.0


# -- jsd -----------------------------------------------------------------------


def test_jsd_hand_cases():
    assert jsd(np.array([2.0, 1.0]), np.array([2.0, 1.0])) == pytest.approx(0.0, abs=1e-15)
    assert jsd(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == pytest.approx(1.0, abs=1e-12)
    # normalized [.5,.5] vs [1,0]: H(m) - H(a)/2 - H(b)/2 with m=[.75,.25]
    # = (2 - 0.75*log2(3)) - 0.5 = 0.311278124459133
    val = jsd(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert val == pytest.approx(2.0 - 0.75 * np.log2(3.0) - 0.5, abs=1e-12)
    assert val == pytest.approx(0.311278124459133, abs=1e-12)


def test_jsd_errors():
    with pytest.raises(DomainError):
        jsd(np.zeros(3), np.ones(3))
    with pytest.raises(DomainError):
        jsd(np.array([1.0, -0.5]), np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        jsd(np.ones(3), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=2, max_size=6),
       st.lists(st.integers(0, 20), min_size=2, max_size=6))
def test_jsd_symmetric_and_bounded(a, b):
    n = min(len(a), len(b))
    fa = np.array(a[:n], dtype=float)
    fb = np.array(b[:n], dtype=float)
    if fa.sum() == 0 or fb.sum() == 0:
        return
    assert jsd(fa, fb) == pytest.approx(jsd(fb, fa), abs=1e-12)
    assert -1e-12 <= jsd(fa, fb) <= 1.0 + 1e-12
    assert jsd(fa, fa) == pytest.approx(0.0, abs=1e-12)


def test_code_frequencies():
    freq = code_frequencies([(0, 1), (1,), (3,)], 4)
    assert np.array_equal(freq, [1.0, 2.0, 0.0, 1.0])


# -- gradient contributions ----------------------------------------------------


def _tied_model(task="LOS"):
    from viewdiff.predictor import PredictorHyper, PredictorModel
    hyper = PredictorHyper(d_tilde=8, layers=1, heads=2, epochs=1)
    model = PredictorModel((6, 6, 6), 4, task, hyper, seed=11)
    # tie every per-view parameter to view 0 and make the fused head
    # treat the three slices identically
    for name, t in model.store.items():
        if name.startswith("seq1") or name.startswith("seq2"):
            t.data = model.store["seq0" + name[4:]].data.copy()
    w = model.store["head.fused.w"].data
    d = hyper.d_tilde
    w[d:2 * d] = w[:d]
    w[2 * d:] = w[:d]
    return model


def symmetric_records(n=6):
    g = substream(12, "sym")
    recs = []
    for i in range(n):
        visits = tuple(
            Visit(codes=((c,), (c,), (c,)), observed=(True, True, True),
                  phenotypes=(0,), los_class=int(g.integers(10)))
            for c in g.integers(0, 6, size=int(g.integers(2, 5))))
        recs.append(PatientRecord(f"p{i}", visits))
    return recs


def test_gradient_contribution_symmetric_thirds():
    model = _tied_model()
    shares = gradient_contribution(model, symmetric_records())
    assert shares.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(shares, 1 / 3, atol=1e-6)


def test_gradient_contribution_single_view():
    model = _tied_model()
    w = model.store["head.fused.w"].data
    d = model.hyper.d_tilde
    w[d:] = 0.0  # fused head reads only view 0
    shares = gradient_contribution(model, symmetric_records())
    assert np.allclose(shares, [1.0, 0.0, 0.0], atol=1e-12)


def test_gradient_contribution_normalized_random():
    from viewdiff.predictor import PredictorHyper, PredictorModel
    model = PredictorModel((6, 6, 6), 4, "LOS",
                           PredictorHyper(d_tilde=8, layers=1, heads=2), seed=13)
    shares = gradient_contribution(model, symmetric_records())
    assert shares.sum() == pytest.approx(1.0, abs=1e-12)
    assert (shares >= 0).all()


# -- group report ---------------------------------------------------------------


def make_cohort_with_predictions():
    cfg = CohortConfig(n_patients=30, visits_min=1, visits_max=4,
                       vocab_sizes=(16, 12, 12), n_classes=4, codes_min=2,
                       codes_max=3, n_phenotypes=6)
    cohort = generate_cohort(cfg, seed=3)
    g = substream(4, "preds")
    samples = []
    for rec in cohort.records:
        for j, visit in enumerate(rec.visits):
            samples.append({
                "patient": rec.patient_id, "visit": j,
                "scores": [float(x) for x in g.random(10)],
                "label": visit.los_class,
            })
    return cohort, samples


def test_group_report_complete_cohort_only_g4():
    cohort, samples = make_cohort_with_predictions()
    report = group_report(cohort, samples, "LOS")
    assert report["missing_groups"]["G4"] is not None
    for g in ("G1", "G2", "G3"):
        assert report["missing_groups"][g] is None
    assert report["overall"]["accuracy"] is not None


def test_group_report_single_visit_patients_are_cold():
    cohort, samples = make_cohort_with_predictions()
    report = group_report(cohort, samples, "LOS")
    cold_ids = {r.patient_id for r in cohort.records if len(r.visits) == 1}
    assert cold_ids  # the config produces some single-visit patients
    cold_samples = [s for s in samples if s["patient"] in cold_ids]
    expect = compute_task_metrics(cold_samples, "LOS", 10)
    assert report["visit_groups"]["cold"] == expect


def test_group_report_matches_recompute_from_dump():
    # recompute each group's metrics from the raw dump with independent code
    cohort, samples = make_cohort_with_predictions()
    report = group_report(cohort, samples, "LOS")
    from viewdiff.corpus import patient_missing_group
    for gname in ("G1", "G2", "G3", "G4"):
        subset = [s for s in samples
                  if patient_missing_group(
                      next(r for r in cohort.records if r.patient_id == s["patient"])) == gname]
        if not subset:
            assert report["missing_groups"][gname] is None
            continue
        scores = np.array([s["scores"] for s in subset])
        pred = scores.argmax(axis=1)
        true = np.array([s["label"] for s in subset])
        expect = multiclass_metrics(pred, true, scores)
        got = report["missing_groups"][gname]
        for k, v in expect.items():
            assert got[k] == pytest.approx(v, abs=1e-12)


def test_report_rows_shape():
    cohort, samples = make_cohort_with_predictions()
    report = group_report(cohort, samples, "LOS")
    rows = report_rows(report)
    assert len(rows) == 4 * (1 + 4 + 3)
    groups = {r[0] for r in rows}
    assert groups == {"overall", "G1", "G2", "G3", "G4", "warm", "mid", "cold"}
