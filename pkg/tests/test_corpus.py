"""Cohort generation, masking, splitting and persistence checks.

Expected values for the planted-structure cases are computed by standalone
counting in the tests, independent of the generator internals.
"""

import dataclasses
import math

import pytest

from viewdiff import corpus
from viewdiff.corpus import (Cohort, CohortConfig, PatientRecord, Visit,
                             apply_missingness, generate_cohort, load_cohort,
                             missing_group_of, persist_cohort, planted_templates,
                             split_cohort)
from viewdiff.errors import ConfigError, DomainError, ParseError, ValidationError

CFG = CohortConfig(n_patients=50, visits_min=1, visits_max=5)


def make_visit(codes=((0,), (1,), (2,)), observed=(True, True, True), phe=(0,), los=0,
               imputed=()):
    return Visit(codes=tuple(tuple(c) for c in codes), observed=observed,
                 phenotypes=tuple(phe), los_class=los, imputed=tuple(imputed))


# -- generation ---------------------------------------------------------------


def test_generation_deterministic_bytes(tmp_path):
    a = generate_cohort(CFG, seed=7)
    b = generate_cohort(CFG, seed=7)
    assert a == b
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    persist_cohort(a, pa)
    persist_cohort(b, pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert generate_cohort(CFG, seed=8) != a


def test_zero_patients_keeps_vocabs():
    c = generate_cohort(dataclasses.replace(CFG, n_patients=0), seed=1)
    assert c.records == ()
    assert c.vocab_sizes == CFG.vocab_sizes
    assert [v.size for v in c.vocabs] == list(CFG.vocab_sizes)


def test_all_views_initially_observed():
    c = generate_cohort(CFG, seed=3)
    assert all(v.observed == (True, True, True) for r in c.records for v in r.visits)


def test_planted_pairs_cooccur_exactly_at_full_coupling():
    cfg = dataclasses.replace(CFG, coupling=1.0)
    cohort = generate_cohort(cfg, seed=11)
    templates = planted_templates(cfg, seed=11)

    # standalone counting: occurrences of each diagnosis code and of each
    # planted (diagnosis, medication) pair
    diag_count = {}
    pair_count = {}
    for rec in cohort.records:
        for visit in rec.visits:
            for d in visit.codes[0]:
                diag_count[d] = diag_count.get(d, 0) + 1
                for m in visit.codes[2]:
                    pair_count[(d, m)] = pair_count.get((d, m), 0) + 1

    checked = 0
    for cls in range(cfg.n_classes):
        for d in templates[0][cls]:
            for m in templates[2][cls]:
                if d in diag_count:
                    assert pair_count.get((d, m), 0) == diag_count[d]
                    checked += 1
    assert checked > 0


def _empirical_mi(cohort):
    # count-table MI between diagnosis-code and medication-code occurrences
    joint = {}
    total = 0
    for rec in cohort.records:
        for visit in rec.visits:
            for d in visit.codes[0]:
                for m in visit.codes[2]:
                    joint[(d, m)] = joint.get((d, m), 0) + 1
                    total += 1
    pd_, pm = {}, {}
    for (d, m), c in joint.items():
        pd_[d] = pd_.get(d, 0) + c
        pm[m] = pm.get(m, 0) + c
    mi = 0.0
    for (d, m), c in joint.items():
        p = c / total
        mi += p * math.log(p * total * total / (pd_[d] * pm[m]))
    return mi


def test_planted_signal_mutual_information():
    cfg = dataclasses.replace(CFG, n_patients=300, visits_min=4, visits_max=6)
    coupled = generate_cohort(dataclasses.replace(cfg, coupling=1.0), seed=5)
    uncoupled = generate_cohort(dataclasses.replace(cfg, coupling=0.0), seed=5)
    assert coupled.n_visits() >= 1000
    assert _empirical_mi(coupled) > _empirical_mi(uncoupled)


def test_invalid_config_names_field():
    with pytest.raises(ConfigError, match="coupling"):
        generate_cohort(dataclasses.replace(CFG, coupling=1.5), seed=0)
    with pytest.raises(ConfigError, match="visits_min"):
        generate_cohort(dataclasses.replace(CFG, visits_min=0), seed=0)
    with pytest.raises(ConfigError, match="vocab_sizes"):
        generate_cohort(dataclasses.replace(CFG, vocab_sizes=(8, 48, 56)), seed=0)


# -- missingness --------------------------------------------------------------


def test_missingness_rate_zero_is_noop():
    c = generate_cohort(CFG, seed=2)
    assert apply_missingness(c, 0.0, seed=9) == c


def test_missingness_never_blanks_a_visit():
    cfg = dataclasses.replace(CFG, n_patients=120, visits_min=2, visits_max=6)
    c = generate_cohort(cfg, seed=4)
    masked = apply_missingness(c, 0.8, seed=10)
    for rec in masked.records:
        for visit in rec.visits:
            assert any(visit.observed)
            for k in range(3):
                if not visit.observed[k]:
                    assert visit.codes[k] == ()


def test_missingness_empirical_rate():
    # At nominal rate 0.5 the >=1-view rejection rule conditions each visit's
    # flip count on k < 3, so the marginal missing fraction is
    # E[k | k<3] / 3 = (0*1 + 1*3 + 2*3) / (7*3) = 3/7, not 0.5. The bounds
    # below are 3/7 +- 4 standard errors for ~3500 visits.
    cfg = dataclasses.replace(CFG, n_patients=900, visits_min=3, visits_max=5)
    c = generate_cohort(cfg, seed=6)
    n_slots = 3 * c.n_visits()
    assert n_slots >= 10000
    masked = apply_missingness(c, 0.5, seed=13)
    missing = sum(sum(not o for o in v.observed) for r in masked.records for v in r.visits)
    assert abs(missing / n_slots - 3 / 7) <= 0.016


def test_missingness_deterministic_and_validated():
    c = generate_cohort(CFG, seed=2)
    assert apply_missingness(c, 0.4, seed=3) == apply_missingness(c, 0.4, seed=3)
    with pytest.raises(DomainError):
        apply_missingness(c, 1.0, seed=3)


# -- splitting ----------------------------------------------------------------


def test_split_sizes_6_2_2():
    c = generate_cohort(dataclasses.replace(CFG, n_patients=10), seed=1)
    tr, va, te = split_cohort(c, seed=0)
    assert (len(tr.records), len(va.records), len(te.records)) == (6, 2, 2)


def test_split_is_disjoint_partition():
    c = generate_cohort(dataclasses.replace(CFG, n_patients=53), seed=1)
    tr, va, te = split_cohort(c, seed=21)
    ids = [r.patient_id for part in (tr, va, te) for r in part.records]
    assert sorted(ids) == sorted(r.patient_id for r in c.records)
    assert len(set(ids)) == len(ids)
    assert split_cohort(c, seed=21) == (tr, va, te)


def test_split_needs_five_patients():
    c = generate_cohort(dataclasses.replace(CFG, n_patients=4), seed=1)
    with pytest.raises(DomainError):
        split_cohort(c, seed=0)


# -- persistence --------------------------------------------------------------


def test_roundtrip_equality(tmp_path):
    c = generate_cohort(CFG, seed=12)
    masked = apply_missingness(c, 0.3, seed=1)
    p = tmp_path / "c.jsonl"
    persist_cohort(masked, p)
    assert load_cohort(p) == masked


def test_load_rejects_out_of_range_code(tmp_path):
    c = Cohort(vocab_sizes=(4, 4, 4), n_phenotypes=2, seed=0, config=None,
               records=(PatientRecord("px", (make_visit(codes=((3,), (1,), (2,))),)),))
    p = tmp_path / "c.jsonl"
    persist_cohort(c, p)
    text = p.read_text().replace("[3]", "[9]")
    p.write_text(text)
    with pytest.raises(ValidationError, match="px"):
        load_cohort(p)


def test_empty_file_and_header_only(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(ParseError):
        load_cohort(p)
    persist_cohort(Cohort((4, 4, 4), 2, 0, None, ()), p)
    loaded = load_cohort(p)
    assert loaded.records == ()
    assert loaded.vocab_sizes == (4, 4, 4)


def test_malformed_line_reports_lineno(tmp_path):
    c = generate_cohort(dataclasses.replace(CFG, n_patients=2), seed=1)
    p = tmp_path / "c.jsonl"
    persist_cohort(c, p)
    lines = p.read_text().splitlines()
    lines[2] = lines[2][:-5]
    p.write_text("\n".join(lines))
    with pytest.raises(ParseError, match=":3"):
        load_cohort(p)


def test_imputed_views_may_carry_codes(tmp_path):
    v = make_visit(codes=((0,), (1,), (2,)), observed=(True, False, True), imputed=(1,))
    c = Cohort((4, 4, 4), 2, 0, None, (PatientRecord("p0", (v,)),))
    p = tmp_path / "c.jsonl"
    persist_cohort(c, p)
    assert load_cohort(p) == c
    # without the imputed marker the same record is invalid
    bad = dataclasses.replace(v, imputed=())
    with pytest.raises(ValidationError):
        corpus.validate_visit(bad, (4, 4, 4), 2, "here")


# -- grouping -----------------------------------------------------------------


@pytest.mark.parametrize("observed,group", [
    ((True, True, True), "G4"),    # ratio 0
    ((True, True, False), "G3"),   # ratio 1/3, boundary of (1/6, 1/3]
    ((True, False, False), "G1"),  # ratio 2/3
])
def test_missing_group_of_visit(observed, group):
    codes = tuple((k,) if observed[k] else () for k in range(3))
    assert missing_group_of(make_visit(codes=codes, observed=observed)) == group


@pytest.mark.parametrize("missing,total,group", [
    (0, 6, "G4"), (1, 6, "G4"), (2, 6, "G3"), (3, 6, "G2"), (4, 6, "G1"),
    (1, 3, "G3"), (1, 2, "G2"), (2, 3, "G1"),
])
def test_group_bin_edges_exact(missing, total, group):
    assert corpus.group_of_ratio(missing, total) == group


def test_visit_count_groups():
    recs = {n: PatientRecord(f"p{n}", tuple(make_visit() for _ in range(n)))
            for n in (1, 2, 3, 5)}
    assert corpus.visit_count_group(recs[1]) == "cold"
    assert corpus.visit_count_group(recs[2]) == "mid"
    assert corpus.visit_count_group(recs[3]) == "warm"
    assert corpus.visit_count_group(recs[5]) == "warm"
