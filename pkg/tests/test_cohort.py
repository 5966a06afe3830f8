from datetime import date, timedelta

import pytest

import notebench.cohort as ch
import notebench.corpus as cp
from notebench.errors import ConfigError, InfeasibleError, UndefinedAgeError


def patient(pid="p0", birth_year=1950, diagnosis=None, note_dates=(date(2015, 1, 1),)):
    notes = [
        cp.Note(f"{pid}-n{i}", d, f"note {i} text") for i, d in enumerate(note_dates)
    ]
    return cp.Patient(pid, birth_year, diagnosis, notes)


def stub_cohort(n_pos, n_neg):
    """Minimal labeled patients; one valid note each."""
    pats = []
    for i in range(n_pos):
        pats.append(
            patient(
                pid=f"pos{i:05d}",
                diagnosis=date(2016, 1, 1),
                note_dates=(date(2016, 1, 1) - timedelta(days=200),),
            )
        )
    for i in range(n_neg):
        pats.append(patient(pid=f"neg{i:05d}"))
    return pats


class TestPatientAge:
    def test_at_threshold_included(self):
        p = patient(birth_year=1980, note_dates=(date(2020, 6, 1),))
        assert ch.patient_age(p) == 40

    def test_below_threshold(self):
        p = patient(birth_year=1981, note_dates=(date(2020, 6, 1),))
        assert ch.patient_age(p) == 39

    def test_arithmetic(self):
        p = patient(birth_year=1950, note_dates=(date(2002, 1, 1),))
        assert ch.patient_age(p) == 52

    def test_uses_latest_dated_note(self):
        p = patient(birth_year=1960, note_dates=(date(2005, 1, 1), date(2019, 6, 1), None))
        assert ch.patient_age(p) == 59

    def test_no_dated_notes_raises(self):
        p = patient(note_dates=(None, None))
        with pytest.raises(UndefinedAgeError):
            ch.patient_age(p)


class TestNoteValidity:
    config = ch.CohortConfig()

    def window_case(self, gap_days):
        diagnosis = date(2016, 6, 1)
        p = patient(diagnosis=diagnosis, note_dates=(diagnosis - timedelta(days=gap_days),))
        return ch.is_note_valid(p.notes[0], p, self.config)

    def test_positive_window_boundaries(self):
        assert self.window_case(150) is True
        assert self.window_case(149) is False
        assert self.window_case(730) is True
        assert self.window_case(731) is False

    def test_undated_note_invalid(self):
        p = patient(diagnosis=date(2016, 6, 1), note_dates=(None,))
        assert ch.is_note_valid(p.notes[0], p, self.config) is False

    def test_outside_collection_period_invalid(self):
        p = patient(note_dates=(date(2001, 12, 31), date(2015, 1, 1)))
        assert ch.is_note_valid(p.notes[0], p, self.config) is False

    def test_negative_recency_window(self):
        last = date(2018, 1, 1)
        p = patient(note_dates=(last - timedelta(days=800), last - timedelta(days=100), last))
        assert ch.is_note_valid(p.notes[0], p, self.config) is False
        assert ch.is_note_valid(p.notes[1], p, self.config) is True
        assert ch.is_note_valid(p.notes[2], p, self.config) is True


class TestBuildCohort:
    def test_age_filter_excludes(self):
        young = patient(pid="young", birth_year=1990, note_dates=(date(2020, 1, 1),))
        assert ch.build_cohort([young]) == []

    def test_positive_without_valid_note_excluded(self):
        diagnosis = date(2016, 6, 1)
        p = patient(diagnosis=diagnosis, note_dates=(diagnosis - timedelta(days=100),))
        assert ch.build_cohort([p]) == []

    def test_all_pass_identity_size(self):
        pats = stub_cohort(3, 5)
        cohort = ch.build_cohort(pats)
        assert len(cohort) == len(pats)

    def test_retained_patients_carry_only_valid_notes(self):
        diagnosis = date(2016, 6, 1)
        p = patient(
            diagnosis=diagnosis,
            note_dates=(
                diagnosis - timedelta(days=100),
                diagnosis - timedelta(days=200),
                None,
            ),
        )
        cohort = ch.build_cohort([p])
        assert len(cohort) == 1
        assert [n.date for n in cohort[0].notes] == [diagnosis - timedelta(days=200)]

    def test_generated_cohort_notes_all_valid(self):
        corpus = cp.generate(cp.GeneratorConfig(n_patients=200, prevalence=0.4, seed=5))
        config = ch.CohortConfig()
        for p in ch.build_cohort(corpus, config):
            assert ch.patient_age(p) >= 40
            assert p.notes
            for note in p.notes:
                assert ch.is_note_valid(note, p, config)


class TestBalanced:
    def test_two_pos_ten_neg(self):
        bundle = ch.build_balanced(stub_cohort(2, 10), ch.SplitSpec(seed=0))
        total = [p for _, split in bundle.splits() for p in split]
        assert sum(p.label for p in total) == 2
        assert len(total) == 4

    def test_same_seed_identical_split_ids(self):
        cohort = stub_cohort(40, 120)
        b1 = ch.build_balanced(cohort, ch.SplitSpec(seed=3))
        b2 = ch.build_balanced(cohort, ch.SplitSpec(seed=3))
        for name, _ in b1.splits():
            assert [p.patient_id for p in b1.split(name)] == [
                p.patient_id for p in b2.split(name)
            ]

    def test_fewer_negatives_than_positives_raises(self):
        with pytest.raises(InfeasibleError):
            ch.build_balanced(stub_cohort(5, 3), ch.SplitSpec())

    def test_stratification_within_one(self):
        bundle = ch.build_balanced(stub_cohort(101, 300), ch.SplitSpec(seed=1))
        for _, split in bundle.splits():
            pos = sum(p.label for p in split)
            neg = len(split) - pos
            assert abs(pos - neg) <= 1

    def test_splits_disjoint(self):
        bundle = ch.build_balanced(stub_cohort(50, 200), ch.SplitSpec(seed=2))
        seen = set()
        for _, split in bundle.splits():
            ids = {p.patient_id for p in split}
            assert not ids & seen
            seen |= ids

    def test_table_fraction_layout_reproduces_exact_counts(self):
        """Fractions taken from the published split sizes give integer
        per-class counts on a 1733-positive cohort: 692/259/85/697."""
        spec = ch.SplitSpec(
            train=1384 / 3466, valid=518 / 3466, test_1=170 / 3466, test_2=1394 / 3466, seed=0
        )
        bundle = ch.build_balanced(stub_cohort(1733, 2000), spec)
        per_class = [
            (sum(p.label for p in split), sum(1 - p.label for p in split))
            for _, split in bundle.splits()
        ]
        assert per_class == [(692, 692), (259, 259), (85, 85), (697, 697)]

    def test_fraction_sum_validated(self):
        with pytest.raises(ConfigError):
            ch.SplitSpec(train=0.5, valid=0.5, test_1=0.5, test_2=0.5).validate()


class TestImbalanced:
    def test_one_positive_ratio_one(self):
        cohort = stub_cohort(3, 30)
        bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=0))
        pos_t2 = sum(p.label for p in bundle.test_2)
        out = ch.build_imbalanced_test(cohort, bundle, 1, seed=0)
        assert len(out) == 2 * pos_t2

    def test_ratio_arithmetic_exact(self):
        cohort = stub_cohort(20, 400)
        bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=0))
        pos_t2 = sum(p.label for p in bundle.test_2)
        out = ch.build_imbalanced_test(cohort, bundle, 10, seed=0)
        assert len(out) == pos_t2 * 11
        assert sum(p.label for p in out) == pos_t2

    def test_negatives_disjoint_from_train_valid(self):
        cohort = stub_cohort(20, 400)
        bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=0))
        held = {p.patient_id for p in bundle.train} | {p.patient_id for p in bundle.valid}
        out = ch.build_imbalanced_test(cohort, bundle, 10, seed=0)
        negatives = {p.patient_id for p in out if p.label == 0}
        assert not negatives & held

    def test_insufficient_negatives_names_shortfall(self):
        cohort = stub_cohort(10, 30)
        bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=0))
        with pytest.raises(InfeasibleError, match="short by"):
            ch.build_imbalanced_test(cohort, bundle, 100, seed=0)

    def test_bad_ratio_rejected(self):
        cohort = stub_cohort(4, 20)
        bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=0))
        with pytest.raises(ConfigError):
            ch.build_imbalanced_test(cohort, bundle, 0)


class TestFewshot:
    @pytest.fixture()
    def bundle(self):
        return ch.build_balanced(stub_cohort(400, 1200), ch.SplitSpec(seed=4))

    def test_k2_counts(self, bundle):
        train, valid = ch.build_fewshot(bundle, 2, seed=0)
        assert len(train) == 2 and len(valid) == 2
        assert sum(p.label for p in train) == 1
        assert sum(p.label for p in valid) == 1

    def test_k128_counts(self, bundle):
        train, valid = ch.build_fewshot(bundle, 128, seed=0)
        assert (len(train), sum(p.label for p in train)) == (128, 64)
        assert (len(valid), sum(p.label for p in valid)) == (128, 64)

    def test_nesting_under_fixed_seed(self, bundle):
        previous_train, previous_valid = set(), set()
        for k in (2, 4, 8, 16, 32, 64, 128):
            train, valid = ch.build_fewshot(bundle, k, seed=9)
            train_ids = {p.patient_id for p in train}
            valid_ids = {p.patient_id for p in valid}
            assert previous_train <= train_ids
            assert previous_valid <= valid_ids
            previous_train, previous_valid = train_ids, valid_ids

    def test_subsets_come_from_bundle_splits(self, bundle):
        train, valid = ch.build_fewshot(bundle, 32, seed=1)
        assert {p.patient_id for p in train} <= {p.patient_id for p in bundle.train}
        assert {p.patient_id for p in valid} <= {p.patient_id for p in bundle.valid}

    def test_odd_k_rejected(self, bundle):
        with pytest.raises(ConfigError):
            ch.build_fewshot(bundle, 3, seed=0)

    def test_oversized_k_rejected(self, bundle):
        with pytest.raises(ConfigError):
            ch.build_fewshot(bundle, 4096, seed=0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        cohort = stub_cohort(10, 40)
        bundle = ch.build_balanced(cohort, ch.SplitSpec(seed=6))
        ch.save_manifest(bundle, tmp_path)
        reloaded = ch.load_manifest(tmp_path, cohort)
        for name, _ in bundle.splits():
            assert [p.patient_id for p in reloaded.split(name)] == [
                p.patient_id for p in bundle.split(name)
            ]
