"""Inclusion criteria, note-validity windows, and dataset construction.

A patient enters the cohort when they are at least 40 at their most recent
dated note and have at least one valid note.  Validity is temporal: notes of
positive patients count only inside the 150-730-day window before diagnosis;
notes of negative patients count only within 730 days before the patient's
last dated note.  Undated notes and notes outside the collection period are
always excluded.

From the filtered cohort this module builds a balanced bundle with
stratified train/valid/test_1/test_2 splits, imbalanced test sets at a
requested positive:negative ratio, and nested few-shot subsets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import date

import numpy as np

from .corpus import Corpus, Patient, subset_by_ids, with_notes
from .errors import ConfigError, InfeasibleError, UndefinedAgeError

SPLIT_NAMES = ("train", "valid", "test_1", "test_2")


@dataclass(frozen=True)
class CohortConfig:
    min_age_years: int = 40
    pos_window_min_days: int = 150
    pos_window_max_days: int = 730
    neg_window_days: int = 730
    collection_period: tuple[date, date] = (date(2002, 1, 1), date(2020, 12, 31))

    def validate(self) -> None:
        if not (0 < self.pos_window_min_days < self.pos_window_max_days):
            raise ConfigError("pos_window_min_days must satisfy 0 < min < max")
        if self.neg_window_days <= 0:
            raise ConfigError("neg_window_days must be positive")
        start, end = self.collection_period
        if start >= end:
            raise ConfigError("collection_period start must precede end")


@dataclass(frozen=True)
class SplitSpec:
    """Stratified split fractions; defaults follow a 40/15/5/40 layout."""

    train: float = 0.40
    valid: float = 0.15
    test_1: float = 0.05
    test_2: float = 0.40
    seed: int = 0

    def fractions(self) -> tuple:
        return (self.train, self.valid, self.test_1, self.test_2)

    def validate(self) -> None:
        fracs = self.fractions()
        if any(f < 0 for f in fracs):
            raise ConfigError("split fractions must be nonnegative")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass
class DatasetBundle:
    train: list
    valid: list
    test_1: list
    test_2: list

    def split(self, name: str) -> list:
        return getattr(self, name)

    def splits(self):
        for name in SPLIT_NAMES:
            yield name, getattr(self, name)


def patient_age(patient: Patient) -> int:
    """Age in years: year of the most recent dated note minus birth year."""
    last = patient.last_note_date()
    if last is None:
        raise UndefinedAgeError(f"patient {patient.patient_id} has no dated note")
    return last.year - patient.birth_year


def is_note_valid(note, patient: Patient, config: CohortConfig = CohortConfig()) -> bool:
    """Temporal validity of one note; total over all inputs."""
    if note.date is None:
        return False
    start, end = config.collection_period
    if not (start <= note.date <= end):
        return False
    if patient.diagnosis_date is not None:
        gap = (patient.diagnosis_date - note.date).days
        return config.pos_window_min_days <= gap <= config.pos_window_max_days
    last = patient.last_note_date()
    if last is None:
        return False
    return 0 <= (last - note.date).days <= config.neg_window_days


def build_cohort(corpus: Corpus, config: CohortConfig = CohortConfig()) -> list:
    """Patients passing the age filter with >=1 valid note, notes filtered to valid ones."""
    config.validate()
    cohort = []
    for patient in corpus:
        if patient.last_note_date() is None:
            continue
        if patient_age(patient) < config.min_age_years:
            continue
        valid_notes = [n for n in patient.notes if is_note_valid(n, patient, config)]
        if not valid_notes:
            continue
        cohort.append(with_notes(patient, valid_notes))
    return cohort


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


def _apportion(n: int, fractions: tuple) -> list:
    """Largest-remainder apportionment of n items over the fractions.

    Ties in remainders go to the earlier split, so results are deterministic.
    """
    exact = [n * f for f in fractions]
    base = [int(x) for x in exact]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def _split_class(patients: list, fractions: tuple, rng: np.random.Generator) -> list:
    counts = _apportion(len(patients), fractions)
    perm = rng.permutation(len(patients))
    shuffled = [patients[i] for i in perm]
    out, cursor = [], 0
    for c in counts:
        out.append(shuffled[cursor : cursor + c])
        cursor += c
    return out


def build_balanced(cohort: list, split_spec: SplitSpec = SplitSpec()) -> DatasetBundle:
    """All positives plus an equal-size random negative subsample, split stratified."""
    split_spec.validate()
    positives = [p for p in cohort if p.label == 1]
    negatives = [p for p in cohort if p.label == 0]
    if not positives:
        raise InfeasibleError("cohort has no positive patients")
    if len(negatives) < len(positives):
        raise InfeasibleError(
            f"need {len(positives)} negative patients, cohort has only {len(negatives)}"
        )
    rng = np.random.default_rng(split_spec.seed)
    chosen = rng.choice(len(negatives), size=len(positives), replace=False)
    sampled_negatives = [negatives[i] for i in sorted(chosen)]

    pos_splits = _split_class(positives, split_spec.fractions(), rng)
    neg_splits = _split_class(sampled_negatives, split_spec.fractions(), rng)
    parts = [p + n for p, n in zip(pos_splits, neg_splits)]
    return DatasetBundle(*parts)


def build_imbalanced_test(
    cohort: list, bundle: DatasetBundle, ratio: int, seed: int = 0
) -> list:
    """Test set keeping the bundle's test_2 positives at a 1:ratio class balance.

    Added negatives are sampled uniformly from the cohort excluding any
    patient in the bundle's train or valid splits.
    """
    if ratio < 1:
        raise ConfigError("ratio must be a positive integer")
    positives = [p for p in bundle.test_2 if p.label == 1]
    if not positives:
        raise InfeasibleError("bundle test_2 has no positive patients")
    held_out = {p.patient_id for p in bundle.train} | {p.patient_id for p in bundle.valid}
    eligible = [p for p in cohort if p.label == 0 and p.patient_id not in held_out]
    need = ratio * len(positives)
    if len(eligible) < need:
        raise InfeasibleError(
            f"need {need} negative patients outside train/valid, "
            f"only {len(eligible)} available (short by {need - len(eligible)})"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=need, replace=False)
    return positives + [eligible[i] for i in sorted(chosen)]


def build_fewshot(bundle: DatasetBundle, k: int, seed: int = 0) -> tuple:
    """(train, valid) subsets of k patients each, k/2 per class.

    For a fixed seed the subsets are nested: every patient selected at k is
    selected again at 2k, which stabilizes sweep comparisons.
    """
    if k < 2 or k % 2 != 0:
        raise ConfigError(f"k must be a positive even integer, got {k}")
    half = k // 2
    out = []
    for split_name in ("train", "valid"):
        patients = bundle.split(split_name)
        selected = []
        for label in (1, 0):
            pool = sorted(
                (p for p in patients if p.label == label), key=lambda p: p.patient_id
            )
            if len(pool) < half:
                raise ConfigError(
                    f"k={k} needs {half} patients of class {label} in {split_name}, "
                    f"bundle has {len(pool)}"
                )
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, 1 if split_name == "train" else 2, label])
            )
            perm = rng.permutation(len(pool))
            selected.extend(pool[i] for i in perm[:half])
        out.append(selected)
    return out[0], out[1]


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def save_manifest(bundle: DatasetBundle, directory) -> None:
    """One id-per-line text file per split, so splits replay without re-sampling."""
    os.makedirs(directory, exist_ok=True)
    for name, patients in bundle.splits():
        with open(os.path.join(directory, f"{name}.txt"), "w", encoding="utf-8") as fh:
            for p in patients:
                fh.write(p.patient_id + "\n")


def load_manifest(directory, cohort: list) -> DatasetBundle:
    parts = []
    for name in SPLIT_NAMES:
        with open(os.path.join(directory, f"{name}.txt"), "r", encoding="utf-8") as fh:
            ids = [line.strip() for line in fh if line.strip()]
        parts.append(subset_by_ids(cohort, ids))
    return DatasetBundle(*parts)
