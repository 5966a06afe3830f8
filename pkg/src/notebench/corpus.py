"""Patient/note data model and a seeded synthetic note-corpus generator.

The generator stands in for a private general-practice dataset: each patient
has dated free-text notes drawn over a fixed collection period, positive
patients carry a diagnosis date, and a configurable lexical signal is
injected into positive patients' notes that fall inside the predictive
window (150-730 days before diagnosis).  Signal strength is a dial: at
``signal_rate=1.0`` the task is separable per note, at 0 it is pure noise.

Corpus files are line-delimited UTF-8, one JSON patient record per line,
with ISO-8601 dates and the literal string ``"ABSENT"`` for missing dates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorpusParseError

ABSENT = "ABSENT"

# Predictive window for positive patients, in days before diagnosis.
WINDOW_MIN_DAYS = 150
WINDOW_MAX_DAYS = 730

# Fixed seed for vocabulary synthesis so the vocabulary for a given size is
# identical across corpus seeds (keeps cross-seed experiments comparable).
_VOCAB_SEED = 20020101

DEFAULT_SIGNAL_TOKENS = ("cough", "wheeze", "fatigue", "hemoptysis", "dyspnea")


@dataclass
class Note:
    """One free-text note; ``date`` is None for undated notes."""

    note_id: str
    date: date | None
    text: str


@dataclass
class Patient:
    """A patient record; ``diagnosis_date`` is present iff the label is positive."""

    patient_id: str
    birth_year: int
    diagnosis_date: date | None
    notes: list[Note] = field(default_factory=list)

    @property
    def label(self) -> int:
        return int(self.diagnosis_date is not None)

    def last_note_date(self) -> date | None:
        """Date of the most recent dated note, or None if none is dated."""
        dated = [n.date for n in self.notes if n.date is not None]
        return max(dated) if dated else None


Corpus = list[Patient]


@dataclass(frozen=True)
class LogNormalCount:
    """Truncated, rounded log-normal for long-tailed per-patient note counts."""

    mean: float = 30.0
    minimum: int = 1
    maximum: int = 284
    sigma: float = 0.8

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        mu = math.log(self.mean) - self.sigma**2 / 2.0
        raw = rng.lognormal(mu, self.sigma, size=size)
        return np.clip(np.rint(raw).astype(int), self.minimum, self.maximum)


@dataclass(frozen=True)
class ClippedNormalCount:
    """Clipped, rounded normal for per-note token counts."""

    mean: float = 30.0
    minimum: int = 5
    maximum: int = 80
    sigma: float = 12.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raw = rng.normal(self.mean, self.sigma, size=size)
        return np.clip(np.rint(raw).astype(int), self.minimum, self.maximum)


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 1000
    prevalence: float = 0.5
    notes_per_patient: LogNormalCount = LogNormalCount()
    tokens_per_note: ClippedNormalCount = ClippedNormalCount()
    vocab_size: int = 500
    signal_tokens: tuple[str, ...] = DEFAULT_SIGNAL_TOKENS
    signal_rate: float = 0.9
    collection_period: tuple[date, date] = (date(2002, 1, 1), date(2020, 12, 31))
    seed: int = 0
    # Fraction of notes left undated and fraction of patients drawn under the
    # age-40 inclusion threshold; both exist to exercise cohort exclusions.
    undated_rate: float = 0.01
    underage_rate: float = 0.10
    zipf_exponent: float = 1.1

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not (0.0 < self.prevalence < 1.0):
            raise ConfigError("prevalence must lie in (0, 1)")
        if self.notes_per_patient.minimum < 1:
            raise ConfigError("notes_per_patient.minimum must be >= 1")
        if self.notes_per_patient.maximum < self.notes_per_patient.minimum:
            raise ConfigError("notes_per_patient.maximum must be >= minimum")
        if self.tokens_per_note.minimum < 1:
            raise ConfigError("tokens_per_note.minimum must be >= 1")
        if self.tokens_per_note.maximum < self.tokens_per_note.minimum:
            raise ConfigError("tokens_per_note.maximum must be >= minimum")
        if self.vocab_size <= len(self.signal_tokens):
            raise ConfigError("vocab_size must exceed the number of signal_tokens")
        if not (0.0 <= self.signal_rate <= 1.0):
            raise ConfigError("signal_rate must lie in [0, 1]")
        if not (0.0 <= self.undated_rate < 1.0):
            raise ConfigError("undated_rate must lie in [0, 1)")
        if not (0.0 <= self.underage_rate <= 1.0):
            raise ConfigError("underage_rate must lie in [0, 1]")
        start, end = self.collection_period
        if (end - start).days <= WINDOW_MAX_DAYS:
            raise ConfigError(
                "collection_period must span more than "
                f"{WINDOW_MAX_DAYS} days to fit the predictive window"
            )
        if self.zipf_exponent <= 0:
            raise ConfigError("zipf_exponent must be > 0")


# --------------------------------------------------------------------------
# vocabulary synthesis
# --------------------------------------------------------------------------

_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


def make_vocabulary(vocab_size: int, signal_tokens: Sequence[str] = DEFAULT_SIGNAL_TOKENS) -> list[str]:
    """Signal tokens followed by deterministic pseudo-words, ``vocab_size`` total.

    Pseudo-words are CV-syllable strings from a fixed internal seed, so the
    vocabulary depends only on its size and the signal tokens, never on the
    corpus seed.
    """
    if vocab_size <= len(signal_tokens):
        raise ConfigError("vocab_size must exceed the number of signal_tokens")
    rng = np.random.default_rng(_VOCAB_SEED)
    words: list[str] = list(signal_tokens)
    seen = set(words)
    while len(words) < vocab_size:
        n_syll = int(rng.integers(2, 5))
        syllables = []
        for _ in range(n_syll):
            c = _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
            v = _VOWELS[int(rng.integers(len(_VOWELS)))]
            syllables.append(c + v)
        word = "".join(syllables)
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _zipf_cdf(n: int, exponent: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return np.cumsum(weights / weights.sum())


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def generate(config: GeneratorConfig) -> Corpus:
    """Generate a synthetic corpus; fully deterministic given ``config.seed``.

    Exactly ``round(n_patients * prevalence)`` patients are positive.  Every
    positive patient gets at least one dated note inside the 150-730-day
    window before their diagnosis; signal tokens are injected into in-window
    positive notes with probability ``signal_rate`` and never appear in any
    other note.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    start, end = config.collection_period
    period_days = (end - start).days

    vocab = make_vocabulary(config.vocab_size, config.signal_tokens)
    n_signal = len(config.signal_tokens)
    background = np.array(vocab[n_signal:], dtype=object)
    signal = np.array(vocab[:n_signal], dtype=object)
    cdf = _zipf_cdf(len(background), config.zipf_exponent)

    n_pos = round(config.n_patients * config.prevalence)
    labels = np.zeros(config.n_patients, dtype=bool)
    labels[:n_pos] = True
    rng.shuffle(labels)

    note_counts = config.notes_per_patient.sample(rng, config.n_patients)

    patients: Corpus = []
    for i in range(config.n_patients):
        positive = bool(labels[i])
        k = int(note_counts[i])

        if positive:
            diag_offset = int(rng.integers(WINDOW_MAX_DAYS, period_days + 1))
            diagnosis = start + timedelta(days=diag_offset)
            offsets = rng.integers(0, diag_offset + 1, size=k)
            # Guarantee one dated note inside the predictive window.
            anchor = int(rng.integers(k))
            offsets[anchor] = diag_offset - int(
                rng.integers(WINDOW_MIN_DAYS, WINDOW_MAX_DAYS + 1)
            )
        else:
            diagnosis = None
            offsets = rng.integers(0, period_days + 1, size=k)
            anchor = -1

        undated = rng.random(k) < config.undated_rate
        if anchor >= 0:
            undated[anchor] = False

        token_counts = config.tokens_per_note.sample(rng, k)
        total_tokens = int(token_counts.sum())
        token_idx = np.searchsorted(cdf, rng.random(total_tokens))
        tokens = background[token_idx]

        raw_notes: list[tuple[date | None, str]] = []
        cursor = 0
        for j in range(k):
            n_tok = int(token_counts[j])
            words = tokens[cursor : cursor + n_tok].copy()
            cursor += n_tok
            note_date = None if undated[j] else start + timedelta(days=int(offsets[j]))
            if (
                positive
                and note_date is not None
                and WINDOW_MIN_DAYS <= (diagnosis - note_date).days <= WINDOW_MAX_DAYS
                and rng.random() < config.signal_rate
            ):
                m = min(int(rng.integers(1, 4)), n_tok)
                positions = rng.choice(n_tok, size=m, replace=False)
                words[positions] = signal[rng.integers(0, n_signal, size=m)]
            raw_notes.append((note_date, " ".join(words)))

        # Order notes by date, undated last; ties keep generation order.
        order = sorted(
            range(k), key=lambda j: (raw_notes[j][0] is None, raw_notes[j][0] or date.min)
        )
        patient_id = f"p{i:06d}"
        notes = [
            Note(note_id=f"{patient_id}-n{rank:03d}", date=raw_notes[j][0], text=raw_notes[j][1])
            for rank, j in enumerate(order)
        ]

        dated = [n.date for n in notes if n.date is not None]
        if rng.random() < config.underage_rate:
            age_at_last = int(rng.integers(25, 40))
        else:
            age_at_last = int(rng.integers(40, 91))
        last = max(dated) if dated else start
        birth_year = last.year - age_at_last

        patients.append(
            Patient(
                patient_id=patient_id,
                birth_year=birth_year,
                diagnosis_date=diagnosis,
                notes=notes,
            )
        )
    return patients


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _date_str(d: date | None) -> str:
    return ABSENT if d is None else d.isoformat()


def _parse_date(value, line: int, field_name: str) -> date | None:
    if value == ABSENT:
        return None
    try:
        return date.fromisoformat(value)
    except (TypeError, ValueError):
        raise CorpusParseError(f"bad {field_name} value {value!r}", line) from None


def patient_to_record(patient: Patient) -> dict:
    return {
        "patient_id": patient.patient_id,
        "birth_year": patient.birth_year,
        "diagnosis_date": _date_str(patient.diagnosis_date),
        "notes": [
            {"note_id": n.note_id, "date": _date_str(n.date), "text": n.text}
            for n in patient.notes
        ],
    }


def patient_from_record(record: dict, line: int = 0) -> Patient:
    try:
        notes = [
            Note(
                note_id=raw["note_id"],
                date=_parse_date(raw["date"], line, "note date"),
                text=raw["text"],
            )
            for raw in record["notes"]
        ]
        return Patient(
            patient_id=record["patient_id"],
            birth_year=int(record["birth_year"]),
            diagnosis_date=_parse_date(record["diagnosis_date"], line, "diagnosis_date"),
            notes=notes,
        )
    except (KeyError, TypeError) as exc:
        raise CorpusParseError(f"malformed patient record ({exc})", line) from None


def corpus_to_bytes(corpus: Corpus) -> bytes:
    """Canonical serialized form: one sorted-key JSON record per line."""
    lines = [
        json.dumps(patient_to_record(p), sort_keys=True, ensure_ascii=False)
        for p in corpus
    ]
    return ("".join(line + "\n" for line in lines)).encode("utf-8")


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(corpus_to_bytes(corpus))


def load_corpus(path) -> Corpus:
    patients: Corpus = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON ({exc.msg})", lineno) from None
            patients.append(patient_from_record(record, lineno))
    return patients


def note_count_stats(corpus: Corpus) -> dict:
    """Mean/min/max notes per patient, as reported in cohort summaries."""
    counts = np.array([len(p.notes) for p in corpus]) if corpus else np.array([0])
    return {
        "mean": float(counts.mean()),
        "min": int(counts.min()),
        "max": int(counts.max()),
    }


def subset_by_ids(corpus: Corpus, patient_ids: Iterable[str]) -> Corpus:
    """Patients whose ids are listed, in the order given; missing ids raise."""
    by_id = {p.patient_id: p for p in corpus}
    out = []
    for pid in patient_ids:
        if pid not in by_id:
            raise ConfigError(f"patient id {pid!r} not present in corpus")
        out.append(by_id[pid])
    return out


def with_notes(patient: Patient, notes: list[Note]) -> Patient:
    return replace(patient, notes=notes)
