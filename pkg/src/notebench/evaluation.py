"""Per-note to per-patient aggregation and the metric suite.

A patient's risk is aggregated from their per-note probabilities; the
default rule takes the LOWEST per-note probability, with mean, max, and a
scaled max/mean blend available as alternatives.  Metrics are AUROC
(Mann-Whitney, ties count one half), AUPRC (average precision with a
deterministic tie order), and the Brier score, each computable at the
per-note and per-patient level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricUndefinedError


@dataclass(frozen=True)
class AggregationRule:
    """MIN / MEAN / MAX, or a scaled blend of max and mean.

    The blend follows (p_max + p_mean * n/c) / (1 + n/c) where n is the
    patient's note count and c a positive scale, evaluated exactly in that
    order so brute-force recomputation reproduces it bit for bit.
    """

    kind: str
    scale: float = 2.0

    def __post_init__(self):
        if self.kind not in ("min", "mean", "max", "scaled_max_mean"):
            raise ConfigError(f"unknown aggregation rule {self.kind!r}")
        if self.kind == "scaled_max_mean" and self.scale <= 0:
            raise ConfigError("scaled_max_mean scale must be positive")

    @property
    def name(self) -> str:
        if self.kind == "scaled_max_mean":
            return f"scaled_max_mean(c={self.scale:g})"
        return self.kind


MIN = AggregationRule("min")
MEAN = AggregationRule("mean")
MAX = AggregationRule("max")


def scaled_max_mean(scale: float = 2.0) -> AggregationRule:
    return AggregationRule("scaled_max_mean", scale)


def rule_from_name(name: str, scale: float = 2.0) -> AggregationRule:
    return AggregationRule(name, scale)


@dataclass
class PredictionSet:
    """Per-note records (patient_id, note_id, probability, label).

    Probabilities lie in [0, 1]; every record of a patient carries the same
    label.  Records keep insertion order, which fixes the note order used by
    the mean aggregation.
    """

    patient_ids: list = field(default_factory=list)
    note_ids: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def add(self, patient_id: str, note_id: str, probability: float, label: int) -> None:
        if not (0.0 <= probability <= 1.0):
            raise ConfigError(
                f"probability {probability!r} for note {note_id!r} is outside [0, 1]"
            )
        self.patient_ids.append(patient_id)
        self.note_ids.append(note_id)
        self.probabilities.append(float(probability))
        self.labels.append(int(label))

    def __len__(self) -> int:
        return len(self.patient_ids)

    def validate(self) -> None:
        if not self.patient_ids:
            raise ConfigError("prediction set is empty")
        seen: dict = {}
        for pid, prob, label in zip(self.patient_ids, self.probabilities, self.labels):
            if not (0.0 <= prob <= 1.0):
                raise ConfigError(f"probability {prob!r} outside [0, 1]")
            if pid in seen and seen[pid] != label:
                raise ConfigError(f"patient {pid!r} has conflicting labels")
            seen[pid] = label

    def by_patient(self) -> dict:
        """patient_id -> (list of probabilities in record order, label)."""
        grouped: dict = {}
        for pid, prob, label in zip(self.patient_ids, self.probabilities, self.labels):
            if pid not in grouped:
                grouped[pid] = ([], label)
            grouped[pid][0].append(prob)
        return grouped


def collect_predictions(predict_fn, patients) -> PredictionSet:
    """Score every note of every patient with ``predict_fn(note) -> probability``."""
    pred_set = PredictionSet()
    for patient in patients:
        for note in patient.notes:
            pred_set.add(patient.patient_id, note.note_id, predict_fn(note), patient.label)
    return pred_set


def apply_rule(rule: AggregationRule, probabilities: list) -> float:
    """Aggregate one patient's note probabilities; total on non-empty input."""
    if not probabilities:
        raise ConfigError("cannot aggregate a patient with zero notes")
    if rule.kind == "min":
        return min(probabilities)
    if rule.kind == "max":
        return max(probabilities)
    n = len(probabilities)
    mean = sum(probabilities) / n
    if rule.kind == "mean":
        return mean
    w = n / rule.scale
    return (max(probabilities) + mean * w) / (1.0 + w)


def aggregate(pred_set: PredictionSet, rule: AggregationRule) -> list:
    """Per-patient (patient_id, probability, label) records."""
    pred_set.validate()
    return [
        (pid, apply_rule(rule, probs), label)
        for pid, (probs, label) in pred_set.by_patient().items()
    ]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _check_binary(labels: np.ndarray, metric: str, need_neg: bool = True) -> tuple:
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or (need_neg and n_neg == 0):
        raise MetricUndefinedError(f"{metric} is undefined without both classes present")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted one half.

    Computed from midranks in O(n log n); equals exhaustive pair counting
    exactly because rank sums of integers and halves are exact in float64.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels, "AUROC")
    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # Midranks per tie group, 1-based.
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    group_mid = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_mid, ends - starts)
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Average precision: mean of precision at each positive's rank.

    Ranking is by descending score with ties broken by original index, so
    the value is deterministic for any input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, _ = _check_binary(labels, "AUPRC", need_neg=False)
    order = np.argsort(-scores, kind="mergesort")
    hits = labels[order] == 1
    true_pos = np.cumsum(hits)
    precision_at = true_pos / np.arange(1, scores.size + 1)
    return float(precision_at[hits].sum() / n_pos)


def brier(scores, labels) -> float:
    """Mean squared difference between probability and label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise MetricUndefinedError("Brier score is undefined on empty input")
    return float(np.mean((scores - labels) ** 2))


@dataclass
class LevelMetrics:
    auroc: float
    auprc: float
    brier: float
    n_pos: int
    n_neg: int


@dataclass
class MetricReport:
    per_note: LevelMetrics
    per_patient: LevelMetrics
    rule: str


def _level_metrics(scores, labels) -> LevelMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    return LevelMetrics(
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        brier=brier(scores, labels),
        n_pos=n_pos,
        n_neg=int(labels.size - n_pos),
    )


def evaluate(pred_set: PredictionSet, rule: AggregationRule = MIN) -> MetricReport:
    """Metric suite at both levels; per-patient metrics use the given rule."""
    pred_set.validate()
    note_metrics = _level_metrics(pred_set.probabilities, pred_set.labels)
    per_patient = aggregate(pred_set, rule)
    pat_scores = [p for _, p, _ in per_patient]
    pat_labels = [l for _, _, l in per_patient]
    return MetricReport(
        per_note=note_metrics,
        per_patient=_level_metrics(pat_scores, pat_labels),
        rule=rule.name,
    )


def report_rows(report: MetricReport, split: str) -> list:
    """Rows for the metric CSV; Brier is reported x100."""
    rows = []
    for level, metrics in (("note", report.per_note), ("patient", report.per_patient)):
        rows.append(
            {
                "split": split,
                "level": level,
                "rule": report.rule if level == "patient" else "none",
                "auroc": metrics.auroc,
                "auprc": metrics.auprc,
                "brier_x100": metrics.brier * 100.0,
                "n_pos": metrics.n_pos,
                "n_neg": metrics.n_neg,
            }
        )
    return rows
