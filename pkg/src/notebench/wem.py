"""Static subword word-embedding baseline.

Two stages: unsupervised skip-gram with negative sampling over every note,
then a supervised logistic classifier over the mean of token vectors.  A
token's vector is the mean of its word vector and its hashed character
n-gram vectors, so any token -- including one never seen in pretraining --
has a defined representation, and the vector never changes with context.

Note representations average over tokens, which makes predictions invariant
to token order and imposes no input-length cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Note
from .errors import ConfigError, TrainingError
from .evaluation import PredictionSet, auroc
from .params import ParameterStore, load_store, save_store
from .text import Vocabulary, build_vocab, char_ngrams, tokenize

_NEG_TABLE_POWER = 0.75


@dataclass(frozen=True)
class WemConfig:
    d_emb: int = 64
    n_min: int = 3
    n_max: int = 6
    n_buckets: int = 2**16
    window: int = 5
    negatives: int = 5

    def validate(self) -> None:
        if self.d_emb < 1:
            raise ConfigError("d_emb must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.n_min > self.n_max:
            raise ConfigError("n_min must be <= n_max")
        if self.n_buckets < 1:
            raise ConfigError("n_buckets must be >= 1")


@dataclass(frozen=True)
class WemSchedule:
    epochs: int = 5
    lr: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


PRETRAIN_SCHEDULE = WemSchedule(epochs=5, lr=0.05)
CLASSIFIER_SCHEDULE = WemSchedule(epochs=20, lr=2.0)


class WemModel:
    """Embedding tables plus the linear classifier.

    Rows [0, vocab.size) of the input table are word vectors; rows
    [vocab.size, vocab.size + n_buckets) are n-gram bucket vectors.  The
    output table holds context vectors for the skip-gram objective only.
    """

    def __init__(self, vocab: Vocabulary, config: WemConfig, seed: int = 0):
        config.validate()
        self.vocab = vocab
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 707]))
        bound = 1.0 / config.d_emb
        self.table_in = rng.uniform(-bound, bound, size=(vocab.size + config.n_buckets, config.d_emb))
        self.table_out = np.zeros((vocab.size, config.d_emb))
        self.cls_w = np.zeros(config.d_emb)
        self.cls_b = 0.0
        self._rows_cache: dict = {}

    # ------------------------------------------------------------------
    # composition
    # ------------------------------------------------------------------

    def token_rows(self, token: str) -> np.ndarray:
        """Input-table row indices composing the token: word row (if in
        vocabulary) plus its n-gram buckets."""
        cached = self._rows_cache.get(token)
        if cached is not None:
            return cached
        cfg = self.config
        grams = char_ngrams(token, cfg.n_min, cfg.n_max, cfg.n_buckets)
        rows = [self.vocab.size + b for b in grams]
        if token in self.vocab:
            rows.append(self.vocab.token_to_id[token])
        rows = np.array(rows, dtype=np.intp)
        self._rows_cache[token] = rows
        return rows

    def token_vector(self, token: str) -> np.ndarray:
        """Mean of the token's word vector and n-gram vectors; context-free."""
        rows = self.token_rows(token)
        return self.table_in[rows].mean(axis=0)

    def note_vector(self, text: str) -> np.ndarray:
        """Mean of constituent token vectors; zero vector for an empty note."""
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(self.config.d_emb)
        acc = np.zeros(self.config.d_emb)
        for token in tokens:
            acc += self.token_vector(token)
        return acc / len(tokens)

    # ------------------------------------------------------------------
    # prediction
    # ------------------------------------------------------------------

    def predict_text(self, text: str) -> float:
        z = float(self.note_vector(text) @ self.cls_w + self.cls_b)
        if z >= 0:
            p = 1.0 / (1.0 + np.exp(-z))
        else:
            e = np.exp(z)
            p = e / (1.0 + e)
        return float(np.clip(p, 1e-12, 1.0 - 1e-12))


def predict_note(model: WemModel, note: Note) -> float:
    """P(positive | note), strictly inside (0, 1)."""
    return model.predict_text(note.text)


def prediction_set(model: WemModel, patients) -> PredictionSet:
    pred = PredictionSet()
    for patient in patients:
        for note in patient.notes:
            pred.add(patient.patient_id, note.note_id, model.predict_text(note.text), patient.label)
    return pred


# --------------------------------------------------------------------------
# skip-gram pretraining
# --------------------------------------------------------------------------


@dataclass
class WemPretrainResult:
    model: WemModel
    history: list = field(default_factory=list)
    initial_probe_loss: float = 0.0
    final_probe_loss: float = 0.0


def _note_word_ids(patients, vocab: Vocabulary) -> list:
    """In-vocabulary token id sequences per note; OOV tokens are skipped
    for the skip-gram stage (their n-grams still train via in-vocab words)."""
    sequences = []
    for patient in patients:
        for note in patient.notes:
            ids = [vocab.token_to_id[t] for t in tokenize(note.text) if t in vocab]
            if len(ids) >= 2:
                sequences.append(np.array(ids, dtype=np.intp))
    return sequences


def _unigram_table(sequences, vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size)
    for seq in sequences:
        np.add.at(counts, seq, 1.0)
    weights = counts**_NEG_TABLE_POWER
    total = weights.sum()
    if total == 0:
        raise ConfigError("no in-vocabulary tokens available for pretraining")
    return np.cumsum(weights / total)


def _probe_pairs(
    sequences, window: int, negatives: int, neg_cdf, rng: np.random.Generator, n_pairs: int = 2000
) -> list:
    """Fixed (center, context, negative ids) triples scoring the full objective."""
    pairs = []
    note_idx = rng.integers(0, len(sequences), size=n_pairs * 2)
    for ni in note_idx:
        seq = sequences[ni]
        i = int(rng.integers(len(seq)))
        b = int(rng.integers(1, window + 1))
        js = [j for j in range(max(0, i - b), min(len(seq), i + b + 1)) if j != i]
        if js:
            ctx = int(seq[js[int(rng.integers(len(js)))]])
            negs = np.searchsorted(neg_cdf, rng.random(negatives))
            pairs.append((int(seq[i]), ctx, negs))
        if len(pairs) >= n_pairs:
            break
    return pairs


def pretrain_embeddings(
    patients,
    vocab: Vocabulary | None = None,
    config: WemConfig = WemConfig(),
    schedule: WemSchedule = PRETRAIN_SCHEDULE,
    max_vocab: int = 4096,
    seed: int | None = None,
) -> WemPretrainResult:
    """Skip-gram with negative sampling over all notes of the given patients.

    The probe loss (a fixed sample of center/context pairs scored with the
    same objective) is recorded before and after training; deterministic
    given the seed.
    """
    schedule.validate()
    config.validate()
    seed = schedule.seed if seed is None else seed
    if vocab is None:
        vocab = build_vocab(patients, max_vocab)
    model = WemModel(vocab, config, seed=seed)
    sequences = _note_word_ids(patients, vocab)
    if not sequences:
        raise ConfigError("no usable notes for embedding pretraining")
    neg_cdf = _unigram_table(sequences, vocab.size)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 808]))
    probe = _probe_pairs(sequences, config.window, config.negatives, neg_cdf, rng)
    word_rows = [model.token_rows(t) for t, _ in sorted(vocab.token_to_id.items(), key=lambda kv: kv[1])]

    def probe_loss() -> float:
        """Negative-sampling objective on the fixed probe triples."""
        total = 0.0
        for center, ctx, negs in probe:
            v = model.table_in[word_rows[center]].mean(axis=0)
            s_pos = float(v @ model.table_out[ctx])
            s_neg = model.table_out[negs] @ v
            total += float(np.log1p(np.exp(-s_pos)) + np.log1p(np.exp(s_neg)).sum())
        return total / len(probe)

    result = WemPretrainResult(model=model)
    result.initial_probe_loss = probe_loss()
    k = config.negatives
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(sequences))
        epoch_loss, n_centers = 0.0, 0
        for si in order:
            seq = sequences[si]
            bounds = rng.integers(1, config.window + 1, size=len(seq))
            for i in range(len(seq)):
                b = int(bounds[i])
                ctx = np.concatenate([seq[max(0, i - b) : i], seq[i + 1 : i + 1 + b]])
                if ctx.size == 0:
                    continue
                rows = word_rows[seq[i]]
                v = model.table_in[rows].mean(axis=0)
                negs = np.searchsorted(neg_cdf, rng.random(ctx.size * k))
                targets = np.concatenate([ctx, negs])
                labels = np.zeros(targets.size)
                labels[: ctx.size] = 1.0
                u = model.table_out[targets]
                scores = u @ v
                probs = np.where(
                    scores >= 0,
                    1.0 / (1.0 + np.exp(-np.abs(scores))),
                    np.exp(-np.abs(scores)) / (1.0 + np.exp(-np.abs(scores))),
                )
                err = probs - labels
                grad_v = err @ u
                model.table_out[targets] -= schedule.lr * err[:, None] * v[None, :]
                model.table_in[rows] -= schedule.lr * grad_v / rows.size
                epoch_loss += float(
                    -np.log(np.clip(np.where(labels == 1, probs, 1 - probs), 1e-12, None)).sum()
                )
                n_centers += 1
                step += 1
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"skip-gram loss became non-finite at step {step}")
        result.history.append(
            {"epoch": epoch, "train_loss": epoch_loss / max(n_centers, 1), "probe_loss": probe_loss()}
        )
    result.final_probe_loss = result.history[-1]["probe_loss"]
    return result


# --------------------------------------------------------------------------
# supervised classifier
# --------------------------------------------------------------------------


@dataclass
class WemTrainResult:
    model: WemModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auroc: float = 0.0


def train_classifier(
    model: WemModel,
    train,
    valid,
    schedule: WemSchedule = CLASSIFIER_SCHEDULE,
    update_embeddings: bool = True,
) -> WemTrainResult:
    """Logistic objective over mean note vectors, labels propagated per note.

    With ``update_embeddings`` (the default) the gradient also flows into the
    word and n-gram vectors of each note's tokens; the best epoch by
    validation per-note AUROC is restored at the end.
    """
    schedule.validate()
    if not train:
        raise ConfigError("training set is empty")
    if not valid:
        raise ConfigError("validation set is empty")

    def instances(patients):
        out = []
        for patient in patients:
            for note in patient.notes:
                tokens = tokenize(note.text)
                rows = (
                    np.concatenate([model.token_rows(t) for t in tokens])
                    if tokens
                    else np.empty(0, dtype=np.intp)
                )
                weights = (
                    np.concatenate(
                        [
                            np.full(len(model.token_rows(t)), 1.0 / (len(tokens) * len(model.token_rows(t))))
                            for t in tokens
                        ]
                    )
                    if tokens
                    else np.empty(0)
                )
                out.append((rows, weights, patient.label, note.text))
        return out

    train_inst = instances(train)
    valid_inst = instances(valid)
    valid_labels = np.array([inst[2] for inst in valid_inst])
    rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, 909]))

    result = WemTrainResult(model=model)
    best = None
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(train_inst))
        epoch_loss = 0.0
        for idx in order:
            rows, weights, label, _ = train_inst[idx]
            x = weights @ model.table_in[rows] if rows.size else np.zeros(model.config.d_emb)
            z = float(x @ model.cls_w + model.cls_b)
            p = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
            err = p - label
            epoch_loss += -np.log(max(p if label else 1 - p, 1e-12))
            grad_w = err * x
            if update_embeddings and rows.size:
                gx = err * model.cls_w
                model.table_in[rows] -= schedule.lr * weights[:, None] * gx[None, :]
            model.cls_w -= schedule.lr * grad_w
            model.cls_b -= schedule.lr * err
            step += 1
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"classifier loss became non-finite at step {step}")
        val_probs = np.array([model.predict_text(inst[3]) for inst in valid_inst])
        val_auroc = auroc(val_probs, valid_labels)
        result.history.append(
            {"epoch": epoch, "train_loss": epoch_loss / len(train_inst), "val_auroc": val_auroc}
        )
        if val_auroc > result.best_val_auroc or best is None:
            result.best_val_auroc = val_auroc
            result.best_epoch = epoch
            best = (model.table_in.copy() if update_embeddings else None, model.cls_w.copy(), float(model.cls_b))
    table, w, b = best
    if table is not None:
        model.table_in = table
    model.cls_w = w
    model.cls_b = b
    return result


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_wem(model: WemModel, path) -> None:
    store = ParameterStore()
    store.add("emb.in", model.table_in)
    store.add("emb.out", model.table_out, trainable=False)
    store.add("cls.w", model.cls_w)
    store.add("cls.b", np.asarray(model.cls_b))
    meta = {
        "kind": "wem",
        "config": {
            "d_emb": model.config.d_emb,
            "n_min": model.config.n_min,
            "n_max": model.config.n_max,
            "n_buckets": model.config.n_buckets,
            "window": model.config.window,
            "negatives": model.config.negatives,
        },
        "vocab": model.vocab.token_to_id,
    }
    save_store(store, path, meta)


def load_wem(path) -> WemModel:
    store, meta = load_store(path)
    if meta.get("kind") != "wem":
        raise ConfigError(f"{path} is not a WEM checkpoint")
    config = WemConfig(**meta["config"])
    vocab = Vocabulary({t: int(i) for t, i in meta["vocab"].items()})
    model = WemModel(vocab, config)
    model.table_in = store.get("emb.in").data.copy()
    model.table_out = store.get("emb.out").data.copy()
    model.cls_w = store.get("cls.w").data.copy()
    model.cls_b = float(store.get("cls.b").data)
    return model
