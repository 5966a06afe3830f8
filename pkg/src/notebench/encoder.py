"""Small trainable transformer encoder with three adaptation regimes.

The backbone is a pre-LN multi-head self-attention encoder over word-level
token ids, pretrained from scratch with a masked-token objective.  Two
adaptation paths follow:

* fine-tuning (FT): every parameter trains, with a sigmoid classification
  head reading the CLS position;
* soft-prompt tuning (ST): a small matrix of trainable embedding rows is
  inserted after CLS, the head trains, and the backbone stays frozen --
  bit-identical before and after training.

Model selection in both paths is by best validation per-note AUROC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as nt
from .corpus import Note
from .errors import ConfigError, TrainingError
from .evaluation import PredictionSet, auroc
from .params import ParameterStore, adam_step, content_hash, load_store, save_store
from .tensor import Tensor
from .text import CLS, MASK, PAD, SPECIAL_TOKENS, TokenizedNote, Vocabulary, build_vocab, encode

_INIT_STD = 0.1  # at d_model=64, smaller scales leave attention near-uniform
_MASK_RATE = 0.15
_ADAPTER_NAMES = ("adapter.prompt", "adapter.head_w", "adapter.head_b")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 0  # filled from the vocabulary when 0
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


MLM_SCHEDULE = TrainSchedule(epochs=10, batch_size=32, lr=1e-3)
FT_SCHEDULE = TrainSchedule(epochs=20, batch_size=16, lr=3e-4)
ST_SCHEDULE = TrainSchedule(epochs=50, batch_size=16, lr=1e-2)

DEFAULT_PROMPT_LEN = 8


@dataclass
class EncoderModel:
    """Backbone parameters plus, depending on role, an MLM head, a
    classification head, or a prompt adapter, all in one named store."""

    config: EncoderConfig
    vocab: Vocabulary
    store: ParameterStore
    prompt_len: int = 0

    def backbone_names(self) -> list:
        return [
            n
            for n in self.store.names()
            if not (n.startswith("mlm.") or n.startswith("cls.") or n.startswith("adapter."))
        ]

    def backbone_hash(self) -> str:
        return content_hash(self.store, self.backbone_names())

    @property
    def text_max_len(self) -> int:
        """Input capacity left for CLS + text once prompts take their slots."""
        return self.config.max_len - self.prompt_len


def init_backbone(config: EncoderConfig, vocab: Vocabulary, seed: int = 0) -> EncoderModel:
    config = replace(config, vocab_size=vocab.size)
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    store = ParameterStore()
    d, f = config.d_model, config.ffn_dim

    def w(name, shape):
        store.add(name, rng.normal(0.0, _INIT_STD, size=shape))

    def zeros(name, shape):
        store.add(name, np.zeros(shape))

    def ones(name, shape):
        store.add(name, np.ones(shape))

    w("emb.word", (config.vocab_size, d))
    w("emb.pos", (config.max_len, d))
    for i in range(config.n_layers):
        pre = f"layer{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{pre}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"{pre}.attn.{bias}", (d,))
        ones(f"{pre}.ln1.g", (d,))
        zeros(f"{pre}.ln1.b", (d,))
        ones(f"{pre}.ln2.g", (d,))
        zeros(f"{pre}.ln2.b", (d,))
        w(f"{pre}.ffn.w1", (d, f))
        zeros(f"{pre}.ffn.b1", (f,))
        w(f"{pre}.ffn.w2", (f, d))
        zeros(f"{pre}.ffn.b2", (d,))
    ones("final.g", (d,))
    zeros("final.b", (d,))
    return EncoderModel(config=config, vocab=vocab, store=store)


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


def _attention(model: EncoderModel, x: Tensor, mask: np.ndarray, i: int, rng) -> Tensor:
    cfg = model.config
    s = model.store
    B, T, d = x.shape
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    pre = nt.layer_norm(x, s.get(f"layer{i}.ln1.g"), s.get(f"layer{i}.ln1.b"))

    def heads(name, bias, scaled=False):
        proj = nt.add(nt.matmul(pre, s.get(name)), s.get(bias))
        if scaled:  # fold 1/sqrt(dh) into q; cheaper than scaling the score matrix
            proj = nt.scale(proj, 1.0 / math.sqrt(dh))
        return nt.transpose(nt.reshape(proj, (B, T, h, dh)), (0, 2, 1, 3))

    q = heads(f"layer{i}.attn.wq", f"layer{i}.attn.bq", scaled=True)
    k = heads(f"layer{i}.attn.wk", f"layer{i}.attn.bk")
    v = heads(f"layer{i}.attn.wv", f"layer{i}.attn.bv")
    scores = nt.matmul(q, nt.transpose(k, (0, 1, 3, 2)))
    probs = nt.softmax(scores, bias=mask)
    ctx = nt.reshape(nt.transpose(nt.matmul(probs, v), (0, 2, 1, 3)), (B, T, d))
    out = nt.add(nt.matmul(ctx, s.get(f"layer{i}.attn.wo")), s.get(f"layer{i}.attn.bo"))
    if rng is not None:
        out = nt.dropout(out, cfg.dropout, rng)
    return nt.add(x, out)


def _ffn(model: EncoderModel, x: Tensor, i: int, rng) -> Tensor:
    cfg = model.config
    s = model.store
    pre = nt.layer_norm(x, s.get(f"layer{i}.ln2.g"), s.get(f"layer{i}.ln2.b"))
    hidden = nt.gelu(nt.add(nt.matmul(pre, s.get(f"layer{i}.ffn.w1")), s.get(f"layer{i}.ffn.b1")))
    out = nt.add(nt.matmul(hidden, s.get(f"layer{i}.ffn.w2")), s.get(f"layer{i}.ffn.b2"))
    if rng is not None:
        out = nt.dropout(out, cfg.dropout, rng)
    return nt.add(x, out)


def forward_hidden(model: EncoderModel, ids: np.ndarray, lens: np.ndarray, rng=None) -> Tensor:
    """Hidden states (B, T', d_model); T' = T + prompt_len when prompts are set.

    ``rng`` enables dropout (training); inference passes None.
    """
    cfg = model.config
    s = model.store
    B, T = ids.shape
    emb = nt.embedding_lookup(s.get("emb.word"), ids)
    if model.prompt_len:
        p = model.prompt_len
        prompt = nt.reshape(s.get("adapter.prompt"), (1, p, cfg.d_model))
        tiled = nt.add(Tensor(np.zeros((B, p, cfg.d_model))), prompt)
        emb = nt.concat(
            [nt.slice_axis(emb, 1, 0, 1), tiled, nt.slice_axis(emb, 1, 1, T)], axis=1
        )
        lens = lens + p
        T = T + p
    if T > cfg.max_len:
        raise ConfigError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    pos = nt.take_rows(s.get("emb.pos"), np.arange(T))
    x = nt.add(emb, pos)
    bias = np.where(np.arange(T)[None, :] < lens[:, None], 0.0, -1e9)
    mask = bias[:, None, None, :]
    for i in range(cfg.n_layers):
        x = _attention(model, x, mask, i, rng)
        x = _ffn(model, x, i, rng)
    return nt.layer_norm(x, s.get("final.g"), s.get("final.b"))


def _cls_logit(model: EncoderModel, ids: np.ndarray, lens: np.ndarray, rng=None) -> Tensor:
    hidden = forward_hidden(model, ids, lens, rng)
    cls_h = nt.reshape(nt.slice_axis(hidden, 1, 0, 1), (ids.shape[0], model.config.d_model))
    if model.prompt_len:
        w, b = model.store.get("adapter.head_w"), model.store.get("adapter.head_b")
    else:
        w, b = model.store.get("cls.w"), model.store.get("cls.b")
    return nt.add(nt.reshape(nt.matmul(cls_h, nt.reshape(w, (model.config.d_model, 1))), (ids.shape[0],)), b)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def _pad_batch(tokenized: list) -> tuple:
    lens = np.array([t.attention_len for t in tokenized], dtype=np.intp)
    width = int(lens.max())
    ids = np.full((len(tokenized), width), PAD, dtype=np.intp)
    for row, t in enumerate(tokenized):
        ids[row, : lens[row]] = t.ids[: lens[row]]
    return ids, lens


def _note_instances(model: EncoderModel, patients) -> list:
    """(tokenized, label, patient_id, note_id) per note, labels propagated."""
    out = []
    for patient in patients:
        for note in patient.notes:
            out.append(
                (
                    encode(note.text, model.vocab, model.text_max_len),
                    patient.label,
                    patient.patient_id,
                    note.note_id,
                )
            )
    return out


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


def predict_tokenized(model: EncoderModel, tokenized: list, batch_size: int = 64) -> np.ndarray:
    """Probabilities for pre-encoded notes; deterministic (dropout off)."""
    probs = np.empty(len(tokenized))
    with nt.no_grad():
        for lo in range(0, len(tokenized), batch_size):
            chunk = tokenized[lo : lo + batch_size]
            ids, lens = _pad_batch(chunk)
            logit = _cls_logit(model, ids, lens, rng=None)
            z = logit.data
            p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
            probs[lo : lo + len(chunk)] = p
    return np.clip(probs, 1e-12, 1.0 - 1e-12)


def predict_note(model: EncoderModel, note: Note) -> float:
    """P(positive | note), strictly inside (0, 1)."""
    tokenized = encode(note.text, model.vocab, model.text_max_len)
    return float(predict_tokenized(model, [tokenized])[0])


def prediction_set(model: EncoderModel, patients, batch_size: int = 64) -> PredictionSet:
    instances = _note_instances(model, patients)
    probs = predict_tokenized(model, [inst[0] for inst in instances], batch_size)
    pred = PredictionSet()
    for (tok, label, pid, nid), p in zip(instances, probs):
        pred.add(pid, nid, float(p), label)
    return pred


# --------------------------------------------------------------------------
# masked-LM pretraining
# --------------------------------------------------------------------------


@dataclass
class MlmResult:
    model: EncoderModel
    history: list = field(default_factory=list)
    initial_holdout_loss: float = 0.0
    final_holdout_loss: float = 0.0


def _mask_batch(ids: np.ndarray, lens: np.ndarray, vocab_size: int, rng) -> tuple:
    """Standard 15% masking, 80/10/10 mask/random/keep; CLS and PAD are never masked."""
    B, T = ids.shape
    candidates = (np.arange(T)[None, :] < lens[:, None]) & (ids != CLS)
    chosen = candidates & (rng.random(ids.shape) < _MASK_RATE)
    for row in range(B):
        if not chosen[row].any() and lens[row] > 1:
            pool = np.flatnonzero(candidates[row])
            chosen[row, pool[rng.integers(len(pool))]] = True
    corrupted = ids.copy()
    rows, cols = np.nonzero(chosen)
    action = rng.random(rows.size)
    corrupted[rows, cols] = np.where(
        action < 0.8,
        MASK,
        np.where(
            action < 0.9,
            rng.integers(len(SPECIAL_TOKENS), vocab_size, size=rows.size),
            ids[rows, cols],
        ),
    )
    return corrupted, rows, cols


def _mlm_loss(model: EncoderModel, ids, lens, rng_mask, rng_drop) -> Tensor:
    corrupted, rows, cols = _mask_batch(ids, lens, model.config.vocab_size, rng_mask)
    hidden = forward_hidden(model, corrupted, lens, rng_drop)
    B, T = corrupted.shape
    flat = nt.reshape(hidden, (B * T, model.config.d_model))
    picked = nt.take_rows(flat, rows * T + cols)
    logits = nt.add(nt.matmul(picked, model.store.get("mlm.w")), model.store.get("mlm.b"))
    return nt.cross_entropy(logits, ids[rows, cols])


def pretrain_mlm(
    patients,
    schedule: TrainSchedule = MLM_SCHEDULE,
    config: EncoderConfig = EncoderConfig(),
    vocab: Vocabulary | None = None,
    holdout_fraction: float = 0.1,
    seed: int | None = None,
) -> MlmResult:
    """Masked-token pretraining over every note of the given patients.

    A held-out slice of notes tracks generalization; the result records the
    initial and final held-out loss.  Raises TrainingError with the step
    index if the loss turns NaN.
    """
    schedule.validate()
    seed = schedule.seed if seed is None else seed
    if vocab is None:
        vocab = build_vocab(patients, config.vocab_size or 512)
    model = init_backbone(config, vocab, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    model.store.add("mlm.w", rng.normal(0.0, _INIT_STD, size=(model.config.d_model, vocab.size)))
    model.store.add("mlm.b", np.zeros(vocab.size))

    tokenized = [
        encode(note.text, vocab, model.config.max_len)
        for patient in patients
        for note in patient.notes
    ]
    if not tokenized:
        raise ConfigError("no notes available for pretraining")
    order = rng.permutation(len(tokenized))
    n_hold = max(1, int(len(tokenized) * holdout_fraction))
    holdout = [tokenized[i] for i in order[:n_hold]]
    train = [tokenized[i] for i in order[n_hold:]] or holdout

    def holdout_loss() -> float:
        rng_h = np.random.default_rng(np.random.SeedSequence([seed, 303]))
        total, count = 0.0, 0
        with nt.no_grad():
            for lo in range(0, len(holdout), 64):
                chunk = holdout[lo : lo + 64]
                ids, lens = _pad_batch(chunk)
                loss = _mlm_loss(model, ids, lens, rng_h, None)
                total += loss.item() * len(chunk)
                count += len(chunk)
        return total / count

    result = MlmResult(model=model)
    result.initial_holdout_loss = holdout_loss()
    step = 0
    for epoch in range(schedule.epochs):
        perm = rng.permutation(len(train))
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(train), schedule.batch_size):
            batch = [train[i] for i in perm[lo : lo + schedule.batch_size]]
            ids, lens = _pad_batch(batch)
            model.store.zero_grad()
            loss = _mlm_loss(model, ids, lens, rng, rng)
            if np.isnan(loss.data):
                raise TrainingError(f"MLM loss became NaN at step {step}")
            nt.backward(loss)
            adam_step(model.store, lr=schedule.lr)
            epoch_loss += loss.item()
            n_batches += 1
            step += 1
        result.history.append(
            {"epoch": epoch, "train_loss": epoch_loss / n_batches, "holdout_loss": holdout_loss()}
        )
    result.final_holdout_loss = result.history[-1]["holdout_loss"]
    return result


def masked_token_accuracy(model: EncoderModel, patients, seed: int = 0) -> float:
    """Fraction of masked positions recovered exactly; used by pretraining probes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    tokenized = [
        encode(note.text, model.vocab, model.config.max_len)
        for patient in patients
        for note in patient.notes
    ]
    hits, total = 0, 0
    with nt.no_grad():
        for lo in range(0, len(tokenized), 64):
            ids, lens = _pad_batch(tokenized[lo : lo + 64])
            corrupted, rows, cols = _mask_batch(ids, lens, model.config.vocab_size, rng)
            hidden = forward_hidden(model, corrupted, lens, None)
            B, T = corrupted.shape
            flat = nt.reshape(hidden, (B * T, model.config.d_model))
            picked = nt.take_rows(flat, rows * T + cols)
            logits = nt.add(nt.matmul(picked, model.store.get("mlm.w")), model.store.get("mlm.b"))
            hits += int((logits.data.argmax(axis=1) == ids[rows, cols]).sum())
            total += rows.size
    return hits / max(total, 1)


# --------------------------------------------------------------------------
# supervised adaptation
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: EncoderModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auroc: float = 0.0


def make_classifier(pretrained: EncoderModel) -> EncoderModel:
    """Copy of the backbone with a zero-initialized sigmoid head; all trainable."""
    store = ParameterStore()
    for name in pretrained.backbone_names():
        store.add(name, pretrained.store.get(name).data.copy(), trainable=True)
    store.add("cls.w", np.zeros(pretrained.config.d_model))
    store.add("cls.b", np.zeros(()))
    return EncoderModel(config=pretrained.config, vocab=pretrained.vocab, store=store)


def make_prompt_model(
    pretrained: EncoderModel, prompt_len: int = DEFAULT_PROMPT_LEN, seed: int = 0
) -> EncoderModel:
    """Frozen copy of the backbone plus a trainable prompt matrix and head.

    Prompt rows are initialized from the embedding-table rows of random
    vocabulary tokens, which is stabler than Gaussian noise at this scale.
    """
    if prompt_len >= pretrained.config.max_len:
        raise ConfigError(
            f"prompt_len ({prompt_len}) must be smaller than max_len ({pretrained.config.max_len})"
        )
    if prompt_len < 1:
        raise ConfigError("prompt_len must be >= 1")
    store = ParameterStore()
    for name in pretrained.backbone_names():
        store.add(name, pretrained.store.get(name).data.copy(), trainable=False)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 505]))
    word = pretrained.store.get("emb.word").data
    rows = rng.integers(len(SPECIAL_TOKENS), word.shape[0], size=prompt_len)
    store.add("adapter.prompt", word[rows].copy())
    store.add("adapter.head_w", np.zeros(pretrained.config.d_model))
    store.add("adapter.head_b", np.zeros(()))
    return EncoderModel(
        config=pretrained.config, vocab=pretrained.vocab, store=store, prompt_len=prompt_len
    )


def _train_classifier_loop(model: EncoderModel, train, valid, schedule: TrainSchedule) -> TrainResult:
    schedule.validate()
    if not train:
        raise ConfigError("training set is empty")
    train_inst = _note_instances(model, train)
    valid_inst = _note_instances(model, valid)
    if not valid_inst:
        raise ConfigError("validation set is empty")
    valid_toks = [inst[0] for inst in valid_inst]
    valid_labels = np.array([inst[1] for inst in valid_inst])
    rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, 606]))

    result = TrainResult(model=model)
    best: dict | None = None
    step = 0
    for epoch in range(schedule.epochs):
        perm = rng.permutation(len(train_inst))
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(train_inst), schedule.batch_size):
            batch = [train_inst[i] for i in perm[lo : lo + schedule.batch_size]]
            ids, lens = _pad_batch([inst[0] for inst in batch])
            labels = np.array([inst[1] for inst in batch], dtype=np.float64)
            model.store.zero_grad()
            logit = _cls_logit(model, ids, lens, rng)
            loss = nt.bce_with_logits(logit, labels)
            if np.isnan(loss.data):
                raise TrainingError(f"classification loss became NaN at step {step}")
            nt.backward(loss)
            adam_step(model.store, lr=schedule.lr)
            epoch_loss += loss.item()
            n_batches += 1
            step += 1
        val_probs = predict_tokenized(model, valid_toks)
        val_auroc = auroc(val_probs, valid_labels)
        result.history.append(
            {"epoch": epoch, "train_loss": epoch_loss / n_batches, "val_auroc": val_auroc}
        )
        if val_auroc > result.best_val_auroc or best is None:
            result.best_val_auroc = val_auroc
            result.best_epoch = epoch
            best = {n: model.store.get(n).data.copy() for n in model.store.trainable_names()}
    for name, values in best.items():
        model.store.get(name).data[...] = values
    return result


def finetune(
    pretrained: EncoderModel, train, valid, schedule: TrainSchedule = FT_SCHEDULE
) -> TrainResult:
    """Full fine-tuning: every backbone parameter plus the head trains."""
    model = make_classifier(pretrained)
    return _train_classifier_loop(model, train, valid, schedule)


def soft_prompt_tune(
    pretrained: EncoderModel,
    train,
    valid,
    prompt_len: int = DEFAULT_PROMPT_LEN,
    schedule: TrainSchedule = ST_SCHEDULE,
) -> TrainResult:
    """Soft-prompt tuning: only the prompt matrix and head receive updates."""
    model = make_prompt_model(pretrained, prompt_len, seed=schedule.seed)
    return _train_classifier_loop(model, train, valid, schedule)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _base_metadata(model: EncoderModel) -> dict:
    return {
        "config": {
            "vocab_size": model.config.vocab_size,
            "d_model": model.config.d_model,
            "n_heads": model.config.n_heads,
            "n_layers": model.config.n_layers,
            "ffn_dim": model.config.ffn_dim,
            "max_len": model.config.max_len,
            "dropout": model.config.dropout,
        },
        "vocab": model.vocab.token_to_id,
    }


def save_encoder(model: EncoderModel, path) -> None:
    meta = _base_metadata(model)
    meta["kind"] = "encoder"
    save_store(model.store, path, meta)


def load_encoder(path) -> EncoderModel:
    store, meta = load_store(path)
    if meta.get("kind") != "encoder":
        raise ConfigError(f"{path} is not an encoder checkpoint")
    config = EncoderConfig(**meta["config"])
    vocab = Vocabulary({t: int(i) for t, i in meta["vocab"].items()})
    return EncoderModel(config=config, vocab=vocab, store=store)


def save_adapter(model: EncoderModel, path) -> None:
    """Prompt + head only, bound to the backbone by content hash."""
    if model.prompt_len == 0:
        raise ConfigError("model has no prompt adapter to save")
    adapter = ParameterStore()
    for name in _ADAPTER_NAMES:
        adapter.add(name, model.store.get(name).data.copy(), trainable=True)
    meta = _base_metadata(model)
    meta["kind"] = "adapter"
    meta["prompt_len"] = model.prompt_len
    meta["backbone_hash"] = model.backbone_hash()
    save_store(adapter, path, meta)


def load_adapter(path, backbone: EncoderModel) -> EncoderModel:
    """Rebuild a prompt model; refuses a backbone whose hash does not match."""
    adapter, meta = load_store(path)
    if meta.get("kind") != "adapter":
        raise ConfigError(f"{path} is not an adapter checkpoint")
    expected = meta["backbone_hash"]
    actual = backbone.backbone_hash()
    if expected != actual:
        from .errors import CheckpointMismatchError

        raise CheckpointMismatchError(
            f"adapter was trained against backbone {expected[:12]}, got {actual[:12]}"
        )
    store = ParameterStore()
    for name in backbone.backbone_names():
        store.add(name, backbone.store.get(name).data.copy(), trainable=False)
    for name in _ADAPTER_NAMES:
        store.add(name, adapter.get(name).data.copy(), trainable=True)
    return EncoderModel(
        config=backbone.config,
        vocab=backbone.vocab,
        store=store,
        prompt_len=int(meta["prompt_len"]),
    )
