"""Named parameters with a first-class trainable/frozen partition.

Frozen parameters receive no optimizer updates; their values are
bit-identical across a training run.  Checkpoints are a small binary
container: named tensors with shape headers, little-endian float64
payloads, and the trainable/frozen tag per entry, plus a JSON metadata
block for model configuration.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointMismatchError, ConfigError
from .tensor import Tensor

_MAGIC = b"NTC1"

ADAM_LR = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParameterStore:
    """Ordered map name -> parameter Tensor, each tagged trainable or frozen."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, trainable: bool) -> None:
        self._trainable[name] = trainable
        self._params[name].requires_grad = trainable

    def freeze_all(self) -> None:
        for name in self._params:
            self.set_trainable(name, False)

    def trainable_names(self) -> list:
        return [n for n, t in self._trainable.items() if t]

    def trainable_count(self) -> int:
        """Total number of trainable scalar parameters."""
        return sum(self._params[n].data.size for n in self.trainable_names())

    def total_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict:
        """Copies of all parameter values, for best-epoch restore."""
        return {n: t.data.copy() for n, t in self._params.items()}

    def restore(self, snap: dict) -> None:
        for n, values in snap.items():
            self._params[n].data[...] = values


def adam_step(
    store: ParameterStore,
    lr: float = ADAM_LR,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One adaptive-moment update with bias correction; frozen params untouched.

    A trainable parameter whose gradient is unset (it did not appear in the
    recorded graph) is skipped for this step.
    """
    if lr <= 0:
        raise ConfigError("lr must be > 0")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in store.trainable_names():
        p = store.get(name)
        if p.grad is None:
            continue
        if name not in store._m:
            store._m[name] = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        m, v = store._m[name], store._v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------


def store_to_bytes(store: ParameterStore, metadata: dict | None = None) -> bytes:
    """Serialize; entries sorted by name so identical stores give identical bytes."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<I", len(meta)), meta]
    names = sorted(store.names())
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        t = store.get(name)
        encoded = name.encode("utf-8")
        flags = 1 if store.is_trainable(name) else 0
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", flags, t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def store_from_bytes(blob: bytes) -> tuple[ParameterStore, dict]:
    if blob[:4] != _MAGIC:
        raise CheckpointMismatchError("not a parameter container (bad magic)")
    pos = 4
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    metadata = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        flags, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f8", count=n_values, offset=pos).reshape(shape)
        pos += 8 * n_values
        store.add(name, values.astype(np.float64), trainable=bool(flags & 1))
    return store, metadata


def save_store(store: ParameterStore, path, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(store_to_bytes(store, metadata))


def load_store(path) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as fh:
        return store_from_bytes(fh.read())


def content_hash(store: ParameterStore, names=None) -> str:
    """SHA-256 over the named entries (values + shapes), sorted by name."""
    h = hashlib.sha256()
    for name in sorted(names if names is not None else store.names()):
        t = store.get(name)
        h.update(name.encode("utf-8"))
        h.update(str(t.data.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
