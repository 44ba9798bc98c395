"""Named parameter store, Adam updates, and checkpoint serialization.

Checkpoints are a JSON manifest (names, shapes, hyperparameters, training
step, resume counters) followed by a raw little-endian float32 payload of
parameters and Adam moments, all in one file.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


class TrainingNumericsError(RuntimeError):
    """A gradient or loss became non-finite."""


class ParameterStore:
    """Learnable arrays addressed by unique names, created in a fixed order
    from a seeded generator, plus Adam moment state."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xA11))))
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, shape: tuple[int, ...], init: str = "normal",
            scale: float | None = None) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "normal":
            std = scale if scale is not None else 1.0 / np.sqrt(shape[0])
            data = (self.rng.standard_normal(shape) * std).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params[name] = data
        self.m[name] = np.zeros(shape, dtype=self.dtype)
        self.v[name] = np.zeros(shape, dtype=self.dtype)

    def bind(self, trainable: bool = True) -> dict[str, Tensor]:
        """Tensors sharing this store's arrays, for one forward/backward."""
        return {name: Tensor(data, requires_grad=trainable)
                for name, data in self.params.items()}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParameterStore":
        clone = ParameterStore.__new__(ParameterStore)
        clone.seed = self.seed
        clone.dtype = self.dtype
        clone.rng = np.random.Generator(np.random.PCG64())
        clone.rng.bit_generator.state = self.rng.bit_generator.state
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.m = {k: v.copy() for k, v in self.m.items()}
        clone.v = {k: v.copy() for k, v in self.v.items()}
        clone.step = self.step
        return clone


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):  # fixed order: the norm must not depend on dict order
        g = grads[name]
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def adam_update(store: ParameterStore, grads: dict[str, np.ndarray],
                lr: float, betas: tuple[float, float] = (0.9, 0.999),
                eps: float = 1e-8) -> ParameterStore:
    """Bias-corrected first/second-moment update, in place."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, param in store.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingNumericsError(f"non-finite gradient for {name!r}")
        g = np.asarray(g, dtype=store.dtype)
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(store.dtype)
    return store


def save_checkpoint(path, store: ParameterStore, extra: dict | None = None) -> None:
    names = sorted(store.params)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float32",
        "step": store.step,
        "seed": store.seed,
        "entries": [[n, list(store.params[n].shape)] for n in names],
        "extra": extra or {},
    }
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for n in names
        for arr in (store.params[n], store.m[n], store.v[n])
    )
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length))
        payload = fh.read()
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version")
    store = ParameterStore(seed=manifest["seed"], dtype=np.float32)
    store.step = manifest["step"]
    off = 0
    for name, shape in manifest["entries"]:
        shape = tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        arrays = []
        for _ in range(3):
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=off)
            off += arr.nbytes
            arrays.append(arr.reshape(shape).astype(np.float32))
        store.params[name] = arrays[0].copy()
        store.m[name] = arrays[1].copy()
        store.v[name] = arrays[2].copy()
    return store, manifest["extra"]
