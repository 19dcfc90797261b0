"""Desk-scale models, synthetic data, sharding and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import FlatTensor

F32, F64 = np.float32, np.float64

MODEL_KINDS = ("quadratic", "logistic", "mlp")


# --- data ----------------------------------------------------------------------

@dataclass
class Dataset:
    features: np.ndarray  # (N, d) float32
    labels: np.ndarray    # (N,) float32; +-1 for classification, 0 for quadratic
    seed: int = 0
    kind: str = "logistic"

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.seed, self.kind)


def generate(kind: str, N: int, d: int, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Synthetic data, deterministic per seed.

    ``quadratic``: points scattered around a random centre (labels unused).
    ``logistic``/``mlp``: Gaussian features labelled by a random linear
    separator, each label flipped with probability ``noise``.
    """
    if N <= 0 or d <= 0:
        raise ValueError(f"invalid dataset size N={N}, d={d}")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "quadratic":
        centre = rng.normal(0.0, 2.0, size=d)
        X = centre + rng.normal(size=(N, d))
        return Dataset(X.astype(F32), np.zeros(N, dtype=F32), seed, kind)
    truth = rng.normal(size=d)
    truth *= 4.0 / np.linalg.norm(truth)
    X = rng.normal(size=(N, d))
    y = np.where(X @ truth >= 0, 1.0, -1.0)
    flip = rng.random(N) < noise
    y[flip] = -y[flip]
    return Dataset(X.astype(F32), y.astype(F32), seed, kind)


def partition(ds: Dataset, n: int) -> list[Dataset]:
    """Contiguous shards; the first ``N % n`` shards get one extra row."""
    N = len(ds)
    if not 1 <= n <= N:
        raise ValueError(f"cannot split {N} rows into {n} shards")
    base, extra = divmod(N, n)
    shards, lo = [], 0
    for k in range(n):
        hi = lo + base + (k < extra)
        shards.append(ds.subset(slice(lo, hi)))
        lo = hi
    return shards


_HEAD = struct.Struct("<qqq")
_KIND_CODE = {k: i for i, k in enumerate(MODEL_KINDS)}


def dump(ds: Dataset, path) -> None:
    """Binary dump: ``[N:i8][d:i8][seed:i8]``, row-major float32 features,
    then N float32 labels, then one kind byte."""
    N, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(N, d, ds.seed))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<f4").tobytes())
        fh.write(bytes([_KIND_CODE[ds.kind]]))


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    N, d, seed = _HEAD.unpack_from(raw)
    off = _HEAD.size
    X = np.frombuffer(raw, dtype="<f4", count=N * d, offset=off).reshape(N, d)
    off += 4 * N * d
    y = np.frombuffer(raw, dtype="<f4", count=N, offset=off)
    off += 4 * N
    kind = MODEL_KINDS[raw[off]] if off < len(raw) else "logistic"
    return Dataset(X.astype(F32), y.astype(F32), seed, kind)


class BatchStream:
    """Seeded per-worker minibatches; reshuffles every epoch."""

    def __init__(self, shard: Dataset, batch_size: int | None, seed: int, rank: int):
        self.shard = shard
        self.batch_size = len(shard) if not batch_size else min(batch_size, len(shard))
        self.seed = seed
        self.rank = rank

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.shard) // self.batch_size)

    def epoch(self, e: int):
        order = np.random.default_rng([self.seed, self.rank, e]).permutation(len(self.shard))
        for lo in range(0, len(order), self.batch_size):
            idx = np.sort(order[lo:lo + self.batch_size])
            yield self.shard.features[idx], self.shard.labels[idx]

    def batch(self, step: int):
        """The ``step``-th batch of the endless stream."""
        e, k = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.seed, self.rank, e]).permutation(len(self.shard))
        idx = np.sort(order[k * self.batch_size:(k + 1) * self.batch_size])
        return self.shard.features[idx], self.shard.labels[idx]


# --- models --------------------------------------------------------------------

@dataclass
class Layer:
    name: str
    tensors: list[FlatTensor]

    @property
    def size(self) -> int:
        return sum(len(t) for t in self.tensors)

    @property
    def nbytes(self) -> int:
        return 4 * self.size


class Model:
    """Parameters grouped into layers plus a closed-form loss and gradient."""

    kind = ""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    @property
    def params(self) -> list[FlatTensor]:
        return [t for layer in self.layers for t in layer.tensors]

    @property
    def size(self) -> int:
        return sum(layer.size for layer in self.layers)

    def vector(self) -> np.ndarray:
        return np.concatenate([t.data for t in self.params])

    def set_vector(self, v) -> None:
        v = np.asarray(v, dtype=F32)
        pos = 0
        for t in self.params:
            t.data[:] = v[pos:pos + len(t)]
            pos += len(t)

    def loss_grad(self, X, y) -> tuple[float, list[np.ndarray]]:
        """Mean loss over the batch and one float32 gradient per parameter tensor."""
        raise NotImplementedError

    def loss(self, X, y) -> float:
        return self.loss_grad(X, y)[0]

    def _values(self):
        return [t.numpy().astype(F64) for t in self.params]

    def spec(self) -> dict:
        raise NotImplementedError


class Quadratic(Model):
    """``0.5 * mean_k ||x - a_k||^2``; gradient ``x - mean(a)``."""

    kind = "quadratic"

    def __init__(self, d: int, n_layers: int = 2, init=None):
        if d < n_layers:
            raise ValueError("quadratic model needs at least one coordinate per layer")
        init = np.zeros(d, dtype=F32) if init is None else np.asarray(init, dtype=F32)
        self.d = d
        layers = []
        for k, chunk in enumerate(np.array_split(init, n_layers)):
            layers.append(Layer(f"block{k}", [FlatTensor(f"block{k}.x", chunk.copy())]))
        super().__init__(layers)

    def loss_grad(self, X, y):
        X = np.asarray(X, dtype=F64)
        x = np.concatenate(self._values())
        if X.shape[1] != x.size:
            raise ValueError(f"batch has {X.shape[1]} features, model has {x.size}")
        diff = x - X
        loss = 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))
        g = (x - X.mean(axis=0)).astype(F32)
        return loss, [g[s] for s in self._slices()]

    def _slices(self):
        out, pos = [], 0
        for t in self.params:
            out.append(slice(pos, pos + len(t)))
            pos += len(t)
        return out

    def spec(self):
        return {"kind": "quadratic", "d": self.d, "layers": len(self.layers)}


def _logistic_terms(z, y):
    """Mean logistic loss of margins ``y * z`` and d(loss)/dz per sample."""
    m = y * z
    loss = float(np.mean(np.logaddexp(0.0, -m)))
    # sigmoid(-m), computed without overflow
    s = np.exp(-np.logaddexp(0.0, m))
    return loss, -y * s / len(y)


class Logistic(Model):
    kind = "logistic"

    def __init__(self, d: int):
        self.d = d
        super().__init__([
            Layer("linear", [FlatTensor("linear.weight", np.zeros(d))]),
            Layer("bias", [FlatTensor("bias.bias", np.zeros(1))]),
        ])

    def loss_grad(self, X, y):
        X = np.asarray(X, dtype=F64)
        y = np.asarray(y, dtype=F64)
        w, b = self._values()
        if X.shape[1] != w.size:
            raise ValueError(f"batch has {X.shape[1]} features, model has {w.size}")
        loss, dz = _logistic_terms(X @ w + b[0], y)
        return loss, [(X.T @ dz).astype(F32), np.array([dz.sum()], dtype=F32)]

    def spec(self):
        return {"kind": "logistic", "d": self.d}


class MLP(Model):
    """One tanh hidden layer feeding a logistic output."""

    kind = "mlp"

    def __init__(self, d: int, hidden: int, seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        self.d, self.hidden, self.seed = d, hidden, seed
        super().__init__([
            Layer("fc1", [FlatTensor("fc1.weight", rng.normal(0, 1 / np.sqrt(d), (hidden, d))),
                          FlatTensor("fc1.bias", np.zeros(hidden))]),
            Layer("fc2", [FlatTensor("fc2.weight", rng.normal(0, 1 / np.sqrt(hidden), hidden)),
                          FlatTensor("fc2.bias", np.zeros(1))]),
        ])

    def loss_grad(self, X, y):
        X = np.asarray(X, dtype=F64)
        y = np.asarray(y, dtype=F64)
        W1, b1, w2, b2 = self._values()
        if X.shape[1] != W1.shape[1]:
            raise ValueError(f"batch has {X.shape[1]} features, model has {W1.shape[1]}")
        h = np.tanh(X @ W1.T + b1)
        loss, dz = _logistic_terms(h @ w2 + b2[0], y)
        dh = np.outer(dz, w2) * (1.0 - h * h)
        grads = [dh.T @ X, dh.sum(axis=0), h.T @ dz, np.array([dz.sum()])]
        return loss, [g.astype(F32).reshape(-1) for g in grads]

    def spec(self):
        return {"kind": "mlp", "d": self.d, "hidden": self.hidden, "seed": self.seed}


def build_model(kind: str, d: int, hidden: int = 32, layers: int = 2, seed: int = 0) -> Model:
    if kind == "quadratic":
        return Quadratic(d, layers)
    if kind == "logistic":
        return Logistic(d)
    if kind == "mlp":
        return MLP(d, hidden, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def gradient(model: Model, params, batch) -> list[np.ndarray]:
    """Analytic gradient at ``params`` (a flat vector) without touching ``model``."""
    saved = model.vector()
    try:
        model.set_vector(params)
        return model.loss_grad(*batch)[1]
    finally:
        model.set_vector(saved)


def finite_difference(model: Model, params, batch, coords, step: float = 1e-5) -> np.ndarray:
    """Central differences of the loss in float64 at the listed coordinates."""
    params = np.asarray(params, dtype=F64)
    out = []
    for c in coords:
        e = np.zeros_like(params)
        e[c] = step
        out.append((_loss64(model, params + e, batch) - _loss64(model, params - e, batch)) / (2 * step))
    return np.array(out)


def _loss64(model: Model, params, batch) -> float:
    """Loss with float64 parameters (finite differences need more than float32)."""
    X, y = batch
    X = np.asarray(X, dtype=F64)
    y = np.asarray(y, dtype=F64)
    if isinstance(model, Quadratic):
        diff = params - X
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))
    if isinstance(model, Logistic):
        w, b = params[:-1], params[-1]
        return _logistic_terms(X @ w + b, y)[0]
    d, h = model.d, model.hidden
    W1 = params[:h * d].reshape(h, d)
    b1 = params[h * d:h * d + h]
    w2 = params[h * d + h:h * d + 2 * h]
    b2 = params[-1]
    return _logistic_terms(np.tanh(X @ W1.T + b1) @ w2 + b2, y)[0]
