"""The six training algorithms, written as communication hooks over the primitives.

Conventions: gradient sums are divided by the worker count and neighbourhood
sums by the neighbourhood size, so ``lr`` means the same thing for every n.
Parameters, gradients and optimizer slots are float32; updates are computed
in float32 so a one-worker run replays plain sequential SGD exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import collectives as C
from .codec import Codec
from .engine import CommHook, Stage, TrainingAbort

F32 = np.float32

NAMES = ("allreduce", "qsgd8", "onebit_adam", "decen32", "decen8", "async")


class DivergenceError(TrainingAbort):
    def __init__(self, step: int, where: str = ""):
        super().__init__(f"non-finite parameters at step {step}{' in ' + where if where else ''}")
        self.step = step


@dataclass
class AlgorithmSpec:
    name: str = "allreduce"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 10
    topology: str | None = None   # decen only; default random (decen32) / ring (decen8)
    codec: str | None = None      # override the algorithm's codec kind (tests, ablations)
    rounding: str = "stochastic"
    seed: int = 0
    max_staleness: int | None = None   # async: observed only, never enforced
    async_comm: bool = True

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown algorithm {self.name!r}; expected one of {', '.join(NAMES)}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.name == "onebit_adam" and self.warmup_steps < 1:
            raise ValueError("onebit_adam needs warmup_steps >= 1")


def _check_finite(engine, bucket):
    if not np.isfinite(bucket.x).all():
        raise DivergenceError(engine.step, f"bucket {bucket.id}")


class Algorithm:
    state_slots: tuple[str, ...] = ()
    centralized = True

    def __init__(self, spec: AlgorithmSpec):
        self.spec = spec
        self.lr = F32(spec.lr)
        self.audit = None

    def install(self, engine) -> None:
        engine.register_hook(CommHook(Stage.AFTER_LAYER_BACKWARD, self.hook))

    def init_bucket(self, engine, bucket) -> None:
        pass

    def hook(self, engine, bucket) -> None:
        raise NotImplementedError


class DataParallelSGD(Algorithm):
    """allreduce (codec None) and qsgd8 (uniform8, no error compensation)."""

    def __init__(self, spec, codec: Codec | None = None):
        super().__init__(spec)
        self.codec = codec

    def hook(self, engine, bucket):
        if self.codec is None:
            s = engine.allreduce(bucket, bucket.g)
        else:
            s = engine.compressed_allreduce(bucket, bucket.g, self.codec)
        bucket.x[:] -= self.lr * (s / F32(engine.n))
        _check_finite(engine, bucket)


class OneBitAdam(Algorithm):
    """Adam with full-precision warmup, then frozen variance and 1-bit momentum.

    Warmup steps aggregate gradients with ``c_fp_s`` and update both moments.
    Afterwards each worker folds its own gradient into the shared momentum,
    the momenta are averaged through ``c_lp_s`` with error compensation, and
    the update divides by the frozen second moment. No bias correction.
    """

    state_slots = ("m", "v")

    def __init__(self, spec, codec: Codec | None = None):
        super().__init__(spec)
        self.codec = codec or Codec("onebit")
        self.b1, self.b2, self.eps = F32(spec.beta1), F32(spec.beta2), F32(spec.eps)

    def init_bucket(self, engine, bucket):
        bucket.state["error"] = engine.error_state(bucket)

    def compressing(self, step: int) -> bool:
        return step >= self.spec.warmup_steps

    def hook(self, engine, bucket):
        m, v = bucket.slot("m"), bucket.slot("v")
        one = F32(1)
        if not self.compressing(engine.step):
            g = engine.allreduce(bucket, bucket.g) / F32(engine.n)
            m[:] = self.b1 * m + (one - self.b1) * g
            v[:] = self.b2 * v + (one - self.b2) * g * g
        else:
            local = self.b1 * m + (one - self.b1) * bucket.g
            m[:] = engine.compressed_allreduce(bucket, local, self.codec, bucket.state["error"],
                                               audit=self.audit) / F32(engine.n)
        bucket.x[:] -= self.lr * m / (np.sqrt(v) + self.eps)
        _check_finite(engine, bucket)


class Decentralized(Algorithm):
    """Local SGD step, then average the model over the neighbourhood."""

    centralized = False

    def __init__(self, spec, topology: str, codec: Codec | None = None):
        super().__init__(spec)
        self.kind = topology
        self.codec = codec
        self.topology = None

    def install(self, engine):
        self.topology = C.Topology(self.kind, engine.n, self.spec.seed)
        super().install(engine)

    def hook(self, engine, bucket):
        bucket.x[:] -= self.lr * bucket.g
        if self.codec is None:
            avg = C.d_fp_s(engine.ep, bucket.x, self.topology, "average", round=engine.step,
                           bucket_id=bucket.id)
        else:
            avg = C.d_lp_s(engine.ep, bucket.x, self.topology, self.codec, "average",
                           round=engine.step, bucket_id=bucket.id,
                           rng=engine.rng(f"codec{bucket.id}"))
        bucket.x[:] = avg
        _check_finite(engine, bucket)


def _codec(spec: AlgorithmSpec, default: str) -> Codec:
    kind = spec.codec or default
    rounding = spec.rounding if kind == "uniform8" else "nearest"
    return Codec(kind, rounding, spec.seed)


def make_algorithm(spec: AlgorithmSpec) -> Algorithm:
    if spec.name == "allreduce":
        return DataParallelSGD(spec, _codec(spec, "identity") if spec.codec else None)
    if spec.name == "qsgd8":
        return DataParallelSGD(spec, _codec(spec, "uniform8"))
    if spec.name == "onebit_adam":
        return OneBitAdam(spec, _codec(spec, "onebit"))
    if spec.name == "decen32":
        return Decentralized(spec, spec.topology or "random", _codec(spec, "identity") if spec.codec else None)
    if spec.name == "decen8":
        return Decentralized(spec, spec.topology or "ring", _codec(spec, "uniform8"))
    raise ValueError(f"{spec.name} does not run on the synchronous engine")


# --- async ---------------------------------------------------------------------

@dataclass
class AsyncRecord:
    step: int           # local compute step (1-based, after the update)
    loss: float
    grad_norm: float
    staleness: int      # local steps between the snapshot and the merge it last saw
    virtual_time: float


@dataclass
class AsyncResult:
    records: list[AsyncRecord] = field(default_factory=list)
    rounds: int = 0
    staleness: list[int] = field(default_factory=list)
    compute_end: float = 0.0


def step_quotas(n: int, steps_each: int, slowdowns: list[float]) -> list[int]:
    """Split ``n * steps_each`` gradient steps in proportion to compute speed."""
    total = n * steps_each
    speed = np.array([1.0 / s for s in slowdowns])
    raw = total * speed / speed.sum()
    quota = np.floor(raw).astype(int)
    # hand out the remainder by largest fractional part, ties to lower rank
    for r in np.argsort(-(raw - quota), kind="stable")[: total - quota.sum()]:
        quota[r] += 1
    return [int(q) for q in quota]


def run_async(ep, model, batches, spec: AlgorithmSpec, *, quota: int, step_time: float,
              on_step=None) -> AsyncResult:
    """Asynchronous model averaging for one worker.

    The compute context runs ``quota`` local SGD steps back to back, each
    ``step_time`` virtual seconds (times this worker's slowdown). The
    communication context repeatedly snapshots the model, averages snapshots
    across workers with ``c_fp_s`` and applies ``x += avg - snapshot``. Neither
    waits for the other: they are interleaved here by virtual time, so a run on
    the simulator is deterministic. A merge that lands while a step is in
    flight is visible to the next step. Rounds continue until every worker has
    used its quota; a done flag rides along in the averaged vector.

    ``batches(k)`` returns the k-th local batch.
    """
    lr = F32(spec.lr)
    n = ep.size
    dt = step_time * ep.profile.slowdown(ep.rank)
    out = AsyncResult()
    comm_t = ep.now
    compute_t = ep.now
    steps = 0
    merged_at = 0   # local step count captured by the last snapshot that was merged

    def advance(until: float | None):
        nonlocal compute_t, steps
        while steps < quota and (until is None or compute_t + dt <= until):
            X, y = batches(steps)
            loss, grads = model.loss_grad(X, y)
            g = np.concatenate(grads)
            x = model.vector()
            with np.errstate(over="ignore", invalid="ignore"):
                x -= lr * g
            if not np.isfinite(x).all():
                raise DivergenceError(steps + 1, f"rank {ep.rank}")
            model.set_vector(x)
            compute_t += dt
            steps += 1
            rec = AsyncRecord(steps, loss, float(np.linalg.norm(g.astype(np.float64))),
                              steps - merged_at, compute_t)
            out.records.append(rec)
            if on_step is not None:
                on_step(rec)

    if not spec.async_comm or n == 1:
        advance(None)
        ep.now = compute_t
        out.compute_end = compute_t
        return out

    last_snapshot = None
    while True:
        start = comm_t if last_snapshot is None else max(comm_t, last_snapshot + step_time)
        advance(start)
        snapshot = model.vector()
        taken = steps
        done = F32(1.0 if steps >= quota else 0.0)
        ep.now = start
        total = C.c_fp_s(ep, np.append(snapshot, done), bucket_id=0)
        comm_t = ep.now
        last_snapshot = start
        out.rounds += 1
        # steps finishing before the merge lands still see the old model
        advance(comm_t)
        avg = total[:-1] / F32(n)
        model.set_vector(model.vector() + (avg - snapshot))
        out.staleness.append(steps - taken)
        merged_at = taken
        if int(round(float(total[-1]))) == n:
            break
    out.compute_end = compute_t
    ep.now = max(comm_t, compute_t)
    return out
