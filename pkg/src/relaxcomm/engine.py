"""Execution optimizer: profiling pass, bucketing, flattening and overlap.

The first iteration runs unoptimized (every hooked layer communicates on its
own, after the whole backward pass) while the invocation log is recorded.
From the log the engine packs layers into buckets, copies each bucket's
parameters, gradients and algorithm state into contiguous arenas, and from
then on launches one communication per bucket as soon as its last layer's
backward finishes.

Each worker has a compute context (the calling thread) and a communication
context (a single worker thread fed by a queue). Both keep their own virtual
clock on the endpoint; the iteration ends when both contexts are done.
"""

from __future__ import annotations

import enum
import json
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from . import collectives as C
from .tensor import BucketArena, FlatTensor, flatten

DEFAULT_BUCKET_CAPACITY = 8 * 1024 * 1024


class Stage(enum.Enum):
    AFTER_LAYER_BACKWARD = "after_layer_backward"
    AFTER_ALL_BACKWARD = "after_all_backward"
    BEFORE_FORWARD = "before_forward"


@dataclass
class CommHook:
    stage: Stage
    function: object  # fn(engine, bucket) -> None


class EngineStateError(RuntimeError):
    pass


class CommunicationFailure(RuntimeError):
    def __init__(self, bucket_id: int, cause: BaseException):
        super().__init__(f"communication for bucket {bucket_id} failed: {cause}")
        self.bucket_id = bucket_id
        self.cause = cause


class HookError(RuntimeError):
    pass


class TrainingAbort(RuntimeError):
    """Raised by a hook to stop training; passed through without wrapping."""


@dataclass
class ProfileRecord:
    order: int
    layer: str
    sizes: tuple[int, ...]
    hook: str
    timestamp: float


@dataclass
class Bucket:
    id: int
    layers: list[str]
    trigger: str
    params: BucketArena | None = None
    grads: BucketArena | None = None
    slots: dict[str, BucketArena] = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.params.storage

    @property
    def g(self) -> np.ndarray:
        return self.grads.storage

    def slot(self, name: str) -> np.ndarray:
        return self.slots[name].storage

    def __len__(self) -> int:
        return len(self.params)


@dataclass
class Schedule:
    buckets: list[Bucket]

    def bucket_of(self, layer: str) -> Bucket:
        for b in self.buckets:
            if layer in b.layers:
                return b
        raise KeyError(layer)


def pack_buckets(layer_sizes: list[tuple[str, int]], capacity: int) -> list[list[str]]:
    """Greedy packing of ``(layer, nbytes)`` pairs, given in backward order.

    A layer joins the open bucket while the total stays within ``capacity``;
    a layer larger than ``capacity`` gets a bucket to itself.
    """
    buckets: list[list[str]] = []
    current: list[str] = []
    used = 0
    for name, nbytes in layer_sizes:
        if current and used + nbytes > capacity:
            buckets.append(current)
            current, used = [], 0
        current.append(name)
        used += nbytes
    if current:
        buckets.append(current)
    return buckets


class _CommContext:
    """The communication context: one thread draining a job queue."""

    def __init__(self, name: str):
        self._jobs: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._loop, name=name, daemon=True)
        self._thread.start()

    def _loop(self):
        while True:
            job = self._jobs.get()
            if job is None:
                return
            fn, done = job
            try:
                done.append(("ok", fn()))
            except BaseException as exc:  # noqa: BLE001 - handed back to the compute context
                done.append(("error", exc))
            finally:
                self._jobs.task_done()

    def submit(self, fn) -> list:
        done: list = []
        self._jobs.put((fn, done))
        return done

    def join(self) -> None:
        self._jobs.join()

    def stop(self) -> None:
        self._jobs.put(None)


class Engine:
    """Per-worker training driver for one model and one algorithm."""

    def __init__(self, ep, model, algorithm, *, lr: float = 0.1, compute_time: float = 0.0,
                 bucket_capacity: int = DEFAULT_BUCKET_CAPACITY, overlap: bool = True,
                 fusion: bool = True, hierarchical: bool = False, seed: int = 0,
                 timeline: list | None = None):
        self.ep = ep
        self.model = model
        self.algorithm = algorithm
        self.lr = lr
        self.compute_time = compute_time
        self.bucket_capacity = bucket_capacity
        self.overlap = overlap
        self.fusion = fusion
        self.hierarchical = hierarchical
        self.seed = seed
        self.timeline = timeline
        self._timeline_lock = threading.Lock()

        self.hooks: list[CommHook] = []
        self.log: list[ProfileRecord] = []
        self.schedule: Schedule | None = None
        self.step = 0
        self.grads = {t.name: FlatTensor(f"grad:{t.name}", np.zeros(len(t)), t.shape)
                      for t in model.params}
        self.slot_tensors: dict[str, dict[str, FlatTensor]] = {
            slot: {t.name: FlatTensor(f"{slot}:{t.name}", np.zeros(len(t)), t.shape)
                   for t in model.params}
            for slot in getattr(algorithm, "state_slots", ())
        }
        self.rngs: dict[str, np.random.Generator] = {}
        self._comm: _CommContext | None = None
        self._comm_clock = 0.0
        self._layer_cost = self._split_compute()
        algorithm.install(self)

    # -- configuration ---------------------------------------------------------

    def register_hook(self, hook: CommHook) -> None:
        if self.schedule is not None:
            raise EngineStateError("hooks must be registered before profiling")
        self.hooks.append(hook)

    def _toggle(self, attr, enabled):
        if self.schedule is not None:
            raise EngineStateError(f"cannot change {attr} after profiling")
        setattr(self, attr, bool(enabled))

    def set_overlap(self, enabled: bool) -> None:
        self._toggle("overlap", enabled)

    def set_fusion(self, enabled: bool) -> None:
        self._toggle("fusion", enabled)

    def set_hierarchical(self, enabled: bool) -> None:
        self._toggle("hierarchical", enabled)

    @property
    def n(self) -> int:
        return self.ep.size

    def rng(self, key: str) -> np.random.Generator:
        """Worker-local generator, stable across runs for a given key."""
        if key not in self.rngs:
            self.rngs[key] = np.random.default_rng([self.seed, self.ep.rank, *map(ord, key)])
        return self.rngs[key]

    # -- collectives as seen by algorithms ------------------------------------

    def use_hierarchy(self) -> bool:
        # one node, or one worker per node, is the degenerate flat case
        return self.hierarchical and 1 < len(C.leaders(self.ep)) < self.n

    def allreduce(self, bucket: Bucket, vec) -> np.ndarray:
        if self.use_hierarchy():
            return C.hierarchical(self.ep, vec, bucket_id=bucket.id)
        return C.c_fp_s(self.ep, vec, bucket_id=bucket.id)

    def compressed_allreduce(self, bucket: Bucket, vec, codec, error=None, audit=None) -> np.ndarray:
        rng = self.rng(f"codec{bucket.id}") if codec.rounding == "stochastic" else None
        if self.use_hierarchy():
            return C.hierarchical(self.ep, vec, codec, error, rng=rng, bucket_id=bucket.id, audit=audit)
        return C.c_lp_s(self.ep, vec, codec, error, rng=rng, bucket_id=bucket.id, audit=audit)

    def error_state(self, bucket: Bucket):
        """Zeroed error state matching the layout the next compressed call uses."""
        from .codec import ErrorState
        if self.use_hierarchy():
            return C.hierarchical_error_state(self.ep, len(bucket))
        return ErrorState.zeros(len(bucket), C.owned_length(len(bucket), self.n, self.ep.rank))

    # -- timing ----------------------------------------------------------------

    def _split_compute(self):
        """Forward/backward virtual seconds per layer, proportional to size."""
        total = self.model.size
        cost = {}
        for layer in self.model.layers:
            share = self.compute_time * layer.size / total
            cost[layer.name] = (share / 3.0, 2.0 * share / 3.0)
        return cost

    def _event(self, event, name, t, kind, **extra):
        if self.timeline is None:
            return
        with self._timeline_lock:
            self.timeline.append({"event": event, kind: name, "virtual_time": t,
                                  "iteration": self.step, "rank": self.ep.rank, **extra})

    # -- phases ----------------------------------------------------------------

    def _hook(self, stage: Stage):
        for h in self.hooks:
            if h.stage == stage:
                return h
        return None

    def profile(self, batch):
        """Run iteration one unoptimized, then build the schedule."""
        if self.schedule is not None:
            raise EngineStateError("already profiled")
        if not self.model.params:
            raise EngineStateError("model has no parameters")
        stats = self._iterate(batch, profiling=True)
        self._build_schedule()
        return stats

    def _build_schedule(self):
        layers = {layer.name: layer for layer in self.model.layers}
        hooked = [r.layer for r in self.log]
        if self._hook(Stage.AFTER_ALL_BACKWARD) and not self._hook(Stage.AFTER_LAYER_BACKWARD):
            groups = [hooked] if hooked else []
        elif self.fusion:
            groups = pack_buckets([(name, layers[name].nbytes) for name in hooked],
                                  self.bucket_capacity)
        else:
            groups = [[name] for name in hooked]
        buckets = []
        for bid, names in enumerate(groups):
            # arenas keep forward order so a bucket reads like a model slice
            fwd = [layer.name for layer in self.model.layers if layer.name in names]
            b = Bucket(bid, fwd, trigger=names[-1])
            ps = [t for name in fwd for t in layers[name].tensors]
            b.params = flatten(ps)
            b.grads = flatten([self.grads[t.name] for t in ps])
            for slot, tensors in self.slot_tensors.items():
                b.slots[slot] = flatten([tensors[t.name] for t in ps])
            buckets.append(b)
        self.schedule = Schedule(buckets)
        for b in buckets:
            self.algorithm.init_bucket(self, b)

    def _temporary_bucket(self, bid: int, layer) -> Bucket:
        """An unflattened single-layer bucket used while profiling (copy in/out)."""
        b = Bucket(bid, [layer.name], layer.name)
        b.params = flatten([FlatTensor(t.name, t.data.copy(), t.shape) for t in layer.tensors])
        b.grads = flatten([FlatTensor(t.name, self.grads[t.name].data.copy(), t.shape)
                           for t in layer.tensors])
        for slot, tensors in self.slot_tensors.items():
            b.slots[slot] = flatten([FlatTensor(t.name, tensors[t.name].data.copy(), t.shape)
                                     for t in layer.tensors])
        self.algorithm.init_bucket(self, b)
        return b

    @staticmethod
    def _copy_back(b: Bucket, layer, grads, slot_tensors):
        for view in b.params.members:
            t = next(t for t in layer.tensors if t.name == view.logical.name)
            t.data[:] = view.logical.data
        for view in b.grads.members:
            grads[view.logical.name].data[:] = view.logical.data
        for slot, arena in b.slots.items():
            for view in arena.members:
                slot_tensors[slot][view.logical.name].data[:] = view.logical.data

    def run_iteration(self, batch):
        if self.schedule is None:
            raise EngineStateError("profile() must run first")
        return self._iterate(batch, profiling=False)

    def _run_comm(self, bucket: Bucket, hook: CommHook, ready: float):
        ep = self.ep
        ep.now = max(ep.now, ready)
        self._event("comm_start", bucket.id, ep.now, "bucket", layers=list(bucket.layers))
        # overflow surfaces as a divergence check in the algorithm, not a warning
        with np.errstate(over="ignore", invalid="ignore"):
            hook.function(self, bucket)
        self._event("comm_end", bucket.id, ep.now, "bucket")
        return ep.now

    def _iterate(self, batch, profiling: bool):
        ep = self.ep
        if self._comm is None:
            self._comm = _CommContext(f"comm-{ep.rank}")
        before = self._hook(Stage.BEFORE_FORWARD)
        if before is not None:
            before.function(self, None)

        for layer in self.model.layers:
            self._event("compute_start", layer.name, ep.now, "layer", phase="forward")
            ep.compute(self._layer_cost[layer.name][0])
            self._event("compute_end", layer.name, ep.now, "layer", phase="forward")
        loss, grads = self.model.loss_grad(*batch)
        by_name = dict(zip((t.name for t in self.model.params), grads))

        hook = self._hook(Stage.AFTER_LAYER_BACKWARD) or self._hook(Stage.AFTER_ALL_BACKWARD)
        per_layer = hook is not None and hook.stage == Stage.AFTER_LAYER_BACKWARD
        launch_now = per_layer and self.overlap and not profiling
        pending: list[tuple[Bucket, float]] = []
        jobs = []
        grad_sq = 0.0
        order = 0
        for layer in reversed(self.model.layers):
            self._event("compute_start", layer.name, ep.now, "layer", phase="backward")
            ep.compute(self._layer_cost[layer.name][1])
            for t in layer.tensors:
                self.grads[t.name].data[:] = by_name[t.name]
                grad_sq += float(np.dot(by_name[t.name].astype(np.float64), by_name[t.name]))
            self._event("compute_end", layer.name, ep.now, "layer", phase="backward")
            if hook is None:
                continue
            if profiling:
                self.log.append(ProfileRecord(order, layer.name, tuple(len(t) for t in layer.tensors),
                                              hook.stage.value, ep.now))
                order += 1
                continue
            bucket = self.schedule.bucket_of(layer.name)
            if layer.name != bucket.trigger:
                continue
            if launch_now:
                jobs.append((bucket, self._comm.submit(
                    lambda b=bucket, t=ep.now: self._run_comm(b, hook, t))))
            else:
                pending.append(bucket)
        backward_end = ep.now

        if profiling and hook is not None:
            for k, record in enumerate(self.log):
                layer = next(l for l in self.model.layers if l.name == record.layer)
                b = self._temporary_bucket(k, layer)
                jobs.append((b, self._comm.submit(
                    lambda b=b, t=backward_end: self._run_comm(b, hook, t))))
                self._comm.join()
                self._copy_back(b, layer, self.grads, self.slot_tensors)
        for bucket in pending:
            jobs.append((bucket, self._comm.submit(
                lambda b=bucket, t=backward_end: self._run_comm(b, hook, t))))

        self._comm.join()
        end = backward_end
        for bucket, done in jobs:
            status, value = done[0]
            if status == "error":
                if isinstance(value, TrainingAbort) or not isinstance(value, Exception):
                    raise value
                if profiling:
                    raise HookError(f"hook failed on layer {bucket.layers[0]}: {value}") from value
                raise CommunicationFailure(bucket.id, value) from value
            end = max(end, value)
        ep.now = end
        self.step += 1
        return IterationStats(self.step, loss, grad_sq ** 0.5, end)

    def close(self) -> None:
        if self._comm is not None:
            self._comm.stop()
            self._comm = None


@dataclass
class IterationStats:
    step: int
    loss: float
    grad_norm: float
    virtual_time: float


def check_schedule_safety(timeline: list[dict]) -> list[str]:
    """Comm starts that precede the backward end of one of their bucket's layers."""
    done = {}
    for ev in timeline:
        if ev["event"] == "compute_end" and ev.get("phase") == "backward":
            done[ev["rank"], ev["iteration"], ev["layer"]] = ev["virtual_time"]
    problems = []
    for ev in timeline:
        if ev["event"] != "comm_start":
            continue
        for layer in ev["layers"]:
            end = done.get((ev["rank"], ev["iteration"], layer))
            if end is None or ev["virtual_time"] < end:
                problems.append(f"rank {ev['rank']} iteration {ev['iteration']}: bucket {ev['bucket']} "
                                f"started at {ev['virtual_time']} before {layer} finished ({end})")
    return problems


def write_timeline(timeline: list[dict], path) -> None:
    with open(path, "w") as fh:
        for ev in timeline:
            fh.write(json.dumps(ev) + "\n")
