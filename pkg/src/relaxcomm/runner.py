"""Experiment configuration and execution on either backend."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as A
from .engine import DEFAULT_BUCKET_CAPACITY, Engine, write_timeline
from .harness import BatchStream, build_model, generate, partition
from .transport import INTER, INTRA, NetworkProfile, SimCluster

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "worker", "loss", "grad_norm", "replica_spread", "staleness",
                 "bytes_sent", "virtual_time")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    latency: float = 0.0            # seconds per message, both link classes unless overridden
    bandwidth: float = 1e12         # payload bytes per second
    intra_latency: float | None = None
    intra_bandwidth: float | None = None
    straggler: list | None = None   # [rank, slowdown]

    def profile(self) -> NetworkProfile:
        lat = {INTER: self.latency, INTRA: self.latency if self.intra_latency is None else self.intra_latency}
        bw = {INTER: self.bandwidth,
              INTRA: self.bandwidth if self.intra_bandwidth is None else self.intra_bandwidth}
        return NetworkProfile(lat, bw, tuple(self.straggler) if self.straggler else None)


@dataclass
class ExperimentConfig:
    algorithm: dict = field(default_factory=lambda: {"name": "allreduce"})
    model: str = "logistic"
    d: int = 20
    hidden: int = 32
    layers: int = 2
    N: int = 2000
    noise: float = 0.05
    batch_size: int | None = 32
    n_workers: int = 4
    nodes: int | list | None = None
    backend: str = "sim"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    overlap: bool = True
    fusion: bool = True
    hierarchical: bool = False
    bucket_capacity: int = DEFAULT_BUCKET_CAPACITY
    compute_time: float = 0.01      # virtual seconds of forward+backward per iteration
    epochs: int = 1
    seed: int = 0
    output: str = "out"
    timeline: bool = False

    def __post_init__(self):
        if self.backend not in ("sim", "tcp"):
            raise ConfigError(f"backend: expected 'sim' or 'tcp', got {self.backend!r}")
        if self.n_workers < 1:
            raise ConfigError("n_workers: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.compute_time < 0:
            raise ConfigError("compute_time: must be >= 0")

    @property
    def spec(self) -> A.AlgorithmSpec:
        return A.AlgorithmSpec(**self.algorithm)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        return parse_config(_merge(self.to_dict(), changes))


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _known(cls, data: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{where}{key}'")


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _known(ExperimentConfig, data, "")
    data = dict(data)
    net = data.get("network", {})
    if not isinstance(net, dict):
        raise ConfigError("network: expected an object")
    _known(NetworkConfig, net, "network.")
    data["network"] = NetworkConfig(**net)
    algo = data.get("algorithm", {"name": "allreduce"})
    if isinstance(algo, str):
        algo = {"name": algo}
    _known(A.AlgorithmSpec, algo, "algorithm.")
    data["algorithm"] = dict(algo)
    try:
        cfg = ExperimentConfig(**data)
        cfg.spec  # validate the algorithm block early
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


# --- metrics -------------------------------------------------------------------

class Collector:
    """Single sink for per-step metrics from every worker.

    Workers also deposit their parameter vector each step; once all ``n``
    replicas for a step are in, the replica spread is computed and the
    vectors are dropped.
    """

    def __init__(self, n: int):
        self.n = n
        self.rows: list[dict] = []
        self._pending: dict[int, dict[int, np.ndarray]] = {}
        self.spread: dict[int, float] = {}
        self._lock = threading.Lock()

    def record(self, row: dict, params: np.ndarray | None = None) -> None:
        with self._lock:
            self.rows.append(row)
            if params is None:
                return
            bucket = self._pending.setdefault(row["step"], {})
            bucket[row["worker"]] = params.copy()
            if len(bucket) == self.n:
                self.spread[row["step"]] = replica_spread(list(bucket.values()))
                del self._pending[row["step"]]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in sorted(self.rows, key=lambda r: (r["step"], r["worker"])):
            row = dict(row)
            spread = self.spread.get(row["step"])
            row["replica_spread"] = "" if spread is None else repr(spread)
            for k in ("loss", "grad_norm", "virtual_time"):
                row[k] = repr(float(row[k]))
            w.writerow(row)
        return buf.getvalue()


def replica_spread(replicas) -> float:
    """Root-mean-square distance of the replicas from their mean."""
    X = np.asarray(replicas, dtype=np.float64)
    if len(X) < 2:
        return 0.0
    return float(np.sqrt(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1))))


# --- one worker ----------------------------------------------------------------

@dataclass
class WorkerResult:
    rank: int
    params: np.ndarray
    steps: int
    profile_end: float
    end: float
    bytes_sent: int
    wall: float
    staleness: list = field(default_factory=list)


def total_steps(cfg: ExperimentConfig, shards) -> tuple[int, int]:
    """(steps per epoch, total synchronous steps) shared by every worker."""
    longest = max(len(s) for s in shards)
    bs = longest if not cfg.batch_size else min(cfg.batch_size, longest)
    spe = -(-longest // bs)
    return spe, spe * cfg.epochs


def prepare(cfg: ExperimentConfig):
    ds = generate(cfg.model, cfg.N, cfg.d, cfg.seed, cfg.noise)
    return ds, partition(ds, cfg.n_workers)


def worker_main(ep, cfg: ExperimentConfig, shards, collector: Collector | None, timeline=None) -> WorkerResult:
    t0 = time.perf_counter()
    spec = cfg.spec
    model = build_model(cfg.model, cfg.d, cfg.hidden, cfg.layers, cfg.seed)
    stream = BatchStream(shards[ep.rank], cfg.batch_size, cfg.seed, ep.rank)
    spe, steps = total_steps(cfg, shards)

    def emit(step, loss, grad_norm, staleness, vt):
        if collector is None:
            return
        collector.record({"step": step, "worker": ep.rank, "loss": loss, "grad_norm": grad_norm,
                          "replica_spread": "", "staleness": staleness,
                          "bytes_sent": ep.bytes_sent, "virtual_time": vt},
                         model.vector() if spec.name != "async" else None)

    if spec.name == "async":
        slow = [ep.profile.slowdown(r) for r in range(ep.size)]
        quota = A.step_quotas(ep.size, steps, slow)[ep.rank]
        res = A.run_async(ep, model, stream.batch, spec, quota=quota, step_time=cfg.compute_time,
                          on_step=lambda r: emit(r.step, r.loss, r.grad_norm, r.staleness, r.virtual_time))
        return WorkerResult(ep.rank, model.vector(), quota, 0.0, ep.now, ep.bytes_sent,
                            time.perf_counter() - t0, res.staleness)

    algo = A.make_algorithm(spec)
    engine = Engine(ep, model, algo, lr=spec.lr, compute_time=cfg.compute_time,
                    bucket_capacity=cfg.bucket_capacity, overlap=cfg.overlap, fusion=cfg.fusion,
                    hierarchical=cfg.hierarchical, seed=cfg.seed, timeline=timeline)
    profile_end = 0.0
    try:
        for step in range(steps):
            batch = stream.batch(step)
            if step == 0:
                stats = engine.profile(batch)
                profile_end = ep.now
            else:
                stats = engine.run_iteration(batch)
            emit(stats.step, stats.loss, stats.grad_norm, "", stats.virtual_time)
    finally:
        engine.close()
    return WorkerResult(ep.rank, model.vector(), steps, profile_end, ep.now, ep.bytes_sent,
                        time.perf_counter() - t0)


def summarize(cfg: ExperimentConfig, ds, results: list[WorkerResult], virtual: bool) -> dict:
    params = [r.params for r in results]
    model = build_model(cfg.model, cfg.d, cfg.hidden, cfg.layers, cfg.seed)
    losses = []
    for p in params:
        model.set_vector(p)
        losses.append(model.loss(ds.features, ds.labels))
    steps = max(r.steps for r in results)
    end = max(r.end for r in results)
    if cfg.spec.name == "async" or steps <= 1:
        epoch_time = end / cfg.epochs
    else:
        # the profiling iteration is unoptimized in every setting; leave it out
        start = max(r.profile_end for r in results)
        epoch_time = (end - start) * steps / (steps - 1) / cfg.epochs
    out = {
        "final_loss": float(np.mean(losses)),
        "epoch_virtual_time": epoch_time if virtual else None,
        "bytes_per_epoch": sum(r.bytes_sent for r in results) / cfg.epochs,
        "replica_spread_final": replica_spread(params),
    }
    if not virtual:
        out["epoch_wall_time"] = max(r.wall for r in results) / cfg.epochs
    staleness = [s for r in results for s in r.staleness]
    if staleness:
        out["max_staleness"] = int(max(staleness))
        out["mean_staleness"] = float(np.mean(staleness))
    return out


@dataclass
class RunOutput:
    summary: dict
    params: list[np.ndarray]
    metrics_csv: str
    timeline: list | None = None
    diverged: str | None = None


def run_sim(cfg: ExperimentConfig, collect: bool = True) -> RunOutput:
    ds, shards = prepare(cfg)
    cluster = SimCluster(cfg.n_workers, cfg.nodes, cfg.network.profile())
    collector = Collector(cfg.n_workers) if collect else None
    timeline = [] if cfg.timeline else None
    try:
        results = cluster.run(worker_main, cfg, shards, collector, timeline)
    except A.DivergenceError as exc:
        return RunOutput({"diverged": str(exc), "step": exc.step}, [],
                         collector.csv() if collector else "", timeline, str(exc))
    finally:
        cluster.close()
    summary = summarize(cfg, ds, results, virtual=True)
    return RunOutput(summary, [r.params for r in results], collector.csv() if collector else "", timeline)


def write_outputs(out: RunOutput, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.csv").write_text(out.metrics_csv)
    (d / "summary.json").write_text(json.dumps(out.summary, indent=2, sort_keys=True) + "\n")
    if out.params:
        with open(d / "params.bin", "wb") as fh:
            for p in out.params:
                fh.write(np.asarray(p, dtype="<f4").tobytes())
    if out.timeline is not None:
        write_timeline(out.timeline, d / "timeline.jsonl")
    return d


def read_params(path, n_workers: int) -> list[np.ndarray]:
    flat = np.fromfile(path, dtype="<f4")
    return list(flat.reshape(n_workers, -1))


# --- sweeps --------------------------------------------------------------------

def parse_axes(text: str) -> dict[str, list]:
    """``bandwidth=1e8:1e10,latency=0:0.005`` -> {"bandwidth": [1e8, 1e10], ...}.

    Values within an axis are separated by ``:`` (``|`` also accepted).
    """
    axes: dict[str, list] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, values = part.partition("=")
        if not sep or not values:
            raise ConfigError(f"bad sweep axis {part!r}; expected name=v1:v2")
        key = key.strip()
        if key not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {key!r}; expected one of {', '.join(SWEEP_AXES)}")
        raw = values.replace("|", ":").split(":")
        axes[key] = [v if key == "algorithm" else float(v) for v in raw]
    return axes


SWEEP_AXES = ("algorithm", "bandwidth", "latency", "straggler")


def _apply_axis(cfg_dict: dict, key: str, value) -> None:
    if key == "algorithm":
        cfg_dict["algorithm"] = _merge(cfg_dict["algorithm"], {"name": value})
    elif key == "straggler":
        cfg_dict["network"]["straggler"] = [0, value] if value > 1 else None
    else:
        cfg_dict["network"][key] = value


def sweep(cfg: ExperimentConfig, axes: dict[str, list]) -> list[dict]:
    import itertools
    keys = list(axes)
    rows = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        d = cfg.to_dict()
        for k, v in zip(keys, combo):
            _apply_axis(d, k, v)
        run_cfg = parse_config(d)
        out = run_sim(run_cfg, collect=False)
        rows.append({
            "algorithm": run_cfg.spec.name,
            "bandwidth": run_cfg.network.bandwidth,
            "latency": run_cfg.network.latency,
            "straggler": run_cfg.network.straggler[1] if run_cfg.network.straggler else 1.0,
            "epoch_time": out.summary.get("epoch_virtual_time", math.nan),
            "final_loss": out.summary.get("final_loss", math.nan),
            "bytes_per_epoch": out.summary.get("bytes_per_epoch", math.nan),
            "diverged": out.diverged or "",
        })
    return rows


ABLATION_GRID = [(o, f, h) for o in (0, 1) for f in (0, 1) for h in (0, 1)]


def ablate(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for o, f, h in ABLATION_GRID:
        run_cfg = cfg.replace(overlap=bool(o), fusion=bool(f), hierarchical=bool(h))
        out = run_sim(run_cfg, collect=False)
        rows.append({"O": o, "F": f, "H": h,
                     "epoch_time": out.summary.get("epoch_virtual_time", math.nan),
                     "final_loss": out.summary.get("final_loss", math.nan),
                     "diverged": out.diverged or ""})
    return rows


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()
