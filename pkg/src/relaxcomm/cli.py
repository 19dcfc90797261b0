"""Command line: ``run``, ``sweep`` and ``ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import socket
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import runner as R
from .algorithms import DivergenceError
from .transport import TcpEndpoint, TransportError, layout, parse_address
from .transport.sim import run_workers

log = logging.getLogger("relaxcomm")


# --- tcp backend -----------------------------------------------------------------

def _free_ports(k: int) -> list[int]:
    socks = [socket.socket() for _ in range(k)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def tcp_worker(cfg: R.ExperimentConfig, rank: int, n: int, peers: list[str], outdir: Path) -> int:
    """One worker process. Writes its params and metric rows under ``outdir``."""
    if n != cfg.n_workers:
        raise R.ConfigError(f"--n-workers {n} disagrees with n_workers {cfg.n_workers} in the config")
    if len(peers) != n:
        raise R.ConfigError(f"--peers lists {len(peers)} addresses for {n} workers")
    workers = layout(n, cfg.nodes)
    ep = TcpEndpoint(workers[rank], workers, cfg.network.profile())
    addresses = [parse_address(p) for p in peers]
    ep.bind(*addresses[rank])
    ep.connect(addresses)
    ds, shards = R.prepare(cfg)
    collector = R.Collector(1)
    status = 0
    try:
        res = R.worker_main(ep, cfg, shards, collector)
        part = {"rank": rank, "steps": res.steps, "profile_end": res.profile_end, "end": res.end,
                "bytes_sent": res.bytes_sent, "wall": res.wall, "staleness": res.staleness}
        np.asarray(res.params, dtype="<f4").tofile(outdir / f"params.{rank}.bin")
    except DivergenceError as exc:
        part = {"rank": rank, "diverged": str(exc), "step": exc.step}
        status = 3
    finally:
        ep.close()
    for row in collector.rows:
        row["replica_spread"] = ""
    (outdir / f"worker.{rank}.json").write_text(json.dumps({"info": part, "rows": collector.rows}))
    return status


def run_tcp(cfg: R.ExperimentConfig, config_path: str, outdir: Path) -> R.RunOutput:
    """Launch one process per worker on localhost and gather their results."""
    n = cfg.n_workers
    peers = ",".join(f"127.0.0.1:{p}" for p in _free_ports(n))
    parts = outdir / "workers"
    parts.mkdir(parents=True, exist_ok=True)
    procs = [subprocess.Popen([sys.executable, "-m", "relaxcomm", "run", config_path,
                               "--rank", str(r), "--n-workers", str(n), "--peers", peers,
                               "--output", str(parts)])
             for r in range(n)]
    codes = [p.wait() for p in procs]
    return collect_tcp(cfg, parts, codes)


def collect_tcp(cfg: R.ExperimentConfig, parts: Path, codes: list[int]) -> R.RunOutput:
    n = cfg.n_workers
    infos, collector = [], R.Collector(n)
    for r in range(n):
        path = parts / f"worker.{r}.json"
        if not path.exists():
            raise TransportError(f"worker {r} exited with status {codes[r]} and left no results")
        blob = json.loads(path.read_text())
        infos.append(blob["info"])
        collector.rows.extend(blob["rows"])
    diverged = [i for i in infos if "diverged" in i]
    if diverged:
        return R.RunOutput({"diverged": diverged[0]["diverged"], "step": diverged[0]["step"]}, [],
                           collector.csv(), diverged=diverged[0]["diverged"])
    params = [np.fromfile(parts / f"params.{r}.bin", dtype="<f4") for r in range(n)]
    results = [R.WorkerResult(i["rank"], params[i["rank"]], i["steps"], i["profile_end"], i["end"],
                              i["bytes_sent"], i["wall"], i["staleness"]) for i in infos]
    ds, _ = R.prepare(cfg)
    return R.RunOutput(R.summarize(cfg, ds, results, virtual=False), params, collector.csv())


def run_tcp_threads(cfg: R.ExperimentConfig) -> R.RunOutput:
    """The tcp backend with every worker as a thread of this process (tests)."""
    from .transport import local_mesh
    ds, shards = R.prepare(cfg)
    eps = local_mesh(cfg.n_workers, cfg.nodes, cfg.network.profile())
    try:
        results = run_workers(eps, R.worker_main, cfg, shards, None)
    finally:
        for ep in eps:
            ep.close()
    return R.RunOutput(R.summarize(cfg, ds, results, virtual=False), [r.params for r in results], "")


# --- commands ----------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = R.load_config(args.config)
    outdir = Path(args.output or cfg.output)
    if args.rank is not None:
        if not args.peers or args.n_workers is None:
            raise R.ConfigError("--rank needs --n-workers and --peers")
        outdir.mkdir(parents=True, exist_ok=True)
        return tcp_worker(cfg, args.rank, args.n_workers, args.peers.split(","), outdir)
    if cfg.backend == "tcp":
        out = run_tcp(cfg, args.config, outdir)
    else:
        out = R.run_sim(cfg)
    R.write_outputs(out, outdir)
    if out.diverged:
        log.error("diverged: %s", out.diverged)
        return 3
    print(json.dumps(out.summary, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = R.load_config(args.config)
    rows = R.sweep(cfg, R.parse_axes(args.axis))
    text = R.rows_csv(rows)
    _emit(text, args.output or Path(cfg.output) / "sweep.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = R.load_config(args.config)
    rows = R.ablate(cfg)
    _emit(R.rows_csv(rows), args.output or Path(cfg.output) / "ablation.csv")
    return 0


def _emit(text: str, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaxcomm", description="Run communication-relaxed training experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config", help="JSON experiment config")
    run.add_argument("--output", help="output directory (default: config 'output')")
    run.add_argument("--rank", type=int, help="tcp backend: this worker's rank")
    run.add_argument("--n-workers", type=int, help="tcp backend: number of workers")
    run.add_argument("--peers", help="tcp backend: comma-separated host:port, one per rank")
    run.set_defaults(fn=cmd_run)

    sw = sub.add_parser("sweep", help="run a grid over network/algorithm axes")
    sw.add_argument("config")
    sw.add_argument("--axis", required=True,
                    help="e.g. bandwidth=1e8:1e10,latency=0:0.005,algorithm=allreduce:qsgd8")
    sw.add_argument("--output", help="CSV path (default: <output>/sweep.csv)")
    sw.set_defaults(fn=cmd_sweep)

    ab = sub.add_parser("ablate", help="run the 8 overlap/fusion/hierarchy settings")
    ab.add_argument("config")
    ab.add_argument("--output", help="CSV path (default: <output>/ablation.csv)")
    ab.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RELAXCOMM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except R.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 4
