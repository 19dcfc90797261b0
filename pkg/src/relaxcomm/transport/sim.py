"""In-process cluster: one thread per worker, messages routed through memory,
time accounted on a virtual clock.

Clock rules: a message leaves when both the sending context and the sender's
egress link are free, occupies the link for ``latency + bytes / bandwidth``,
and arrives when the link frees up. A receive advances the receiving context
to ``max(now, arrival)``. Since every arrival time is a function of the
sender's own history, the makespan does not depend on thread scheduling.
"""

from __future__ import annotations

import threading

from .base import Endpoint, EndpointClosed, NetworkProfile, WorkerId, layout


class SimEndpoint(Endpoint):
    def __init__(self, cluster: SimCluster, me: WorkerId):
        super().__init__(me, cluster.workers, cluster.profile)
        self.cluster = cluster

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        self._check(dst)
        payload = bytes(payload)
        arrival = self._charge(dst, tag, len(payload))
        self.cluster.endpoints[dst].mailbox.put(self.rank, tag, arrival, payload)

    def virtual_elapsed(self) -> float:
        return self.cluster.virtual_elapsed()


class SimCluster:
    def __init__(self, n: int, nodes=None, profile: NetworkProfile | None = None):
        self.workers = layout(n, nodes)
        self.profile = profile or NetworkProfile()
        self.endpoints = [SimEndpoint(self, w) for w in self.workers]

    @property
    def n(self) -> int:
        return len(self.workers)

    def virtual_elapsed(self) -> float:
        return max(ep.horizon for ep in self.endpoints)

    def enable_trace(self) -> None:
        for ep in self.endpoints:
            ep.trace = []

    def close(self, error=None) -> None:
        for ep in self.endpoints:
            ep.close(error)

    def run(self, fn, *args, **kwargs) -> list:
        """Call ``fn(endpoint, *args, **kwargs)`` on every worker concurrently.

        Returns per-rank results. If any worker raises, every endpoint is
        closed so blocked peers fail fast, and the first error is re-raised.
        """
        return run_workers(self.endpoints, fn, *args, **kwargs)


def run_workers(endpoints, fn, *args, **kwargs) -> list:
    results = [None] * len(endpoints)
    errors: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    def target(ep):
        try:
            results[ep.rank] = fn(ep, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            with lock:
                errors.append((ep.rank, exc))
            for other in endpoints:
                other.close(exc)

    threads = [threading.Thread(target=target, args=(ep,), name=f"worker-{ep.rank}", daemon=True)
               for ep in endpoints]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # report the root cause, not the knock-on closes it triggered
        primary = [e for e in errors if not isinstance(e[1], EndpointClosed)] or errors
        raise primary[0][1]
    return results


def virtual_elapsed(sim) -> float:
    """Virtual-clock makespan of a simulated cluster or endpoint."""
    return sim.virtual_elapsed()
