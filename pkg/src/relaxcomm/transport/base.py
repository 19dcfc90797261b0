from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field

HEADER = struct.Struct("<IIII")  # src, dst, tag, payload length
HEADER_SIZE = HEADER.size

INTRA, INTER = "intra_node", "inter_node"


class TransportError(RuntimeError):
    pass


class EndpointClosed(TransportError):
    pass


class UnknownDestination(TransportError):
    pass


class UnsupportedOperation(TransportError):
    pass


@dataclass(frozen=True, order=True)
class WorkerId:
    rank: int
    node: int = 0


def layout(n: int, nodes=None) -> list[WorkerId]:
    """Worker ids for ``n`` ranks.

    ``nodes`` is either a node count (ranks split into contiguous, nearly equal
    blocks) or an explicit per-rank node list.
    """
    if n < 1:
        raise ValueError("need at least one worker")
    if nodes is None:
        nodes = 1
    if isinstance(nodes, int):
        if not 1 <= nodes <= n:
            raise ValueError(f"cannot place {n} workers on {nodes} nodes")
        base, extra = divmod(n, nodes)
        assignment = []
        for k in range(nodes):
            assignment += [k] * (base + (k < extra))
    else:
        assignment = [int(k) for k in nodes]
        if len(assignment) != n:
            raise ValueError(f"node list has {len(assignment)} entries for {n} workers")
    return [WorkerId(r, k) for r, k in enumerate(assignment)]


@dataclass
class NetworkProfile:
    """Alpha-beta costs per link class plus an optional compute straggler."""

    latency: dict = field(default_factory=lambda: {INTRA: 0.0, INTER: 0.0})
    bandwidth: dict = field(default_factory=lambda: {INTRA: 1e12, INTER: 1e12})
    straggler: tuple | None = None

    def __post_init__(self):
        for cls in (INTRA, INTER):
            if self.latency.get(cls, -1) < 0:
                raise ValueError(f"latency[{cls}] must be >= 0")
            if not self.bandwidth.get(cls, 0) > 0:
                raise ValueError(f"bandwidth[{cls}] must be > 0")
        if self.straggler is not None:
            rank, factor = self.straggler
            if factor < 1:
                raise ValueError("straggler slowdown must be >= 1")
            self.straggler = (int(rank), float(factor))

    @classmethod
    def uniform(cls, latency=0.0, bandwidth=1e12, straggler=None):
        return cls({INTRA: latency, INTER: latency}, {INTRA: bandwidth, INTER: bandwidth}, straggler)

    def message_cost(self, link: str, nbytes: int) -> float:
        return self.latency[link] + nbytes / self.bandwidth[link]

    def slowdown(self, rank: int) -> float:
        if self.straggler is not None and self.straggler[0] == rank:
            return self.straggler[1]
        return 1.0

    def to_dict(self) -> dict:
        return {
            "latency": dict(self.latency),
            "bandwidth": dict(self.bandwidth),
            "straggler": list(self.straggler) if self.straggler else None,
        }


class Mailbox:
    """Per-(src, tag) FIFO queues guarded by one condition variable."""

    def __init__(self):
        self._cond = threading.Condition()
        self._queues: dict[tuple[int, int], deque] = {}
        self.closed = False
        self.error: BaseException | None = None

    def put(self, src: int, tag: int, arrival: float, payload: bytes) -> None:
        with self._cond:
            self._queues.setdefault((src, tag), deque()).append((arrival, payload))
            self._cond.notify_all()

    def get(self, src: int, tag: int, timeout: float | None):
        key = (src, tag)
        with self._cond:
            while True:
                q = self._queues.get(key)
                if q:
                    return q.popleft()
                if self.closed:
                    raise EndpointClosed(f"endpoint closed while waiting for src={src} tag={tag}") \
                        from self.error
                if not self._cond.wait(timeout):
                    raise TransportError(f"timed out waiting for src={src} tag={tag}")

    def close(self, error: BaseException | None = None) -> None:
        with self._cond:
            self.closed = True
            if error is not None and self.error is None:
                self.error = error
            self._cond.notify_all()


class Endpoint:
    """One worker's connection to the cluster.

    Keeps a virtual clock per calling thread (a worker's compute and
    communication contexts advance independently), a shared egress link that
    serialises outgoing messages, and traffic counters.
    """

    recv_timeout = 120.0

    def __init__(self, me: WorkerId, workers: list[WorkerId], profile: NetworkProfile | None):
        self.me = me
        self.workers = workers
        self.profile = profile or NetworkProfile()
        self.mailbox = Mailbox()
        self._local = threading.local()
        self._lock = threading.Lock()
        self._egress_free = 0.0
        self.horizon = 0.0
        self.bytes_sent = 0
        self.messages_sent = 0
        self.trace: list[tuple] | None = None

    @property
    def rank(self) -> int:
        return self.me.rank

    @property
    def size(self) -> int:
        return len(self.workers)

    @property
    def node(self) -> int:
        return self.me.node

    @property
    def now(self) -> float:
        return getattr(self._local, "now", 0.0)

    @now.setter
    def now(self, t: float) -> None:
        self._local.now = t
        with self._lock:
            if t > self.horizon:
                self.horizon = t

    def compute(self, duration: float) -> float:
        """Charge a compute span on the calling context; returns the new time."""
        self.now = self.now + duration * self.profile.slowdown(self.rank)
        return self.now

    def link(self, dst: int) -> str:
        return INTRA if self.workers[dst].node == self.me.node else INTER

    def _check(self, peer: int) -> None:
        if self.mailbox.closed:
            raise EndpointClosed(f"rank {self.rank}: endpoint closed")
        if not 0 <= peer < len(self.workers):
            raise UnknownDestination(f"rank {peer} is not part of a {len(self.workers)}-worker cluster")

    def _charge(self, dst: int, tag: int, nbytes: int) -> float:
        """Reserve the egress link; returns the message arrival time."""
        with self._lock:
            start = max(self.now, self._egress_free)
            done = start + self.profile.message_cost(self.link(dst), nbytes)
            self._egress_free = done
            self.bytes_sent += nbytes
            self.messages_sent += 1
            if self.trace is not None:
                self.trace.append((self.rank, dst, tag, nbytes, start, done))
        return done

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def recv(self, src: int, tag: int) -> bytes:
        self._check(src)
        arrival, payload = self.mailbox.get(src, tag, self.recv_timeout)
        if arrival > self.now:
            self.now = arrival
        return payload

    def close(self, error: BaseException | None = None) -> None:
        self.mailbox.close(error)

    def virtual_elapsed(self) -> float:
        raise UnsupportedOperation(f"{type(self).__name__} has no virtual clock")
