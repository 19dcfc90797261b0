"""Real sockets: a full mesh of TCP connections between workers.

Frames are a 16-byte little-endian header ``[src][dst][tag][len]`` followed by
``len`` payload bytes. Every connection has a reader thread that drains frames
into the mailbox, so a send never waits on the peer calling ``recv``.

Compute spans still advance the per-context clock (the engine schedules by
it), but messages cost nothing on it and ``virtual_elapsed`` is unsupported.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from .base import HEADER, HEADER_SIZE, Endpoint, EndpointClosed, NetworkProfile, TransportError, \
    WorkerId, layout

log = logging.getLogger(__name__)

_HELLO = b"RCMM"


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


class TcpEndpoint(Endpoint):
    def __init__(self, me: WorkerId, workers: list[WorkerId], profile: NetworkProfile | None = None):
        super().__init__(me, workers, profile)
        self._listener: socket.socket | None = None
        self._socks: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._readers: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()

    def bind(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lst.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lst.bind((host, port))
        lst.listen(len(self.workers))
        self._listener = lst
        return self.address

    def connect(self, addresses: list[tuple[str, int]], timeout: float = 30.0) -> None:
        """Build the mesh: dial every lower rank, accept every higher rank."""
        if self._listener is None:
            self.bind(*addresses[self.rank])
        n = len(self.workers)
        deadline = time.monotonic() + timeout
        for peer in range(self.rank):
            while True:
                try:
                    s = socket.create_connection(addresses[peer], timeout=timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"rank {self.rank}: cannot reach rank {peer} at "
                                             f"{addresses[peer]}") from None
                    time.sleep(0.05)
            s.sendall(_HELLO + self.rank.to_bytes(4, "little"))
            self._attach(peer, s)
        self._listener.settimeout(timeout)
        for _ in range(self.rank + 1, n):
            try:
                s, _ = self._listener.accept()
            except socket.timeout:
                raise TransportError(f"rank {self.rank}: peers did not connect in time") from None
            hello = _recv_exact(s, 8)
            if hello is None or hello[:4] != _HELLO:
                raise TransportError(f"rank {self.rank}: bad handshake")
            self._attach(int.from_bytes(hello[4:], "little"), s)
        self._listener.close()

    def _attach(self, peer: int, s: socket.socket) -> None:
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[peer] = s
        self._send_locks[peer] = threading.Lock()
        t = threading.Thread(target=self._reader, args=(peer, s), daemon=True,
                             name=f"tcp-{self.rank}<-{peer}")
        t.start()
        self._readers.append(t)

    def _reader(self, peer: int, s: socket.socket) -> None:
        try:
            while True:
                head = _recv_exact(s, HEADER_SIZE)
                if head is None:
                    break
                src, dst, tag, length = HEADER.unpack(head)
                payload = _recv_exact(s, length) if length else b""
                if payload is None or src != peer or dst != self.rank:
                    raise TransportError(f"rank {self.rank}: corrupt frame from {peer}")
                self.mailbox.put(src, tag, 0.0, payload)
        except OSError as exc:
            if not self.mailbox.closed:
                log.debug("rank %d: connection to %d dropped: %s", self.rank, peer, exc)
        except TransportError as exc:
            self.mailbox.close(exc)

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        self._check(dst)
        payload = bytes(payload)
        with self._lock:
            self.bytes_sent += len(payload)
            self.messages_sent += 1
        if dst == self.rank:
            self.mailbox.put(self.rank, tag, 0.0, payload)
            return
        frame = HEADER.pack(self.rank, dst, tag, len(payload)) + payload
        try:
            with self._send_locks[dst]:
                self._socks[dst].sendall(frame)
        except OSError as exc:
            raise EndpointClosed(f"rank {self.rank}: send to {dst} failed: {exc}") from exc

    def close(self, error=None) -> None:
        super().close(error)
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        if self._listener is not None:
            self._listener.close()


def local_mesh(n: int, nodes=None, profile: NetworkProfile | None = None) -> list[TcpEndpoint]:
    """Connected endpoints for ``n`` workers on localhost (one process)."""
    workers = layout(n, nodes)
    eps = [TcpEndpoint(w, workers, profile) for w in workers]
    addresses = [ep.bind() for ep in eps]
    errors = []

    def dial(ep):
        try:
            ep.connect(addresses)
        except TransportError as exc:
            errors.append(exc)

    threads = [threading.Thread(target=dial, args=(ep,)) for ep in eps]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        for ep in eps:
            ep.close()
        raise errors[0]
    return eps
