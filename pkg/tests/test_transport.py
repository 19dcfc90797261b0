import socket
import threading

import numpy as np
import pytest

from relaxcomm.transport import HEADER, HEADER_SIZE, EndpointClosed, NetworkProfile, SimCluster, \
    TcpEndpoint, UnknownDestination, UnsupportedOperation, layout, local_mesh, virtual_elapsed
from relaxcomm.transport.base import INTER, INTRA


@pytest.fixture(params=["sim", "tcp"])
def pair(request):
    if request.param == "sim":
        c = SimCluster(2)
        eps = c.endpoints
    else:
        eps = local_mesh(2)
    yield eps
    for ep in eps:
        ep.close()


def test_delivery(pair):
    a, b = pair
    a.send(1, 7, np.float32([1, 2, 3]).tobytes())
    assert np.frombuffer(b.recv(0, 7), np.float32).tolist() == [1, 2, 3]


def test_fifo(pair):
    a, b = pair
    for k in range(20):
        a.send(1, 3, bytes([k]))
    assert [b.recv(0, 3)[0] for _ in range(20)] == list(range(20))


def test_tags_are_separate_streams(pair):
    a, b = pair
    a.send(1, 1, b"one")
    a.send(1, 2, b"two")
    assert b.recv(0, 2) == b"two"
    assert b.recv(0, 1) == b"one"


def test_unknown_destination(pair):
    with pytest.raises(UnknownDestination):
        pair[0].send(99, 0, b"")


def test_closed_endpoint(pair):
    a, b = pair
    b.close()
    with pytest.raises(EndpointClosed):
        b.recv(0, 0)


def test_close_wakes_blocked_recv():
    c = SimCluster(2)
    ep = c.endpoints[1]
    errors = []

    def wait():
        try:
            ep.recv(0, 0)
        except EndpointClosed as exc:
            errors.append(exc)

    t = threading.Thread(target=wait)
    t.start()
    ep.close()
    t.join(5)
    assert errors


def test_self_send(pair):
    pair[0].send(0, 5, b"me")
    assert pair[0].recv(0, 5) == b"me"


def test_message_cost_example():
    prof = NetworkProfile.uniform(latency=1e-3, bandwidth=1e9)
    c = SimCluster(2, nodes=2, profile=prof)
    c.endpoints[0].send(1, 0, bytes(10**6))
    c.endpoints[1].recv(0, 0)
    assert virtual_elapsed(c) == pytest.approx(0.002, rel=1e-12)


def test_compute_span_and_straggler():
    c = SimCluster(2)
    c.endpoints[0].compute(0.5)
    assert virtual_elapsed(c) == 0.5
    c2 = SimCluster(2, profile=NetworkProfile.uniform(straggler=(1, 2.0)))
    c2.endpoints[1].compute(0.5)
    assert virtual_elapsed(c2) == 1.0


def test_link_classes():
    prof = NetworkProfile({INTRA: 0.0, INTER: 1.0}, {INTRA: 1e12, INTER: 1e12})
    c = SimCluster(4, nodes=2, profile=prof)
    a = c.endpoints[0]
    assert a.link(1) == INTRA and a.link(2) == INTER
    a.send(1, 0, b"x")
    c.endpoints[1].recv(0, 0)
    assert c.endpoints[1].now == pytest.approx(1e-12)
    a.send(2, 0, b"x")
    c.endpoints[2].recv(0, 0)
    assert c.endpoints[2].now == pytest.approx(1.0, abs=1e-9)


def test_egress_serialises_messages():
    prof = NetworkProfile.uniform(latency=0.1, bandwidth=1e12)
    c = SimCluster(3, profile=prof)
    a = c.endpoints[0]
    a.send(1, 0, b"")
    a.send(2, 0, b"")
    c.endpoints[2].recv(0, 0)
    assert c.endpoints[2].now == pytest.approx(0.2)


def test_virtual_elapsed_unsupported_on_tcp():
    eps = local_mesh(2)
    try:
        with pytest.raises(UnsupportedOperation):
            eps[0].virtual_elapsed()
    finally:
        for ep in eps:
            ep.close()


def test_counters_exclude_header():
    c = SimCluster(2)
    c.endpoints[0].send(1, 0, b"abcd")
    assert c.endpoints[0].bytes_sent == 4 and c.endpoints[0].messages_sent == 1


def test_tcp_wire_format():
    """A raw socket speaking the documented framing is understood by an endpoint."""
    workers = layout(2)
    ep = TcpEndpoint(workers[1], workers)
    host, port = ep.bind()
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    addresses = [listener.getsockname(), (host, port)]
    t = threading.Thread(target=ep.connect, args=(addresses,))
    t.start()
    peer, _ = listener.accept()
    assert peer.recv(8) == b"RCMM" + (1).to_bytes(4, "little")
    t.join()
    payload = np.float32([4, 5]).tobytes()
    peer.sendall(HEADER.pack(0, 1, 9, len(payload)) + payload)
    assert ep.recv(0, 9) == payload
    ep.send(0, 11, b"xyz")
    head = peer.recv(HEADER_SIZE)
    assert HEADER.unpack(head) == (1, 0, 11, 3)
    assert head[:4] == (1).to_bytes(4, "little")
    assert peer.recv(3) == b"xyz"
    ep.close()
    peer.close()
    listener.close()


def test_profile_validation():
    with pytest.raises(ValueError):
        NetworkProfile.uniform(latency=-1)
    with pytest.raises(ValueError):
        NetworkProfile.uniform(bandwidth=0)
    with pytest.raises(ValueError):
        NetworkProfile.uniform(straggler=(0, 0.5))


def test_layout():
    assert [w.node for w in layout(5, 2)] == [0, 0, 0, 1, 1]
    assert [w.node for w in layout(3, [1, 0, 1])] == [1, 0, 1]
    with pytest.raises(ValueError):
        layout(2, 3)
