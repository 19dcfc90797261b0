"""Relaxed collective primitives over point-to-point messaging.

Every function here is SPMD: each worker calls it with its own endpoint and
local vector, and gets its own result back.

Centralised primitives use ScatterReduce: the vector is cut into one
partition per worker, worker ``k`` aggregates partition ``k`` and sends the
result back to everyone, for ``2 (n - 1)`` messages per worker.

Reductions accumulate in float64 in ascending rank order and round to float32
once, so a centralised sum equals the rank-ordered sequential sum regardless
of how the vector is partitioned or which workers pre-aggregate.

Message tags are ``bucket_id * 16 + phase`` with the phases of ``Phase``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .codec import Codec, CodecError, ErrorState, compensate_encode, decode, encode

F32, F64 = np.float32, np.float64


class Phase(IntEnum):
    SCATTER = 0   # chunks to partition owners
    GATHER = 1    # owners return aggregated partitions
    INTER = 2     # leader-level exchange of a hierarchical collective
    BCAST = 3     # leader to node members
    INTRA = 4     # node members to leader
    PEER = 5      # decentralized neighbour exchange


def make_tag(bucket_id: int, phase: Phase) -> int:
    return bucket_id * 16 + int(phase)


def split_tag(tag: int) -> tuple[int, Phase]:
    return tag // 16, Phase(tag % 16)


class CollectiveError(RuntimeError):
    pass


def partition_bounds(length: int, n: int) -> list[tuple[int, int]]:
    """Tile ``[0, length)`` into ``n`` ranges; the first ``length % n`` get one extra."""
    base, extra = divmod(length, n)
    bounds, lo = [], 0
    for k in range(n):
        hi = lo + base + (k < extra)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def owned_length(length: int, n: int, k: int) -> int:
    lo, hi = partition_bounds(length, n)[k]
    return hi - lo


# --- topologies --------------------------------------------------------------

@dataclass(frozen=True)
class Topology:
    """Neighbour function for decentralized primitives.

    ``neighbors(i)`` always contains ``i``. ``random`` pairs workers with a
    fresh perfect matching each round, drawn from ``seed`` and the round
    number so every worker derives the same pairing without talking; with an
    odd worker count the unmatched worker additionally pulls from one random
    peer.
    """

    kind: str
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ring", "random", "full"):
            raise ValueError(f"unknown topology {self.kind!r}")
        if self.n < 1:
            raise ValueError("topology needs at least one worker")

    @property
    def self_inclusive(self) -> bool:
        return True

    def neighbors(self, i: int, round: int = 0) -> list[int]:
        return self.table(round)[i]

    def table(self, round: int = 0) -> list[list[int]]:
        n = self.n
        if self.kind == "full":
            return [list(range(n)) for _ in range(n)]
        if self.kind == "ring":
            return [sorted({(i - 1) % n, i, (i + 1) % n}) for i in range(n)]
        nbrs = [{i} for i in range(n)]
        if n > 1:
            rng = np.random.default_rng([self.seed, round])
            perm = rng.permutation(n).tolist()
            for a, b in zip(perm[0::2], perm[1::2]):
                nbrs[a].add(b)
                nbrs[b].add(a)
            if n % 2:
                lone = perm[-1]
                nbrs[lone].add(perm[int(rng.integers(n - 1))])
        return [sorted(s) for s in nbrs]

    def receivers(self, i: int, round: int = 0) -> list[int]:
        """Workers other than ``i`` that have ``i`` as a neighbour."""
        return [j for j, nb in enumerate(self.table(round)) if j != i and i in nb]

    def mixing_matrix(self, round: int = 0) -> np.ndarray:
        """Row-stochastic averaging matrix ``W[i, j] = 1/|N(i)|`` for ``j`` in ``N(i)``."""
        w = np.zeros((self.n, self.n))
        for i, nb in enumerate(self.table(round)):
            w[i, nb] = 1.0 / len(nb)
        return w


# --- helpers -------------------------------------------------------------------

def _members(ep, group):
    group = list(range(ep.size)) if group is None else sorted(group)
    if ep.rank not in group:
        raise CollectiveError(f"rank {ep.rank} is not in group {group}")
    return group, group.index(ep.rank)


def _raw(chunk: np.ndarray) -> bytes:
    return chunk.astype("<f8" if chunk.dtype == F64 else "<f4").tobytes()


def _unraw(payload: bytes, expected: int, wide: bool, src: int) -> np.ndarray:
    arr = np.frombuffer(payload, dtype="<f8" if wide else "<f4")
    if arr.size != expected:
        raise CollectiveError(f"length mismatch: rank {src} sent {arr.size} elements, expected {expected}")
    return arr


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != F64:
        x = x.astype(F32, copy=False)
    return x.reshape(-1)


# --- centralised ---------------------------------------------------------------

def c_fp_s(ep, x, *, bucket_id: int = 0, group=None, phases=(Phase.SCATTER, Phase.GATHER)) -> np.ndarray:
    """Full-precision allreduce: every worker gets the sum over the group."""
    x = _as_vector(x)
    wide = x.dtype == F64
    group, k = _members(ep, group)
    scatter_tag, gather_tag = (make_tag(bucket_id, p) for p in phases)
    bounds = partition_bounds(x.size, len(group))

    for p, r in enumerate(group):
        if p != k:
            lo, hi = bounds[p]
            ep.send(r, scatter_tag, _raw(x[lo:hi]))
    lo, hi = bounds[k]
    acc = np.zeros(hi - lo, dtype=F64)
    for p, r in enumerate(group):
        acc += x[lo:hi] if p == k else _unraw(ep.recv(r, scatter_tag), hi - lo, wide, r)
    mine = acc.astype(F32)

    for p, r in enumerate(group):
        if p != k:
            ep.send(r, gather_tag, mine.tobytes())
    out = np.empty(x.size, dtype=F32)
    out[lo:hi] = mine
    for p, r in enumerate(group):
        if p != k:
            plo, phi = bounds[p]
            out[plo:phi] = _unraw(ep.recv(r, gather_tag), phi - plo, False, r)
    return out


def c_lp_s(ep, x, codec: Codec, error: ErrorState | None = None, *, rng=None, bucket_id: int = 0,
           group=None, phases=(Phase.SCATTER, Phase.GATHER), audit=None) -> np.ndarray:
    """Compressed allreduce with optional two-sided error compensation.

    Without ``error`` the result is ``Q(sum_j Q(x_j))``. With ``error`` each
    worker sends ``Q(x - delta)`` and keeps the residual in ``error.delta``;
    each partition owner re-encodes ``s - epsilon`` and keeps that residual in
    ``error.epsilon``. ``error`` is updated in place.

    ``audit(kind, input, decoded, residual)`` is called for every compensated
    encode (``kind`` is ``"delta"`` or ``"epsilon"``).
    """
    x = _as_vector(x)
    group, k = _members(ep, group)
    m = len(group)
    scatter_tag, gather_tag = (make_tag(bucket_id, p) for p in phases)
    bounds = partition_bounds(x.size, m)
    lo, hi = bounds[k]
    if rng is None and codec.rounding == "stochastic":
        rng = codec.rng(ep.rank)
    if error is not None:
        if error.delta.shape != (x.size,) or error.epsilon.shape != (hi - lo,):
            raise CodecError(
                f"error state shapes {error.delta.shape}/{error.epsilon.shape} do not match "
                f"bucket {x.size} / owned partition {hi - lo}")

    own_payload = None
    for p, r in enumerate(group):
        plo, phi = bounds[p]
        chunk = x[plo:phi]
        if error is None:
            payload = encode(codec, chunk, rng)
        else:
            before = error.delta[plo:phi].copy()
            payload, residual = compensate_encode(codec, chunk, before, rng)
            error.delta[plo:phi] = residual
            if audit is not None:
                v = (chunk.astype(F64) - before).astype(chunk.dtype)
                audit("delta", v, decode(codec, payload, phi - plo), residual)
        if p == k:
            own_payload = payload
        else:
            ep.send(r, scatter_tag, payload)

    acc = np.zeros(hi - lo, dtype=F64)
    for p, r in enumerate(group):
        payload = own_payload if p == k else ep.recv(r, scatter_tag)
        try:
            acc += decode(codec, payload, hi - lo)
        except CodecError as exc:
            raise CollectiveError(f"bad chunk from rank {r}: {exc}") from exc

    if error is None:
        u = acc.astype(F32)
        out_payload = encode(codec, u, rng)
    else:
        u = (acc - error.epsilon).astype(F32)
        out_payload = encode(codec, u, rng)
        decoded = decode(codec, out_payload, hi - lo)
        error.epsilon[:] = u.astype(F64) - decoded.astype(F64)
        if audit is not None:
            audit("epsilon", u, decoded, error.epsilon.copy())

    for p, r in enumerate(group):
        if p != k:
            ep.send(r, gather_tag, out_payload)
    out = np.empty(x.size, dtype=F32)
    out[lo:hi] = decode(codec, out_payload, hi - lo)
    for p, r in enumerate(group):
        if p != k:
            plo, phi = bounds[p]
            try:
                out[plo:phi] = decode(codec, ep.recv(r, gather_tag), phi - plo)
            except CodecError as exc:
                raise CollectiveError(f"bad partition from rank {r}: {exc}") from exc
    return out


def node_groups(ep) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for w in ep.workers:
        groups.setdefault(w.node, []).append(w.rank)
    for ranks in groups.values():
        ranks.sort()
    return groups


def leaders(ep) -> list[int]:
    return sorted(ranks[0] for ranks in node_groups(ep).values())


def hierarchical_error_state(ep, length: int) -> ErrorState | None:
    """Error state sized for the leader-level exchange (None on non-leaders)."""
    lead = leaders(ep)
    if ep.rank not in lead:
        return None
    return ErrorState.zeros(length, owned_length(length, len(lead), lead.index(ep.rank)))


def hierarchical(ep, x, codec: Codec | None = None, error: ErrorState | None = None, *, rng=None,
                 bucket_id: int = 0, audit=None) -> np.ndarray:
    """Two-level centralised allreduce.

    Members send their vectors uncompressed to the node leader (lowest rank),
    leaders allreduce the node sums among themselves (compressed with
    ``codec`` when given, via ``c_lp_s``), and each leader broadcasts the
    result inside its node. With one node no compression is applied at all.
    """
    x = _as_vector(x)
    members = node_groups(ep).get(ep.node)
    if not members:
        raise CollectiveError(f"rank {ep.rank}: empty node group")
    leader = members[0]
    intra, bcast = make_tag(bucket_id, Phase.INTRA), make_tag(bucket_id, Phase.BCAST)

    if ep.rank != leader:
        ep.send(leader, intra, _raw(x.astype(F32)))
        return _unraw(ep.recv(leader, bcast), x.size, False, leader).copy()

    partial = np.zeros(x.size, dtype=F64)
    for r in members:
        partial += x if r == ep.rank else _unraw(ep.recv(r, intra), x.size, False, r)

    lead = leaders(ep)
    inter = (Phase.INTER, Phase.INTER)
    if len(lead) == 1:
        total = partial.astype(F32)
    elif codec is None:
        total = c_fp_s(ep, partial, bucket_id=bucket_id, group=lead, phases=inter)
    else:
        total = c_lp_s(ep, partial, codec, error, rng=rng, bucket_id=bucket_id, group=lead,
                       phases=inter, audit=audit)
    payload = total.astype("<f4").tobytes()
    for r in members[1:]:
        ep.send(r, bcast, payload)
    return total


# --- decentralized -------------------------------------------------------------

def _check_topology(ep, topology: Topology) -> None:
    if topology.n != ep.size:
        raise CollectiveError(f"topology for {topology.n} workers used on {ep.size}")


def _finish(acc: np.ndarray, count: int, mode: str) -> np.ndarray:
    s = acc.astype(F32)
    if mode == "average":
        return s / F32(count)
    if mode != "sum":
        raise ValueError(f"unknown mode {mode!r}")
    return s


def d_fp_s(ep, x, topology: Topology, mode: str = "sum", *, round: int = 0,
           bucket_id: int = 0) -> np.ndarray:
    """Neighbourhood sum (or average) of full-precision vectors."""
    _check_topology(ep, topology)
    x = _as_vector(x).astype(F32, copy=False)
    tag = make_tag(bucket_id, Phase.PEER)
    payload = x.tobytes()
    for j in topology.receivers(ep.rank, round):
        ep.send(j, tag, payload)
    nbrs = topology.neighbors(ep.rank, round)
    acc = np.zeros(x.size, dtype=F64)
    for j in nbrs:
        acc += x if j == ep.rank else _unraw(ep.recv(j, tag), x.size, False, j)
    return _finish(acc, len(nbrs), mode)


def d_lp_s(ep, x, topology: Topology, codec: Codec, mode: str = "sum", *, round: int = 0,
           bucket_id: int = 0, rng=None) -> np.ndarray:
    """Neighbourhood sum of ``Q(x_j)``; the worker's own term is compressed too."""
    _check_topology(ep, topology)
    x = _as_vector(x).astype(F32, copy=False)
    if rng is None and codec.rounding == "stochastic":
        rng = codec.rng(ep.rank)
    tag = make_tag(bucket_id, Phase.PEER)
    payload = encode(codec, x, rng)
    for j in topology.receivers(ep.rank, round):
        ep.send(j, tag, payload)
    nbrs = topology.neighbors(ep.rank, round)
    acc = np.zeros(x.size, dtype=F64)
    for j in nbrs:
        data = payload if j == ep.rank else ep.recv(j, tag)
        try:
            acc += decode(codec, data, x.size)
        except CodecError as exc:
            raise CollectiveError(f"bad payload from rank {j}: {exc}") from exc
    return _finish(acc, len(nbrs), mode)
