"""Two-party message transport, WAN cost model, and the cost ledger.

A round is one synchronized bidirectional exchange.  Costs are counted, not
measured: per round the ledger charges one latency plus the larger
direction's serialization time (full-duplex link), while the byte counter
accumulates both directions.  The loopback channel swaps payloads in
process; the socket channel moves the same payloads as framed messages over
a stream socket, so both transports yield identical ledgers for identical
protocol runs.
"""

import hashlib
import socket
import struct
from dataclasses import dataclass

import numpy as np


class TransportError(RuntimeError):
    """Frame-level corruption or an unexpected end of stream."""


class ProtocolDesyncError(TransportError):
    """The two parties disagreed on the next exchange's tag or order."""


class AuditError(RuntimeError):
    """A reveal outside the sanctioned set happened during an audited run."""


@dataclass(frozen=True)
class NetworkModel:
    """Link model: bandwidth in bytes/second, latency in seconds per round."""

    bandwidth: float = 100e6
    latency: float = 0.1

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")


WAN_DEFAULT = NetworkModel()  # 100 MB/s, 100 ms


def simulated_time(rounds: int, wire_bytes: int, model: NetworkModel) -> float:
    """Seconds for `rounds` exchanges moving `wire_bytes` total on the charged
    direction (per-round max, summed over rounds)."""
    return rounds * model.latency + wire_bytes / model.bandwidth


@dataclass
class TagCost:
    rounds: int = 0
    bytes: int = 0
    seconds: float = 0.0

    def add(self, rounds, nbytes, seconds):
        self.rounds += rounds
        self.bytes += nbytes
        self.seconds += seconds


@dataclass
class RevealEvent:
    kind: str  # comparison_bit | final_indices | appraisal | oracle | ...
    tag: str
    summary: str


@dataclass
class TraceEvent:
    """One accounted operation, for the scheduler's DAG construction."""

    tag: str
    rounds: int
    bytes: int
    wire_bytes: int
    flops: float
    group: tuple  # (phase, kind, batch/partition) or ()
    units: int = 1  # >1 marks a batch of identical independent unit ops


class CostLedger:
    """Per-tag rounds/bytes/seconds counters plus the reveal audit log."""

    def __init__(self, model: NetworkModel = WAN_DEFAULT, trace: bool = False):
        self.model = model
        self.per_tag: dict[str, TagCost] = {}
        self.reveal_log: list[RevealEvent] = []
        self.audit_allowed: set | None = None
        self.trace_enabled = trace
        self.events: list[TraceEvent] = []
        self._group: tuple = ()

    # -- accounting ---------------------------------------------------------

    def record_round(self, tag: str, sent0: int, sent1: int, flops: float = 0.0):
        """One synchronized exchange: party 0 sent sent0 bytes, party 1 sent1."""
        wire = max(sent0, sent1)
        self.charge(tag, 1, sent0 + sent1, wire, flops)

    def charge(self, tag: str, rounds: int, nbytes: int, wire_bytes=None, flops=0.0, units=1):
        """A synthetic cost event (used by configured cost models)."""
        wire = nbytes if wire_bytes is None else wire_bytes
        secs = simulated_time(rounds, wire, self.model)
        self.per_tag.setdefault(tag, TagCost()).add(rounds, nbytes, secs)
        if self.trace_enabled:
            self.events.append(
                TraceEvent(tag, rounds, nbytes, wire, flops, self._group, units)
            )

    def charge_flops(self, tag: str, flops: float):
        if self.trace_enabled and flops:
            self.events.append(TraceEvent(tag, 0, 0, 0, flops, self._group))

    def set_group(self, group: tuple):
        self._group = group

    # -- reveals --------------------------------------------------------------

    def log_reveal(self, kind: str, tag: str, summary: str):
        if self.audit_allowed is not None and kind not in self.audit_allowed:
            raise AuditError(f"reveal of kind {kind!r} (tag {tag!r}) is not sanctioned")
        self.reveal_log.append(RevealEvent(kind, tag, summary))

    # -- reporting --------------------------------------------------------------

    def totals(self) -> TagCost:
        t = TagCost()
        for c in self.per_tag.values():
            t.add(c.rounds, c.bytes, c.seconds)
        return t

    def rows(self) -> list[dict]:
        total_bytes = max(1, self.totals().bytes)
        out = []
        for tag in sorted(self.per_tag, key=lambda t: -self.per_tag[t].bytes):
            c = self.per_tag[tag]
            out.append(
                {
                    "tag": tag,
                    "rounds": c.rounds,
                    "bytes": c.bytes,
                    "seconds": c.seconds,
                    "byte_share": c.bytes / total_bytes,
                }
            )
        return out

    def format_table(self) -> str:
        lines = [f"{'tag':<24}{'rounds':>9}{'bytes':>14}{'seconds':>12}{'%bytes':>9}"]
        for r in self.rows():
            lines.append(
                f"{r['tag']:<24}{r['rounds']:>9}{r['bytes']:>14}"
                f"{r['seconds']:>12.4f}{100 * r['byte_share']:>8.1f}%"
            )
        t = self.totals()
        lines.append(f"{'TOTAL':<24}{t.rounds:>9}{t.bytes:>14}{t.seconds:>12.4f}{'100.0%':>9}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        t = self.totals()
        return {
            "tags": {
                tag: {"rounds": c.rounds, "bytes": c.bytes, "seconds": c.seconds}
                for tag, c in sorted(self.per_tag.items())
            },
            "total": {"rounds": t.rounds, "bytes": t.bytes, "seconds": t.seconds},
            "reveals": [[e.kind, e.tag, e.summary] for e in self.reveal_log],
        }

    def merge(self, other: "CostLedger"):
        for tag, c in other.per_tag.items():
            self.per_tag.setdefault(tag, TagCost()).add(c.rounds, c.bytes, c.seconds)
        self.reveal_log.extend(other.reveal_log)
        self.events.extend(other.events)


# -- wire format ----------------------------------------------------------------
#
# Frame = length (4-byte LE, = payload bytes + 1) | msg_type (1 byte) | payload.
# msg_type is a stable one-byte digest of the exchange tag, which lets each
# side detect a desynchronized peer.  Payloads are ring elements as
# little-endian 8-byte words.

_HELLO = 0xFF


def tag_id(tag: str) -> int:
    d = hashlib.blake2b(tag.encode(), digest_size=1).digest()[0]
    return d if d != _HELLO else 0


def pack_frame(msg_type: int, payload: bytes) -> bytes:
    return struct.pack("<IB", len(payload) + 1, msg_type) + payload


def read_frame(reader) -> tuple[int, bytes]:
    head = _read_exact(reader, 5)
    length, msg_type = struct.unpack("<IB", head)
    if length < 1:
        raise TransportError(f"bad frame length {length}")
    payload = _read_exact(reader, length - 1)
    return msg_type, payload


def _read_exact(reader, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = reader.read(n - len(buf))
        if not chunk:
            raise TransportError("peer closed the stream mid-frame")
        buf += chunk
    return buf


# -- channels ----------------------------------------------------------------


class LoopbackChannel:
    """In-process transport: the exchange is a swap. Default for all tests."""

    def transmit(self, tag: str, payload0: np.ndarray, payload1: np.ndarray):
        return payload1, payload0

    def close(self):
        pass


class SocketChannel:
    """Framed stream-socket transport for running the parties as two processes.

    Both processes execute the same deterministic protocol; each sends its own
    party's payload and substitutes the peer's frame for the other side, so an
    open genuinely depends on received bytes.  Party 0 writes first, party 1
    reads first, which keeps arbitrarily large exchanges deadlock-free.
    """

    def __init__(self, party: int, sock: socket.socket):
        if party not in (0, 1):
            raise ValueError("party must be 0 or 1")
        self.party = party
        self.sock = sock
        self._reader = sock.makefile("rb")

    def transmit(self, tag: str, payload0: np.ndarray, payload1: np.ndarray):
        mine = payload0 if self.party == 0 else payload1
        theirs_local = payload1 if self.party == 0 else payload0
        mt = tag_id(tag)
        frame = pack_frame(mt, np.ascontiguousarray(mine, dtype="<u8").tobytes())
        if self.party == 0:
            self.sock.sendall(frame)
            got_type, got = read_frame(self._reader)
        else:
            got_type, got = read_frame(self._reader)
            self.sock.sendall(frame)
        if got_type != mt:
            raise ProtocolDesyncError(
                f"tag mismatch on {tag!r}: sent type {mt}, received {got_type}"
            )
        theirs = np.frombuffer(got, dtype="<u8").astype(np.uint64)
        if theirs.size != theirs_local.size:
            raise TransportError(
                f"payload size mismatch on {tag!r}: {theirs.size} != {theirs_local.size}"
            )
        theirs = theirs.reshape(theirs_local.shape)
        return (payload1, theirs) if self.party == 1 else (theirs, payload0)

    def close(self):
        try:
            self._reader.close()
        finally:
            self.sock.close()


def connect_socket_pair(party: int, host: str, port: int, timeout=10.0) -> SocketChannel:
    """Party 0 listens, party 1 connects; returns the ready channel."""
    if party == 0:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(timeout)
        conn, _ = srv.accept()
        srv.close()
    else:
        import time

        deadline = time.monotonic() + timeout
        while True:
            try:
                conn = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    # handshake: both sides announce their party id
    conn.sendall(pack_frame(_HELLO, bytes([party])))
    reader = conn.makefile("rb")
    mt, payload = read_frame(reader)
    reader.close()
    if mt != _HELLO or payload != bytes([1 - party]):
        conn.close()
        raise ProtocolDesyncError("handshake failed: peer announced the wrong party")
    return SocketChannel(party, conn)


def exchange(channel, ledger: CostLedger, tag: str, payload0, payload1):
    """One synchronized round: both payloads cross, the ledger charges it."""
    # ascontiguousarray promotes 0-d to 1-d; reshape restores the input shape
    p0 = np.ascontiguousarray(payload0, dtype=np.uint64).reshape(np.shape(payload0))
    p1 = np.ascontiguousarray(payload1, dtype=np.uint64).reshape(np.shape(payload1))
    recv0, recv1 = channel.transmit(tag, p0, p1)
    ledger.record_round(tag, p0.nbytes, p1.nbytes)
    return recv0, recv1
