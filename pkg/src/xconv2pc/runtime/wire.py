"""Frames, byte ledger, and transports.

Every protocol message is a length-prefixed frame: payload length (32-bit
little-endian), opcode (16-bit), layer tag (32-bit), then the payload as
raw bytes (ring elements travel as 64-bit little-endian words).  The
ledger counts payload bytes only; the 10 header bytes per frame are
deliberately excluded so that measured traffic stays exactly proportional
to the protocol's element counts.

To keep plain blocking sockets deadlock-free, the engine fixes the I/O
order per exchange: the model owner writes first and then reads, the
client reads first and then writes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import queue
import socket
import struct
from dataclasses import dataclass, field

from ..errors import TransportError

PROTOCOL_VERSION = 1

OP_HELLO = 1
OP_OPEN_MASKED = 2
OP_OPEN_BOOL = 3
OP_OPEN_OUTPUT = 4
OP_SYNC = 5
OP_ABORT = 6
OP_SHARE_BLOB = 7

OPCODE_NAMES = {
    OP_HELLO: "hello", OP_OPEN_MASKED: "open-masked-values",
    OP_OPEN_BOOL: "open-bool", OP_OPEN_OUTPUT: "open-output",
    OP_SYNC: "sync", OP_ABORT: "abort", OP_SHARE_BLOB: "share-blob",
}

SESSION_TAG = 0xFFFFFFFF  # layer tag for session-level frames

_HEADER = struct.Struct("<IHI")


@dataclass(frozen=True)
class Frame:
    opcode: int
    layer_tag: int
    payload: bytes

    def encode(self) -> bytes:
        return _HEADER.pack(len(self.payload), self.opcode, self.layer_tag) + self.payload


def decode_frame(header: bytes, payload: bytes) -> Frame:
    length, opcode, layer_tag = _HEADER.unpack(header)
    if length != len(payload):
        raise TransportError("frame length mismatch")
    return Frame(opcode, layer_tag, payload)


HEADER_SIZE = _HEADER.size


# -- ledger ----------------------------------------------------------------------


@dataclass
class LedgerEntry:
    bytes_sent: int = 0
    bytes_recv: int = 0
    msgs_sent: int = 0
    msgs_recv: int = 0
    rounds: int = 0


class CommLedger:
    """Per-(layer, op-kind) payload byte and round accounting."""

    def __init__(self):
        self.entries: dict = {}

    def _entry(self, layer: str, op: str) -> LedgerEntry:
        return self.entries.setdefault((layer, op), LedgerEntry())

    def record_send(self, layer: str, op: str, nbytes: int) -> None:
        e = self._entry(layer, op)
        e.bytes_sent += nbytes
        e.msgs_sent += 1

    def record_recv(self, layer: str, op: str, nbytes: int) -> None:
        e = self._entry(layer, op)
        e.bytes_recv += nbytes
        e.msgs_recv += 1

    def bump_round(self, layer: str, op: str) -> None:
        self._entry(layer, op).rounds += 1

    def note_local(self, layer: str, op: str) -> None:
        """Record a communication-free step as an explicit zero-byte row."""
        self._entry(layer, op)

    def bytes_for(self, layer: str = None, op: str = None) -> int:
        return sum(e.bytes_sent for (l, o), e in self.entries.items()
                   if (layer is None or l == layer) and (op is None or o == op))

    def recv_for(self, layer: str = None, op: str = None) -> int:
        return sum(e.bytes_recv for (l, o), e in self.entries.items()
                   if (layer is None or l == layer) and (op is None or o == op))

    @property
    def total_sent(self) -> int:
        return sum(e.bytes_sent for e in self.entries.values())

    @property
    def total_recv(self) -> int:
        return sum(e.bytes_recv for e in self.entries.values())

    def rows(self) -> list:
        out = []
        for (layer, op), e in sorted(self.entries.items()):
            out.append({"layer": layer, "op": op, "bytes_sent": e.bytes_sent,
                        "bytes_recv": e.bytes_recv, "rounds": e.rounds})
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=("layer", "op", "bytes_sent",
                                            "bytes_recv", "rounds"))
        w.writeheader()
        for row in self.rows():
            w.writerow(row)
        text = buf.getvalue()
        if path:
            with open(path, "w") as f:
                f.write(text)
        return text


def ledgers_mirror(a: CommLedger, b: CommLedger) -> bool:
    """True when every tagged byte one party sent, the other received."""
    keys = set(a.entries) | set(b.entries)
    for k in keys:
        ea = a.entries.get(k, LedgerEntry())
        eb = b.entries.get(k, LedgerEntry())
        if ea.bytes_sent != eb.bytes_recv or eb.bytes_sent != ea.bytes_recv:
            return False
    return True


# -- transports ------------------------------------------------------------------


class Transport:
    def send(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv(self) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        pass


class QueueTransport(Transport):
    """In-process duplex endpoint; frames still pass through full encoding."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox = inbox
        self.outbox = outbox

    @classmethod
    def pair(cls) -> tuple:
        q01, q10 = queue.Queue(), queue.Queue()
        return cls(q10, q01), cls(q01, q10)

    def send(self, frame: Frame) -> None:
        self.outbox.put(frame.encode())

    def recv(self) -> Frame:
        try:
            raw = self.inbox.get(timeout=600)
        except queue.Empty:
            raise TransportError("peer went silent") from None
        return decode_frame(raw[:HEADER_SIZE], raw[HEADER_SIZE:])


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, frame: Frame) -> None:
        try:
            self.sock.sendall(frame.encode())
        except OSError as e:
            raise TransportError(f"send failed: {e}") from e

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self.sock.recv(min(remaining, 1 << 20))
            except OSError as e:
                raise TransportError(f"recv failed: {e}") from e
            if not chunk:
                raise TransportError("peer disconnected mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Frame:
        header = self._read_exact(HEADER_SIZE)
        length = struct.unpack_from("<I", header)[0]
        return decode_frame(header, self._read_exact(length))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TranscriptRecorder:
    """Running digests of each direction's frame stream, for regression."""

    def __init__(self):
        self._sent = hashlib.sha256()
        self._recv = hashlib.sha256()

    def on_send(self, frame: Frame) -> None:
        self._sent.update(frame.encode())

    def on_recv(self, frame: Frame) -> None:
        self._recv.update(frame.encode())

    @property
    def sent_digest(self) -> str:
        return self._sent.hexdigest()

    @property
    def recv_digest(self) -> str:
        return self._recv.hexdigest()
