"""Messages, the binary frame format and transports.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"FLG1"
    4       4     u32 header length H
    8       4     u32 payload length B (multiple of 8)
    12      H     header, UTF-8 JSON with sorted keys
    12+H    B     payload, concatenated u64 words of the message's ciphers
    12+H+B  32    SHA-256 over bytes [0, 12+H+B)

The header always carries ``tag``, ``run_id``, ``sender`` (-1 for the
controller, client id otherwise), ``round`` and ``body``; ``ciphers``
describes how the payload splits into cipher vectors.
"""

from __future__ import annotations

import hashlib
import json
import os
import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cipher import CipherVector

MAGIC = b"FLG1"
PREFIX = struct.Struct("<4sII")
DIGEST = 32
CONTROLLER = -1

TAGS = (
    "Hello",
    "InitSuperNet",
    "PopulationBroadcast",
    "GradientReport",
    "GradientBroadcast",
    "LossReport",
    "ElitesReport",
    "GammaBroadcast",
    "FinalEvalRequest",
    "FinalEvalReport",
    "Shutdown",
)


class ProtocolError(RuntimeError):
    pass


class FrameError(ProtocolError):
    pass


class TransportError(RuntimeError):
    pass


@dataclass
class Message:
    tag: str
    run_id: str
    sender: int
    round: int
    body: dict = field(default_factory=dict)
    ciphers: list = field(default_factory=list)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ProtocolError(f"unknown message tag {self.tag!r}")


def encode_frame(msg: Message) -> bytes:
    header = {
        "tag": msg.tag,
        "run_id": msg.run_id,
        "sender": msg.sender,
        "round": msg.round,
        "body": msg.body,
        "ciphers": [
            {"scheme": c.scheme, "scale_bits": c.scale_bits, "length": c.length, "weight": c.weight}
            for c in msg.ciphers
        ],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(c.payload.astype("<u8").tobytes() for c in msg.ciphers)
    head = PREFIX.pack(MAGIC, len(hbytes), len(payload)) + hbytes + payload
    return head + hashlib.sha256(head).digest()


def frame_size(prefix: bytes) -> int:
    magic, h, b = PREFIX.unpack(prefix[:PREFIX.size])
    if magic != MAGIC:
        raise FrameError("bad frame magic")
    return PREFIX.size + h + b + DIGEST


def decode_frame(data: bytes) -> Message:
    if len(data) < PREFIX.size + DIGEST:
        raise FrameError("truncated frame")
    if frame_size(data) != len(data):
        raise FrameError("frame length does not match its length fields")
    _, hlen, plen = PREFIX.unpack_from(data)
    body_end = PREFIX.size + hlen + plen
    if hashlib.sha256(data[:body_end]).digest() != data[body_end:]:
        raise FrameError("frame digest mismatch (corrupted or tampered frame)")
    try:
        header = json.loads(data[PREFIX.size:PREFIX.size + hlen])
    except ValueError as exc:
        raise FrameError(f"unreadable header: {exc}") from exc
    if plen % 8:
        raise FrameError("payload is not a whole number of words")
    words = np.frombuffer(data, dtype="<u8", count=plen // 8, offset=PREFIX.size + hlen).astype(np.uint64)
    ciphers, pos = [], 0
    for desc in header["ciphers"]:
        n = int(desc["length"])
        if pos + n > words.size:
            raise FrameError("cipher lengths exceed payload")
        ciphers.append(CipherVector(desc["scheme"], int(desc["scale_bits"]), words[pos:pos + n].copy(),
                                    float(desc["weight"])))
        pos += n
    if pos != words.size:
        raise FrameError("payload longer than its cipher descriptors")
    return Message(header["tag"], header["run_id"], header["sender"], header["round"], header["body"], ciphers)


class RoundTracker:
    """Rejects frames from a foreign run or with a non-increasing round per sender."""

    def __init__(self, run_id: str):
        self.run_id = run_id
        self.last: dict[int, int] = {}

    def check(self, msg: Message) -> Message:
        if msg.run_id != self.run_id:
            raise ProtocolError(f"frame from run {msg.run_id!r}, expected {self.run_id!r}")
        prev = self.last.get(msg.sender)
        if prev is not None and msg.round <= prev:
            raise ProtocolError(f"round regression from sender {msg.sender}: {msg.round} after {prev}")
        self.last[msg.sender] = msg.round
        return msg


@dataclass
class TranscriptEntry:
    direction: str  # "c2s" (client to controller) | "s2c"
    client: int
    frame: bytes


class Transcript(list):
    """Ordered list of every frame crossing the controller's boundary."""

    def to_bytes(self) -> bytes:
        out = bytearray()
        for e in self:
            out += struct.pack("<BiI", 0 if e.direction == "c2s" else 1, e.client, len(e.frame)) + e.frame
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transcript":
        t, pos, hdr = cls(), 0, struct.Struct("<BiI")
        while pos < len(data):
            d, client, n = hdr.unpack_from(data, pos)
            pos += hdr.size
            t.append(TranscriptEntry("c2s" if d == 0 else "s2c", client, data[pos:pos + n]))
            pos += n
        return t

    def byte_count(self) -> int:
        return sum(len(e.frame) for e in self)


class Hub:
    """Controller-side endpoint to N clients.  Subclasses move the bytes."""

    def __init__(self, num_clients: int):
        self.num_clients = num_clients
        self.transcript = Transcript()
        self.messages = 0
        self.bytes = 0

    def _record(self, direction, client, frame):
        self.transcript.append(TranscriptEntry(direction, client, frame))
        self.messages += 1
        self.bytes += len(frame)

    def send(self, client: int, frame: bytes) -> None:
        self._check_client(client)
        self._record("s2c", client, frame)
        self._send(client, frame)

    def recv(self, client: int) -> bytes:
        self._check_client(client)
        frame = self._recv(client)
        self._record("c2s", client, frame)
        return frame

    def _check_client(self, client):
        if not 0 <= client < self.num_clients:
            raise TransportError(f"no client {client} (run has {self.num_clients})")

    def close(self):
        pass


class InprocHub(Hub):
    """Deterministic scheduler: a client handles each frame as soon as it is sent."""

    def __init__(self, workers: Sequence):
        super().__init__(len(workers))
        self.workers = list(workers)
        self.outbox = [deque() for _ in workers]
        for i, w in enumerate(self.workers):
            self.outbox[i].extend(w.start())

    def _send(self, client, frame):
        self.outbox[client].extend(self.workers[client].handle_frame(frame))

    def _recv(self, client):
        if not self.outbox[client]:
            raise TransportError(f"client {client} has nothing to send (would block forever)")
        return self.outbox[client].popleft()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    prefix = _recv_exact(sock, PREFIX.size)
    return prefix + _recv_exact(sock, frame_size(prefix) - PREFIX.size)


class SocketHub(Hub):
    """Accepts N client connections; each client opens with its Hello frame."""

    def __init__(self, num_clients: int, host: str = "127.0.0.1", port: int = 0, timeout: float = 60.0):
        super().__init__(num_clients)
        self.timeout = timeout
        self.server = socket.create_server((host, port))
        self.server.settimeout(timeout)
        self.address = self.server.getsockname()
        self.socks: list = [None] * num_clients
        self.pending: list = [deque() for _ in range(num_clients)]

    def accept_all(self):
        try:
            for _ in range(self.num_clients):
                conn, _ = self.server.accept()
                conn.settimeout(self.timeout)
                hello = recv_frame(conn)
                cid = decode_frame(hello).sender
                if not 0 <= cid < self.num_clients or self.socks[cid] is not None:
                    raise TransportError(f"unexpected client id {cid}")
                self.socks[cid] = conn
                self.pending[cid].append(hello)
        except socket.timeout as exc:
            raise TransportError("timed out waiting for clients") from exc
        return self

    def _send(self, client, frame):
        try:
            self.socks[client].sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to client {client} failed: {exc}") from exc

    def _recv(self, client):
        if self.pending[client]:
            return self.pending[client].popleft()
        try:
            return recv_frame(self.socks[client])
        except socket.timeout as exc:
            raise TransportError(f"timed out waiting for client {client}") from exc
        except OSError as exc:
            raise TransportError(f"receive from client {client} failed: {exc}") from exc

    def close(self):
        for s in self.socks:
            if s is not None:
                s.close()
        self.server.close()


def serve_client(worker, host: str, port: int, timeout: float = 600.0) -> None:
    """Run a client worker over TCP until the controller sends Shutdown."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        for frame in worker.start():
            sock.sendall(frame)
        while not worker.done:
            for reply in worker.handle_frame(recv_frame(sock)):
                sock.sendall(reply)


class ReplayMismatch(ProtocolError):
    pass


class ReplayHub(Hub):
    """Feeds recorded client frames to a controller and checks every frame it sends."""

    def __init__(self, transcript: Transcript, num_clients: int):
        super().__init__(num_clients)
        self.expected = [deque() for _ in range(num_clients)]
        self.inbound = [deque() for _ in range(num_clients)]
        for e in transcript:
            (self.inbound if e.direction == "c2s" else self.expected)[e.client].append(e.frame)

    def _send(self, client, frame):
        if not self.expected[client]:
            raise ReplayMismatch(f"controller sent an unrecorded frame to client {client}")
        want = self.expected[client].popleft()
        if want != frame:
            raise ReplayMismatch(f"controller frame to client {client} differs from the recording")

    def _recv(self, client):
        if not self.inbound[client]:
            raise TransportError(f"recording has no more frames from client {client}")
        return self.inbound[client].popleft()

    def exhausted(self) -> bool:
        return not any(self.expected) and not any(self.inbound)


def transport_from_env(default: str = "inproc") -> str:
    kind = os.environ.get("FLAGCNS_TRANSPORT", default)
    if kind not in ("inproc", "socket"):
        raise TransportError(f"FLAGCNS_TRANSPORT must be inproc or socket, got {kind!r}")
    return kind
