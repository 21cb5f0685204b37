"""Shared-buffer activation batch server and its pull client.

Each server owns a contiguous slice of the batch sequence of one shard set
and keeps the most recent ``capacity`` batches in a ring buffer. Trainers pull
batches by index; a trainer that falls behind the buffer gets its batches
re-read from disk, so fast trainers never wait on slow ones.

Wire format (all little-endian): a ``u32`` frame length counting the bytes
after it, a ``u8`` kind, then the kind's fixed fields and payload.

========  =====  ==========================================================
kind      code   body
========  =====  ==========================================================
request   1      trainer_id u64, next_index u64
batch     2      index u64, rows u32, n u32, rows*n float32 payload
wait      3      index u64, rows u32 (0), n u32
end       4      index u64, rows u32 (0), n u32
ping      5      (empty)
pong      6      (empty)
error     7      utf-8 message; the server closes the connection after it
========  =====  ==========================================================
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .store import ShardDataset

log = logging.getLogger(__name__)

REQUEST, BATCH, WAIT, END, PING, PONG, ERROR = 1, 2, 3, 4, 5, 6, 7
KIND_NAMES = {REQUEST: "request", BATCH: "batch", WAIT: "wait", END: "end", PING: "ping", PONG: "pong", ERROR: "error"}

_LEN = struct.Struct("<I")
_REQ = struct.Struct("<QQ")
_REPLY = struct.Struct("<QII")
MAX_FRAME = 1 << 30


class ProtocolError(ValueError):
    pass


# --- frames ---------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    trainer_id: int
    next_index: int


@dataclass(frozen=True)
class Reply:
    kind: int
    index: int
    rows: int
    n: int
    payload: bytes = b""

    def __post_init__(self):
        if self.kind not in (BATCH, WAIT, END):
            raise ValueError(f"not a reply kind: {self.kind}")
        expected = self.rows * self.n * 4 if self.kind == BATCH else 0
        if len(self.payload) != expected:
            raise ProtocolError(f"payload of {len(self.payload)} bytes, expected {expected}")

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4").reshape(self.rows, self.n)


def encode_frame(kind: int, body: bytes = b"") -> bytes:
    return _LEN.pack(1 + len(body)) + bytes([kind]) + body


def encode_request(req: Request) -> bytes:
    return encode_frame(REQUEST, _REQ.pack(req.trainer_id, req.next_index))


def encode_reply(reply: Reply) -> bytes:
    return encode_frame(reply.kind, _REPLY.pack(reply.index, reply.rows, reply.n) + reply.payload)


def decode_frame(frame: bytes):
    """Decode one frame body (kind byte onwards) into a Request, Reply, or ``(kind, bytes)``."""
    if not frame:
        raise ProtocolError("empty frame")
    kind, body = frame[0], frame[1:]
    if kind == REQUEST:
        if len(body) != _REQ.size:
            raise ProtocolError(f"request body is {len(body)} bytes, expected {_REQ.size}")
        return Request(*_REQ.unpack(body))
    if kind in (BATCH, WAIT, END):
        if len(body) < _REPLY.size:
            raise ProtocolError("truncated reply header")
        index, rows, n = _REPLY.unpack_from(body)
        return Reply(kind, index, rows, n, bytes(body[_REPLY.size :]))
    if kind in (PING, PONG, ERROR):
        if kind != ERROR and body:
            raise ProtocolError(f"{KIND_NAMES[kind]} frame carries {len(body)} unexpected bytes")
        return kind, bytes(body)
    raise ProtocolError(f"unknown frame kind {kind}")


def _recv_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks, got = [], 0
    while got < count:
        chunk = sock.recv(min(count - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise ProtocolError(f"connection closed mid-frame ({got} of {count} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Return the next frame body, or None on a clean close between frames."""
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtocolError("connection closed after frame length")
    return body


# --- server state ---------------------------------------------------------


class RingBuffer:
    """Immutable batch payloads for the contiguous index window ``[high - capacity + 1, high]``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.entries: OrderedDict[int, bytes] = OrderedDict()
        self.high = -1

    @property
    def low(self) -> int:
        return self.high - len(self.entries) + 1

    def window(self) -> tuple[int, int]:
        return self.low, self.high

    def push(self, index: int, payload: bytes) -> None:
        if index != self.high + 1:
            raise ValueError(f"ring buffer expects index {self.high + 1}, got {index}")
        if len(self.entries) == self.capacity:
            self.entries.popitem(last=False)
        self.entries[index] = payload
        self.high = index

    def get(self, index: int) -> bytes | None:
        return self.entries.get(index)


def slice_bounds(total_batches: int, rank: int, world: int) -> tuple[int, int]:
    """Contiguous batch range ``[start, stop)`` owned by server ``rank`` of ``world``."""
    if not 0 <= rank < world:
        raise ValueError(f"rank {rank} outside world of {world}")
    return rank * total_batches // world, (rank + 1) * total_batches // world


class BatchSource:
    """Reads one server's slice of batches from disk, retrying transient I/O errors."""

    def __init__(self, shards: Sequence, batch_size: int, norm: float = 1.0, rank: int = 0, world: int = 1,
                 retries: int = 5, backoff: float = 0.05):
        self.dataset = shards if isinstance(shards, ShardDataset) else ShardDataset(shards, mmap=False)
        self.batch_size = batch_size
        self.norm = float(norm)
        self.start, self.stop = slice_bounds(self.dataset.num_batches(batch_size), rank, world)
        self.retries = retries
        self.backoff = backoff

    @property
    def num_batches(self) -> int:
        return self.stop - self.start

    @property
    def n(self) -> int:
        return self.dataset.n

    def read(self, index: int) -> bytes:
        if not 0 <= index < self.num_batches:
            raise IndexError(index)
        delay = self.backoff
        for attempt in range(self.retries + 1):
            try:
                rows = self.dataset.batch(self.start + index, self.batch_size, self.norm)
                return rows.astype("<f4", copy=False).tobytes()
            except OSError as exc:
                if attempt == self.retries:
                    raise
                log.warning("read of batch %d failed (%s); retrying in %.2fs", index, exc, delay)
                time.sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")


class ServerState:
    """Ring buffer plus replay cache; thread-safe.

    The fetch loop advances the buffer up to ``prefetch`` batches beyond the
    furthest index any trainer has asked for. Requests below the window are
    served from a small replay cache filled by a separate reader.
    """

    def __init__(self, source: BatchSource, capacity: int = 16, prefetch: int = 4, replay_capacity: int = 4):
        self.source = source
        self.buffer = RingBuffer(capacity)
        self.prefetch = max(0, min(prefetch, capacity - 1))
        self.replay: OrderedDict[int, bytes] = OrderedDict()
        self.replay_capacity = max(1, replay_capacity)
        self.replay_pending: set[int] = set()
        self.wanted = -1
        self.failure: BaseException | None = None
        self.cond = threading.Condition()
        self.closed = False
        self.stats = {"served": 0, "waits": 0, "replays": 0, "fetched": 0}

    # fetching ---------------------------------------------------------------

    def advance(self) -> bool:
        """Read the next batch into the ring buffer; False once the slice is exhausted."""
        nxt = self.buffer.high + 1
        if nxt >= self.source.num_batches:
            return False
        payload = self.source.read(nxt)
        with self.cond:
            self.buffer.push(nxt, payload)
            self.stats["fetched"] += 1
            self.cond.notify_all()
        return True

    def _need_fetch(self) -> bool:
        horizon = min(self.wanted + self.prefetch, self.source.num_batches - 1)
        return self.buffer.high < horizon

    def fetch_loop(self) -> None:
        try:
            while True:
                with self.cond:
                    while not self.closed and not self._need_fetch():
                        self.cond.wait(0.5)
                    if self.closed:
                        return
                self.advance()
        except BaseException as exc:  # surfaced to trainers as error frames
            log.error("fetch loop failed: %s", exc)
            with self.cond:
                self.failure = exc
                self.cond.notify_all()

    def replay_loop(self) -> None:
        try:
            while True:
                with self.cond:
                    while not self.closed and not self.replay_pending:
                        self.cond.wait(0.5)
                    if self.closed:
                        return
                    index = min(self.replay_pending)
                payload = self.source.read(index)
                with self.cond:
                    self.replay_pending.discard(index)
                    self.replay[index] = payload
                    self.replay.move_to_end(index)
                    while len(self.replay) > self.replay_capacity:
                        self.replay.popitem(last=False)
                    self.stats["replays"] += 1
                    self.cond.notify_all()
        except BaseException as exc:
            log.error("replay loop failed: %s", exc)
            with self.cond:
                self.failure = exc
                self.cond.notify_all()

    # requests ---------------------------------------------------------------

    def handle_request(self, req: Request) -> Reply:
        n = self.source.n
        index = req.next_index
        with self.cond:
            if self.failure is not None:
                raise RuntimeError(f"server data source failed: {self.failure}")
            if index >= self.source.num_batches:
                return Reply(END, index, 0, n)
            if index > self.wanted:
                self.wanted = index
                self.cond.notify_all()
            payload = self.buffer.get(index)
            if payload is None:
                payload = self.replay.get(index)
            if payload is not None:
                self.stats["served"] += 1
                return Reply(BATCH, index, self.source.batch_size, n, payload)
            if index < self.buffer.low:
                # laggard: read it (and a little beyond) again from disk
                for k in range(index, min(index + self.replay_capacity, self.buffer.low)):
                    if k not in self.replay:
                        self.replay_pending.add(k)
                self.cond.notify_all()
            self.stats["waits"] += 1
            return Reply(WAIT, index, 0, n)

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


# --- TCP ------------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        state: ServerState = self.server.state
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = read_frame(sock)
                if frame is None:
                    return
                msg = decode_frame(frame)
                if isinstance(msg, Request):
                    out = encode_reply(state.handle_request(msg))
                elif msg == (PING, b""):
                    out = encode_frame(PONG)
                else:
                    raise ProtocolError(f"unexpected {KIND_NAMES.get(msg[0] if isinstance(msg, tuple) else msg.kind)} frame")
            except (ProtocolError, RuntimeError) as exc:
                try:
                    sock.sendall(encode_frame(ERROR, str(exc).encode()))
                except OSError:
                    pass
                return
            except OSError:
                return
            sock.sendall(out)


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class BatchServer:
    """Serve one slice over TCP. ``port=0`` picks a free port (see ``address``)."""

    def __init__(self, source: BatchSource, host: str = "127.0.0.1", port: int = 0, capacity: int = 16,
                 prefetch: int = 4, replay_capacity: int = 4):
        self.state = ServerState(source, capacity, prefetch, replay_capacity)
        self.tcp = _TcpServer((host, port), _Handler)
        self.tcp.state = self.state
        self.threads = [
            threading.Thread(target=self.state.fetch_loop, name="fetch", daemon=True),
            threading.Thread(target=self.state.replay_loop, name="replay", daemon=True),
            threading.Thread(target=self.tcp.serve_forever, kwargs={"poll_interval": 0.1}, name="accept", daemon=True),
        ]

    @property
    def address(self) -> tuple[str, int]:
        return self.tcp.server_address[:2]

    def start(self) -> BatchServer:
        for t in self.threads:
            t.start()
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            while True:
                time.sleep(3600)
        finally:
            self.stop()

    def stop(self) -> None:
        self.state.close()
        self.tcp.shutdown()
        self.tcp.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# --- client ---------------------------------------------------------------


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class Connection:
    def __init__(self, address, timeout: float = 30.0):
        if isinstance(address, str):
            address = parse_address(address)
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _roundtrip(self, frame: bytes):
        self.sock.sendall(frame)
        body = read_frame(self.sock)
        if body is None:
            raise ConnectionError("server closed the connection")
        msg = decode_frame(body)
        if isinstance(msg, tuple) and msg[0] == ERROR:
            raise ProtocolError(f"server error: {msg[1].decode(errors='replace')}")
        return msg

    def request(self, trainer_id: int, index: int) -> Reply:
        msg = self._roundtrip(encode_request(Request(trainer_id, index)))
        if not isinstance(msg, Reply):
            raise ProtocolError(f"expected a reply frame, got {msg!r}")
        return msg

    def ping(self) -> bool:
        return self._roundtrip(encode_frame(PING)) == (PONG, b"")

    def close(self) -> None:
        self.sock.close()


class BatchClient:
    """Pull one epoch from a list of servers ordered by rank.

    Batches are interleaved round-robin: batch k of the epoch is the next
    unread batch from server ``k % S``, skipping servers whose slice ended.
    """

    def __init__(self, addresses: Sequence, trainer_id: int, poll_interval: float = 0.005,
                 timeout: float = 60.0):
        if not addresses:
            raise ValueError("need at least one server address")
        self.addresses = list(addresses)
        self.trainer_id = trainer_id
        self.poll = poll_interval
        self.timeout = timeout
        self.conns = [Connection(a) for a in self.addresses]
        self.waits = 0

    def fetch(self, rank: int, index: int) -> Reply:
        """Block (retrying on wait) until server ``rank`` returns batch or end for ``index``."""
        deadline = time.monotonic() + self.timeout
        while True:
            reply = self.conns[rank].request(self.trainer_id, index)
            if reply.kind != WAIT:
                if reply.index != index:
                    raise ProtocolError(f"asked for batch {index}, got {reply.index}")
                return reply
            self.waits += 1
            if time.monotonic() > deadline:
                raise TimeoutError(f"server {rank} kept answering wait for batch {index}")
            time.sleep(self.poll)

    def iter_replies(self) -> Iterator[tuple[int, Reply]]:
        next_index = [0] * len(self.conns)
        live = list(range(len(self.conns)))
        while live:
            for rank in list(live):
                reply = self.fetch(rank, next_index[rank])
                if reply.kind == END:
                    live.remove(rank)
                    continue
                next_index[rank] += 1
                yield rank, reply

    def __iter__(self) -> Iterator[np.ndarray]:
        for _, reply in self.iter_replies():
            yield reply.array()

    def close(self) -> None:
        for c in self.conns:
            c.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def interleaved_order(slice_lengths: Sequence[int]) -> list[tuple[int, int]]:
    """``(rank, index)`` order in which :class:`BatchClient` yields batches."""
    nxt = [0] * len(slice_lengths)
    live = [r for r, n in enumerate(slice_lengths) if n > 0]
    order = []
    while live:
        for r in list(live):
            order.append((r, nxt[r]))
            nxt[r] += 1
            if nxt[r] == slice_lengths[r]:
                live.remove(r)
    return order
