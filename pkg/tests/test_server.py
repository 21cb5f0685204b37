import socket
import struct
import time

import numpy as np
import pytest

from jumpsae.server import (
    BATCH,
    END,
    ERROR,
    WAIT,
    BatchClient,
    BatchServer,
    BatchSource,
    Connection,
    ProtocolError,
    Reply,
    Request,
    RingBuffer,
    ServerState,
    decode_frame,
    encode_reply,
    encode_request,
    interleaved_order,
    read_frame,
    slice_bounds,
)
from jumpsae.store import ShardDataset, SiteSpec, read_batches, write_shard

SITE = SiteSpec("resid_post_mlp", 0)


@pytest.fixture
def shards(tmp_path):
    rows = np.random.default_rng(0).normal(size=(40 * 8 + 3, 5)).astype(np.float32)
    return [write_shard(tmp_path / "a.ashd", rows[:150], SITE), write_shard(tmp_path / "b.ashd", rows[150:], SITE)]


def test_frame_bytes_are_fixed():
    assert encode_request(Request(7, 9)) == struct.pack("<IBQQ", 17, 1, 7, 9)
    wire = encode_reply(Reply(BATCH, 3, 1, 2, np.array([1.0, 2.0], "<f4").tobytes()))
    assert wire[:4] == struct.pack("<I", 1 + 16 + 8) and wire[4] == BATCH
    assert decode_frame(wire[4:]) == Reply(BATCH, 3, 1, 2, wire[-8:])
    assert decode_frame(encode_request(Request(1, 2))[4:]) == Request(1, 2)


def test_malformed_frames_rejected():
    with pytest.raises(ProtocolError):
        decode_frame(b"\x01\x00\x00")
    with pytest.raises(ProtocolError):
        decode_frame(b"\x63")
    with pytest.raises(ProtocolError):
        Reply(BATCH, 0, 2, 2, b"\0" * 4)


def test_ring_buffer_window():
    rb = RingBuffer(3)
    for k in range(5):
        rb.push(k, bytes([k]))
        assert rb.window() == (max(0, k - 2), k)
    assert rb.get(1) is None and rb.get(4) == b"\x04"
    with pytest.raises(ValueError):
        rb.push(9, b"")


def test_slices_are_contiguous_and_cover():
    bounds = [slice_bounds(41, r, 3) for r in range(3)]
    assert bounds[0][0] == 0 and bounds[-1][1] == 41
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    assert interleaved_order([2, 3]) == [(0, 0), (1, 0), (0, 1), (1, 1), (1, 2)]


def test_handle_request_matches_store_reads(shards):
    src = BatchSource(shards, 8, norm=2.0)
    truth = [b.tobytes() for b in read_batches(shards, 8, norm=2.0)]
    state = ServerState(src, capacity=4, prefetch=0, replay_capacity=2)
    assert state.handle_request(Request(0, 0)).kind == WAIT
    for _ in range(6):
        state.advance()
    assert state.buffer.window() == (2, 5)
    reply = state.handle_request(Request(0, 5))
    assert reply.kind == BATCH and reply.payload == truth[5]
    assert state.handle_request(Request(0, 6)).kind == WAIT
    assert state.handle_request(Request(0, 40)).kind == END

    # below the window: wait now, replay read, then the original payload
    assert state.handle_request(Request(1, 0)).kind == WAIT
    assert state.replay_pending == {0, 1}
    state.replay_pending.clear()
    state.replay[0] = src.read(0)
    assert state.handle_request(Request(1, 0)).payload == truth[0]


def test_sources_with_same_slice_are_identical(shards):
    a, b = BatchSource(shards, 8, rank=1, world=2), BatchSource(shards, 8, rank=1, world=2)
    assert a.start == 20 and a.num_batches == 20
    assert all(a.read(j) == b.read(j) for j in range(a.num_batches))
    assert a.read(0) == ShardDataset(shards).batch(20, 8).tobytes()


def test_client_epoch_over_loopback(shards):
    truth = [b.tobytes() for b in read_batches(shards, 8)]
    with BatchServer(BatchSource(shards, 8, rank=0, world=2), capacity=3) as s0, \
            BatchServer(BatchSource(shards, 8, rank=1, world=2), capacity=3) as s1:
        with BatchClient([s0.address, s1.address], trainer_id=1) as client:
            got = [(r, rep.index, rep.payload) for r, rep in client.iter_replies()]
        assert [(r, i) for r, i, _ in got] == interleaved_order([20, 20])
        for r, i, payload in got:
            assert payload == truth[20 * r + i]

        # a laggard connecting late still gets the full slice via replay
        with BatchClient([s0.address], trainer_id=2) as late:
            assert [b.tobytes() for b in late] == truth[:20]
        assert s0.state.stats["replays"] > 0


def test_ping_and_protocol_error(shards):
    with BatchServer(BatchSource(shards, 8)) as srv:
        conn = Connection(srv.address)
        assert conn.ping()
        conn.close()

        raw = socket.create_connection(srv.address)
        raw.sendall(struct.pack("<IB", 3, 1) + b"xx")
        body = read_frame(raw)
        assert body[0] == ERROR
        time.sleep(0.05)
        assert raw.recv(10) == b""
        raw.close()
