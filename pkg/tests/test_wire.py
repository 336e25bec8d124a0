import struct

import numpy as np
import pytest

from flagcns import cipher as C
from flagcns.wire import (CONTROLLER, FrameError, InprocHub, Message, ProtocolError, ReplayHub, ReplayMismatch,
                          RoundTracker, Transcript, TranscriptEntry, TransportError, decode_frame, encode_frame,
                          transport_from_env)


def sample_message(round_=1):
    cv = C.encrypt(np.array([0.5, -1.0, 3.25]), C.CipherContext("plain", 1, 0), weight=0.5)
    return Message("LossReport", "run-x", 2, round_, {"generation": 4, "codes": [[1, None]]}, [cv, cv])


def test_frame_round_trip():
    m = sample_message()
    out = decode_frame(encode_frame(m))
    assert (out.tag, out.run_id, out.sender, out.round, out.body) == (m.tag, m.run_id, m.sender, m.round, m.body)
    assert len(out.ciphers) == 2
    np.testing.assert_array_equal(out.ciphers[1].payload, m.ciphers[1].payload)
    assert out.ciphers[0].weight == 0.5


def test_frame_layout():
    frame = encode_frame(sample_message())
    magic, hlen, plen = struct.unpack_from("<4sII", frame)
    assert magic == b"FLG1"
    assert plen == 2 * 3 * 8
    assert len(frame) == 12 + hlen + plen + 32
    assert frame[12:13] == b"{"


def test_encoding_is_deterministic():
    assert encode_frame(sample_message()) == encode_frame(sample_message())


@pytest.mark.parametrize("pos", [5, 20, -40, -1])
def test_any_flipped_bit_is_detected(pos):
    frame = bytearray(encode_frame(sample_message()))
    frame[pos] ^= 0x01
    with pytest.raises(FrameError):
        decode_frame(bytes(frame))


def test_truncated_frame_rejected():
    frame = encode_frame(sample_message())
    with pytest.raises(FrameError):
        decode_frame(frame[:-1])


def test_unknown_tag_rejected():
    with pytest.raises(ProtocolError):
        Message("Bogus", "r", 0, 1)


def test_round_tracker():
    t = RoundTracker("run-x")
    t.check(sample_message(1))
    t.check(sample_message(3))
    with pytest.raises(ProtocolError, match="regression"):
        t.check(sample_message(3))
    with pytest.raises(ProtocolError, match="run"):
        RoundTracker("other").check(sample_message(1))


def test_transcript_serialization():
    t = Transcript([TranscriptEntry("c2s", 1, b"abc"), TranscriptEntry("s2c", CONTROLLER, b"")])
    back = Transcript.from_bytes(t.to_bytes())
    assert [(e.direction, e.client, e.frame) for e in back] == [("c2s", 1, b"abc"), ("s2c", -1, b"")]
    assert back.byte_count() == 3


class Echo:
    def __init__(self, cid):
        self.cid = cid

    def start(self):
        return [encode_frame(Message("Hello", "r", self.cid, 1))]

    def handle_frame(self, frame):
        m = decode_frame(frame)
        return [encode_frame(Message("FinalEvalReport", "r", self.cid, m.round + 1, {"echo": m.body}))]


def test_inproc_hub_counts_bytes_and_replays():
    hub = InprocHub([Echo(0), Echo(1)])
    assert decode_frame(hub.recv(0)).tag == "Hello"
    frame = encode_frame(Message("Shutdown", "r", CONTROLLER, 1, {"x": 1}))
    hub.send(1, frame)
    assert decode_frame(hub.recv(1)).tag == "Hello"
    reply = hub.recv(1)
    assert decode_frame(reply).body == {"echo": {"x": 1}}
    assert hub.messages == 4 and hub.bytes == sum(len(e.frame) for e in hub.transcript)
    with pytest.raises(TransportError):
        hub.recv(0)
    with pytest.raises(TransportError):
        hub.send(5, frame)

    replay = ReplayHub(hub.transcript, 2)
    replay.recv(0)
    replay.send(1, frame)
    replay.recv(1)
    assert replay.recv(1) == reply
    assert replay.exhausted()
    with pytest.raises(ReplayMismatch):
        ReplayHub(hub.transcript, 2).send(1, frame[:-1] + bytes([frame[-1] ^ 1]))


def test_transport_env(monkeypatch):
    monkeypatch.setenv("FLAGCNS_TRANSPORT", "socket")
    assert transport_from_env() == "socket"
    monkeypatch.setenv("FLAGCNS_TRANSPORT", "carrier-pigeon")
    with pytest.raises(TransportError):
        transport_from_env()
