import io
import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdlink import net
from qkdlink.net import Frame, MsgType


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class CountingReader(io.BytesIO):
    """Records how many bytes a decoder pulled from the source."""

    def __init__(self, data):
        super().__init__(data)
        self.consumed = 0

    def read(self, n=-1):
        out = super().read(n)
        self.consumed += len(out)
        return out


def test_header_is_eighteen_bytes():
    raw = net.encode(Frame(MsgType.HELLO, 7, b"abc"))
    assert net.HEADER_SIZE == 18
    assert len(raw) == 21
    assert raw[:4] == b"QKDP"
    assert raw[4] == 1 and raw[5] == MsgType.HELLO
    assert struct.unpack(">Q", raw[6:14])[0] == 7
    assert struct.unpack(">I", raw[14:18])[0] == 3


@settings(max_examples=200)
@given(st.sampled_from(list(MsgType)), st.integers(0, (1 << 64) - 1), st.binary(max_size=2048))
def test_roundtrip(mtype, sid, payload):
    f = Frame(mtype, sid, payload)
    assert net.decode(net.encode(f)) == f


def test_empty_payload():
    assert net.decode(net.encode(Frame(MsgType.TRAIN_DONE, 1))) == Frame(MsgType.TRAIN_DONE, 1, b"")


def test_oversize_rejected_both_ways():
    with pytest.raises(net.FrameError):
        net.encode(Frame(MsgType.SYNDROME, 0, bytes(net.MAX_PAYLOAD + 1)))
    head = net.HEADER.pack(b"QKDP", 1, MsgType.SYNDROME, 0, net.MAX_PAYLOAD + 1)
    src = CountingReader(head + bytes(100))
    with pytest.raises(net.FrameError):
        net.decode(src)
    # the bogus length is never followed
    assert src.consumed == net.HEADER_SIZE


def test_bad_magic_and_version():
    good = net.encode(Frame(MsgType.HELLO, 0, b""))
    with pytest.raises(net.DesyncError):
        net.decode(b"XKDP" + good[4:])
    with pytest.raises(net.DesyncError):
        net.decode(good[:4] + b"\x02" + good[5:])


def test_unknown_type():
    raw = bytearray(net.encode(Frame(MsgType.HELLO)))
    raw[5] = 99
    with pytest.raises(net.FrameError):
        net.decode(bytes(raw))


def test_truncated_stream():
    raw = net.encode(Frame(MsgType.SYNDROME, 0, bytes(50)))
    with pytest.raises(net.TransportError):
        net.decode(raw[:10])
    with pytest.raises(net.TransportError):
        net.decode(raw[:-1])


def test_concatenated_frames_decode_in_order():
    frames = [Frame(MsgType(t), i, bytes([i]) * i) for i, t in enumerate([1, 2, 3, 3, 4, 5])]
    src = io.BytesIO(b"".join(net.encode(f) for f in frames))
    assert [net.decode(src) for _ in frames] == frames
    assert src.read() == b""


@settings(max_examples=300)
@given(st.binary(min_size=0, max_size=200), st.binary(max_size=64))
def test_fuzz_reads_are_bounded(junk, tail):
    # garbage either decodes to one frame or raises a NetError, and the
    # decoder never reads past the frame it declares
    src = CountingReader(junk + tail)
    try:
        f = net.decode(src)
    except net.NetError:
        assert src.consumed <= max(net.HEADER_SIZE, len(junk + tail))
        return
    assert src.consumed == net.HEADER_SIZE + len(f.payload)


def test_memory_channel_timeout_vs_disconnect():
    a, b = net.memory_channels(timeout=0.05)
    t0 = time.monotonic()
    with pytest.raises(net.ChannelTimeout):
        b.receive()
    assert time.monotonic() - t0 < 1.0
    a.close()
    with pytest.raises(net.TransportError):
        b.receive()


def test_conversation_happy_path():
    a_ch, b_ch = net.memory_channels(timeout=1.0)
    alice, bob = net.Conversation(a_ch, net.ALICE), net.Conversation(b_ch, net.BOB)
    alice.send(MsgType.HELLO, net.encode_hello(net.ALICE, 1))
    assert net.decode_hello(bob.receive(MsgType.HELLO).payload) == (net.ALICE, 1)
    bob.send(MsgType.HELLO, net.encode_hello(net.BOB, 1))
    alice.receive(MsgType.HELLO)
    assert alice.at_rest and bob.at_rest
    alice.send(MsgType.SESSION_START, net.encode_session_start(2, 10), session_id=1)
    assert not alice.at_rest
    bob.receive()
    alice.send(MsgType.TRAIN_DONE)
    bob.receive()
    bob.send(MsgType.DETECTIONS, net.encode_detections([], [], []))
    alice.receive()
    alice.send(MsgType.SIFT_MASK, net.encode_mask([]))
    bob.receive()
    assert alice.state == bob.state == "idle"


def test_illegal_sequence_aborts():
    a_ch, b_ch = net.memory_channels(timeout=1.0)
    bob = net.Conversation(b_ch, net.BOB)
    # Alice skips the handshake
    a_ch.send(Frame(MsgType.SYNDROME, 0, b""))
    with pytest.raises(net.ProtocolViolation):
        bob.receive()
    assert bob.state == "closed"
    reply = a_ch.receive()
    assert reply.msg_type == MsgType.ABORT
    code, reason = net.decode_abort(reply.payload)
    assert code == 3 and "SYNDROME" in reason


def test_peer_abort_raises():
    a_ch, b_ch = net.memory_channels(timeout=1.0)
    alice, bob = net.Conversation(a_ch, net.ALICE), net.Conversation(b_ch, net.BOB)
    alice.abort("operator stop")
    with pytest.raises(net.PeerAbort, match="operator stop"):
        bob.receive()
    assert bob.state == "closed"


def test_send_rejects_illegal_own_message():
    a_ch, _ = net.memory_channels()
    alice = net.Conversation(a_ch, net.ALICE)
    with pytest.raises(net.ProtocolViolation):
        alice.send(MsgType.PA_SEED)


def test_undecodable_frame_aborts():
    a_stream, b_stream = net.memory_pair()
    b_ch = net.PublicChannel(b_stream, 1.0)
    bob = net.Conversation(b_ch, net.BOB)
    a_stream.write(b"JUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(net.DesyncError):
        bob.receive()
    a_stream.timeout = 1.0
    assert net.decode(a_stream).msg_type == MsgType.ABORT


def test_every_state_allows_abort():
    states = {s for (s, _, _) in net.TRANSITIONS} | set(net.TRANSITIONS.values())
    for s in states - {"closed"}:
        assert (MsgType.ABORT, net.BOB) in net.legal_successors(s)
    assert net.legal_successors("closed") == set()


@settings(max_examples=100)
@given(st.lists(st.booleans(), max_size=300))
def test_mask_codec(bits):
    m = np.array(bits, dtype=bool)
    assert np.array_equal(net.decode_mask(net.encode_mask(m)), m)


def test_mask_codec_is_compact():
    m = np.zeros(100_000, dtype=bool)
    m[50_000:] = True
    assert len(net.encode_mask(m)) < 12


def test_mask_codec_rejects_inconsistent():
    bad = struct.pack(">I", 10) + b"\x01" + bytes([3, 3])
    with pytest.raises(net.FrameError):
        net.decode_mask(bad)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.65, 0.75, 0.9]), st.lists(st.integers(0, 1), max_size=200))
def test_syndrome_codec(idx, rate, bits):
    payload = net.encode_syndrome(idx, rate, bits)
    i, r, s = net.decode_syndrome(payload)
    assert (i, r) == (idx, rate)
    assert s.tolist() == bits
    assert net.key_derived_bits(Frame(MsgType.SYNDROME, 0, payload)) == len(bits)


def test_small_codecs():
    assert net.decode_tag(net.encode_tag(3, bytes(range(16)), 2**63 + 5)) == (3, bytes(range(16)), 2**63 + 5)
    v = [(0, net.KEPT, 12), (1, net.DECODE_FAILED, 400), (2, net.TAG_MISMATCH, 9)]
    assert net.decode_verdicts(net.encode_verdicts(v)) == v
    assert net.decode_pa_seed(net.encode_pa_seed(100, 40, b"a" * 16, b"b" * 16)) == (100, 40, b"a" * 16, b"b" * 16)
    assert net.decode_digest(net.encode_digest(net.DIGEST_TAG, 77)) == (net.DIGEST_TAG, 77)
    assert net.decode_digest(net.encode_digest(net.DIGEST_MATCH)) == (net.DIGEST_MATCH, None)
    assert net.decode_alarm(net.encode_alarm(0.12, 4096)) == (0.12, 4096)
    assert net.decode_session_start(net.encode_session_start(1000, 2400)) == (1000, 2400)
    t, p, b = net.decode_detections(net.encode_detections([1, 2], [5, 2399], [0, 1]))
    assert t.tolist() == [1, 2] and p.tolist() == [5, 2399] and b.tolist() == [0, 1]
    with pytest.raises(net.FrameError):
        net.decode_verdicts(net.encode_verdicts(v)[:-1])
    with pytest.raises(net.FrameError):
        net.decode_digest(b"\x07")


def test_key_derived_bits_only_for_key_frames():
    assert net.key_derived_bits(Frame(MsgType.VERIFY_TAG, 0, net.encode_tag(0, bytes(16), 1))) == 64
    assert net.key_derived_bits(Frame(MsgType.FINAL_DIGEST, 0, net.encode_digest(net.DIGEST_TAG, 1))) == 64
    assert net.key_derived_bits(Frame(MsgType.FINAL_DIGEST, 0, net.encode_digest(net.DIGEST_MATCH))) == 0
    assert net.key_derived_bits(Frame(MsgType.SIFT_MASK, 0, net.encode_mask([1, 0]))) == 0
    assert net.key_derived_bits(Frame(MsgType.PA_SEED, 0, net.encode_pa_seed(1, 1, bytes(16), bytes(16)))) == 0


def test_capture_log(tmp_path):
    path = tmp_path / "cap.bin"
    with open(path, "wb") as fh:
        a, b = net.memory_channels(1.0, (fh, None))
        a.send(Frame(MsgType.HELLO, 0, b"x"))
        b.send(Frame(MsgType.HELLO, 0, b"y"))
        a.receive()
    assert [f.payload for f in net.read_capture(path)] == [b"x", b"y"]


def test_tcp_channel():
    addr = f"127.0.0.1:{free_port()}"
    got = {}

    def server():
        s = net.tcp_listen(addr, 5.0)
        ch = net.PublicChannel(s, 5.0)
        got["frame"] = ch.receive()
        ch.send(Frame(MsgType.HELLO, 2, b"pong"))
        ch.close()

    t = threading.Thread(target=server)
    t.start()
    ch = net.PublicChannel(net.tcp_dial(addr, 5.0), 5.0)
    ch.send(Frame(MsgType.HELLO, 1, b"ping" * 1000))
    assert ch.receive() == Frame(MsgType.HELLO, 2, b"pong")
    t.join()
    assert got["frame"] == Frame(MsgType.HELLO, 1, b"ping" * 1000)
    with pytest.raises(net.TransportError):
        ch.receive()
    ch.close()


def test_tcp_timeout():
    addr = f"127.0.0.1:{free_port()}"
    done = threading.Event()

    def server():
        s = net.tcp_listen(addr, 5.0)
        done.wait(5)
        s.close()

    t = threading.Thread(target=server)
    t.start()
    ch = net.PublicChannel(net.tcp_dial(addr, 5.0), 0.1)
    with pytest.raises(net.ChannelTimeout):
        ch.receive()
    done.set()
    t.join()
    ch.close()


def test_dial_unreachable():
    with pytest.raises(net.TransportError):
        net.tcp_dial(f"127.0.0.1:{free_port()}", timeout=0.3)


@pytest.mark.parametrize("addr", ["nohost", "host:", ":80", "h:x"])
def test_parse_address_rejects(addr):
    with pytest.raises(ValueError):
        net.parse_address(addr)
