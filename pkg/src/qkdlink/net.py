"""Public classical channel: framing, message taxonomy and transports.

Frame layout (big-endian)::

    magic  'QKDP'   4 bytes
    version         1 byte   (= 1)
    msg_type        1 byte
    session_id      8 bytes
    payload_len     4 bytes  (<= 2**24)
    payload         payload_len bytes

The channel is assumed authenticated; nothing here adds MACs.
"""

from __future__ import annotations

import enum
import io
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

MAGIC = b"QKDP"
VERSION = 1
HEADER = struct.Struct(">4sBBQI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 24


class MsgType(enum.IntEnum):
    HELLO = 1
    SESSION_START = 2
    TRAIN_DONE = 3
    DETECTIONS = 4
    SIFT_MASK = 5
    SYNDROME = 6
    VERIFY_TAG = 7
    BLOCK_DISCARD = 8
    PA_SEED = 9
    FINAL_DIGEST = 10
    ALARM = 11
    ABORT = 12


class NetError(Exception):
    """Base class for public-channel failures."""


class FrameError(NetError):
    """Malformed frame contents (oversize, unknown type, bad payload)."""


class DesyncError(FrameError):
    """Bad magic or version; the stream position can no longer be trusted."""


class TransportError(NetError):
    """Disconnect or truncated stream."""


class ChannelTimeout(NetError):
    """No frame arrived within the receive timeout."""


class ProtocolViolation(NetError):
    """A message arrived that the conversation state does not allow."""


class PeerAbort(NetError):
    """The peer sent ABORT."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    session_id: int = 0
    payload: bytes = b""


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= frame.session_id < 1 << 64:
        raise FrameError("session id out of range")
    return HEADER.pack(MAGIC, VERSION, int(frame.msg_type), frame.session_id, len(frame.payload)) + bytes(frame.payload)


def _read_exact(source, n: int) -> bytes:
    if hasattr(source, "read_exact"):
        return source.read_exact(n)
    parts = []
    need = n
    while need:
        chunk = source.read(need)
        if not chunk:
            raise TransportError(f"stream ended with {need} of {n} bytes missing")
        parts.append(chunk)
        need -= len(chunk)
    return b"".join(parts)


def decode(source) -> Frame:
    """Read exactly one frame from a byte source.

    ``source`` is a file-like object with ``read`` or a stream with
    ``read_exact``. Bytes beyond the frame are never consumed.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(bytes(source))
    head = _read_exact(source, HEADER_SIZE)
    magic, version, mtype, sid, plen = HEADER.unpack(head)
    if magic != MAGIC:
        raise DesyncError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DesyncError(f"unsupported version {version}")
    if plen > MAX_PAYLOAD:
        raise DesyncError(f"declared payload length {plen} exceeds bound")
    try:
        msg_type = MsgType(mtype)
    except ValueError:
        raise FrameError(f"unknown message type {mtype}") from None
    payload = _read_exact(source, plen) if plen else b""
    return Frame(msg_type, sid, payload)


# -- byte streams ------------------------------------------------------------


class _Pipe:
    """One-directional in-memory byte pipe."""

    def __init__(self):
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._closed = False

    def write(self, data: bytes):
        with self._cond:
            if self._closed:
                raise TransportError("pipe closed")
            self._buf += data
            self._cond.notify_all()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def read_exact(self, n: int, timeout: float | None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while len(self._buf) < n:
                if self._closed:
                    raise TransportError("peer closed the channel")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise ChannelTimeout("receive timed out")
                self._cond.wait(remaining)
            out = bytes(self._buf[:n])
            del self._buf[:n]
            return out


class MemoryStream:
    """Duplex endpoint of an in-memory stream pair."""

    def __init__(self, rx: _Pipe, tx: _Pipe):
        self._rx, self._tx = rx, tx
        self.timeout: float | None = None

    def write(self, data: bytes):
        self._tx.write(data)

    def read_exact(self, n: int) -> bytes:
        return self._rx.read_exact(n, self.timeout)

    def close(self):
        self._tx.close()
        self._rx.close()


def memory_pair() -> tuple[MemoryStream, MemoryStream]:
    a, b = _Pipe(), _Pipe()
    return MemoryStream(a, b), MemoryStream(b, a)


class SocketStream:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.timeout: float | None = None

    def write(self, data: bytes):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def read_exact(self, n: int) -> bytes:
        self.sock.settimeout(self.timeout)
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout as exc:
                raise ChannelTimeout("receive timed out") from exc
            except OSError as exc:
                raise TransportError(str(exc)) from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


def tcp_listen(addr: str, accept_timeout: float | None = 30.0) -> SocketStream:
    host, port = parse_address(addr)
    with socket.create_server((host, port), reuse_port=False) as srv:
        srv.settimeout(accept_timeout)
        try:
            conn, _ = srv.accept()
        except socket.timeout as exc:
            raise ChannelTimeout(f"no peer connected to {addr}") from exc
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketStream(conn)


def tcp_dial(addr: str, timeout: float = 30.0) -> SocketStream:
    host, port = parse_address(addr)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            break
        except OSError as exc:
            if time.monotonic() > deadline:
                raise TransportError(f"could not reach {addr}: {exc}") from exc
            time.sleep(0.1)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketStream(sock)


# -- framed channel ------------------------------------------------------------


class PublicChannel:
    """Ordered frame delivery over a reliable byte stream.

    ``capture`` (a binary file) receives every frame sent or received as a
    4-byte big-endian length followed by the encoded frame.
    """

    def __init__(self, stream, timeout: float | None = None, capture=None):
        self.stream = stream
        self.timeout = timeout
        self.capture = capture
        self._wlock = threading.Lock()

    def _log(self, raw: bytes):
        if self.capture is not None:
            self.capture.write(struct.pack(">I", len(raw)) + raw)

    def send(self, frame: Frame):
        raw = encode(frame)
        with self._wlock:
            self.stream.write(raw)
            self._log(raw)

    def receive(self, timeout: float | None = ...) -> Frame:
        self.stream.timeout = self.timeout if timeout is ... else timeout
        frame = decode(self.stream)
        self._log(encode(frame))
        return frame

    def close(self):
        self.stream.close()


def memory_channels(timeout: float | None = 60.0, captures=(None, None)) -> tuple[PublicChannel, PublicChannel]:
    a, b = memory_pair()
    return PublicChannel(a, timeout, captures[0]), PublicChannel(b, timeout, captures[1])


def read_capture(source) -> list[Frame]:
    """Frames from a length-prefixed capture log (path or binary file)."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    frames = []
    pos = 0
    while pos < len(data):
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        frames.append(decode(data[pos : pos + n]))
        pos += n
    return frames


# -- conversation state machine -----------------------------------------------

ALICE, BOB = "alice", "bob"

# (state, msg_type, sender) -> next state. ABORT is legal from every
# non-closed state and leads to "closed".
TRANSITIONS: dict[tuple[str, MsgType, str], str] = {
    ("init", MsgType.HELLO, ALICE): "greeted",
    ("greeted", MsgType.HELLO, BOB): "idle",
    ("idle", MsgType.SESSION_START, ALICE): "session",
    ("session", MsgType.TRAIN_DONE, ALICE): "session",
    ("session", MsgType.DETECTIONS, BOB): "detections",
    ("detections", MsgType.SIFT_MASK, ALICE): "idle",
    ("idle", MsgType.SYNDROME, ALICE): "syndrome",
    ("syndrome", MsgType.VERIFY_TAG, ALICE): "tagged",
    ("tagged", MsgType.SYNDROME, ALICE): "syndrome",
    ("tagged", MsgType.BLOCK_DISCARD, BOB): "idle",
    ("idle", MsgType.PA_SEED, ALICE): "amplifying",
    ("amplifying", MsgType.FINAL_DIGEST, BOB): "digest",
    ("digest", MsgType.FINAL_DIGEST, ALICE): "idle",
    ("idle", MsgType.ALARM, ALICE): "closed",
}

# states in which the stream may end without loss
RESTING_STATES = frozenset({"idle", "closed"})


def legal_successors(state: str) -> set[tuple[MsgType, str]]:
    out = {(t, s) for (st, t, s) in TRANSITIONS if st == state}
    if state != "closed":
        out |= {(MsgType.ABORT, ALICE), (MsgType.ABORT, BOB)}
    return out


class Conversation:
    """Tracks one endpoint's view of the message sequence.

    Every frame sent or received goes through :meth:`send` / :meth:`receive`.
    An illegal incoming frame makes this endpoint emit ABORT and raise
    :class:`ProtocolViolation`.
    """

    def __init__(self, channel: PublicChannel, role: str):
        if role not in (ALICE, BOB):
            raise ValueError(role)
        self.channel = channel
        self.role = role
        self.peer = BOB if role == ALICE else ALICE
        self.state = "init"
        self.session_id = 0

    def _advance(self, msg_type: MsgType, sender: str) -> bool:
        if msg_type == MsgType.ABORT and self.state != "closed":
            self.state = "closed"
            return True
        nxt = TRANSITIONS.get((self.state, msg_type, sender))
        if nxt is None:
            return False
        self.state = nxt
        return True

    def send(self, msg_type: MsgType, payload: bytes = b"", session_id: int | None = None):
        if not self._advance(msg_type, self.role):
            raise ProtocolViolation(f"{self.role} may not send {msg_type.name} in state {self.state}")
        sid = self.session_id if session_id is None else session_id
        self.channel.send(Frame(msg_type, sid, payload))

    def abort(self, reason: str, code: int = 1):
        if self.state == "closed":
            return
        self.state = "closed"
        try:
            self.channel.send(Frame(MsgType.ABORT, self.session_id, encode_abort(code, reason)))
        except NetError:
            pass

    def receive(self, *expected: MsgType, timeout: float | None = ...) -> Frame:
        """Receive the next frame; ``expected`` narrows what is acceptable here."""
        try:
            frame = self.channel.receive(timeout)
        except FrameError as exc:
            self.abort(f"undecodable frame: {exc}", code=2)
            raise
        if frame.msg_type == MsgType.ABORT:
            self.state = "closed"
            code, reason = decode_abort(frame.payload)
            raise PeerAbort(reason)
        before = self.state
        if not self._advance(frame.msg_type, self.peer) or (expected and frame.msg_type not in expected):
            self.state = before
            msg = f"unexpected {frame.msg_type.name} from {self.peer} in state {before}"
            self.abort(msg, code=3)
            raise ProtocolViolation(msg)
        return frame

    @property
    def at_rest(self) -> bool:
        return self.state in RESTING_STATES


# -- payload codecs ------------------------------------------------------------

_U32 = struct.Struct(">I")


def encode_abort(code: int, reason: str) -> bytes:
    return bytes([code & 0xFF]) + reason.encode("utf-8", "replace")[:1024]


def decode_abort(payload: bytes) -> tuple[int, str]:
    if not payload:
        return 0, ""
    return payload[0], payload[1:].decode("utf-8", "replace")


def encode_hello(role: str, first_session_id: int) -> bytes:
    return struct.pack(">BQ", 0 if role == ALICE else 1, first_session_id)


def decode_hello(payload: bytes) -> tuple[str, int]:
    try:
        r, sid = struct.unpack(">BQ", payload)
    except struct.error as exc:
        raise FrameError("bad HELLO payload") from exc
    return (ALICE if r == 0 else BOB), sid


def encode_session_start(trains: int, pulses: int) -> bytes:
    return struct.pack(">II", trains, pulses)


def decode_session_start(payload: bytes) -> tuple[int, int]:
    try:
        return struct.unpack(">II", payload)
    except struct.error as exc:
        raise FrameError("bad SESSION_START payload") from exc


def encode_u32(value: int) -> bytes:
    return _U32.pack(value)


def decode_u32(payload: bytes) -> int:
    try:
        return _U32.unpack(payload)[0]
    except struct.error as exc:
        raise FrameError("bad u32 payload") from exc


_DET = np.dtype([("train", ">u4"), ("pulse", ">u4"), ("basis", "u1")])


def encode_detections(trains, pulses, bases) -> bytes:
    rec = np.empty(len(trains), dtype=_DET)
    rec["train"], rec["pulse"], rec["basis"] = trains, pulses, bases
    return _U32.pack(rec.size) + rec.tobytes()


def decode_detections(payload: bytes):
    if len(payload) < 4:
        raise FrameError("short DETECTIONS payload")
    (count,) = _U32.unpack_from(payload)
    if len(payload) != 4 + count * _DET.itemsize:
        raise FrameError("DETECTIONS length does not match count")
    rec = np.frombuffer(payload, dtype=_DET, offset=4, count=count)
    return (
        rec["train"].astype(np.int64),
        rec["pulse"].astype(np.int64),
        rec["basis"].astype(np.uint8),
    )


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def encode_mask(mask) -> bytes:
    """Run-length code: total (u32), first value (u8), LEB128 run lengths."""
    m = np.asarray(mask, dtype=bool)
    head = _U32.pack(m.size) + bytes([int(m[0]) if m.size else 0])
    if m.size == 0:
        return head
    edges = np.flatnonzero(np.diff(m.view(np.uint8))) + 1
    runs = np.diff(np.concatenate(([0], edges, [m.size])))
    return head + b"".join(_varint(int(r)) for r in runs)


def decode_mask(payload: bytes) -> np.ndarray:
    if len(payload) < 5:
        raise FrameError("short SIFT_MASK payload")
    (total,) = _U32.unpack_from(payload)
    value = bool(payload[4])
    runs = []
    acc = shift = 0
    for b in payload[5:]:
        acc |= (b & 0x7F) << shift
        if b & 0x80:
            shift += 7
            if shift > 35:
                raise FrameError("varint too long")
        else:
            runs.append(acc)
            acc = shift = 0
    if shift:
        raise FrameError("truncated varint")
    if sum(runs) != total or any(r == 0 for r in runs):
        raise FrameError("run lengths do not match mask size")
    vals = np.zeros(len(runs), dtype=bool)
    vals[0::2] = value
    vals[1::2] = not value
    return np.repeat(vals, runs)


def encode_syndrome(block_index: int, rate: float, syndrome) -> bytes:
    s = np.asarray(syndrome, dtype=np.uint8)
    return struct.pack(">IHI", block_index, int(round(rate * 1000)), s.size) + np.packbits(s).tobytes()


def decode_syndrome(payload: bytes):
    try:
        idx, rate_milli, m = struct.unpack_from(">IHI", payload)
    except struct.error as exc:
        raise FrameError("bad SYNDROME payload") from exc
    body = payload[10:]
    if len(body) != (m + 7) // 8:
        raise FrameError("syndrome length mismatch")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), count=m)
    return idx, rate_milli / 1000, bits


SYNDROME_HEADER_BYTES = 10


def encode_tag(block_index: int, hash_seed: bytes, tag: int) -> bytes:
    return _U32.pack(block_index) + hash_seed + tag.to_bytes(8, "big")


def decode_tag(payload: bytes) -> tuple[int, bytes, int]:
    if len(payload) != 28:
        raise FrameError("bad VERIFY_TAG payload")
    return _U32.unpack_from(payload)[0], payload[4:20], int.from_bytes(payload[20:], "big")


# block verdicts carried by BLOCK_DISCARD
KEPT, DECODE_FAILED, TAG_MISMATCH = 0, 1, 2
_VERDICT = struct.Struct(">IBI")


def encode_verdicts(verdicts) -> bytes:
    """``verdicts``: iterable of (block_index, status, error_count)."""
    items = list(verdicts)
    return _U32.pack(len(items)) + b"".join(_VERDICT.pack(*v) for v in items)


def decode_verdicts(payload: bytes) -> list[tuple[int, int, int]]:
    if len(payload) < 4:
        raise FrameError("short BLOCK_DISCARD payload")
    (count,) = _U32.unpack_from(payload)
    if len(payload) != 4 + count * _VERDICT.size:
        raise FrameError("BLOCK_DISCARD length mismatch")
    out = [_VERDICT.unpack_from(payload, 4 + i * _VERDICT.size) for i in range(count)]
    if any(st not in (KEPT, DECODE_FAILED, TAG_MISMATCH) for _, st, _ in out):
        raise FrameError("unknown block status")
    return out


def encode_pa_seed(n_input: int, length: int, toeplitz_seed: bytes, digest_seed: bytes) -> bytes:
    return struct.pack(">II", n_input, length) + toeplitz_seed + digest_seed


def decode_pa_seed(payload: bytes):
    if len(payload) != 40:
        raise FrameError("bad PA_SEED payload")
    n_input, length = struct.unpack_from(">II", payload)
    return n_input, length, payload[8:24], payload[24:40]


DIGEST_TAG, DIGEST_MATCH, DIGEST_MISMATCH = 1, 0, 2


def encode_digest(status: int, tag: int | None = None) -> bytes:
    if status == DIGEST_TAG:
        return bytes([status]) + int(tag).to_bytes(8, "big")
    return bytes([status])


def decode_digest(payload: bytes) -> tuple[int, int | None]:
    if not payload:
        raise FrameError("empty FINAL_DIGEST")
    status = payload[0]
    if status == DIGEST_TAG:
        if len(payload) != 9:
            raise FrameError("bad FINAL_DIGEST payload")
        return status, int.from_bytes(payload[1:], "big")
    if len(payload) != 1 or status not in (DIGEST_MATCH, DIGEST_MISMATCH):
        raise FrameError("bad FINAL_DIGEST payload")
    return status, None


def encode_alarm(qber: float, verified_bits: int) -> bytes:
    return struct.pack(">dI", qber, verified_bits)


def decode_alarm(payload: bytes) -> tuple[float, int]:
    try:
        return struct.unpack(">dI", payload)
    except struct.error as exc:
        raise FrameError("bad ALARM payload") from exc


def key_derived_bits(frame: Frame) -> int:
    """Number of payload bits computed from key material.

    Only SYNDROME bodies, VERIFY_TAG tags and FINAL_DIGEST tags qualify.
    """
    if frame.msg_type == MsgType.SYNDROME:
        return decode_syndrome(frame.payload)[2].size
    if frame.msg_type == MsgType.VERIFY_TAG:
        return 64
    if frame.msg_type == MsgType.FINAL_DIGEST:
        return 64 if decode_digest(frame.payload)[0] == DIGEST_TAG else 0
    return 0
