"""Cross-device transmission: framed binary protocol, latest-wins frame
buffer, and a multi-client inference server.

Envelope wire layout (little-endian, detailed byte-exactly in
docs/protocol.md):

    magic "EPN1" | kind u8 | session id (16 bytes) | sequence u64 |
    timestamp u64 (microseconds) | payload length u32 | payload |
    CRC-32 u32 over everything before it

Servers hold one sequential pipeline worker per session. Sensor frames
land in a single-slot latest-wins buffer: a new frame overwrites an
unconsumed one (counted, not an error), so server memory stays bounded
no matter how fast a client sends. Pose results go back to the input
client and to any render subscribers of the same session; a subscriber
that cannot keep up is dropped after a bounded backlog.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import uuid
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import core, pipeline
from .errors import (
    BadMagic,
    BindFailure,
    CrcMismatch,
    TruncatedFrame,
    UnknownKind,
    UnknownModel,
)

MAGIC = b"EPN1"
HEADER_LEN = 4 + 1 + 16 + 8 + 8 + 4
CRC_LEN = 4

PAIRING_WINDOW = 0.008  # seconds between HMD and keypoint timestamps

ERR_UNKNOWN_MODEL = 1
ERR_PROTOCOL = 2
ERR_PIPELINE = 3


class Kind(IntEnum):
    HELLO = 1
    HMD_FRAME = 2
    KEYPOINT_FRAME = 3
    POSE_RESULT = 4
    SUBSCRIBE_RENDER = 5
    ERROR = 6
    PING = 7
    PONG = 8


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    session_id: bytes
    sequence: int
    timestamp: float
    payload: bytes = b""

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise ValueError("session id must be 16 bytes")
        if self.sequence < 0:
            raise ValueError("sequence must be nonnegative")


def encode(env: Envelope) -> bytes:
    micros = max(0, int(round(env.timestamp * 1e6)))
    body = (
        MAGIC
        + struct.pack("<B", int(env.kind))
        + env.session_id
        + struct.pack("<QQI", env.sequence, micros, len(env.payload))
        + env.payload
    )
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> Envelope:
    """Parse one envelope from the start of buf (trailing bytes ignored)."""
    if len(buf) < 4:
        raise TruncatedFrame(f"{len(buf)} bytes is shorter than the magic")
    if buf[:4] != MAGIC:
        raise BadMagic(f"magic bytes {buf[:4]!r}")
    if len(buf) < HEADER_LEN:
        raise TruncatedFrame(f"{len(buf)} bytes is shorter than the header")
    kind_byte = buf[4]
    session_id = bytes(buf[5:21])
    sequence, micros, payload_len = struct.unpack_from("<QQI", buf, 21)
    total = HEADER_LEN + payload_len + CRC_LEN
    if len(buf) < total:
        raise TruncatedFrame(f"declared {payload_len}-byte payload exceeds buffer")
    body = buf[: HEADER_LEN + payload_len]
    (crc,) = struct.unpack_from("<I", buf, HEADER_LEN + payload_len)
    if zlib.crc32(body) != crc:
        raise CrcMismatch("envelope CRC-32 mismatch")
    try:
        kind = Kind(kind_byte)
    except ValueError:
        raise UnknownKind(f"kind byte {kind_byte}") from None
    return Envelope(kind, session_id, sequence, micros / 1e6, bytes(buf[HEADER_LEN:HEADER_LEN + payload_len]))


# ---------------------------------------------------------------------------
# payload bodies (all floats are 8-byte little-endian IEEE doubles)

_POSE_FIELDS = 1 + 3 + 6 + 3 + 6  # t, p, r6, v, w6


def _pack_device(pose: core.DevicePose) -> bytes:
    vals = np.concatenate(
        [[pose.timestamp], pose.position, pose.orientation,
         pose.linear_velocity, pose.angular_velocity]
    )
    return struct.pack(f"<{_POSE_FIELDS}d", *vals)


def _unpack_device(buf, offset) -> core.DevicePose:
    vals = struct.unpack_from(f"<{_POSE_FIELDS}d", buf, offset)
    return core.DevicePose(vals[0], vals[1:4], vals[4:10], vals[10:13], vals[13:19])


def encode_hello(model: str) -> bytes:
    raw = model.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def decode_hello(payload: bytes) -> str:
    (n,) = struct.unpack_from("<H", payload, 0)
    return payload[2:2 + n].decode("utf-8")


def encode_hmd_payload(head, left, right) -> bytes:
    return _pack_device(head) + _pack_device(left) + _pack_device(right)


def decode_hmd_payload(payload: bytes):
    step = _POSE_FIELDS * 8
    return tuple(_unpack_device(payload, i * step) for i in range(3))


def encode_keypoint_payload(z, zeta) -> bytes:
    z = np.asarray(z, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    j = z.shape[0]
    rows = np.concatenate([z, zeta[:, None]], axis=1)
    return struct.pack("<I", j) + struct.pack(f"<{4 * j}d", *rows.ravel())


def decode_keypoint_payload(payload: bytes):
    (j,) = struct.unpack_from("<I", payload, 0)
    rows = np.array(struct.unpack_from(f"<{4 * j}d", payload, 4)).reshape(j, 4)
    return rows[:, :3], rows[:, 3]


def encode_pose_payload(rotations, positions, latencies) -> bytes:
    vals = np.concatenate(
        [np.asarray(rotations, dtype=np.float64).ravel(),
         np.asarray(positions, dtype=np.float64).ravel(),
         np.asarray(latencies, dtype=np.float64).ravel()]
    )
    return struct.pack(f"<{22 * 6 + 22 * 3 + 3}d", *vals)


def decode_pose_payload(payload: bytes):
    vals = np.array(struct.unpack(f"<{22 * 6 + 22 * 3 + 3}d", payload))
    rotations = vals[: 22 * 6].reshape(22, 6)
    positions = vals[22 * 6: 22 * 6 + 22 * 3].reshape(22, 3)
    return rotations, positions, vals[-3:]


def encode_error_payload(code: int, message: str) -> bytes:
    raw = message.encode("utf-8")
    return struct.pack("<HH", code, len(raw)) + raw


def decode_error_payload(payload: bytes):
    code, n = struct.unpack_from("<HH", payload, 0)
    return code, payload[4:4 + n].decode("utf-8")


# ---------------------------------------------------------------------------
# latest-wins frame buffer


class FrameBuffer:
    """Single-slot buffer: push overwrites, take empties. One writer, one
    reader; reads never wait on the writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._frame = None
        self._dropped = 0

    @property
    def dropped(self):
        with self._cond:
            return self._dropped

    def push(self, frame):
        with self._cond:
            if self._frame is not None:
                self._dropped += 1
            self._frame = frame
            self._cond.notify()

    def take_latest(self, timeout: float | None = None):
        """Newest unconsumed frame, or None. timeout > 0 waits for one."""
        with self._cond:
            if self._frame is None and timeout:
                self._cond.wait(timeout)
            frame, self._frame = self._frame, None
            return frame


# ---------------------------------------------------------------------------
# server

_SUBSCRIBER_BACKLOG = 64


def _recv_exact(sock, n):
    chunks = []
    remaining = n
    while remaining > 0:
        try:
            chunk = sock.recv(remaining)
        except OSError:
            return None
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_envelope(sock):
    """Read exactly one framed envelope from a stream socket (None on EOF)."""
    header = _recv_exact(sock, HEADER_LEN)
    if header is None:
        return None
    if header[:4] != MAGIC:
        raise BadMagic(f"stream desynchronized: {header[:4]!r}")
    (payload_len,) = struct.unpack_from("<I", header, HEADER_LEN - 4)
    rest = _recv_exact(sock, payload_len + CRC_LEN)
    if rest is None:
        return None
    return decode(header + rest)


class _Connection:
    """Socket plus a send lock so worker and handler threads can both write."""

    def __init__(self, sock):
        self.sock = sock
        self._lock = threading.Lock()

    def send(self, raw: bytes) -> bool:
        with self._lock:
            try:
                self.sock.sendall(raw)
                return True
            except OSError:
                return False

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _Subscriber:
    """Render client fan-out with a bounded backlog."""

    def __init__(self, conn: _Connection):
        self.conn = conn
        self.queue = queue.Queue(maxsize=_SUBSCRIBER_BACKLOG)
        self.alive = True
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()

    def offer(self, raw: bytes) -> bool:
        try:
            self.queue.put_nowait(raw)
            return True
        except queue.Full:
            self.alive = False
            self.conn.close()
            return False

    def _drain(self):
        while self.alive:
            raw = self.queue.get()
            if raw is None:
                return
            if not self.conn.send(raw):
                self.alive = False

    def stop(self):
        self.alive = False
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            pass


class _ServerSession:
    def __init__(self, server, session_id, conn, model_name):
        self.server = server
        self.session_id = session_id
        self.conn = conn
        self.model_name = model_name
        self.buffer = FrameBuffer()
        self.latest_keypoints = None  # (t, z, zeta)
        self.subscribers = []
        self.sub_lock = threading.Lock()
        self.result_seq = 0
        self.last_sensor_seq = -1
        self.closing = False
        self.pipeline = server.build_session(model_name)
        self.worker = threading.Thread(target=self._work, daemon=True)
        self.worker.start()

    def push_sensor(self, env: Envelope):
        head, left, right = decode_hmd_payload(env.payload)
        kp = None
        latest = self.latest_keypoints
        if latest is not None and abs(latest[0] - head.timestamp) <= PAIRING_WINDOW:
            kp = (latest[1], latest[2])
        self.buffer.push((head, left, right, kp))

    def _work(self):
        while not self.closing:
            bundle = self.buffer.take_latest(timeout=0.05)
            if bundle is None:
                continue
            head, left, right, kp = bundle
            try:
                result = self.pipeline.process_frame(head, left, right, kp)
            except Exception as e:  # pipeline errors stay inside this session
                self.conn.send(
                    encode(
                        Envelope(
                            Kind.ERROR, self.session_id, self.result_seq,
                            head.timestamp,
                            encode_error_payload(ERR_PIPELINE, f"{type(e).__name__}: {e}"),
                        )
                    )
                )
                self.close()
                return
            lat = result.latencies
            payload = encode_pose_payload(
                result.pose.stacked_rotations(),
                result.pose.positions,
                [lat.get("predict", 0.0), lat.get("kpo", 0.0), lat.get("total", 0.0)],
            )
            env = Envelope(
                Kind.POSE_RESULT, self.session_id, self.result_seq, result.timestamp, payload
            )
            self.result_seq += 1
            raw = encode(env)
            self.conn.send(raw)
            with self.sub_lock:
                self.subscribers = [s for s in self.subscribers if s.alive and s.offer(raw)]

    def add_subscriber(self, sub: _Subscriber):
        with self.sub_lock:
            self.subscribers.append(sub)

    def close(self):
        if self.closing:
            return
        self.closing = True
        with self.sub_lock:
            for sub in self.subscribers:
                sub.stop()
            self.subscribers = []
        self.conn.close()
        self.server.drop_session(self.session_id)


class Server:
    """Stream server hosting named models; one pipeline worker per session."""

    def __init__(self, address, registry: dict, tree=None):
        """registry maps model name -> PipelineConfig."""
        host, port = address
        self.registry = dict(registry)
        self.tree = tree or core.default_tree()
        self._predictors = {}
        self._sessions = {}
        self._session_lock = threading.Lock()
        self._closing = False
        try:
            self._listener = socket.create_server((host, port))
        except OSError as e:
            raise BindFailure(f"cannot bind {host}:{port}: {e}") from None
        self.address = self._listener.getsockname()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def build_session(self, model_name: str) -> pipeline.PipelineSession:
        config = self.registry[model_name]
        if model_name not in self._predictors:
            self._predictors[model_name] = pipeline.build_predictor(config, self.tree)
        return pipeline.PipelineSession(config, self.tree, self._predictors[model_name])

    def drop_session(self, session_id):
        with self._session_lock:
            self._sessions.pop(session_id, None)

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(sock,), daemon=True).start()

    def _handle(self, sock):
        conn = _Connection(sock)
        session = None
        subscriber = None
        try:
            while not self._closing:
                try:
                    env = read_envelope(sock)
                except (BadMagic, CrcMismatch, TruncatedFrame, UnknownKind) as e:
                    conn.send(
                        encode(
                            Envelope(
                                Kind.ERROR, b"\x00" * 16, 0, 0.0,
                                encode_error_payload(ERR_PROTOCOL, str(e)),
                            )
                        )
                    )
                    return
                if env is None:
                    return
                if env.kind == Kind.HELLO:
                    if session is not None:
                        conn.send(
                            encode(
                                Envelope(
                                    Kind.ERROR, env.session_id, 0, env.timestamp,
                                    encode_error_payload(ERR_PROTOCOL, "session already open"),
                                )
                            )
                        )
                        return
                    model = decode_hello(env.payload)
                    if model not in self.registry:
                        conn.send(
                            encode(
                                Envelope(
                                    Kind.ERROR, env.session_id, 0, env.timestamp,
                                    encode_error_payload(
                                        ERR_UNKNOWN_MODEL, f"unknown model {model!r}"
                                    ),
                                )
                            )
                        )
                        return
                    session = _ServerSession(self, env.session_id, conn, model)
                    with self._session_lock:
                        self._sessions[env.session_id] = session
                    conn.send(encode(Envelope(Kind.HELLO, env.session_id, 0, env.timestamp)))
                elif env.kind == Kind.SUBSCRIBE_RENDER:
                    with self._session_lock:
                        target = self._sessions.get(env.session_id)
                    if target is None:
                        conn.send(
                            encode(
                                Envelope(
                                    Kind.ERROR, env.session_id, 0, env.timestamp,
                                    encode_error_payload(ERR_PROTOCOL, "no such session"),
                                )
                            )
                        )
                        return
                    subscriber = _Subscriber(conn)
                    target.add_subscriber(subscriber)
                    conn.send(encode(Envelope(Kind.PONG, env.session_id, 0, env.timestamp)))
                elif env.kind == Kind.PING:
                    conn.send(
                        encode(
                            Envelope(
                                Kind.PONG, env.session_id, env.sequence, env.timestamp,
                                env.payload,
                            )
                        )
                    )
                elif env.kind in (Kind.HMD_FRAME, Kind.KEYPOINT_FRAME):
                    if session is None:
                        conn.send(
                            encode(
                                Envelope(
                                    Kind.ERROR, env.session_id, 0, env.timestamp,
                                    encode_error_payload(ERR_PROTOCOL, "HELLO first"),
                                )
                            )
                        )
                        return
                    if env.sequence <= session.last_sensor_seq:
                        conn.send(
                            encode(
                                Envelope(
                                    Kind.ERROR, env.session_id, 0, env.timestamp,
                                    encode_error_payload(
                                        ERR_PROTOCOL, "sequence numbers must increase"
                                    ),
                                )
                            )
                        )
                        return
                    session.last_sensor_seq = env.sequence
                    if env.kind == Kind.HMD_FRAME:
                        session.push_sensor(env)
                    else:
                        z, zeta = decode_keypoint_payload(env.payload)
                        session.latest_keypoints = (env.timestamp, z, zeta)
                else:
                    return
        finally:
            if session is not None:
                session.close()
            elif subscriber is not None:
                subscriber.stop()
            else:
                conn.close()

    def session_count(self):
        with self._session_lock:
            return len(self._sessions)

    def close(self):
        """Stop accepting, drain in-flight work, close all sessions."""
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._session_lock:
            sessions = list(self._sessions.values())
        for s in sessions:
            s.closing = True
        for s in sessions:
            s.worker.join(timeout=2.0)
            s.close()


def serve(address, registry: dict, tree=None) -> Server:
    """Start a server; returns the handle (address resolved, threads running)."""
    return Server(address, registry, tree)


# ---------------------------------------------------------------------------
# client


class Client:
    """Input or render client speaking the envelope protocol."""

    def __init__(self, host, port, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.session_id = uuid.uuid4().bytes
        self._seq = 0

    def _send(self, kind, timestamp, payload=b"", session_id=None):
        env = Envelope(kind, session_id or self.session_id, self._seq, timestamp, payload)
        self._seq += 1
        self.sock.sendall(encode(env))
        return env

    def hello(self, model: str):
        self._send(Kind.HELLO, 0.0, encode_hello(model))
        env = self.recv()
        if env is None:
            raise ConnectionError("server closed during handshake")
        if env.kind == Kind.ERROR:
            code, msg = decode_error_payload(env.payload)
            if code == ERR_UNKNOWN_MODEL:
                raise UnknownModel(msg)
            raise ConnectionError(msg)
        return env

    def subscribe(self, session_id: bytes):
        self._send(Kind.SUBSCRIBE_RENDER, 0.0, session_id=session_id)
        env = self.recv()
        if env is not None and env.kind == Kind.ERROR:
            raise ConnectionError(decode_error_payload(env.payload)[1])
        return env

    def send_hmd(self, head, left, right):
        self._send(Kind.HMD_FRAME, head.timestamp, encode_hmd_payload(head, left, right))

    def send_keypoints(self, t, z, zeta):
        self._send(Kind.KEYPOINT_FRAME, t, encode_keypoint_payload(z, zeta))

    def ping(self, payload=b""):
        self._send(Kind.PING, 0.0, payload)
        return self.recv()

    def recv(self):
        try:
            return read_envelope(self.sock)
        except OSError:
            return None

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass
