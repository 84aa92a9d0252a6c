"""Wire framing, stream decoding, and lockstep tick accounting.

Every message travels as one length-prefixed frame:

    0       4       6              14             18
    +-------+-------+--------------+--------------+-------------+
    | magic | type  | step         | payload len  | payload ... |
    | SBRG  | u16   | u64          | u32          |             |
    +-------+-------+--------------+--------------+-------------+

Integers are little-endian. The step index rides in every frame header so
stale data is detectable without touching the payload. Decoding never
crashes on garbage input: every failure mode is a typed ProtocolError.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional

MAGIC = b"SBRG"
HEADER = struct.Struct("<4sHQI")
HEADER_SIZE = HEADER.size  # 18

# Sanity bound on a single payload. The largest legitimate frame is a
# full-HD camera image (6.2 MB); anything near the u32 ceiling is garbage.
MAX_PAYLOAD = 64 * 1024 * 1024


class MsgType(IntEnum):
    """Registry of frame types. Unknown values are a decode error."""

    TICK = 1              # bridge -> sim: advance to the step in the header
    POINT_CLOUD = 2
    IMAGE = 3
    IMU = 4
    GNSS = 5
    VEHICLE_STATUS = 6
    ACKERMANN_CMD = 7     # av -> bridge
    VEHICLE_CONTROL = 8   # bridge -> sim
    STEERING_REPORT = 9   # bridge -> av
    VELOCITY_REPORT = 10  # bridge -> av
    ODOMETRY = 11         # bridge -> av
    STEP_COMPLETE = 12    # bridge -> av: all data for the header step delivered
    SESSION_END = 13      # either direction: orderly shutdown


class ProtocolError(Exception):
    """Base class for every wire-level failure."""


class TruncatedFrame(ProtocolError):
    """Buffer ends before the frame does. `needed` is the total byte count
    required from the frame start before another attempt makes sense."""

    def __init__(self, got: int, needed: int):
        super().__init__(f"frame truncated: have {got} bytes, need {needed}")
        self.got = got
        self.needed = needed


class BadMagic(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class PayloadTooLarge(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    """Payload bytes do not match the layout its frame type promises."""


class OrderingError(ProtocolError):
    """Lockstep ordering was violated (e.g. data from a future step)."""


class EmptySensorSet(ProtocolError):
    """A tick ledger with nothing to wait for cannot lockstep."""


class ConnectionClosed(ProtocolError):
    """Peer went away mid-frame or before a clean session end."""


@dataclass(frozen=True)
class WireFrame:
    msg_type: MsgType
    step: int
    payload: bytes


def encode_header(msg_type: int, step: int, payload_len: int) -> bytes:
    if payload_len > 0xFFFFFFFF:
        raise PayloadTooLarge(f"payload of {payload_len} bytes exceeds u32 length field")
    return HEADER.pack(MAGIC, int(msg_type), step, payload_len)


def encode_frame(msg_type: int, step: int, payload: bytes = b"") -> bytes:
    """Serialize one frame. Refuses payloads the length field cannot express."""
    return encode_header(msg_type, step, len(payload)) + payload


def decode_frame(buf, offset: int = 0) -> tuple[WireFrame, int]:
    """Decode a single frame from `buf[offset:]`.

    Returns (frame, bytes_consumed). Raises a ProtocolError subclass on any
    malformed or incomplete input; TruncatedFrame in particular means "feed
    me more bytes and retry".
    """
    avail = len(buf) - offset
    if avail < HEADER_SIZE:
        raise TruncatedFrame(avail, HEADER_SIZE)
    magic, raw_type, step, payload_len = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(magic)!r}")
    if raw_type not in MsgType._value2member_map_:
        raise UnknownMessageType(f"message type {raw_type} is not registered")
    if payload_len > MAX_PAYLOAD:
        raise PayloadTooLarge(f"declared payload of {payload_len} bytes exceeds cap {MAX_PAYLOAD}")
    total = HEADER_SIZE + payload_len
    if avail < total:
        raise TruncatedFrame(avail, total)
    payload = bytes(buf[offset + HEADER_SIZE : offset + total])
    return WireFrame(MsgType(raw_type), step, payload), total


class FrameReader:
    """Incremental frame decoder over a connected socket.

    read_frame() blocks up to `timeout` seconds and returns one WireFrame,
    or None on clean EOF at a frame boundary. EOF mid-frame raises
    ConnectionClosed; a blown deadline raises TimeoutError.
    """

    RECV_CHUNK = 1 << 18

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buf = bytearray()

    def read_frame(self, timeout: Optional[float] = None) -> Optional[WireFrame]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                frame, consumed = decode_frame(self._buf)
            except TruncatedFrame:
                pass
            else:
                del self._buf[:consumed]
                return frame
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("timed out waiting for a frame")
                self._sock.settimeout(remaining)
            else:
                self._sock.settimeout(None)
            chunk = self._sock.recv(self.RECV_CHUNK)
            if not chunk:
                if self._buf:
                    raise ConnectionClosed(f"peer closed with {len(self._buf)} bytes of partial frame")
                return None
            self._buf.extend(chunk)


# One step's full sensor burst (release kit: camera + two lidars, ~3.3 MB) must
# fit in the socket buffers, or sendall blocks mid-step waiting on the peer and
# the stall is charged to whatever message happened to be in flight.
STREAM_BUF_BYTES = 4 << 20


def tune_stream(sock: socket.socket) -> socket.socket:
    """Apply the transport settings every lockstep connection needs."""
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    # The kernel silently clamps these to its configured maximums.
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, STREAM_BUF_BYTES)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, STREAM_BUF_BYTES)
    return sock


def dial(host: str, port: int, deadline_s: float = 15.0, retry_s: float = 0.05) -> socket.socket:
    """Connect with retries until `deadline_s`; peers may still be binding."""
    t0 = time.monotonic()
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(retry_s, deadline_s))
        except OSError:
            if time.monotonic() - t0 > deadline_s:
                raise ConnectionClosed(f"could not reach {host}:{port} within {deadline_s}s") from None
            time.sleep(retry_s)
        else:
            return tune_stream(sock)


def send_frame(sock: socket.socket, msg_type: int, step: int, *chunks: bytes) -> int:
    """Write one frame whose payload is the concatenation of `chunks`.

    Chunks are written separately so multi-megabyte payloads are never
    copied just to glue a header on. Returns total bytes written.
    """
    payload_len = sum(len(c) for c in chunks)
    sock.sendall(encode_header(msg_type, step, payload_len))
    for c in chunks:
        if c:
            sock.sendall(c)
    return HEADER_SIZE + payload_len


class SimClock:
    """Fixed-step simulation clock. Time is derived from the step count at
    nanosecond resolution, never accumulated in floating point."""

    def __init__(self, fixed_dt: float, step: int = 0):
        if fixed_dt <= 0:
            raise ValueError(f"fixed_dt must be positive, got {fixed_dt}")
        self.fixed_dt = fixed_dt
        self.step = step
        self._dt_ns = round(fixed_dt * 1e9)

    @property
    def sim_time_ns(self) -> int:
        return self.step * self._dt_ns

    @property
    def sim_time(self) -> float:
        return self.sim_time_ns / 1e9

    def tick(self) -> int:
        self.step += 1
        return self.step

    def __repr__(self) -> str:
        return f"SimClock(step={self.step}, dt={self.fixed_dt})"


class TickDecision(Enum):
    NO_TICK = "no_tick"
    TICK = "tick"
    STALE_DATA = "stale_data"
    UNKNOWN_SENSOR = "unknown_sensor"


@dataclass
class TickLedger:
    """Per-step bookkeeping of which expected sensors have reported.

    The ledger owns the tick decision: exactly one TICK per step, emitted at
    the arrival that completes the expected set, after which the ledger
    rolls to the next step with an empty received set.
    """

    expected: frozenset[str]
    step: int = 0
    received: set[str] = field(default_factory=set)
    stale_frames: int = 0
    unknown_frames: int = 0
    ticks_emitted: int = 0


def register_expected(sensor_ids) -> TickLedger:
    ids = frozenset(sensor_ids)
    if not ids:
        raise EmptySensorSet("cannot lockstep on an empty sensor set")
    return TickLedger(expected=ids)


def on_sensor_arrival(ledger: TickLedger, sensor_id: str, step: int) -> TickDecision:
    """Account for one sensor frame. Mutates the ledger.

    Stale frames (older step) bump a counter and leave the expected-set
    accounting untouched. Frames from a future step can only mean the
    lockstep contract broke, so they raise instead of being absorbed.
    """
    if sensor_id not in ledger.expected:
        ledger.unknown_frames += 1
        return TickDecision.UNKNOWN_SENSOR
    if step < ledger.step:
        ledger.stale_frames += 1
        return TickDecision.STALE_DATA
    if step > ledger.step:
        raise OrderingError(
            f"sensor {sensor_id!r} reported step {step} while the ledger is at {ledger.step}"
        )
    if sensor_id in ledger.received:
        return TickDecision.NO_TICK
    ledger.received.add(sensor_id)
    if ledger.received == ledger.expected:
        ledger.received.clear()
        ledger.step += 1
        ledger.ticks_emitted += 1
        return TickDecision.TICK
    return TickDecision.NO_TICK


@dataclass(frozen=True)
class TimeoutReport:
    step: int
    missing: frozenset[str]
    deadline_s: float

    def __str__(self) -> str:
        names = ", ".join(sorted(self.missing))
        return f"step {self.step} missed its {self.deadline_s}s deadline; missing: {names}"


ArrivalSource = Callable[[float], Optional[tuple[str, int]]]


def await_step_or_timeout(
    ledger: TickLedger,
    next_arrival: ArrivalSource,
    deadline_s: float,
    on_arrival: Optional[Callable[[str, int, TickDecision], None]] = None,
):
    """Drive the ledger from an arrival source until it ticks or time runs out.

    `next_arrival(remaining_s)` returns the next (sensor_id, step) pair or
    None if the source had nothing within its own wait; the deadline here is
    for the whole step. Returns TickDecision.TICK or a TimeoutReport naming
    the sensors still missing. `on_arrival` (if given) observes every
    accounted arrival before a tick is surfaced, which lets callers forward
    data strictly before acting on step completion.
    """
    if deadline_s <= 0:
        raise ValueError(f"step deadline must be positive, got {deadline_s}")
    t0 = time.monotonic()
    while True:
        remaining = deadline_s - (time.monotonic() - t0)
        if remaining <= 0:
            return TimeoutReport(ledger.step, ledger.expected - ledger.received, deadline_s)
        got = next_arrival(remaining)
        if got is None:
            continue
        sensor_id, step = got
        decision = on_sensor_arrival(ledger, sensor_id, step)
        if on_arrival is not None:
            on_arrival(sensor_id, step, decision)
        if decision is TickDecision.TICK:
            return TickDecision.TICK
