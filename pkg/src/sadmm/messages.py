"""Binary wire format for master/worker traffic.

Every message travels in one frame::

    magic    4 bytes  b"SADM"
    version  1 byte   1
    msg_type 1 byte
    length   4 bytes  unsigned, little-endian (payload size)
    payload  length bytes

All integers in payloads are little-endian unsigned 32-bit unless noted,
reals are IEEE-754 binary64 little-endian, and arrays are prefixed by their
element count (matrices by row and column counts). Floats are never
converted to text, so every bit pattern survives a round trip.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SADM"
VERSION = 1
HEADER = struct.Struct("<4sBBI")

ASSIGN_SHARD = 1
ROUND_PARAMS = 2
ROUND_RESULT = 3
SHUTDOWN = 4
HELLO = 5
WORKER_ERROR = 6

DIRECTIVE_EXACT = 0
DIRECTIVE_SENSITIVITY = 1
DIRECTIVE_LADMM = 2

SOLVED_EXACT = 0
SOLVED_PREDICTOR = 1
SOLVED_CORRECTED = 2
SOLVED_LADMM = 3
SOLVED_CODES = {SOLVED_EXACT: "e", SOLVED_PREDICTOR: "p", SOLVED_CORRECTED: "c", SOLVED_LADMM: "l"}


class TransportError(Exception):
    """Base class for carrier and protocol failures."""


class ProtocolError(TransportError):
    """Malformed frame or message sequence."""


def _arrays_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


class _Message:
    # field-by-field equality, arrays compared bit for bit
    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not _arrays_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass(eq=False)
class AssignShard(_Message):
    worker_id: int
    config: dict
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    x_init: np.ndarray


@dataclass(eq=False)
class RoundParams(_Message):
    k: int
    x0: np.ndarray
    lam: np.ndarray
    directive: int = DIRECTIVE_EXACT


@dataclass
class RoundStats:
    mode: int = SOLVED_EXACT
    fallback: bool = False
    newton_iters: int = 0
    corrector_iters: int = 0
    linear_solves: int = 0
    loss: float = 0.0
    wall_time: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, RoundStats):
            return NotImplemented
        return self._pack() == other._pack()

    _FMT = struct.Struct("<BBIIIdd")

    def _pack(self):
        return self._FMT.pack(
            self.mode, int(self.fallback), self.newton_iters, self.corrector_iters,
            self.linear_solves, self.loss, self.wall_time,
        )


@dataclass(eq=False)
class RoundResult(_Message):
    k: int
    worker_id: int
    x: np.ndarray
    eps_norm: float
    stats: RoundStats = field(default_factory=RoundStats)

    def __eq__(self, other):
        if type(other) is not RoundResult:
            return NotImplemented
        return (
            self.k == other.k
            and self.worker_id == other.worker_id
            and _arrays_equal(self.x, other.x)
            and struct.pack("<d", self.eps_norm) == struct.pack("<d", other.eps_norm)
            and self.stats == other.stats
        )


@dataclass(eq=False)
class Shutdown(_Message):
    pass


@dataclass(eq=False)
class Hello(_Message):
    worker_id: int


@dataclass(eq=False)
class WorkerError(_Message):
    worker_id: int
    k: int
    message: str


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def text(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def vec(self, a):
        a = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
        self.u32(a.size)
        self.parts.append(a.tobytes())

    def ivec(self, a):
        a = np.ascontiguousarray(a, dtype="<i8").reshape(-1)
        self.u32(a.size)
        self.parts.append(a.tobytes())

    def mat(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        if a.ndim != 2:
            raise ProtocolError("matrix payload must be 2-D")
        self.u32(a.shape[0])
        self.u32(a.shape[1])
        self.parts.append(a.tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ProtocolError("truncated payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def text(self):
        return bytes(self.take(self.u32())).decode("utf-8")

    def vec(self):
        n = self.u32()
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)

    def ivec(self):
        n = self.u32()
        return np.frombuffer(self.take(8 * n), dtype="<i8").astype(np.int64)

    def mat(self):
        r, c = self.u32(), self.u32()
        return np.frombuffer(self.take(8 * r * c), dtype="<f8").astype(float).reshape(r, c)

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing payload bytes")


def encode_payload(m):
    """Return ``(msg_type, payload bytes)`` for a message."""
    w = _Writer()
    if isinstance(m, RoundParams):
        w.u32(m.k)
        w.u8(m.directive)
        w.vec(m.x0)
        w.vec(m.lam)
        return ROUND_PARAMS, w.bytes()
    if isinstance(m, RoundResult):
        w.u32(m.k)
        w.u32(m.worker_id)
        w.vec(m.x)
        w.f64(m.eps_norm)
        w.parts.append(m.stats._pack())
        return ROUND_RESULT, w.bytes()
    if isinstance(m, AssignShard):
        w.u32(m.worker_id)
        w.text(json.dumps(m.config, sort_keys=True))
        w.mat(m.features)
        w.u32(m.n_classes)
        if m.n_classes:
            w.ivec(m.labels)
        else:
            w.mat(np.asarray(m.labels, dtype=float).reshape(len(m.features), -1))
        w.vec(m.x_init)
        return ASSIGN_SHARD, w.bytes()
    if isinstance(m, Shutdown):
        return SHUTDOWN, b""
    if isinstance(m, Hello):
        w.u32(m.worker_id)
        return HELLO, w.bytes()
    if isinstance(m, WorkerError):
        w.u32(m.worker_id)
        w.u32(m.k)
        w.text(m.message)
        return WORKER_ERROR, w.bytes()
    raise ProtocolError(f"cannot encode {type(m).__name__}")


def decode_payload(msg_type, payload):
    r = _Reader(payload)
    if msg_type == ROUND_PARAMS:
        k = r.u32()
        directive = r.u8()
        m = RoundParams(k, r.vec(), r.vec(), directive)
    elif msg_type == ROUND_RESULT:
        k, wid = r.u32(), r.u32()
        x = r.vec()
        eps = r.f64()
        fields = RoundStats._FMT.unpack(r.take(RoundStats._FMT.size))
        stats = RoundStats(fields[0], bool(fields[1]), *fields[2:])
        m = RoundResult(k, wid, x, eps, stats)
    elif msg_type == ASSIGN_SHARD:
        wid = r.u32()
        config = json.loads(r.text())
        features = r.mat()
        n_classes = r.u32()
        labels = r.ivec() if n_classes else r.mat()
        m = AssignShard(wid, config, features, labels, n_classes, r.vec())
    elif msg_type == SHUTDOWN:
        m = Shutdown()
    elif msg_type == HELLO:
        m = Hello(r.u32())
    elif msg_type == WORKER_ERROR:
        m = WorkerError(r.u32(), r.u32(), r.text())
    else:
        raise ProtocolError(f"unknown msg_type {msg_type}")
    r.done()
    return m


def encode(m):
    """Serialize a message into one frame."""
    msg_type, payload = encode_payload(m)
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def parse_header(header):
    """Validate a 10-byte frame header; return ``(msg_type, payload_len)``."""
    if len(header) < HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, version, msg_type, length = HEADER.unpack(bytes(header[:HEADER.size]))
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    return msg_type, length


def decode(frame):
    """Parse exactly one frame back into a message."""
    msg_type, length = parse_header(frame)
    payload = frame[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"payload is {len(payload)} bytes, header says {length}")
    return decode_payload(msg_type, payload)
