"""
Minimal RESP2 client: GET, SET, INFO, AUTH and PING over one TCP socket,
with pipelined batches and per-reply round-trip times.
"""

import logging
import socket
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Union

from .exceptions import (
    AuthenticationError,
    ConnectFailedError,
    ConnectionLostError,
    ConnectRefusedError,
    ConnectTimeoutError,
    InfoUnavailableError,
    InvalidParameterError,
    ProtocolDesyncError,
)
from .structs import Endpoint

logger = logging.getLogger()

SYM_STAR = b"*"
SYM_DOLLAR = b"$"
SYM_CRLF = b"\r\n"
SYM_EMPTY = b""

SOCKET_READ_SIZE = 65536
SERVER_CLOSED_CONNECTION_ERROR = "Connection closed by server."


class CommandKind(str, Enum):
    GET = "GET"
    SET = "SET"
    INFO = "INFO"
    AUTH = "AUTH"
    PING = "PING"


@dataclass(frozen=True, slots=True)
class Command:
    kind: CommandKind
    args: tuple[bytes, ...] = ()

    @classmethod
    def get(cls, key: bytes) -> "Command":
        return cls(CommandKind.GET, (key,))

    @classmethod
    def set(cls, key: bytes, value: bytes) -> "Command":
        return cls(CommandKind.SET, (key, value))

    @classmethod
    def info(cls, section: str = "") -> "Command":
        return cls(CommandKind.INFO, (section.encode(),) if section else ())

    @classmethod
    def auth(cls, password: str) -> "Command":
        return cls(CommandKind.AUTH, (password.encode(),))

    @classmethod
    def ping(cls) -> "Command":
        return cls(CommandKind.PING)

    @classmethod
    def from_args(cls, args: list[bytes]) -> "Command":
        if not args:
            raise InvalidParameterError("empty command")
        try:
            kind = CommandKind(args[0].decode().upper())
        except (UnicodeDecodeError, ValueError):
            raise InvalidParameterError(f"unsupported command {args[0]!r}")
        return cls(kind, tuple(args[1:]))

    def pack(self) -> bytes:
        return pack_command(self.kind.value.encode(), *self.args)


class ReplyKind(str, Enum):
    SIMPLE_STRING = "simple-string"
    BULK_STRING = "bulk-string"
    ERROR = "error"
    INTEGER = "integer"
    NIL = "nil"


# parser-level marker for multi-bulk frames, which only the mock server reads
ARRAY = "array"

Frame = tuple[Union[ReplyKind, str], Any]


@dataclass(slots=True)
class Reply:
    kind: ReplyKind
    payload: Union[bytes, int, None]
    rtt_us: float = 0.0

    @property
    def is_error(self) -> bool:
        return self.kind is ReplyKind.ERROR

    @property
    def text(self) -> str:
        if isinstance(self.payload, bytes):
            return self.payload.decode("utf-8", errors="replace")
        return "" if self.payload is None else str(self.payload)


class CommandBatch:
    """Commands written back-to-back before any reply is read."""

    def __init__(self, entries: Iterable[Command], max_depth: int = 1) -> None:
        self.entries = list(entries)
        if not 1 <= len(self.entries) <= max_depth:
            raise InvalidParameterError(
                f"batch of {len(self.entries)} commands exceeds pipeline depth {max_depth}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    def pack(self) -> bytes:
        return pack_commands(self.entries)


def pack_command(*args: bytes) -> bytes:
    """One RESP array of bulk strings."""
    pieces = [SYM_STAR, str(len(args)).encode(), SYM_CRLF]
    for arg in args:
        pieces += (SYM_DOLLAR, str(len(arg)).encode(), SYM_CRLF, arg, SYM_CRLF)
    return SYM_EMPTY.join(pieces)


def pack_commands(commands: Iterable[Command]) -> bytes:
    return SYM_EMPTY.join(c.pack() for c in commands)


class _Incomplete(Exception):
    pass


class RespParser:
    """Incremental frame parser over a growing byte buffer."""

    NEED_MORE: Frame = ("", None)

    def __init__(self) -> None:
        self._buffer = bytearray()
        self._pos = 0

    @property
    def pending(self) -> int:
        return len(self._buffer) - self._pos

    def feed(self, data: bytes) -> None:
        if self._pos and self._pos == len(self._buffer):
            # purge the buffer when we've consumed it all so it doesn't grow forever
            self._buffer.clear()
            self._pos = 0
        self._buffer += data

    def gets(self) -> Frame:
        """Next complete frame, or ``NEED_MORE``."""
        start = self._pos
        try:
            return self._read_frame()
        except _Incomplete:
            self._pos = start
            return self.NEED_MORE

    def _readline(self) -> bytes:
        end = self._buffer.find(SYM_CRLF, self._pos)
        if end < 0:
            raise _Incomplete
        line = bytes(self._buffer[self._pos : end])
        self._pos = end + 2
        return line

    def _read_length(self, raw: bytes, line: bytes) -> int:
        try:
            length = int(raw)
        except ValueError:
            raise ProtocolDesyncError(f"Protocol Error: {line!r}")
        if length < -1:
            raise ProtocolDesyncError(f"Protocol Error: {line!r}")
        return length

    def _read_frame(self) -> Frame:
        line = self._readline()
        byte, response = line[:1], line[1:]

        if byte == b"+":
            return (ReplyKind.SIMPLE_STRING, response)
        if byte == b"-":
            return (ReplyKind.ERROR, response)
        if byte == b":":
            try:
                return (ReplyKind.INTEGER, int(response))
            except ValueError:
                raise ProtocolDesyncError(f"Protocol Error: {line!r}")
        if byte == b"$":
            length = self._read_length(response, line)
            if length == -1:
                return (ReplyKind.NIL, None)
            end = self._pos + length
            if end + 2 > len(self._buffer):
                raise _Incomplete
            if self._buffer[end : end + 2] != SYM_CRLF:
                raise ProtocolDesyncError("Protocol Error: bulk string not terminated")
            data = bytes(self._buffer[self._pos : end])
            self._pos = end + 2
            return (ReplyKind.BULK_STRING, data)
        if byte == b"*":
            length = self._read_length(response, line)
            if length == -1:
                return (ReplyKind.NIL, None)
            items = []
            for _ in range(length):
                kind, payload = self._read_frame()
                if kind is not ReplyKind.BULK_STRING:
                    raise ProtocolDesyncError("Protocol Error: nested array item")
                items.append(payload)
            return (ARRAY, items)
        raise ProtocolDesyncError(f"Protocol Error: {line!r}")


def parse_commands(data: bytes) -> list[Command]:
    """Decode a complete byte stream of command arrays."""
    parser = RespParser()
    parser.feed(data)
    commands = []
    while parser.pending:
        kind, payload = parser.gets()
        if kind != ARRAY:
            raise ProtocolDesyncError("expected a command array")
        commands.append(Command.from_args(payload))
    return commands


@dataclass
class ConnectionStats:
    commands_sent: int = 0
    replies_received: int = 0
    errors: int = 0
    in_flight_at_abort: int = 0

    def balanced(self) -> bool:
        return self.commands_sent == (
            self.replies_received + self.errors + self.in_flight_at_abort
        )


@dataclass
class Connection:
    """One TCP connection, owned by a single worker at a time."""

    endpoint: Endpoint
    sock: Optional[socket.socket]
    stats: ConnectionStats = field(default_factory=ConnectionStats)
    usable: bool = True
    _parser: RespParser = field(default_factory=RespParser)

    def __repr__(self) -> str:
        return f"<Connection {self.endpoint} usable={self.usable}>"

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *args: Any) -> None:
        self.close()

    def close(self) -> None:
        self.usable = False
        if self.sock is None:
            return
        try:
            self.sock.close()
        except OSError:
            pass
        self.sock = None

    def _abort(self, outstanding: int) -> None:
        self.stats.in_flight_at_abort += outstanding
        self.close()

    def _recv_frame(self) -> Frame:
        assert self.sock is not None
        while True:
            frame = self._parser.gets()
            if frame is not RespParser.NEED_MORE:
                return frame
            data = self.sock.recv(SOCKET_READ_SIZE)
            if not data:
                raise ConnectionLostError(SERVER_CLOSED_CONNECTION_ERROR)
            self._parser.feed(data)

    def execute_batch(self, batch: CommandBatch) -> list[Reply]:
        """Write every command, then read one reply per command, in order.

        Server errors come back as error-kind replies. A desync or reset
        marks the connection unusable and counts the unanswered commands
        as in flight.
        """
        if not self.usable or self.sock is None:
            raise ConnectionLostError(f"connection to {self.endpoint} is closed")

        payload = batch.pack()
        replies: list[Reply] = []
        started = time.perf_counter_ns()
        try:
            self.sock.sendall(payload)
        except OSError as e:
            self._abort(len(batch))
            raise ConnectionLostError(f"Error while writing to {self.endpoint}: {e}")
        self.stats.commands_sent += len(batch)

        for _ in batch.entries:
            try:
                kind, data = self._recv_frame()
            except ProtocolDesyncError:
                self._abort(len(batch) - len(replies))
                raise
            except (OSError, ConnectionLostError) as e:
                self._abort(len(batch) - len(replies))
                raise ConnectionLostError(f"Error while reading from {self.endpoint}: {e}")
            if kind == ARRAY:
                self._abort(len(batch) - len(replies))
                raise ProtocolDesyncError("unexpected multi-bulk reply")
            rtt_us = max((time.perf_counter_ns() - started) / 1000.0, 0.001)
            reply = Reply(kind, data, rtt_us)
            if reply.is_error:
                self.stats.errors += 1
            else:
                self.stats.replies_received += 1
            replies.append(reply)
        return replies

    def execute(self, command: Command) -> Reply:
        return self.execute_batch(CommandBatch([command]))[0]

    def ping(self) -> bool:
        reply = self.execute(Command.ping())
        return reply.kind is ReplyKind.SIMPLE_STRING and reply.payload == b"PONG"


def connect(endpoint: Endpoint) -> Connection:
    """Open, configure and (if a password is set) authenticate a connection."""
    try:
        sock = socket.create_connection(
            (endpoint.host, endpoint.port), timeout=endpoint.connect_timeout / 1000.0
        )
    except socket.timeout:
        raise ConnectTimeoutError(f"Timeout connecting to {endpoint}")
    except ConnectionRefusedError:
        raise ConnectRefusedError(f"Connection refused by {endpoint}")
    except OSError as e:
        raise ConnectFailedError(f"Error connecting to {endpoint}. {e}")

    # small request/reply traffic: Nagle would distort tail latency
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(endpoint.socket_timeout / 1000.0)
    conn = Connection(endpoint, sock)

    if endpoint.auth:
        try:
            reply = conn.execute(Command.auth(endpoint.auth))
        except (ConnectionLostError, ProtocolDesyncError, OSError) as e:
            conn.close()
            raise AuthenticationError(f"Authentication against {endpoint} failed: {e}")
        if reply.kind is not ReplyKind.SIMPLE_STRING:
            conn.close()
            raise AuthenticationError(
                f"Authentication against {endpoint} failed: {reply.text}"
            )
    return conn


def parse_info(text: str) -> dict[str, str]:
    """``field:value`` lines of an INFO body; headers and blanks skipped."""
    info: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or ":" not in line:
            continue
        key, _, value = line.partition(":")
        info[key] = value
    return info


def parse_keyspace(value: str) -> dict[str, int]:
    """``keys=10,expires=0,avg_ttl=0`` -> {"keys": 10, ...}"""
    fields: dict[str, int] = {}
    for item in value.split(","):
        name, _, number = item.partition("=")
        try:
            fields[name] = int(number)
        except ValueError:
            continue
    return fields


def fetch_info(conn: Connection, section: str = "") -> dict[str, str]:
    reply = conn.execute(Command.info(section))
    if reply.is_error:
        raise InfoUnavailableError(f"INFO {section or 'default'}: {reply.text}")
    if reply.kind is ReplyKind.NIL:
        return {}
    return parse_info(reply.text)


def keyspace_keys(conn: Connection, db: str = "db0") -> int:
    """Resident keys per INFO keyspace; a database with no line holds none."""
    info = fetch_info(conn, "keyspace")
    return parse_keyspace(info.get(db, "keys=0")).get("keys", 0)
