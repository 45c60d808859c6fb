"""
In-process RESP2 server for tests and dry runs.

Speaks the same command subset as the client (GET, SET, INFO, AUTH, PING)
and can be told to misbehave: require a password, refuse writes, answer
with garbage after a number of commands, or serve canned INFO sections.
"""

import logging
import socket
import socketserver
import threading
import time
from collections import Counter
from typing import Any, Optional

from .exceptions import ProtocolDesyncError
from .resp import ARRAY, SOCKET_READ_SIZE, RespParser
from .structs import Endpoint

logger = logging.getLogger()

BASE_MEMORY = 1 << 20
GARBAGE_FRAME = b"?garbage\r\n"


def _simple(text: str) -> bytes:
    return b"+" + text.encode() + b"\r\n"


def _error(text: str) -> bytes:
    return b"-" + text.encode() + b"\r\n"


def _bulk(data: Optional[bytes]) -> bytes:
    if data is None:
        return b"$-1\r\n"
    return b"$" + str(len(data)).encode() + b"\r\n" + data + b"\r\n"


class _Session:
    def __init__(self, index: int, authenticated: bool) -> None:
        self.index = index
        self.authenticated = authenticated
        self.commands = 0


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def handle(self) -> None:
        mock = self.server.mock
        session = mock._open_session()
        parser = RespParser()
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while not mock._stopping.is_set():
                data = sock.recv(SOCKET_READ_SIZE)
                if not data:
                    return
                parser.feed(data)
                out = []
                while True:
                    try:
                        kind, payload = parser.gets()
                    except ProtocolDesyncError:
                        sock.sendall(_error("ERR Protocol error"))
                        return
                    if kind == "":
                        break
                    if kind != ARRAY or not payload:
                        out.append(_error("ERR Protocol error: expected array"))
                        continue
                    out.append(mock.handle_command(session, payload))
                if out:
                    sock.sendall(b"".join(out))
        except OSError:
            return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], mock: "MockRespServer") -> None:
        self.mock = mock
        super().__init__(address, _Handler)


class MockRespServer:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        password: Optional[str] = None,
        read_only: bool = False,
        desync_after: Optional[int] = None,
        desync_connections: Optional[int] = None,
        info_sections: Optional[dict[str, dict[str, str]]] = None,
        info_error: bool = False,
        delay: float = 0.0,
        cpu_per_command: float = 1e-6,
    ) -> None:
        self.password = password
        self.read_only = read_only
        self.desync_after = desync_after
        self.desync_connections = desync_connections
        self.info_sections = info_sections
        self.info_error = info_error
        self.delay = delay
        self.cpu_per_command = cpu_per_command

        self.store: dict[bytes, bytes] = {}
        self.command_counts: Counter[str] = Counter()
        self.connections = 0
        self._lock = threading.Lock()
        self._stopping = threading.Event()
        self._server = _TCPServer((host, port), self)
        self._thread: Optional[threading.Thread] = None

    @property
    def endpoint(self) -> Endpoint:
        host, port = self._server.server_address[:2]
        return Endpoint(host=str(host), port=int(port), auth=self.password)

    def start(self) -> "MockRespServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
        )
        self._thread.start()
        logger.debug(f"mock RESP server listening on {self.endpoint}")
        return self

    def stop(self) -> None:
        self._stopping.set()
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockRespServer":
        return self.start()

    def __exit__(self, *args: Any) -> None:
        self.stop()

    def __repr__(self) -> str:
        return f"<MockRespServer {self.endpoint} keys={len(self.store)}>"

    def _open_session(self) -> _Session:
        with self._lock:
            index = self.connections
            self.connections += 1
        return _Session(index, authenticated=self.password is None)

    def _desynced(self, session: _Session) -> bool:
        if self.desync_after is None:
            return False
        if self.desync_connections is not None and session.index >= self.desync_connections:
            return False
        return session.commands > self.desync_after

    def handle_command(self, session: _Session, args: list[bytes]) -> bytes:
        session.commands += 1
        name = args[0].decode(errors="replace").upper()
        with self._lock:
            self.command_counts[name] += 1
        if self.delay:
            time.sleep(self.delay)
        if self._desynced(session):
            return GARBAGE_FRAME

        if name == "AUTH":
            if self.password is None:
                return _error("ERR AUTH <password> called without any password configured")
            if len(args) == 2 and args[1].decode(errors="replace") == self.password:
                session.authenticated = True
                return _simple("OK")
            return _error("WRONGPASS invalid username-password pair or user is disabled.")
        if not session.authenticated:
            return _error("NOAUTH Authentication required.")
        if name == "PING":
            return _simple("PONG")
        if name == "GET" and len(args) == 2:
            with self._lock:
                return _bulk(self.store.get(args[1]))
        if name == "SET" and len(args) == 3:
            if self.read_only:
                return _error("READONLY You can't write against a read only replica.")
            with self._lock:
                self.store[args[1]] = args[2]
            return _simple("OK")
        if name == "INFO":
            if self.info_error:
                return _error("ERR unsupported INFO section")
            section = args[1].decode().lower() if len(args) > 1 else ""
            return _bulk(self.info_text(section).encode())
        return _error(f"ERR unknown command '{name}'")

    def _live_sections(self) -> dict[str, dict[str, str]]:
        with self._lock:
            used = BASE_MEMORY + sum(len(k) + len(v) for k, v in self.store.items())
            total = sum(self.command_counts.values())
            keys = len(self.store)
        cpu = total * self.cpu_per_command
        sections = {
            "server": {"redis_version": "7.2.7", "redis_mode": "standalone"},
            "memory": {"used_memory": str(used)},
            "cpu": {
                "used_cpu_sys": f"{cpu * 0.25:.6f}",
                "used_cpu_user": f"{cpu * 0.75:.6f}",
            },
            "keyspace": {},
        }
        if keys:
            sections["keyspace"]["db0"] = f"keys={keys},expires=0,avg_ttl=0"
        return sections

    def info_text(self, section: str = "") -> str:
        sections = self.info_sections if self.info_sections is not None else self._live_sections()
        if section in ("", "all", "default", "everything"):
            chosen = list(sections)
        elif section in sections:
            chosen = [section]
        else:
            chosen = []
        lines = []
        for name in chosen:
            lines.append(f"# {name.capitalize()}")
            lines += [f"{k}:{v}" for k, v in sections[name].items()]
            lines.append("")
        return "\r\n".join(lines)
