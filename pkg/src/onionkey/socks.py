"""Adapter for a real onion-routing daemon.

Matches the proxy ``torrc`` layout::

    SocksPort 8005
    ControlPort 8006
    CookieAuthentication 1

Messages go out as plain HTTP/1.1 POSTs through SOCKS5 with remote name
resolution, so ``.onion`` names never touch local DNS.  Bodies are the same
bytes the simulated transport carries.  Blocking I/O only; do not call this
from the simulator's scheduler.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import TransportError


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-message")
        buf += chunk
    return buf


def socks5_connect(proxy_host: str, proxy_port: int, dest_host: str, dest_port: int,
                   timeout: float = 60.0) -> socket.socket:
    try:
        sock = socket.create_connection((proxy_host, proxy_port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"SOCKS proxy {proxy_host}:{proxy_port} unreachable: {exc}") from exc
    try:
        sock.sendall(b"\x05\x01\x00")
        if _recv_exact(sock, 2) != b"\x05\x00":
            raise TransportError("SOCKS5 proxy refused no-auth method")
        name = dest_host.encode("idna") if not dest_host.endswith(".onion") else dest_host.encode("ascii")
        if len(name) > 255:
            raise TransportError("destination host name too long for SOCKS5")
        sock.sendall(b"\x05\x01\x00\x03" + bytes([len(name)]) + name + struct.pack(">H", dest_port))
        ver, rep, _, atyp = _recv_exact(sock, 4)
        if ver != 5 or rep != 0:
            raise TransportError(f"SOCKS5 CONNECT failed with reply code {rep}")
        if atyp == 1:
            _recv_exact(sock, 4 + 2)
        elif atyp == 4:
            _recv_exact(sock, 16 + 2)
        elif atyp == 3:
            _recv_exact(sock, _recv_exact(sock, 1)[0] + 2)
        else:
            raise TransportError(f"SOCKS5 reply has unknown address type {atyp}")
        return sock
    except BaseException:
        sock.close()
        raise


class ControlConnection:
    """Minimal control-port client: cookie AUTHENTICATE and SIGNAL NEWNYM."""

    def __init__(self, host: str = "127.0.0.1", port: int = 8006, cookie_path: str | Path | None = None,
                 timeout: float = 10.0):
        self.host, self.port = host, port
        self.cookie_path = cookie_path
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._file = None

    def _command(self, line: str) -> list[str]:
        assert self._sock is not None
        self._sock.sendall(line.encode("ascii") + b"\r\n")
        replies = []
        while True:
            raw = self._file.readline()
            if not raw:
                raise TransportError("control connection closed")
            text = raw.decode("ascii", "replace").rstrip("\r\n")
            replies.append(text)
            if len(text) >= 4 and text[3] == " ":
                break
        if not replies[-1].startswith("250"):
            raise TransportError(f"control command {line.split()[0]} failed: {replies[-1]}")
        return replies

    def connect(self) -> "ControlConnection":
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"control port {self.host}:{self.port} unreachable: {exc}") from exc
        self._file = self._sock.makefile("rb")
        cookie = b""
        if self.cookie_path is not None:
            try:
                cookie = Path(self.cookie_path).read_bytes()
            except OSError as exc:
                self.close()
                raise TransportError(f"cannot read control auth cookie: {exc}") from exc
        try:
            self._command(f"AUTHENTICATE {cookie.hex()}" if cookie else "AUTHENTICATE")
        except TransportError:
            self.close()
            raise
        return self

    def signal_newnym(self) -> None:
        self._command("SIGNAL NEWNYM")

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._file = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()


@dataclass
class HttpResponse:
    status: int
    body: bytes


def http_post(sock: socket.socket, host: str, path: str, body: bytes) -> HttpResponse:
    head = (f"POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\n"
            f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n").encode("ascii")
    sock.sendall(head + body)
    data = b""
    while True:
        chunk = sock.recv(65536)
        if not chunk:
            break
        data += chunk
    header, _, payload = data.partition(b"\r\n\r\n")
    try:
        status = int(header.split(b" ", 2)[1])
    except (IndexError, ValueError) as exc:
        raise TransportError("malformed HTTP response") from exc
    return HttpResponse(status, payload)


class SocksTransport:
    """Same ``newnym``/``send`` surface as the simulated endpoint transport."""

    def __init__(self, socks_host: str = "127.0.0.1", socks_port: int = 8005,
                 control_port: int = 8006, cookie_path: str | Path | None = None,
                 service_port: int = 80, stabilization_s: float = 0.0):
        self.socks_host, self.socks_port = socks_host, socks_port
        self.control = ControlConnection(socks_host, control_port, cookie_path)
        self.service_port = service_port
        self.stabilization_s = stabilization_s
        self.epoch = 0

    def newnym(self) -> int:
        if self.control._sock is None:
            self.control.connect()
        self.control.signal_newnym()
        self.epoch += 1
        if self.stabilization_s:
            time.sleep(self.stabilization_s)
        return self.epoch

    def send(self, destination: str, path: str, payload: bytes) -> HttpResponse:
        host, _, port = destination.partition(":")
        sock = socks5_connect(self.socks_host, self.socks_port, host, int(port or self.service_port))
        try:
            resp = http_post(sock, host, path, payload)
        finally:
            sock.close()
        if resp.status >= 400:
            raise TransportError(f"{destination}{path} answered HTTP {resp.status}")
        return resp

    def close(self) -> None:
        self.control.close()
