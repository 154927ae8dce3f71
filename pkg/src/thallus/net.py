"""Socket helpers shared by the control and data planes."""

from __future__ import annotations

import socket

from .errors import ConnectError, ConnectionClosed, ListenError


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


def format_address(addr: tuple) -> str:
    return f"{addr[0]}:{addr[1]}"


def listen(address: str, backlog: int = 64) -> socket.socket:
    host, port = parse_address(address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.bind((host, port))
        sock.listen(backlog)
    except OSError as exc:
        sock.close()
        raise ListenError(f"cannot listen on {address}: {exc}") from exc
    return sock


def connect(address: str, timeout: float | None = 10.0) -> socket.socket:
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectError(f"cannot connect to {address}: {exc}") from exc
    sock.settimeout(None)
    tune(sock)
    return sock


def tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def recv_into_exact(sock: socket.socket, view: memoryview, chunk: int = 1 << 18) -> None:
    """Fill ``view`` completely, reading at most ``chunk`` bytes per call."""
    pos, n = 0, len(view)
    while pos < n:
        got = sock.recv_into(view[pos: pos + chunk] if n - pos > chunk else view[pos:])
        if got == 0:
            raise ConnectionClosed("peer closed the connection")
        pos += got


def recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    recv_into_exact(sock, memoryview(buf))
    return buf


def recvmsg_into_exact(sock: socket.socket, views: list[memoryview], budget: int = 1 << 18) -> None:
    """Scatter-receive into ``views`` in order, filling each completely.

    Each syscall covers up to 64 destination regions and ``budget`` bytes.
    Only the last region of a syscall may be truncated, so bytes never land
    in a region while an earlier one still has room.
    """
    pending = [v for v in views if len(v)]
    while pending:
        batch, room = [], budget
        for v in pending[:64]:
            if len(v) >= room:
                batch.append(v[:room])
                break
            batch.append(v)
            room -= len(v)
        got = sock.recvmsg_into(batch)[0]
        if got == 0:
            raise ConnectionClosed("peer closed the connection")
        i = 0
        while got:
            n = min(got, len(batch[i]))
            pending[i] = pending[i][n:]
            got -= n
            i += 1
        pending = [v for v in pending if len(v)]


def sendmsg_all(sock: socket.socket, buffers: list) -> None:
    """Gather-send every buffer in order without joining them."""
    buffers = [memoryview(b).cast("B") for b in buffers if len(b)]
    while buffers:
        sent = sock.sendmsg(buffers[:512])
        while sent:
            if sent >= len(buffers[0]):
                sent -= len(buffers[0])
                buffers.pop(0)
            else:
                buffers[0] = buffers[0][sent:]
                sent = 0
