"""Shared plumbing for the two servers: threaded frame loops, the local-only
admin dump channel, and crash-safe little table files."""

import json
import os
import socket
import socketserver
import threading

from . import protocol
from .errors import CloudVaultError, ConnectionFailure


class FrameServer(socketserver.ThreadingTCPServer):
    """One request frame, one response frame, repeated until the peer hangs up."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, handler):
        self.frame_handler = handler
        super().__init__(addr, _FrameRequestHandler)


class _FrameRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                frame = protocol.read_frame(self.request)
            except CloudVaultError:
                return  # garbled stream; drop the connection
            if frame is None:
                return
            reply = self.server.frame_handler(frame)
            if reply is None:
                return
            try:
                protocol.write_frame(self.request, reply)
            except OSError:
                return


def start_frame_server(host: str, port: int, handler) -> FrameServer:
    server = FrameServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


class AdminDumpServer(socketserver.ThreadingTCPServer):
    """Writes a JSON snapshot of persisted state to anyone who connects.

    Bound to loopback only; this is the audit tap, not a public endpoint.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, dump_callable):
        self.dump_callable = dump_callable
        super().__init__(addr, _AdminRequestHandler)


class _AdminRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        snapshot = self.server.dump_callable()
        payload = json.dumps(
            {name: data.hex() for name, data in sorted(snapshot.items())},
            sort_keys=True,
        ).encode("ascii")
        try:
            self.request.sendall(payload)
        except OSError:
            pass


def start_admin_server(host: str, port: int, dump_callable) -> AdminDumpServer:
    server = AdminDumpServer((host, port), dump_callable)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def fetch_admin_dump(host: str, port: int, timeout: float = 10.0) -> dict[str, bytes]:
    """Pull a server's snapshot: file name -> raw bytes."""
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            chunks = []
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                chunks.append(chunk)
    except OSError as exc:
        raise ConnectionFailure(f"admin dump from {host}:{port}: {exc}") from exc
    obj = json.loads(b"".join(chunks).decode("ascii"))
    return {name: bytes.fromhex(data) for name, data in obj.items()}


# ---------------------------------------------------------------------------
# Table files

def append_line(path: str, line: str) -> None:
    """Durably append one record line."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def write_atomic(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_lines(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]
    except FileNotFoundError:
        return []
