"""Length-prefixed JSON framing: a 4-byte big-endian length, then UTF-8 JSON."""

from __future__ import annotations

import json
import socket
import struct
from typing import Any, Optional

HEADER = struct.Struct(">I")
MAX_MESSAGE_SIZE = 16 * 1024 * 1024


class FrameError(ValueError):
    pass


def encode(message: Any) -> bytes:
    body = json.dumps(message, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_MESSAGE_SIZE:
        raise FrameError("message too large")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> Any:
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"malformed message body: {exc}") from exc


def _recv_exactly(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise FrameError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Optional[Any]:
    """Next message, or None on a clean end of stream."""
    header = _recv_exactly(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_MESSAGE_SIZE:
        raise FrameError("message too large")
    body = _recv_exactly(sock, length) if length else b""
    if body is None:
        raise FrameError("connection closed mid-frame")
    return decode_body(body)


def write_frame(sock: socket.socket, message: Any) -> None:
    sock.sendall(encode(message))
