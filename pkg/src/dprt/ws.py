"""Minimal RFC 6455 WebSocket framing so browsers can talk to the service.

Only what the frame-streaming session needs: the HTTP upgrade handshake,
single-fragment binary frames, ping/pong, and close. Each WebSocket binary
message carries exactly one DPRT-framed message.
"""

from __future__ import annotations

import base64
import hashlib
import os
import struct
from typing import Iterator, List, Optional, Tuple

from .errors import DecodeError

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def parse_http_request(data: bytes) -> Tuple[dict, bytes]:
    """Split one HTTP request head into headers and leftover body bytes."""
    end = data.find(b"\r\n\r\n")
    if end < 0:
        raise DecodeError("incomplete HTTP request head")
    head = data[:end].decode("latin-1").split("\r\n")
    headers = {}
    for line in head[1:]:
        if ":" in line:
            name, value = line.split(":", 1)
            headers[name.strip().lower()] = value.strip()
    headers["_request_line"] = head[0]
    return headers, data[end + 4:]


def handshake_response(headers: dict) -> bytes:
    key = headers.get("sec-websocket-key")
    if not key or "upgrade" not in headers.get("connection", "").lower():
        raise DecodeError("not a WebSocket upgrade request")
    return (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept_key(key)}\r\n"
        "\r\n"
    ).encode("ascii")


def handshake_request(host: str, path: str = "/") -> Tuple[bytes, str]:
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    req = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n"
        "\r\n"
    ).encode("ascii")
    return req, key


def encode_ws_frame(payload: bytes, opcode: int = OP_BINARY, mask: bool = False) -> bytes:
    head = bytearray([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head.append(mask_bit | n)
    elif n < (1 << 16):
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        head += key
        masked = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return bytes(head) + masked
    return bytes(head) + payload


class WsReader:
    """Incremental parser for inbound WebSocket frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def frames(self) -> Iterator[Tuple[int, bytes]]:
        """Yield complete (opcode, unmasked payload) frames."""
        while True:
            if len(self._buf) < 2:
                return
            b0, b1 = self._buf[0], self._buf[1]
            if not (b0 & 0x80):
                raise DecodeError("fragmented WebSocket frames are not supported")
            opcode = b0 & 0x0F
            masked = bool(b1 & 0x80)
            length = b1 & 0x7F
            off = 2
            if length == 126:
                if len(self._buf) < 4:
                    return
                (length,) = struct.unpack_from(">H", self._buf, 2)
                off = 4
            elif length == 127:
                if len(self._buf) < 10:
                    return
                (length,) = struct.unpack_from(">Q", self._buf, 2)
                off = 10
            key = b""
            if masked:
                if len(self._buf) < off + 4:
                    return
                key = bytes(self._buf[off:off + 4])
                off += 4
            if len(self._buf) < off + length:
                return
            payload = bytes(self._buf[off:off + length])
            if masked:
                payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
            del self._buf[:off + length]
            yield opcode, payload
