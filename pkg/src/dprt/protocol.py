"""DPRT wire framing and the service message codecs.

Every message on a socket is framed as: 4-byte magic "DPRT", 1-byte
message kind, 4-byte little-endian payload length, payload. Camera updates
carry a UTF-8 JSON payload; frames carry a 17-byte fixed header followed
by raw RGB8 pixels, row-major, top row first.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, List, Tuple, Union

from .errors import DecodeError
from .geom import Vec3

MAGIC = b"DPRT"
HEADER = struct.Struct("<4sBI")
FRAME_HEADER = struct.Struct("<IIBII")  # width, height, format, sequence, renderMillis

FORMAT_RGB8 = 0

MIN_DIMENSION = 16
MAX_DIMENSION = 8192


class MsgKind(IntEnum):
    RAY_BATCH = 1
    TILE = 2
    BARRIER = 3
    CONTROL = 4
    CAMERA_UPDATE = 5
    FRAME = 6


_KIND_VALUES = {int(k) for k in MsgKind}


def encode_frame(kind: MsgKind, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, int(kind), len(payload)) + payload


def decode_frame(data: bytes, offset: int = 0) -> Tuple[MsgKind, bytes, int]:
    """Decode one frame at `offset`; returns (kind, payload, next offset)."""
    if len(data) - offset < HEADER.size:
        raise DecodeError(
            f"truncated header at offset {offset}: need {HEADER.size} bytes, have {len(data) - offset}")
    magic, kind, length = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise DecodeError(f"bad magic at offset {offset}")
    if kind not in _KIND_VALUES:
        raise DecodeError(f"unknown msgKind {kind} at offset {offset + 4}")
    body_start = offset + HEADER.size
    if len(data) - body_start < length:
        raise DecodeError(
            f"truncated payload at offset {body_start}: need {length} bytes, have {len(data) - body_start}")
    return MsgKind(kind), bytes(data[body_start:body_start + length]), body_start + length


class FrameParser:
    """Incremental frame splitter for a byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._base_offset = 0  # absolute offset of buf[0] in the stream

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)

    def frames(self) -> Iterator[Tuple[MsgKind, bytes]]:
        """Yield every complete frame buffered so far."""
        while True:
            if len(self._buf) < HEADER.size:
                return
            magic, kind, length = HEADER.unpack_from(self._buf, 0)
            if magic != MAGIC:
                raise DecodeError(f"bad magic at offset {self._base_offset}")
            if kind not in _KIND_VALUES:
                raise DecodeError(f"unknown msgKind {kind} at offset {self._base_offset + 4}")
            total = HEADER.size + length
            if len(self._buf) < total:
                return
            payload = bytes(self._buf[HEADER.size:total])
            del self._buf[:total]
            self._base_offset += total
            yield MsgKind(kind), payload


@dataclass(frozen=True)
class CameraUpdateMessage:
    position: Vec3
    view_dir: Vec3
    up: Vec3
    fov_y: float
    width: int
    height: int


@dataclass(frozen=True)
class FrameMessage:
    width: int
    height: int
    sequence: int
    render_millis: int
    pixels: bytes
    format: int = FORMAT_RGB8


@dataclass(frozen=True)
class ControlMessage:
    data: dict


Message = Union[CameraUpdateMessage, FrameMessage, ControlMessage]


def _vec3_field(obj: dict, key: str) -> Vec3:
    v = obj.get(key)
    if not (isinstance(v, list) and len(v) == 3 and
            all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
        raise DecodeError(f"camera update field {key!r} must hold 3 numbers")
    return (float(v[0]), float(v[1]), float(v[2]))


def _decode_camera_update(payload: bytes) -> CameraUpdateMessage:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"camera update payload is not UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("camera update payload must be a JSON object")
    pos = _vec3_field(obj, "pos")
    direction = _vec3_field(obj, "dir")
    up = _vec3_field(obj, "up")
    fovy = obj.get("fovy")
    if not isinstance(fovy, (int, float)) or isinstance(fovy, bool) or not (0.0 < fovy < 180.0):
        raise DecodeError(f"camera update field 'fovy' must be in (0, 180), got {fovy!r}")
    w, h = obj.get("w"), obj.get("h")
    for name, val in (("w", w), ("h", h)):
        if not isinstance(val, int) or isinstance(val, bool) or not (MIN_DIMENSION <= val <= MAX_DIMENSION):
            raise DecodeError(
                f"camera update field {name!r} must be an integer in [{MIN_DIMENSION}, {MAX_DIMENSION}]")
    dlen = math.sqrt(sum(c * c for c in direction))
    if abs(dlen - 1.0) > 1e-6:
        raise DecodeError("camera update field 'dir' must be normalized")
    cx = direction[1] * up[2] - direction[2] * up[1]
    cy = direction[2] * up[0] - direction[0] * up[2]
    cz = direction[0] * up[1] - direction[1] * up[0]
    if cx * cx + cy * cy + cz * cz == 0.0:
        raise DecodeError("camera update fields 'dir' and 'up' must not be parallel")
    return CameraUpdateMessage(pos, direction, up, float(fovy), w, h)


def _decode_frame_message(payload: bytes) -> FrameMessage:
    if len(payload) < FRAME_HEADER.size:
        raise DecodeError(
            f"frame payload truncated: need {FRAME_HEADER.size} header bytes, have {len(payload)}")
    width, height, fmt, sequence, render_millis = FRAME_HEADER.unpack_from(payload, 0)
    if fmt != FORMAT_RGB8:
        raise DecodeError(f"unknown frame format {fmt}")
    expected = FRAME_HEADER.size + width * height * 3
    if len(payload) != expected:
        raise DecodeError(
            f"frame payload length mismatch: {width}x{height} RGB8 needs {expected} bytes, have {len(payload)}")
    return FrameMessage(width, height, sequence, render_millis, payload[FRAME_HEADER.size:])


def _decode_control(payload: bytes) -> ControlMessage:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"control payload is not UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("control payload must be a JSON object")
    return ControlMessage(obj)


def decode_payload(kind: MsgKind, payload: bytes) -> Message:
    if kind == MsgKind.CAMERA_UPDATE:
        return _decode_camera_update(payload)
    if kind == MsgKind.FRAME:
        return _decode_frame_message(payload)
    if kind == MsgKind.CONTROL:
        return _decode_control(payload)
    raise DecodeError(f"msgKind {kind.name} is not a service message")


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, CameraUpdateMessage):
        payload = json.dumps({
            "pos": list(msg.position), "dir": list(msg.view_dir), "up": list(msg.up),
            "fovy": msg.fov_y, "w": msg.width, "h": msg.height,
        }, separators=(",", ":")).encode("utf-8")
        return encode_frame(MsgKind.CAMERA_UPDATE, payload)
    if isinstance(msg, FrameMessage):
        header = FRAME_HEADER.pack(msg.width, msg.height, msg.format, msg.sequence, msg.render_millis)
        return encode_frame(MsgKind.FRAME, header + msg.pixels)
    if isinstance(msg, ControlMessage):
        return encode_frame(MsgKind.CONTROL, json.dumps(msg.data, separators=(",", ":")).encode("utf-8"))
    raise TypeError(f"cannot encode {type(msg).__name__}")


def decode_message(data: bytes) -> Message:
    """Decode exactly one service message; trailing bytes are an error."""
    kind, payload, end = decode_frame(data, 0)
    if end != len(data):
        raise DecodeError(f"trailing bytes at offset {end}")
    return decode_payload(kind, payload)
