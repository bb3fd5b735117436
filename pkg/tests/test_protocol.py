from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dprt.errors import DecodeError
from dprt.protocol import (FRAME_HEADER, CameraUpdateMessage, ControlMessage,
                           FrameMessage, FrameParser, MsgKind, decode_frame,
                           decode_message, encode_frame, encode_message)

GOLDEN = Path(__file__).parent / "golden"

CAM_MSG = CameraUpdateMessage(
    position=(1.5, -2.25, 3.125), view_dir=(0.0, 0.0, -1.0), up=(0.0, 1.0, 0.0),
    fov_y=47.5, width=320, height=240)
FRAME_MSG = FrameMessage(width=2, height=1, sequence=7, render_millis=42,
                         pixels=bytes([255, 0, 0, 0, 255, 0]))


def test_camera_update_round_trip():
    assert decode_message(encode_message(CAM_MSG)) == CAM_MSG


def test_frame_message_round_trip_and_size():
    data = encode_message(FRAME_MSG)
    # DPRT header (9) + fixed frame header (17) + 2x1 RGB8 pixels (6)
    assert FRAME_HEADER.size == 17
    assert len(data) == 9 + 17 + 6
    assert decode_message(data) == FRAME_MSG


def test_control_round_trip():
    msg = ControlMessage({"status": "busy"})
    assert decode_message(encode_message(msg)) == msg


def test_golden_fixture_bytes_are_stable():
    assert encode_message(CAM_MSG) == (GOLDEN / "camera_update.bin").read_bytes()
    assert encode_message(FRAME_MSG) == (GOLDEN / "frame_2x1.bin").read_bytes()
    assert encode_message(ControlMessage({"status": "busy"})) == \
        (GOLDEN / "control_busy.bin").read_bytes()


def test_corrupted_magic_names_offset_zero():
    data = bytearray(encode_message(CAM_MSG))
    data[0] ^= 0xFF
    with pytest.raises(DecodeError, match="bad magic at offset 0"):
        decode_message(bytes(data))


def test_unknown_msg_kind_is_located():
    data = bytearray(encode_message(CAM_MSG))
    data[4] = 99
    with pytest.raises(DecodeError, match="unknown msgKind 99 at offset 4"):
        decode_message(bytes(data))


def test_truncated_payload_is_located():
    data = encode_message(FRAME_MSG)
    with pytest.raises(DecodeError, match="truncated payload at offset 9"):
        decode_message(data[:-2])


def test_trailing_bytes_rejected():
    data = encode_message(CAM_MSG) + b"x"
    with pytest.raises(DecodeError, match="trailing bytes"):
        decode_message(data)


def test_frame_length_mismatch():
    bad = encode_frame(MsgKind.FRAME,
                       FRAME_HEADER.pack(2, 1, 0, 1, 0) + bytes(5))  # needs 6 pixel bytes
    with pytest.raises(DecodeError, match="length mismatch"):
        decode_message(bad)


def test_camera_update_validation():
    import json

    def cam_frame(**overrides):
        doc = {"pos": [0, 0, 0], "dir": [0, 0, -1], "up": [0, 1, 0],
               "fovy": 60.0, "w": 64, "h": 64}
        doc.update(overrides)
        return encode_frame(MsgKind.CAMERA_UPDATE, json.dumps(doc).encode())

    with pytest.raises(DecodeError, match="fovy"):
        decode_message(cam_frame(fovy=181.0))
    with pytest.raises(DecodeError, match="'w'"):
        decode_message(cam_frame(w=8))  # below the minimum dimension
    with pytest.raises(DecodeError, match="'h'"):
        decode_message(cam_frame(h=10000))
    with pytest.raises(DecodeError, match="normalized"):
        decode_message(cam_frame(dir=[0, 0, -2]))
    with pytest.raises(DecodeError, match="parallel"):
        decode_message(cam_frame(dir=[0, 1, 0]))


def test_stream_parser_reassembles_split_frames():
    stream = encode_message(CAM_MSG) + encode_message(FRAME_MSG) + encode_message(CAM_MSG)
    for chunk_size in (1, 3, 7, 1000):
        parser = FrameParser()
        messages = []
        for i in range(0, len(stream), chunk_size):
            parser.feed(stream[i:i + chunk_size])
            messages.extend(parser.frames())
        kinds = [k for k, _ in messages]
        assert kinds == [MsgKind.CAMERA_UPDATE, MsgKind.FRAME, MsgKind.CAMERA_UPDATE]
        assert parser.pending_bytes == 0


def test_stream_parser_locates_errors_at_absolute_offsets():
    parser = FrameParser()
    parser.feed(encode_message(CAM_MSG))
    list(parser.frames())
    parser.feed(b"JUNKJUNKJUNK")
    with pytest.raises(DecodeError, match=f"bad magic at offset {len(encode_message(CAM_MSG))}"):
        list(parser.frames())


@given(st.binary(max_size=200))
def test_decode_total_over_arbitrary_bytes(data):
    """Every byte string either decodes or raises a located decode error."""
    try:
        decode_message(data)
    except DecodeError as exc:
        assert "offset" in str(exc) or "payload" in str(exc) or "must" in str(exc) \
            or "format" in str(exc) or "mismatch" in str(exc)


@given(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)),
       st.floats(0.1, 179.9), st.integers(16, 8192), st.integers(16, 8192))
def test_camera_codec_round_trips_floats_exactly(pos, fovy, w, h):
    msg = CameraUpdateMessage(pos, (0.0, 0.0, -1.0), (0.0, 1.0, 0.0), fovy, w, h)
    assert decode_message(encode_message(msg)) == msg


def test_decode_frame_sequence():
    data = encode_message(CAM_MSG) + encode_message(FRAME_MSG)
    kind1, payload1, off = decode_frame(data, 0)
    kind2, payload2, end = decode_frame(data, off)
    assert (kind1, kind2) == (MsgKind.CAMERA_UPDATE, MsgKind.FRAME)
    assert end == len(data)
