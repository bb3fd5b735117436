"""Remote rendering service: camera updates in, rendered frames out.

Rank 0 listens for a single thin client (raw DPRT framing over TCP, or the
same frames inside WebSocket binary messages after an HTTP upgrade).
Pending camera updates coalesce so only the newest one is applied; each
applied update triggers one collective render and one outbound frame.
"""

from __future__ import annotations

import json
import socket as socketlib
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import api, protocol, transport, ws
from .engine import RankStats
from .errors import DecodeError, DprtError
from .protocol import (CameraUpdateMessage, ControlMessage, FrameMessage, FrameParser,
                       MsgKind, encode_frame, encode_message)
from .scene import Partition, SceneDesc
from .transport import RankEndpoint

_POLL = 0.01


@dataclass
class ServeOptions:
    host: str = "127.0.0.1"
    port: int = 0
    accept_timeout_secs: Optional[float] = None  # None: wait for the transport deadline
    stats_path: Optional[str] = None
    ambient: float = 0.1
    max_depth: int = 1
    mode: str = "shaded"
    on_listening: Optional[Callable[[Tuple[str, int]], None]] = None


@dataclass
class ServeReport:
    frames_sent: int = 0
    records: List[str] = field(default_factory=list)


class _ClientStream:
    """One accepted client connection; speaks raw DPRT or WebSocket."""

    def __init__(self, sock: socketlib.socket):
        self.sock = sock
        self.websocket = False
        self.closed = False
        self.error: Optional[str] = None
        self._parser = FrameParser()
        self._ws_reader = ws.WsReader()
        self._latest: Optional[CameraUpdateMessage] = None
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._recv_loop, daemon=True,
                                        name="dprt-client-recv")
        self._thread.start()

    def take_latest_update(self) -> Optional[CameraUpdateMessage]:
        with self._lock:
            update, self._latest = self._latest, None
        return update

    def send_message(self, msg) -> None:
        data = encode_message(msg)
        if self.websocket:
            data = ws.encode_ws_frame(data, ws.OP_BINARY)
        with self._send_lock:
            self.sock.sendall(data)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socketlib.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    # -- receive path

    def _recv_loop(self) -> None:
        try:
            head = b""
            while len(head) < 4:
                chunk = self.sock.recv(4096)
                if not chunk:
                    self.closed = True
                    return
                head += chunk
            if head.startswith(b"GET "):
                self._upgrade_websocket(head)
            else:
                self._feed_dprt(head)
            while not self.closed:
                chunk = self.sock.recv(1 << 16)
                if not chunk:
                    break
                if self.websocket:
                    self._ws_reader.feed(chunk)
                    for opcode, payload in self._ws_reader.frames():
                        if opcode == ws.OP_CLOSE:
                            self.closed = True
                            return
                        if opcode == ws.OP_PING:
                            with self._send_lock:
                                self.sock.sendall(ws.encode_ws_frame(payload, ws.OP_PONG))
                            continue
                        if opcode == ws.OP_BINARY:
                            self._feed_dprt(payload)
                else:
                    self._feed_dprt(chunk)
        except DecodeError as exc:
            self.error = str(exc)
        except OSError:
            pass
        finally:
            self.closed = True

    def _upgrade_websocket(self, head: bytes) -> None:
        while b"\r\n\r\n" not in head:
            chunk = self.sock.recv(4096)
            if not chunk:
                self.closed = True
                return
            head += chunk
        headers, leftover = ws.parse_http_request(head)
        with self._send_lock:
            self.sock.sendall(ws.handshake_response(headers))
        self.websocket = True
        if leftover:
            self._ws_reader.feed(leftover)

    def _feed_dprt(self, data: bytes) -> None:
        self._parser.feed(data)
        for kind, payload in self._parser.frames():
            if kind == MsgKind.CAMERA_UPDATE:
                update = protocol.decode_payload(kind, payload)
                with self._lock:
                    self._latest = update
            # anything else from a thin client is ignored


def _refuse_busy(sock: socketlib.socket) -> None:
    busy = encode_message(ControlMessage({"status": "busy"}))
    try:
        sock.settimeout(2.0)
        head = sock.recv(4096)
        if head.startswith(b"GET "):
            while b"\r\n\r\n" not in head:
                more = sock.recv(4096)
                if not more:
                    break
                head += more
            headers, _ = ws.parse_http_request(head)
            sock.sendall(ws.handshake_response(headers))
            sock.sendall(ws.encode_ws_frame(busy, ws.OP_BINARY))
        else:
            sock.sendall(busy)
    except (OSError, DecodeError):
        pass
    finally:
        sock.close()


def _build_rank_objects(ep: RankEndpoint, scene: SceneDesc, partition: Partition,
                        options: ServeOptions):
    """Per-rank render graph: the local share of the scene, committed."""
    device = api.Device(ep)
    mat_of_gid: Dict[int, int] = {t.global_id: m for t, m in
                                  zip(scene.triangles, scene.material_of_prim)}
    world = device.create("world")
    surfaces = []
    by_material: Dict[int, list] = {}
    for tri in partition.local_sets[ep.rank]:
        by_material.setdefault(mat_of_gid[tri.global_id], []).append(tri)
    for mi in sorted(by_material):
        surf = device.create("surface")
        surf.set_param("triangles", by_material[mi])
        surf.set_param("material", scene.materials[mi])
        surf.commit()
        surfaces.append(surf)
    world.set_param("surfaces", surfaces)
    world.set_param("lights", list(scene.lights))
    world.commit()
    renderer = device.create("renderer")
    renderer.set_param("background", scene.background)
    renderer.set_param("ambient", options.ambient)
    renderer.set_param("maxDepth", options.max_depth)
    renderer.set_param("mode", options.mode)
    renderer.commit()
    camera = device.create("camera")
    frame = device.create("frame")
    frame.set_param("world", world)
    frame.set_param("camera", camera)
    frame.set_param("renderer", renderer)
    return camera, frame


def _apply_and_render(camera, frame, cmd: dict) -> Tuple[api.RenderResult, int]:
    camera.set_param("position", tuple(cmd["pos"]))
    camera.set_param("direction", tuple(cmd["dir"]))
    camera.set_param("up", tuple(cmd["up"]))
    camera.set_param("fovY", float(cmd["fovy"]))
    camera.set_param("aspect", cmd["w"] / cmd["h"])
    camera.commit()
    frame.set_param("size", (cmd["w"], cmd["h"]))
    frame.commit()
    t0 = time.perf_counter()
    result = api.render_frame_collective(frame)
    millis = int(round((time.perf_counter() - t0) * 1e3))
    return result, millis


def serve_session(ep: RankEndpoint, scene: SceneDesc, partition: Partition,
                  options: Optional[ServeOptions] = None) -> Optional[ServeReport]:
    """Collective: run one thin-client session; returns a report on rank 0."""
    options = options or ServeOptions()
    camera, frame = _build_rank_objects(ep, scene, partition, options)
    if ep.rank != 0:
        while True:
            cmd = json.loads(transport.broadcast_from_root(ep, None).decode("utf-8"))
            if cmd["cmd"] == "shutdown":
                return None
            _apply_and_render(camera, frame, cmd)
    return _root_session(ep, camera, frame, options)


def _root_session(ep: RankEndpoint, camera, frame, options: ServeOptions) -> ServeReport:
    report = ServeReport()
    listener = socketlib.socket(socketlib.AF_INET, socketlib.SOCK_STREAM)
    listener.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEADDR, 1)
    listener.bind((options.host, options.port))
    listener.listen(4)
    if options.on_listening:
        options.on_listening(listener.getsockname())
    accept_deadline = time.monotonic() + (options.accept_timeout_secs or ep.timeout)
    listener.settimeout(0.1)
    client: Optional[_ClientStream] = None
    try:
        while client is None:
            if time.monotonic() > accept_deadline:
                raise DprtError("no client connected before the accept deadline")
            try:
                sock, _ = listener.accept()
            except socketlib.timeout:
                continue
            client = _ClientStream(sock)
            client.start()

        session_alive = True

        def refuser() -> None:
            while session_alive:
                try:
                    extra, _ = listener.accept()
                except socketlib.timeout:
                    continue
                except OSError:
                    return
                threading.Thread(target=_refuse_busy, args=(extra,), daemon=True).start()

        threading.Thread(target=refuser, daemon=True, name="dprt-busy-refuser").start()

        try:
            while True:
                update = client.take_latest_update()
                if update is None:
                    if client.closed:
                        if client.error:
                            try:
                                client.send_message(ControlMessage({"error": client.error}))
                            except OSError:
                                pass
                        break
                    time.sleep(_POLL)
                    continue
                cmd = {"cmd": "frame", "pos": list(update.position),
                       "dir": list(update.view_dir), "up": list(update.up),
                       "fovy": update.fov_y, "w": update.width, "h": update.height}
                transport.broadcast_from_root(ep, json.dumps(cmd).encode("utf-8"))
                result, millis = _apply_and_render(camera, frame, cmd)
                buffer = api.map_frame(frame)
                msg = FrameMessage(width=buffer.width, height=buffer.height,
                                   sequence=buffer.sequence, render_millis=millis,
                                   pixels=buffer.pixels)
                client.send_message(msg)
                report.frames_sent += 1
                report.records.extend(result.stats.records)
                if options.stats_path:
                    with open(options.stats_path, "a", encoding="utf-8") as fh:
                        for line in result.stats.records:
                            fh.write(line + "\n")
        except DprtError as exc:
            try:
                client.send_message(ControlMessage({"error": str(exc)}))
            except OSError:
                pass
            transport.broadcast_from_root(ep, json.dumps({"cmd": "shutdown"}).encode("utf-8"))
            raise
        transport.broadcast_from_root(ep, json.dumps({"cmd": "shutdown"}).encode("utf-8"))
        session_alive = False
        return report
    finally:
        if client is not None:
            client.close()
        listener.close()
