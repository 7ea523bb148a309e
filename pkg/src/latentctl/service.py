"""Realtime simulation service for the live-simulator client.

Speaks JSON text messages over WebSocket (RFC 6455); WebSocket framing
supplies the length prefix of each structured-text message. Message kinds:
{hello, list_models, select_model, set_pressures, frame, save_state, export,
reset, error}. Unknown kinds are answered with an error and the session
survives.

Per connection the server runs one stepping loop at 50 Hz wall clock. Every
tick advances the selected latent model by exactly one step (dt = 0.02 s)
under the current slider pressures; a late tick is sent late rather than the
model time being warped. Frame pixels travel as base64 little-endian float32.

Checkpoints are served read-only from a directory; sessions never touch disk.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import socket
import socketserver
import struct
import threading
import time
from pathlib import Path

import numpy as np

from . import io as lio
from .ocp import WaypointSet, schedule_waypoints
from .training import KeypointDecoder, load_checkpoint
from .validation import (ContractError, DivergenceError, FormatError,
                         SingularityError)

PROTOCOL_VERSION = 1
RATE_HZ = 50.0
SLIDER_MIN = 0.0
SLIDER_MAX = 120.0          # extrapolation band past the 86 kPa data cap
ENV_CHECKPOINT_DIR = "LATENTCTL_CHECKPOINTS"

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


# --------------------------------------------------------- websocket layer

def ws_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def ws_encode(payload: bytes, opcode: int = 0x1, mask: bool = False) -> bytes:
    """One FIN frame. Servers send unmasked, clients must mask."""
    head = bytes([0x80 | opcode])
    n = len(payload)
    mbit = 0x80 if mask else 0
    if n < 126:
        head += bytes([mbit | n])
    elif n < 1 << 16:
        head += bytes([mbit | 126]) + struct.pack(">H", n)
    else:
        head += bytes([mbit | 127]) + struct.pack(">Q", n)
    if not mask:
        return head + payload
    key = os.urandom(4)
    body = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return head + key + body


def ws_read_frame(rf):
    """Read one frame from a buffered binary stream; (opcode, payload) or
    (None, b"") at EOF. Fragmented messages are not supported (every peer
    here sends whole JSON documents)."""
    head = rf.read(2)
    if len(head) < 2:
        return None, b""
    fin, opcode = head[0] & 0x80, head[0] & 0x0F
    if not fin:
        raise FormatError("fragmented websocket frames not supported")
    masked, n = head[1] & 0x80, head[1] & 0x7F
    if n == 126:
        n = struct.unpack(">H", rf.read(2))[0]
    elif n == 127:
        n = struct.unpack(">Q", rf.read(8))[0]
    key = rf.read(4) if masked else None
    payload = rf.read(n)
    if len(payload) < n:
        return None, b""
    if key:
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return opcode, payload


def _http_headers(rf):
    """Request line + headers of an incoming HTTP request (lowercase keys)."""
    line = rf.readline(65536).decode("latin-1", "replace").strip()
    headers = {}
    while True:
        raw = rf.readline(65536)
        if not raw or raw in (b"\r\n", b"\n"):
            break
        if b":" in raw:
            k, v = raw.decode("latin-1", "replace").split(":", 1)
            headers[k.strip().lower()] = v.strip()
    return line, headers


# ------------------------------------------------------------ model store

class CheckpointStore:
    """Read-only directory of checkpoint documents, loaded lazily and cached
    by name (file stem). Serving never writes here."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache = {}
        self._lock = threading.Lock()

    def names(self) -> list:
        return sorted(p.stem for p in self.root.glob("*.json"))

    def get(self, name: str):
        if name not in self.names():
            raise ContractError(f"unknown model {name!r}; "
                                f"available: {self.names()}")
        with self._lock:
            if name not in self._cache:
                self._cache[name] = load_checkpoint(self.root / f"{name}.json")
            return self._cache[name]


def _b64_f32(frame) -> str:
    return base64.b64encode(
        np.asarray(frame, dtype="<f4").tobytes()).decode("ascii")


def _overlay_doc(checkpoint):
    """Keypoint affine map in image pixel coordinates (col, row), one 2x2 A
    and offset c per latent pair; None for non-keypoint decoders."""
    dec = checkpoint.system.dec
    if not isinstance(dec, KeypointDecoder):
        return None
    m = checkpoint.system.config.m
    H, W = checkpoint.system.img_h, checkpoint.system.img_w
    flip = np.array([[1.0, 0.0], [0.0, -1.0]])    # image rows grow downward
    shift = np.array([W / 2.0 - 0.5, H - 0.5])
    A, c = [], []
    for j in range(m):
        aj = dec._p(None)[f"A{j}"]
        cj = dec._p(None)[f"c{j}"]
        A.append((flip @ aj).tolist())
        c.append((flip @ cj + shift).tolist())
    return {"kind": "keypoint_affine", "A": A, "c": c}


# ---------------------------------------------------------------- session

class SimSession:
    """One client's simulator: selected checkpoint, latent state, sliders,
    tick counter, and the saved-state list. All mutation happens under one
    lock so slider writes land atomically between ticks."""

    def __init__(self, store: CheckpointStore):
        self.store = store
        self.lock = threading.Lock()
        self.name = None
        self.ckpt = None
        self.xi = None
        self.prev_xi = None
        self.u = None
        self.tick = 0
        self.paused = False
        self.saves = []

    # -- state management (lock held by callers below)

    def _reset_state(self):
        z0 = self.ckpt.z0()
        self.xi = np.concatenate([z0, np.zeros_like(z0)])
        self.prev_xi = None
        self.u = np.array(self.ckpt.u_rest, dtype=float)
        self.tick = 0
        self.paused = False

    def select(self, name: str):
        ckpt = self.store.get(name)
        with self.lock:
            self.name = name
            self.ckpt = ckpt
            self.saves = []
            self._reset_state()

    def reset(self):
        with self.lock:
            self._require_model()
            self._reset_state()
            return self._frame_doc()

    def set_pressures(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (4,) or not np.all(np.isfinite(u)):
            raise ContractError(f"pressures must be 4 finite values, got {u}")
        u = np.clip(u, SLIDER_MIN, SLIDER_MAX)
        with self.lock:
            self.u = u

    def _require_model(self):
        if self.ckpt is None:
            raise ContractError("no model selected")

    def _frame_doc(self) -> dict:
        n = self.ckpt.system.dyn.n_z
        z = self.xi[:n]
        return {"kind": "frame", "tick": self.tick,
                "u": self.u.tolist(), "z": z.tolist(),
                "zdot": self.xi[n:].tolist(),
                "pixels": _b64_f32(self.ckpt.decode(z)),
                "paused": self.paused}

    def step_frame(self):
        """One model step under the current sliders; the next frame doc.
        Divergence pauses the session and raises."""
        with self.lock:
            self._require_model()
            if self.paused:
                return None
            try:
                xi = self.ckpt.system.dyn.step(self.xi, self.u)
            except SingularityError as e:
                self.paused = True
                raise DivergenceError(
                    f"model step failed at tick {self.tick + 1}: {e}; "
                    "session paused, send reset to recover")
            if not np.all(np.isfinite(xi)):
                self.paused = True
                raise DivergenceError(
                    f"model diverged at tick {self.tick + 1}; "
                    "session paused, send reset to recover")
            self.prev_xi = self.xi
            self.xi = xi
            self.tick += 1
            return self._frame_doc()

    def hello_doc(self) -> dict:
        doc = {"kind": "hello", "version": PROTOCOL_VERSION,
               "models": self.store.names(), "model": self.name,
               "rate_hz": RATE_HZ, "pixel_format": "f32le",
               "slider_range": [SLIDER_MIN, SLIDER_MAX]}
        if self.ckpt is not None:
            sys_ = self.ckpt.system
            doc.update({"m": sys_.config.m, "family": sys_.config.family,
                        "img_h": sys_.img_h, "img_w": sys_.img_w,
                        "u_rest": np.asarray(self.ckpt.u_rest).tolist(),
                        "z0": self.ckpt.z0().tolist(),
                        "overlay": _overlay_doc(self.ckpt)})
        return doc

    def save_state(self, static: bool = True) -> dict:
        """Capture the current decoded observation, sliders, and latent
        state. Dynamic saves also capture decoded neighbor frames so any
        checkpoint can re-derive a latent velocity from images alone."""
        with self.lock:
            self._require_model()
            dyn = self.ckpt.system.dyn
            n = dyn.n_z
            obs = np.asarray(self.ckpt.decode(self.xi[:n]), dtype=np.float32)
            entry = {"static": bool(static), "u": self.u.copy(),
                     "z": self.xi[:n].copy(),
                     "zdot": (np.zeros(n) if static
                              else self.xi[n:].copy()),
                     "obs": obs, "o_prev": obs, "o_next": obs}
            if not static:
                prev = self.prev_xi if self.prev_xi is not None else self.xi
                nxt = dyn.step(self.xi, self.u)
                entry["o_prev"] = np.asarray(
                    self.ckpt.decode(prev[:n]), dtype=np.float32)
                if np.all(np.isfinite(nxt)):
                    entry["o_next"] = np.asarray(
                        self.ckpt.decode(nxt[:n]), dtype=np.float32)
            self.saves.append(entry)
            return {"kind": "save_state", "index": len(self.saves) - 1,
                    "static": entry["static"], "u": entry["u"].tolist(),
                    "z": entry["z"].tolist()}

    def export_doc(self, T: int) -> dict:
        """Waypoint-export document for the saved states over horizon T."""
        with self.lock:
            self._require_model()
            if not self.saves:
                raise ContractError("nothing saved yet")
            saves = list(self.saves)
            name = self.name
        wps = WaypointSet(
            obs=np.stack([s["obs"] for s in saves]),
            z=np.stack([s["z"] for s in saves]),
            zdot=np.stack([s["zdot"] for s in saves]),
            tau=schedule_waypoints(len(saves), int(T)),
            flags=tuple("static" if s["static"] else "dynamic"
                        for s in saves),
            u_true=np.stack([s["u"] for s in saves]))
        doc = wps.to_doc()
        doc["model"] = name
        doc["o_prev"] = np.stack([s["o_prev"] for s in saves])
        doc["o_next"] = np.stack([s["o_next"] for s in saves])
        return doc

    def export_text(self, T: int) -> str:
        return lio.dumps_doc("waypoints", lio.WAYPOINTS_VERSION,
                             self.export_doc(T))


# ----------------------------------------------------------------- server

def _dispatch(session: SimSession, doc: dict):
    """Handle one client message; returns the reply docs (possibly none)."""
    kind = doc.get("kind")
    try:
        if kind == "list_models":
            return [{"kind": "list_models", "models": session.store.names()}]
        if kind == "select_model":
            session.select(str(doc["model"]))
            return [session.hello_doc()]
        if kind == "set_pressures":
            session.set_pressures(doc["u"])
            return []
        if kind == "reset":
            return [session.reset()]
        if kind == "save_state":
            return [session.save_state(bool(doc.get("static", True)))]
        if kind == "export":
            return [{"kind": "export", "model": session.name,
                     "text": session.export_text(int(doc["T"]))}]
    except (ContractError, FormatError, KeyError, TypeError,
            ValueError) as e:
        return [{"kind": "error", "message": f"{kind}: {e}"}]
    return [{"kind": "error", "message": f"unknown kind {kind!r}"}]


class _Handler(socketserver.BaseRequestHandler):

    def handle(self):
        rf = self.request.makefile("rb")
        try:
            line, headers = _http_headers(rf)
            key = headers.get("sec-websocket-key")
            if "websocket" not in headers.get("upgrade", "").lower() or not key:
                self.request.sendall(
                    b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\n"
                    b"Content-Length: 24\r\n\r\nlatentctl sim service ok")
                return
            self.request.sendall(
                b"HTTP/1.1 101 Switching Protocols\r\n"
                b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                b"Sec-WebSocket-Accept: "
                + ws_accept_key(key).encode("ascii") + b"\r\n\r\n")
            self._session_loop(rf)
        except (OSError, FormatError):
            pass                       # connection torn down mid-message
        finally:
            rf.close()

    def _send_doc(self, doc, lock):
        data = ws_encode(json.dumps(
            doc, separators=(",", ":")).encode("utf-8"))
        with lock:
            self.request.sendall(data)

    def _session_loop(self, rf):
        session = SimSession(self.server.store)
        send_lock = threading.Lock()
        stop = threading.Event()
        ticker = threading.Thread(
            target=self._tick_loop, args=(session, send_lock, stop),
            daemon=True)
        self._send_doc(session.hello_doc(), send_lock)
        ticker.start()
        try:
            while True:
                opcode, payload = ws_read_frame(rf)
                if opcode is None or opcode == 0x8:        # EOF / close
                    break
                if opcode == 0x9:                          # ping -> pong
                    with send_lock:
                        self.request.sendall(ws_encode(payload, opcode=0xA))
                    continue
                if opcode != 0x1:
                    continue
                try:
                    doc = json.loads(payload.decode("utf-8"))
                    if not isinstance(doc, dict):
                        raise ValueError("message must be an object")
                except (UnicodeDecodeError, ValueError) as e:
                    self._send_doc({"kind": "error",
                                    "message": f"bad message: {e}"},
                                   send_lock)
                    continue
                for reply in _dispatch(session, doc):
                    self._send_doc(reply, send_lock)
        finally:
            stop.set()
            ticker.join(timeout=2.0)

    def _tick_loop(self, session, send_lock, stop):
        period = 1.0 / self.server.rate_hz
        next_t = time.monotonic() + period
        while not stop.is_set():
            delay = next_t - time.monotonic()
            if delay > 0:
                stop.wait(delay)
                if stop.is_set():
                    break
            next_t += period
            now = time.monotonic()
            if next_t < now:          # fell behind: stay best-effort,
                next_t = now + period  # never double-step to catch up
            if session.ckpt is None or session.paused:
                continue
            try:
                doc = session.step_frame()
            except DivergenceError as e:
                doc = {"kind": "error", "message": str(e), "diverged": True}
            if doc is None:
                continue
            try:
                self._send_doc(doc, send_lock)
            except OSError:
                break


class SimServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def make_server(checkpoint_dir, port: int = 0,
                host: str = "127.0.0.1", rate_hz: float = RATE_HZ) -> SimServer:
    """Bind a simulation server (port 0 picks a free port; see
    server.server_address). Call serve_forever() or run it in a thread."""
    server = SimServer((host, int(port)), _Handler)
    server.store = CheckpointStore(checkpoint_dir)
    server.rate_hz = float(rate_hz)
    return server


# ----------------------------------------------------------------- client

class WsClient:
    """Minimal blocking client for the service protocol, used by tests and
    scripts: handshake, JSON send, JSON receive with timeout."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        key = base64.b64encode(os.urandom(16)).decode("ascii")
        self.sock.sendall(
            (f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\n"
             f"Upgrade: websocket\r\nConnection: Upgrade\r\n"
             f"Sec-WebSocket-Key: {key}\r\n"
             f"Sec-WebSocket-Version: 13\r\n\r\n").encode("ascii"))
        self.rf = self.sock.makefile("rb")
        status, headers = _http_headers(self.rf)
        if "101" not in status:
            raise FormatError(f"handshake refused: {status}")
        if headers.get("sec-websocket-accept") != ws_accept_key(key):
            raise FormatError("handshake accept key mismatch")

    def send(self, doc: dict) -> None:
        payload = json.dumps(doc, separators=(",", ":")).encode("utf-8")
        self.sock.sendall(ws_encode(payload, mask=True))

    def recv(self) -> dict:
        while True:
            opcode, payload = ws_read_frame(self.rf)
            if opcode is None:
                raise ConnectionError("server closed the connection")
            if opcode == 0x1:
                return json.loads(payload.decode("utf-8"))
            if opcode == 0x8:
                raise ConnectionError("server sent close")
            # ignore pings/pongs from this side

    def recv_kind(self, kind: str, limit: int = 1000) -> dict:
        """Next message of the given kind, skipping others (frames mostly)."""
        for _ in range(limit):
            doc = self.recv()
            if doc.get("kind") == kind:
                return doc
        raise TimeoutError(f"no {kind!r} message within {limit} messages")

    def close(self) -> None:
        try:
            self.sock.sendall(ws_encode(b"", opcode=0x8))
        except OSError:
            pass
        self.rf.close()
        self.sock.close()


def decode_frame_pixels(frame_doc: dict) -> np.ndarray:
    """Pixels of a frame message as float32, flattened."""
    raw = base64.b64decode(frame_doc["pixels"])
    return np.frombuffer(raw, dtype="<f4").copy()
