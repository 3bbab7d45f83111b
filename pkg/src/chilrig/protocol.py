"""Lockstep signal-exchange protocol between the engine and controllers.

Wire format: each frame is a 4-byte big-endian length prefix followed by a
UTF-8 JSON object with fixed key order {"kind","tick","t","payload"}, e.g.

    {"kind":"hello","tick":0,"t":0.0,"payload":{"version":1}}

Numbers serialize with the shortest decimal representation that parses
back to the identical IEEE double (at most 17 significant digits), so
decode(encode(frame)) reproduces every value bit for bit and identical
frames always encode to identical bytes.

The exchange is lockstep: the engine does not advance simulated time until
the control reply for the current tick has arrived (or the timeout policy
resolves the wait). An injectable DelayChannel on the measurement path
reproduces communication-delay experiments; delivery is FIFO, no loss, no
reordering.
"""

from __future__ import annotations

import json
import socket
import struct
from collections import deque
from dataclasses import dataclass, field

PROTOCOL_VERSION = 1
FRAME_KINDS = ("meas", "ctrl", "hello", "bye", "error")
MAX_FRAME_BYTES = 16 * 1024 * 1024


class ProtocolViolation(RuntimeError):
    """Malformed frame, tick mismatch or undeclared signal name."""


class ControllerTimeout(RuntimeError):
    """No control reply within the timeout (abort policy)."""


class Disconnected(ConnectionError):
    """The peer closed the connection."""


class VersionMismatch(RuntimeError):
    """Peer speaks an incompatible protocol version."""


@dataclass(frozen=True)
class WireFrame:
    kind: str
    tick: int
    t: float
    payload: dict


@dataclass
class TimeoutPolicy:
    """What to do when the controller does not answer in time.

    ``hold`` reuses the last valid control frame verbatim and keeps the
    run going (also on disconnect); ``abort`` raises ControllerTimeout.
    The timeout is wall-clock seconds: under lockstep, simulated time is
    gated on the reply, so the wall clock is the only one advancing.
    """

    timeout: float = 5.0
    action: str = "hold"  # "hold" | "abort"

    def __post_init__(self):
        if self.action not in ("hold", "abort"):
            raise ValueError(f"unknown timeout action {self.action!r}")


def encode(frame: WireFrame) -> bytes:
    """Serialize one frame: length prefix plus canonical JSON."""
    if frame.kind not in FRAME_KINDS:
        raise ProtocolViolation(f"unknown frame kind {frame.kind!r}")
    obj = {
        "kind": frame.kind,
        "tick": int(frame.tick),
        "t": float(frame.t),
        "payload": frame.payload,
    }
    data = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(data)) + data


def decode(data: bytes) -> WireFrame:
    """Parse a complete encoded frame (prefix included); inverse of encode."""
    if len(data) < 4:
        raise ProtocolViolation("frame shorter than its length prefix")
    (n,) = struct.unpack(">I", data[:4])
    if len(data) != 4 + n:
        raise ProtocolViolation(f"length prefix says {n} bytes, got {len(data) - 4}")
    return _parse_body(data[4:])


def _parse_body(body: bytes) -> WireFrame:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"undecodable frame body: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"kind", "tick", "t", "payload"}:
        raise ProtocolViolation(f"frame object must have exactly kind/tick/t/payload")
    kind, tick, t, payload = obj["kind"], obj["tick"], obj["t"], obj["payload"]
    if kind not in FRAME_KINDS:
        raise ProtocolViolation(f"unknown frame kind {kind!r}")
    if not isinstance(tick, int) or isinstance(tick, bool) or tick < 0:
        raise ProtocolViolation(f"tick must be a non-negative integer, got {tick!r}")
    if not isinstance(t, (int, float)) or isinstance(t, bool):
        raise ProtocolViolation(f"t must be a number, got {t!r}")
    if not isinstance(payload, dict):
        raise ProtocolViolation("payload must be an object")
    return WireFrame(kind=kind, tick=tick, t=float(t), payload=payload)


# --------------------------------------------------------- delay channel


@dataclass
class DelayChannel:
    """FIFO channel releasing frames ``delay`` seconds after they enter."""

    delay: float = 0.0
    _fifo: deque = field(default_factory=deque)
    _last_now: float = float("-inf")

    def __post_init__(self):
        if self.delay < 0.0:
            raise ValueError("delay must be >= 0")


def delayed_deliver(channel: DelayChannel, frame, now: float) -> list:
    """Enqueue ``frame`` at ``now`` and return everything due by ``now``.

    ``now`` must be non-decreasing across calls; frames come out in send
    order at send time + delay, never reordered, never dropped.
    """
    if now < channel._last_now:
        raise ValueError(
            f"now went backwards: {now!r} after {channel._last_now!r}"
        )
    channel._last_now = now
    channel._fifo.append((now + channel.delay, frame))
    due = []
    while channel._fifo and channel._fifo[0][0] <= now:
        due.append(channel._fifo.popleft()[1])
    return due


class _MeasurementPath:
    """Applies the communication delay to the measurement payloads a
    controller observes; before anything is released the controller sees
    an invalid placeholder."""

    def __init__(self, delay: float):
        self.channel = DelayChannel(delay=delay)
        self._latest: dict | None = None

    def view(self, t: float, fresh: dict) -> dict:
        due = delayed_deliver(self.channel, fresh, t)
        if due:
            self._latest = due[-1]
        if self._latest is None:
            return {"valid": 0.0}
        return dict(self._latest)


def measurement_payload(t: float, names, values) -> dict:
    """Fresh measurement payload: meta keys first, then the signals."""
    payload = {"meas_t": t, "valid": 1.0}
    payload.update(zip(names, values))
    return payload


# ------------------------------------------------------- socket framing


class FrameConnection:
    """Blocking length-prefixed frame stream over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.last_ctrl: dict = {}
        self.dead = False
        self.declared_controls: set[str] | None = None

    def send(self, frame: WireFrame) -> None:
        try:
            self._sock.sendall(encode(frame))
        except OSError as exc:
            self.dead = True
            raise Disconnected(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> WireFrame:
        """Next frame; TimeoutError if none arrives in time, Disconnected
        on a closed peer."""
        self._sock.settimeout(timeout)
        try:
            header = self._recv_exact(4)
            (n,) = struct.unpack(">I", header)
            if n > MAX_FRAME_BYTES:
                raise ProtocolViolation(f"frame of {n} bytes exceeds the limit")
            return _parse_body(self._recv_exact(n))
        except socket.timeout as exc:
            raise TimeoutError("no frame within the timeout") from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                self.dead = True
                raise Disconnected("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def lockstep_exchange(
    conn: FrameConnection, meas: WireFrame, policy: TimeoutPolicy
) -> dict:
    """Send a measurement, block for the matching control reply.

    The reply must be a ctrl frame whose tick equals the measurement tick
    and whose payload only uses declared control names. Timeouts and
    disconnects resolve per the policy; with ``hold`` the last valid
    control payload is reused verbatim.
    """
    if conn.dead:
        return dict(conn.last_ctrl)
    try:
        conn.send(meas)
        reply = conn.recv(policy.timeout)
    except TimeoutError:
        if policy.action == "hold":
            return dict(conn.last_ctrl)
        raise ControllerTimeout(
            f"no control reply for tick {meas.tick} within {policy.timeout:g} s"
        ) from None
    except Disconnected:
        if policy.action == "hold":
            return dict(conn.last_ctrl)
        raise
    if reply.kind == "error":
        raise ProtocolViolation(f"controller error: {reply.payload}")
    if reply.kind != "ctrl":
        raise ProtocolViolation(f"expected a ctrl frame, got {reply.kind!r}")
    if reply.tick != meas.tick:
        raise ProtocolViolation(
            f"control reply for tick {reply.tick} does not answer tick {meas.tick}"
        )
    if conn.declared_controls is not None:
        unknown = set(reply.payload) - conn.declared_controls
        if unknown:
            raise ProtocolViolation(f"undeclared control names: {sorted(unknown)}")
    conn.last_ctrl = dict(reply.payload)
    return dict(reply.payload)


# ------------------------------------------------------------- bindings

#: control names every scenario plant accepts from its controller
CONTROL_NAMES = (
    "i_d_ref_pu",
    "i_q_ref_pu",
    "theta",
    "omega",
    "mode_rt",
    "v_pos_pu",
    "tap_cmd",
    "infeasible",
    "bank_on",
    "fine_g",
    "done",
)


class ReferenceBinding:
    """Drives an in-process reference controller at its cycle."""

    def __init__(self, controller, cycle_ticks: int, delay: float = 0.0):
        if cycle_ticks < 1:
            raise ValueError("cycle_ticks must be >= 1")
        self.controller = controller
        self.cycle_ticks = cycle_ticks
        self.path = _MeasurementPath(delay)
        self.log: list[dict] = []
        self.disconnected = False

    def exchange(self, tick: int, t: float, names, values) -> dict:
        payload = self.path.view(t, measurement_payload(t, names, values))
        ctrl = self.controller.on_exchange(tick, t, payload)
        self.log.append({"tick": tick, "t": t, "meas": payload, "ctrl": dict(ctrl)})
        return ctrl

    def close(self) -> None:
        pass


class SocketBinding:
    """Serves one external controller over a local stream socket.

    The binding listens immediately so a client may connect at any time;
    the handshake completes lazily on the first exchange. The client opens
    with a hello carrying its protocol version, the binding answers with
    its own hello declaring the measurement and control signal names.
    """

    def __init__(
        self,
        endpoint: tuple[str, int],
        cycle_ticks: int,
        signal_names,
        policy: TimeoutPolicy | None = None,
        delay: float = 0.0,
        accept_timeout: float = 10.0,
    ):
        if cycle_ticks < 1:
            raise ValueError("cycle_ticks must be >= 1")
        self.cycle_ticks = cycle_ticks
        self.signal_names = tuple(signal_names)
        self.policy = policy or TimeoutPolicy()
        self.path = _MeasurementPath(delay)
        self.accept_timeout = accept_timeout
        self.log: list[dict] = []
        self.conn: FrameConnection | None = None
        self._server = socket.create_server(endpoint)
        self._server.settimeout(accept_timeout)
        self.address = self._server.getsockname()[:2]

    @property
    def disconnected(self) -> bool:
        return bool(self.conn is not None and self.conn.dead)

    def _accept(self) -> None:
        try:
            sock, _ = self._server.accept()
        except socket.timeout:
            raise ControllerTimeout(
                f"no controller connected to {self.address} within "
                f"{self.accept_timeout:g} s"
            ) from None
        finally:
            self._server.close()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = FrameConnection(sock)
        hello = conn.recv(self.accept_timeout)
        if hello.kind != "hello":
            raise ProtocolViolation(f"expected hello, got {hello.kind!r}")
        version = hello.payload.get("version")
        if version != PROTOCOL_VERSION:
            conn.send(
                WireFrame(
                    "error",
                    0,
                    0.0,
                    {"message": f"unsupported protocol version {version!r}"},
                )
            )
            conn.close()
            raise VersionMismatch(
                f"client speaks version {version!r}, server {PROTOCOL_VERSION}"
            )
        conn.send(
            WireFrame(
                "hello",
                0,
                0.0,
                {
                    "version": PROTOCOL_VERSION,
                    "signals": list(self.signal_names),
                    "controls": list(CONTROL_NAMES),
                },
            )
        )
        conn.declared_controls = set(CONTROL_NAMES)
        self.conn = conn

    def exchange(self, tick: int, t: float, names, values) -> dict:
        if self.conn is None:
            self._accept()
        payload = self.path.view(t, measurement_payload(t, names, values))
        meas = WireFrame("meas", tick, float(t), payload)
        ctrl = lockstep_exchange(self.conn, meas, self.policy)
        self.log.append({"tick": tick, "t": t, "meas": payload, "ctrl": dict(ctrl)})
        return ctrl

    def close(self) -> None:
        if self.conn is not None:
            if not self.conn.dead:
                try:
                    self.conn.send(WireFrame("bye", 0, 0.0, {}))
                except Disconnected:
                    pass
            self.conn.close()
        else:
            self._server.close()


# ---------------------------------------------------------- client side


def run_controller_client(
    endpoint: tuple[str, int],
    controller,
    connect_timeout: float = 10.0,
    max_exchanges: int | None = None,
) -> dict:
    """Serve a controller over the wire protocol from the client side.

    Connects, handshakes, then answers every measurement with the
    controller's control payload until the server says bye. Returns a
    summary dict. ``max_exchanges`` stops the loop early (used to exercise
    the server's disconnect handling).
    """
    sock = socket.create_connection(endpoint, timeout=connect_timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn = FrameConnection(sock)
    exchanges = 0
    try:
        conn.send(WireFrame("hello", 0, 0.0, {"version": PROTOCOL_VERSION}))
        hello = conn.recv(connect_timeout)
        if hello.kind == "error":
            raise VersionMismatch(str(hello.payload.get("message")))
        if hello.kind != "hello":
            raise ProtocolViolation(f"expected hello, got {hello.kind!r}")
        signals = hello.payload.get("signals", [])
        while True:
            frame = conn.recv(None)
            if frame.kind == "bye":
                break
            if frame.kind != "meas":
                raise ProtocolViolation(f"expected meas, got {frame.kind!r}")
            ctrl = controller.on_exchange(frame.tick, frame.t, frame.payload)
            conn.send(WireFrame("ctrl", frame.tick, frame.t, ctrl))
            exchanges += 1
            if max_exchanges is not None and exchanges >= max_exchanges:
                break
        return {"exchanges": exchanges, "signals": list(signals)}
    finally:
        conn.close()
