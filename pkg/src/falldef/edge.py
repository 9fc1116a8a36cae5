"""Streaming fall detection over TCP, alert dispatch, and a recording replay client.

Wire protocol: newline-delimited JSON in both directions. The client sends
one object per sample::

    {"t": 1.0, "ax": 0.02, "ay": -0.98, "az": 0.01}

and the server answers every line with exactly one ``ack`` or ``error``
object, with an ``alert`` object written before the ack of the sample that
triggered it::

    {"type": "ack", "seq": 1, "t": 1.0, "classified": false, "p_fall": null}
    {"type": "alert", "p_fall": 0.97, "window_start_t": ..., "window_end_t": ..., "emitted_at": ...}
    {"type": "error", "seq": 2, "field": "az", "error": "missing field 'az'"}
"""

from __future__ import annotations

import json
import logging
import math
import os
import queue
import socket
import socketserver
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Optional

import numpy as np

from .dataset import FALL
from .dgru import DgruModel, predict
from .errors import ConfigError

log = logging.getLogger(__name__)

ENV_PREFIX = "FALLDEF_"
# the exact softmax output is always below 1 but float64 rounds it up once the
# logit gap passes ~37; compare against the largest double below 1 instead
_P_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 9750
    model_path: Optional[str] = None
    alert_threshold: float = 0.5
    cooldown: float = 10.0
    stride: int = 1
    webhook: Optional[str] = None
    retries: int = 3
    backoff_base: float = 0.5
    alert_log: Optional[str] = None
    queue_size: int = 64
    http_timeout: float = 5.0

    def __post_init__(self):
        if not 0 < self.alert_threshold <= 1:
            raise ConfigError(f"alert_threshold must be in (0, 1], got {self.alert_threshold}")
        if self.cooldown < 0:
            raise ConfigError(f"cooldown must be >= 0, got {self.cooldown}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.retries < 0:
            raise ConfigError(f"retries must be >= 0, got {self.retries}")


def parse_bind(text):
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bind address must look like HOST:PORT, got {text!r}") from None


@dataclass(frozen=True)
class StreamEvent:
    t: float
    ax: float
    ay: float
    az: float


@dataclass(frozen=True)
class AlertEvent:
    p_fall: float
    window_start_t: float
    window_end_t: float
    emitted_at: str

    def to_dict(self):
        return asdict(self)


class ProtocolError(ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def decode_event(line) -> StreamEvent:
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed JSON: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("record must be a JSON object")
    vals = {}
    for name in ("t", "ax", "ay", "az"):
        if name not in obj:
            raise ProtocolError(f"missing field {name!r}", name)
        v = obj[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(f"field {name!r} must be a number, got {v!r}", name)
        if not math.isfinite(v):
            raise ProtocolError(f"field {name!r} must be finite", name)
        vals[name] = float(v)
    return StreamEvent(**vals)


def encode_event(ev: StreamEvent):
    return json.dumps({"t": ev.t, "ax": ev.ax, "ay": ev.ay, "az": ev.az}) + "\n"


class SlidingBuffer:
    """The most recent ``capacity`` samples of one connection."""

    def __init__(self, capacity):
        self.capacity = capacity
        self._acc = deque(maxlen=capacity)
        self._t = deque(maxlen=capacity)

    def push(self, ev: StreamEvent):
        self._acc.append((ev.ax, ev.ay, ev.az))
        self._t.append(ev.t)

    def __len__(self):
        return len(self._acc)

    @property
    def full(self):
        return len(self._acc) == self.capacity

    def window(self):
        return np.array(self._acc, dtype=np.float64)

    @property
    def start_t(self):
        return self._t[0]

    @property
    def end_t(self):
        return self._t[-1]


@dataclass
class Session:
    """Per-connection state: buffer, stride counter and the event-time cooldown clock."""

    buffer: SlidingBuffer
    since_classified: int = 0
    classified_once: bool = False
    last_alert_t: Optional[float] = None
    last_t: Optional[float] = None
    n_events: int = 0
    n_classified: int = 0
    last_p_fall: Optional[float] = None

    @classmethod
    def for_model(cls, model: DgruModel):
        return cls(SlidingBuffer(model.window_size))


def step(session: Session, event: StreamEvent, model: DgruModel, cfg: ServeConfig):
    """Push one sample; classify when due and return an :class:`AlertEvent` when one fires."""
    if session.last_t is not None and event.t < session.last_t:
        log.warning("event time went backwards: %s after %s", event.t, session.last_t)
    session.last_t = event.t
    session.n_events += 1
    session.buffer.push(event)
    session.since_classified += 1
    session.last_p_fall = None
    if not session.buffer.full:
        return None
    if session.classified_once and session.since_classified < cfg.stride:
        return None
    session.classified_once = True
    session.since_classified = 0
    _, p_fall = predict(model, session.buffer.window())
    session.n_classified += 1
    session.last_p_fall = p_fall
    if min(p_fall, _P_MAX) < cfg.alert_threshold:
        return None
    if session.last_alert_t is not None and event.t - session.last_alert_t < cfg.cooldown:
        return None
    session.last_alert_t = event.t
    return AlertEvent(p_fall, session.buffer.start_t, session.buffer.end_t,
                      datetime.now(timezone.utc).isoformat(timespec="milliseconds"))


# ---------------------------------------------------------------------------
# Alert delivery


@dataclass
class DeliveryResult:
    success: bool
    attempts: int
    error: Optional[str] = None


def http_post_json(url, doc, timeout=5.0):
    req = urllib.request.Request(url, data=json.dumps(doc).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.status


def dispatch_alert(alert: AlertEvent, cfg: ServeConfig, post: Callable = None, sleep: Callable = time.sleep):
    """POST the alert to the webhook, retrying ``cfg.retries`` times with exponential backoff."""
    if not cfg.webhook:
        return DeliveryResult(True, 0)
    post = post or (lambda url, doc: http_post_json(url, doc, cfg.http_timeout))
    err = None
    attempts = 0
    for attempt in range(cfg.retries + 1):
        if attempt:
            sleep(cfg.backoff_base * 2 ** (attempt - 1))
        attempts += 1
        try:
            status = post(cfg.webhook, alert.to_dict())
            if status is None or 200 <= status < 300:
                return DeliveryResult(True, attempts)
            err = f"HTTP {status}"
        except (urllib.error.URLError, OSError, ValueError) as e:
            err = str(e)
        log.warning("webhook attempt %d failed: %s", attempts, err)
    log.error("giving up on webhook delivery after %d attempts: %s", attempts, err)
    return DeliveryResult(False, attempts, err)


class AlertDispatcher:
    """Writes every alert to the local log at once and hands webhook delivery to a worker thread.

    The hand-off queue is bounded; when it is full the webhook delivery for
    that alert is dropped (the local log entry is still written).
    """

    def __init__(self, cfg: ServeConfig, post: Callable = None, sleep: Callable = time.sleep):
        self.cfg = cfg
        self._post = post
        self._sleep = sleep
        self._lock = threading.Lock()
        self._queue = queue.Queue(maxsize=cfg.queue_size)
        self.results = []
        self.dropped = 0
        self._thread = None
        if cfg.webhook:
            self._thread = threading.Thread(target=self._run, name="alert-dispatch", daemon=True)
            self._thread.start()

    def submit(self, alert: AlertEvent, peer=None):
        self._write_local(alert, peer)
        if not self.cfg.webhook:
            return
        try:
            self._queue.put_nowait(alert)
        except queue.Full:
            self.dropped += 1
            log.error("alert queue full; webhook delivery dropped for alert at t=%s", alert.window_end_t)

    def _write_local(self, alert, peer):
        line = json.dumps({**alert.to_dict(), "peer": peer}, sort_keys=True)
        with self._lock:
            if self.cfg.alert_log:
                with open(self.cfg.alert_log, "a") as fh:
                    fh.write(line + "\n")
        log.info("ALERT %s", line)

    def _run(self):
        while True:
            alert = self._queue.get()
            if alert is None:
                break
            try:
                self.results.append(dispatch_alert(alert, self.cfg, self._post, self._sleep))
            except Exception:  # delivery must never take the service down
                log.exception("alert delivery crashed")
            finally:
                self._queue.task_done()

    def join(self, timeout=None):
        """Block until queued deliveries finish (best effort within ``timeout``)."""
        if self._thread is None:
            return
        deadline = None if timeout is None else time.monotonic() + timeout
        while self._queue.unfinished_tasks:
            if deadline is not None and time.monotonic() > deadline:
                break
            time.sleep(0.01)

    def close(self):
        if self._thread is not None:
            self._queue.put(None)
            self._thread.join(timeout=5)


# ---------------------------------------------------------------------------
# TCP server


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: FallServer = self.server
        session = Session.for_model(server.model)
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        seq = 0
        try:
            for raw in self.rfile:
                seq += 1
                if not raw.strip():
                    continue
                try:
                    ev = decode_event(raw)
                except ProtocolError as e:
                    self._send({"type": "error", "seq": seq, "field": e.field, "error": str(e)})
                    continue
                try:
                    alert = step(session, ev, server.model, server.cfg)
                except Exception as e:
                    log.exception("inference failed on %s", peer)
                    self._send({"type": "error", "seq": seq, "field": None, "error": f"inference failed: {e}",
                                "fatal": True})
                    return
                server.record(session, alert)
                if alert is not None:
                    server.dispatcher.submit(alert, peer)
                    self._send({"type": "alert", **alert.to_dict()})
                self._send({"type": "ack", "seq": seq, "t": ev.t, "classified": session.last_p_fall is not None,
                            "p_fall": session.last_p_fall})
        except (ConnectionError, OSError) as e:
            log.info("connection %s dropped: %s", peer, e)

    def _send(self, obj):
        self.wfile.write((json.dumps(obj) + "\n").encode())


class FallServer(socketserver.ThreadingTCPServer):
    """One thread and one :class:`Session` per connection; the model is shared read-only."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: DgruModel, cfg: ServeConfig, dispatcher: AlertDispatcher = None):
        self.model = model
        self.cfg = cfg
        self.dispatcher = dispatcher or AlertDispatcher(cfg)
        self._stats_lock = threading.Lock()
        self.events = 0
        self.classifications = 0
        self.alerts = []
        super().__init__((cfg.host, cfg.port), _Handler)

    @property
    def address(self):
        return self.server_address[:2]

    def record(self, session, alert):
        with self._stats_lock:
            self.events += 1
            if session.last_p_fall is not None:
                self.classifications += 1
            if alert is not None:
                self.alerts.append(alert)

    def start_background(self):
        th = threading.Thread(target=self.serve_forever, name="fall-server", daemon=True)
        th.start()
        return th

    def shutdown_all(self):
        self.shutdown()
        self.server_close()
        self.dispatcher.close()


def config_from_env(env=None, **overrides):
    """``ServeConfig`` from ``FALLDEF_*`` variables; explicit non-None overrides win."""
    env = os.environ if env is None else env
    kw = {}
    if env.get(ENV_PREFIX + "MODEL"):
        kw["model_path"] = env[ENV_PREFIX + "MODEL"]
    if env.get(ENV_PREFIX + "BIND"):
        kw["host"], kw["port"] = parse_bind(env[ENV_PREFIX + "BIND"])
    try:
        if env.get(ENV_PREFIX + "THRESHOLD"):
            kw["alert_threshold"] = float(env[ENV_PREFIX + "THRESHOLD"])
        if env.get(ENV_PREFIX + "COOLDOWN"):
            kw["cooldown"] = float(env[ENV_PREFIX + "COOLDOWN"])
    except ValueError as e:
        raise ConfigError(f"bad environment value: {e}") from None
    if env.get(ENV_PREFIX + "WEBHOOK"):
        kw["webhook"] = env[ENV_PREFIX + "WEBHOOK"]
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ServeConfig(**kw)


# ---------------------------------------------------------------------------
# Replay client


@dataclass
class FallRegion:
    onset_t: float
    end_t: float
    detected: bool = False
    latency: Optional[float] = None  # event time from onset to the end of the first alerting window
    wall_latency: Optional[float] = None  # wall time from sending the onset sample to receiving the alert


@dataclass
class ReplaySummary:
    events_sent: int = 0
    acks: int = 0
    errors: int = 0
    classifications: int = 0
    alerts: list = field(default_factory=list)  # AlertEvent
    alert_received_at: list = field(default_factory=list)  # monotonic seconds
    regions: list = field(default_factory=list)  # FallRegion
    false_alerts: int = 0
    elapsed: float = 0.0

    def to_dict(self):
        return {"events_sent": self.events_sent, "acks": self.acks, "errors": self.errors,
                "classifications": self.classifications, "alerts": [a.to_dict() for a in self.alerts],
                "regions": [asdict(r) for r in self.regions], "false_alerts": self.false_alerts,
                "elapsed": self.elapsed}

    def format(self):
        lines = [f"events sent {self.events_sent}, acks {self.acks}, errors {self.errors}, "
                 f"classifications {self.classifications}, alerts {len(self.alerts)}"]
        for r in self.regions:
            status = f"detected, latency {r.latency:.3f}s" if r.detected else "missed"
            lines.append(f"fall at t={r.onset_t:.3f}s: {status}")
        if self.regions:
            lines.append(f"false alerts {self.false_alerts}")
        return "\n".join(lines)


def fall_regions(t, labels):
    """Contiguous fall-labeled runs as ``(onset_t, end_t)`` pairs."""
    out = []
    i = 0
    n = len(labels)
    while i < n:
        if labels[i] == FALL:
            j = i
            while j + 1 < n and labels[j + 1] == FALL:
                j += 1
            out.append((float(t[i]), float(t[j])))
            i = j + 1
        else:
            i += 1
    return out


def replay(segments, host, port, rate_hz=31.25, speedup=1.0, timeout=30.0, window_size=40):
    """Stream segments' samples to a server in order and collect its responses.

    ``speedup=math.inf`` sends without pacing. Sample times come from the
    segment's ``t`` column, or ``index / rate_hz`` when it has none. When
    point labels are present, every alert is matched to the fall region it
    covers (window end within ``[onset, end + window duration]``).
    """
    times, rows, labels = [], [], []
    offset = 0.0
    for seg in segments:
        n = len(seg)
        seg_t = seg.t if seg.t is not None else offset + np.arange(n) / rate_hz
        times.extend(float(x) for x in seg_t)
        rows.extend(seg.acc.tolist())
        if seg.labels is not None:
            labels.extend(int(x) for x in seg.labels)
        offset = (times[-1] + 1.0 / rate_hz) if times else 0.0
    summary = ReplaySummary()
    sent_at = [0.0] * len(rows)
    done = threading.Event()

    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(timeout)

    def reader():
        with sock.makefile("rb") as fh:
            try:
                for raw in fh:
                    msg = json.loads(raw)
                    kind = msg.get("type")
                    if kind == "ack":
                        summary.acks += 1
                        summary.classifications += bool(msg.get("classified"))
                    elif kind == "error":
                        summary.errors += 1
                    elif kind == "alert":
                        msg.pop("type")
                        summary.alerts.append(AlertEvent(**msg))
                        summary.alert_received_at.append(time.monotonic())
                    if summary.acks + summary.errors >= len(rows):
                        break
            except (OSError, ValueError) as e:
                log.error("replay reader stopped: %s", e)
        done.set()

    th = threading.Thread(target=reader, daemon=True)
    th.start()
    period = 0.0 if math.isinf(speedup) else 1.0 / (rate_hz * speedup)
    start = time.monotonic()
    try:
        for i, (ti, (ax, ay, az)) in enumerate(zip(times, rows)):
            if period:
                delay = start + i * period - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            sent_at[i] = time.monotonic()
            sock.sendall((json.dumps({"t": ti, "ax": ax, "ay": ay, "az": az}) + "\n").encode())
            summary.events_sent += 1
        if rows:
            done.wait(timeout)
    finally:
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
        th.join(timeout=1.0)
    summary.elapsed = time.monotonic() - start

    if len(labels) == len(rows) and rows:
        window_span = window_size / rate_hz
        t_arr = np.array(times)
        regions = [FallRegion(a, b) for a, b in fall_regions(t_arr, labels)]
        matched = [False] * len(summary.alerts)
        for reg in regions:
            onset_idx = int(np.searchsorted(t_arr, reg.onset_t))
            for k, al in enumerate(summary.alerts):
                if reg.onset_t <= al.window_end_t <= reg.end_t + window_span:
                    matched[k] = True
                    if not reg.detected:
                        reg.detected = True
                        reg.latency = al.window_end_t - reg.onset_t
                        reg.wall_latency = summary.alert_received_at[k] - sent_at[onset_idx]
        summary.regions = regions
        summary.false_alerts = matched.count(False)
    return summary
