"""Length-prefixed framing over TCP, a threaded inference server and the bench harness.

A frame is a 4-byte big-endian length followed by one encoded protocol message.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol as P
from .bnn.network import BayesianNetwork
from .encoding import FixedPointScale
from .ring import RingParams

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct(">I")


class TransportError(ConnectionError):
    """The byte stream failed: EOF mid-frame, oversize frame, socket error."""


class FrameError(TransportError):
    pass


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise TransportError(f"EOF after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def write_frame_bytes(stream, data: bytes, max_size: int = MAX_FRAME) -> int:
    if len(data) > max_size:
        raise FrameError(f"frame of {len(data)} bytes exceeds limit {max_size}")
    stream.write(_LEN.pack(len(data)) + data)
    if hasattr(stream, "flush"):
        stream.flush()
    return _LEN.size + len(data)


def read_frame_bytes(stream, max_size: int = MAX_FRAME) -> bytes:
    head = stream.read(_LEN.size)
    if not head:
        raise TransportError("connection closed")
    if len(head) < _LEN.size:
        head += _read_exact(stream, _LEN.size - len(head))
    (n,) = _LEN.unpack(head)
    if n > max_size:
        raise FrameError(f"declared frame length {n} exceeds limit {max_size}")
    return _read_exact(stream, n)


def frame_write(stream, msg, max_size: int = MAX_FRAME) -> int:
    """Encode and write one message; returns the frame length including the prefix."""
    return write_frame_bytes(stream, P.encode_message(msg), max_size)


def frame_read(stream, max_size: int = MAX_FRAME):
    return P.decode_message(read_frame_bytes(stream, max_size))


class MessageChannel:
    """Typed message stream with per-type byte accounting (frame bytes, prefix included)."""

    def __init__(self, stream, max_size: int = MAX_FRAME, closer=None):
        self.stream = stream
        self.max_size = max_size
        self._closer = closer
        self.sent = 0
        self.received = 0
        self.by_type: dict[str, dict[str, int]] = {}

    def _count(self, msg, n, direction):
        entry = self.by_type.setdefault(P.MESSAGE_NAMES[msg.tag],
                                        {"sent": 0, "received": 0, "messages_sent": 0, "messages_received": 0})
        entry[direction] += n
        entry["messages_" + direction] += 1

    def send(self, msg):
        try:
            n = frame_write(self.stream, msg, self.max_size)
        except (OSError, ValueError) as exc:
            if isinstance(exc, TransportError):
                raise
            raise TransportError(f"send failed: {exc}") from exc
        self.sent += n
        self._count(msg, n, "sent")

    def recv(self):
        try:
            data = read_frame_bytes(self.stream, self.max_size)
        except TransportError:
            raise
        except (OSError, ValueError) as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        msg = P.decode_message(data)
        n = _LEN.size + len(data)
        self.received += n
        self._count(msg, n, "received")
        return msg

    def stats(self) -> dict:
        return {"sent": self.sent, "received": self.received,
                "by_type": {k: dict(v) for k, v in self.by_type.items()}}

    def close(self):
        try:
            self.stream.close()
        finally:
            if self._closer is not None:
                self._closer()


def parse_addr(addr: str, default_port: int = 7700) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        return addr or "127.0.0.1", default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValueError(f"bad address {addr!r}; expected HOST:PORT") from None


def connect(addr, timeout: float | None = 60.0, max_size: int = MAX_FRAME) -> MessageChannel:
    host, port = parse_addr(addr) if isinstance(addr, str) else addr
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return MessageChannel(sock.makefile("rwb"), max_size, sock.close)


class _Duplex:
    """Joins a read stream and a write stream into one object."""

    def __init__(self, reader, writer):
        self.reader, self.writer = reader, writer

    def read(self, n):
        return self.reader.read(n)

    def write(self, data):
        return self.writer.write(data)

    def flush(self):
        self.writer.flush()

    def close(self):
        pass  # the socket server closes the connection


# -- server -------------------------------------------------------------------------

class InferenceServer:
    """Serves one session per connection, one thread per connection.

    ``seed`` makes the per-session draws reproducible: session number ``j``
    (in accept order) uses ``default_rng([seed, j])``. ``theta_dir`` (debug) stores
    each session's sampled weights as ``<session id>.npz``.
    """

    def __init__(self, network: BayesianNetwork, params: RingParams, S: int = 4, addr="127.0.0.1:0",
                 seed: int | None = None, theta_dir=None, scale: FixedPointScale | None = None,
                 chunking: str = "auto", max_size: int = MAX_FRAME, threads: bool = True):
        self.network = network
        self.params = params
        self.S = S
        self.seed = seed
        self.theta_dir = Path(theta_dir) if theta_dir else None
        self.manifest = P.build_manifest(network, params, S, scale, chunking)
        self.registry = P.SessionRegistry()
        self.max_size = max_size
        self.threads = threads
        self.completed = 0
        self.failed = 0
        self.last_session = None
        self._counter = 0
        self._lock = threading.Lock()
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                outer._serve(MessageChannel(_Duplex(self.rfile, self.wfile), outer.max_size))

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        host, port = parse_addr(addr) if isinstance(addr, str) else addr
        self._server = Server((host, port), Handler)
        self._thread = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def _session_rng(self):
        with self._lock:
            j = self._counter
            self._counter += 1
        return None if self.seed is None else np.random.default_rng([self.seed, j])

    def make_session(self) -> P.ServerSession:
        return P.ServerSession(self.network, self.params, self.S, rng=self._session_rng(),
                               manifest=self.manifest, registry=self.registry, threads=self.threads)

    def _export_theta(self, session_id, theta):
        if self.theta_dir is None:
            return
        self.theta_dir.mkdir(parents=True, exist_ok=True)
        arrays = {f"k{m.index}_layer{i}_{name}": arr
                  for m in theta for i, (W, b) in enumerate(m.weights) for name, arr in (("W", W), ("b", b))}
        np.savez(self.theta_dir / f"{session_id:016x}.npz", **arrays)

    def _serve(self, channel):
        try:
            session = P.serve_session(channel, self.make_session, self._export_theta)
            with self._lock:
                self.completed += 1
                self.last_session = session
        except (P.ProtocolError, TransportError) as exc:
            # the session state goes out of scope here and is discarded
            with self._lock:
                self.failed += 1
            log.warning("session aborted: %s", exc)

    def start(self) -> "InferenceServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def infer_remote(addr, x, params: RingParams, keys=None, rng=None, timeout: float | None = 120.0,
                 session_id=None) -> P.InferenceResult:
    channel = connect(addr, timeout)
    try:
        return P.run_inference(channel, x, params, keys, rng, session_id)
    finally:
        channel.close()


# -- bench ------------------------------------------------------------------------------

@dataclass
class BenchReport:
    """Latency and traffic over a series of inferences against one server."""

    model_id: str
    S: int
    preset: str
    latencies: list = field(default_factory=list)
    bytes_sent: list = field(default_factory=list)
    bytes_received: list = field(default_factory=list)
    by_type: dict = field(default_factory=dict)
    layer_seconds: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    predicted: dict | None = None

    def add(self, result: P.InferenceResult):
        self.latencies.append(result.seconds)
        self.bytes_sent.append(result.bytes_sent)
        self.bytes_received.append(result.bytes_received)
        self.layer_seconds.append(result.layer_seconds)
        self.labels.append(result.label)
        for name, e in result.by_type.items():
            acc = self.by_type.setdefault(name, {"sent": 0, "received": 0})
            acc["sent"] += e["sent"]
            acc["received"] += e["received"]

    @property
    def count(self) -> int:
        return len(self.latencies)

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else math.nan

    @property
    def p95_latency(self) -> float:
        return float(np.percentile(self.latencies, 95)) if self.latencies else math.nan

    @property
    def bytes_per_inference(self) -> float:
        if not self.count:
            return math.nan
        return (sum(self.bytes_sent) + sum(self.bytes_received)) / self.count

    @property
    def matches_prediction(self) -> bool:
        if self.predicted is None or not self.count:
            return False
        want = self.predicted["total_bytes"]
        return all(s + r == want for s, r in zip(self.bytes_sent, self.bytes_received))

    def summary(self) -> dict:
        out = {"model": self.model_id, "S": self.S, "preset": self.preset, "count": self.count,
               "mean_latency_s": self.mean_latency, "p95_latency_s": self.p95_latency,
               "bytes_sent": sum(self.bytes_sent), "bytes_received": sum(self.bytes_received),
               "bytes_per_inference": self.bytes_per_inference, "by_type": self.by_type}
        if self.layer_seconds:
            out["mean_layer_s"] = [float(v) for v in np.mean(np.array(self.layer_seconds), axis=0)]
        if self.predicted is not None:
            out["predicted_bytes_per_inference"] = self.predicted["total_bytes"]
            out["bitpacked_ciphertext_bytes"] = self.predicted["bitpacked_ciphertext_bytes"]
            out["ciphertexts_per_inference"] = self.predicted["ciphertexts"]
            out["matches_prediction"] = self.matches_prediction
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps({"inference": i, "latency_s": lat, "bytes_sent": s, "bytes_received": r,
                             "label": lab, "layer_s": ls})
                 for i, (lat, s, r, lab, ls) in enumerate(zip(self.latencies, self.bytes_sent,
                                                               self.bytes_received, self.labels,
                                                               self.layer_seconds))]
        lines.append(json.dumps({"summary": self.summary()}))
        return "\n".join(lines)

    def to_table(self) -> str:
        s = self.summary()
        rows = [("model", s["model"]), ("preset", s["preset"]), ("S", s["S"]), ("inferences", s["count"]),
                ("mean latency (s)", f"{s['mean_latency_s']:.3f}"), ("p95 latency (s)", f"{s['p95_latency_s']:.3f}"),
                ("bytes / inference", f"{s['bytes_per_inference']:.0f}")]
        if self.predicted is not None:
            rows += [("predicted bytes / inference", s["predicted_bytes_per_inference"]),
                     ("measured == predicted", s["matches_prediction"]),
                     ("ciphertexts / inference", s["ciphertexts_per_inference"]),
                     ("bit-packed ciphertext bytes", s["bitpacked_ciphertext_bytes"])]
        for i, v in enumerate(s.get("mean_layer_s", [])):
            rows.append((f"layer {i + 1} round trip (s)", f"{v:.3f}"))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        lines.append("")
        lines.append(f"{'message type':<20} {'sent':>12} {'received':>12}")
        for name, e in sorted(self.by_type.items()):
            lines.append(f"{name:<20} {e['sent']:>12} {e['received']:>12}")
        return "\n".join(lines)


def run_bench(addr, images, count: int, params: RingParams, keys=None, rng=None,
              model_id: str = "model") -> BenchReport:
    """Run ``count`` inferences (cycling through ``images``) and collect a report."""
    if count < 1:
        raise ValueError("count must be positive")
    report = None
    for i in range(count):
        result = infer_remote(addr, images[i % len(images)], params, keys, rng)
        if report is None:
            report = BenchReport(model_id, result.manifest.S, params.name)
            report.predicted = P.predict_traffic(result.manifest, params)
        report.add(result)
    return report


__all__ = [
    "BenchReport", "FrameError", "InferenceServer", "MAX_FRAME", "MessageChannel", "TransportError",
    "connect", "frame_read", "frame_write", "infer_remote", "parse_addr", "read_frame_bytes", "run_bench",
    "write_frame_bytes",
]
