"""Networked data sources and the interval aggregator.

Each source runs a :class:`NodeServer` holding its private shard and a
conformal predictor fitted on it. An :class:`Aggregator` fans a prediction
request out to every node and combines the returned intervals, so
non-disclosure is a property of the wire protocol: the only payloads are
the feature vector with a significance level going out, and interval
bounds coming back.

Protocol: one JSON object per line over TCP.

    request:  {"type": "predict", "id": str, "x": [...], "eps": float}
    response: {"type": "interval", "id": str, "lo": num|"-inf", "hi": num|"inf"}
    health:   {"type": "health"}  ->  {"type": "ok", "status": "ready", "p": int}
    error:    {"type": "error", "id": str, "msg": str}

Floats ride as JSON numbers (shortest round-trip decimals); infinite
bounds as the strings "inf" / "-inf".
"""

from __future__ import annotations

import json
import math
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .aggregation import CombinedInterval, combine
from .conformal import PredictionInterval, PredictorConfig, fit_predictor, predict_interval
from .data import Dataset, load_csv


class AggregateError(RuntimeError):
    """Too few nodes answered; per-node outcomes attached."""

    def __init__(self, message: str, outcomes: dict[str, str]):
        super().__init__(message)
        self.outcomes = outcomes


def encode_bound(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def decode_bound(v) -> float:
    if isinstance(v, str):
        return float(v)
    return float(v)


class WireRecorder:
    """Captures every byte a client sends or receives, for transcript
    inspection in non-disclosure tests."""

    def __init__(self):
        self._lock = threading.Lock()
        self.chunks: list[tuple[str, bytes]] = []

    def record(self, direction: str, data: bytes) -> None:
        with self._lock:
            self.chunks.append((direction, data))

    def transcript(self) -> bytes:
        with self._lock:
            return b"".join(data for _, data in self.chunks)

    def messages(self) -> list[dict]:
        """Every JSON object that crossed the wire, parsed."""
        out = []
        for direction, data in list(self.chunks):
            for line in data.split(b"\n"):
                if line.strip():
                    out.append(json.loads(line))
        return out


class _NodeHandler(socketserver.StreamRequestHandler):
    def handle(self):
        model = self.server.model
        p = self.server.feature_count
        for raw in self.rfile:
            line = raw.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as exc:
                self._reply({"type": "error", "id": "", "msg": f"bad json: {exc.msg}"})
                continue
            req_id = str(msg.get("id", ""))
            kind = msg.get("type")
            if kind == "health":
                self._reply({"type": "ok", "status": "ready", "p": p})
            elif kind == "predict":
                x = msg.get("x")
                eps = msg.get("eps")
                if not isinstance(x, list) or len(x) != p:
                    self._reply(
                        {
                            "type": "error",
                            "id": req_id,
                            "msg": f"expected feature vector of length {p}",
                        }
                    )
                    continue
                if not isinstance(eps, (int, float)) or not 0.0 < eps < 1.0:
                    self._reply(
                        {"type": "error", "id": req_id, "msg": "eps must be in (0, 1)"}
                    )
                    continue
                iv = predict_interval(model, [float(v) for v in x], float(eps))
                self._reply(
                    {
                        "type": "interval",
                        "id": req_id,
                        "lo": encode_bound(iv.lower),
                        "hi": encode_bound(iv.upper),
                    }
                )
            else:
                self._reply(
                    {"type": "error", "id": req_id, "msg": f"unknown message type {kind!r}"}
                )

    def _reply(self, obj: dict) -> None:
        self.wfile.write(json.dumps(obj).encode() + b"\n")
        self.wfile.flush()


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class NodeServer:
    """One data source: fits its predictor at construction, then answers
    predict/health requests until shutdown. Fit failures raise here, before
    any socket is opened."""

    def __init__(
        self,
        shard: Dataset | str,
        predictor: PredictorConfig | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        seed: int = 0,
    ):
        if not isinstance(shard, Dataset):
            shard = load_csv(shard)
        cfg = predictor or PredictorConfig()
        self.model = fit_predictor(shard, cfg, seed)
        self.feature_count = shard.feature_count
        self._server = _ThreadingServer((host, port), _NodeHandler)
        self._server.model = self.model
        self._server.feature_count = self.feature_count
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "NodeServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "NodeServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(shard_path: str, predictor: PredictorConfig, bind: str, seed: int = 0) -> NodeServer:
    """Fit on the shard file and return a started node bound to
    ``host:port`` (port 0 picks a free one)."""
    host, _, port = bind.rpartition(":")
    return NodeServer(shard_path, predictor, host or "127.0.0.1", int(port), seed).start()


class NodeClient:
    """Line-oriented JSON client with one persistent connection."""

    def __init__(self, address: str, timeout: float = 10.0, recorder: WireRecorder | None = None):
        self.address = address
        self.timeout = timeout
        self.recorder = recorder
        self._sock: socket.socket | None = None
        self._buffer = b""

    def _connect(self) -> socket.socket:
        if self._sock is None:
            host, _, port = self.address.rpartition(":")
            self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
        return self._sock

    def request(self, obj: dict) -> dict:
        sock = self._connect()
        data = json.dumps(obj).encode() + b"\n"
        sock.sendall(data)
        if self.recorder:
            self.recorder.record("sent", data)
        while b"\n" not in self._buffer:
            chunk = sock.recv(65536)
            if not chunk:
                raise ConnectionError(f"{self.address}: connection closed mid-request")
            if self.recorder:
                self.recorder.record("received", chunk)
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return json.loads(line)

    def health(self) -> dict:
        reply = self.request({"type": "health"})
        if reply.get("type") != "ok":
            raise ConnectionError(f"{self.address}: unhealthy node: {reply}")
        return reply

    def predict(self, x: Sequence[float], epsilon: float, request_id: str) -> tuple[float, float]:
        reply = self.request(
            {"type": "predict", "id": request_id, "x": [float(v) for v in x], "eps": epsilon}
        )
        if reply.get("type") == "error":
            raise RuntimeError(f"{self.address}: {reply.get('msg')}")
        if reply.get("type") != "interval" or reply.get("id") != request_id:
            raise RuntimeError(f"{self.address}: unexpected reply {reply}")
        return decode_bound(reply["lo"]), decode_bound(reply["hi"])

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class Aggregator:
    """Fans predictions out to a fixed list of nodes and combines the
    answers. Responses are keyed by position in the address list and
    combined in that order, so the result does not depend on arrival
    timing. ``quorum`` is the minimum number of responding nodes (default:
    all of them)."""

    def __init__(
        self,
        addresses: Sequence[str],
        timeout: float = 10.0,
        quorum: int | None = None,
        recorder: WireRecorder | None = None,
    ):
        if not addresses:
            raise ValueError("need at least one node address")
        self.addresses = list(addresses)
        self.quorum = len(self.addresses) if quorum is None else quorum
        if not 1 <= self.quorum <= len(self.addresses):
            raise ValueError("quorum must be between 1 and the node count")
        self._clients = [NodeClient(a, timeout, recorder) for a in self.addresses]
        self._pool = ThreadPoolExecutor(max_workers=len(self.addresses))
        self._counter = 0

    def feature_count(self) -> int:
        replies = [c.health() for c in self._clients]
        counts = {r["p"] for r in replies}
        if len(counts) != 1:
            raise AggregateError(
                f"nodes disagree on feature count: {sorted(counts)}",
                {c.address: "ok" for c in self._clients},
            )
        return counts.pop()

    def predict(self, x: Sequence[float], epsilon: float) -> CombinedInterval:
        self._counter += 1
        req = f"r{self._counter}"

        def ask(index: int):
            return self._clients[index].predict(x, epsilon, f"{req}n{index}")

        futures = {i: self._pool.submit(ask, i) for i in range(len(self._clients))}
        results: dict[int, tuple[float, float]] = {}
        outcomes: dict[str, str] = {}
        for i, fut in futures.items():
            try:
                results[i] = fut.result()
                outcomes[self.addresses[i]] = "ok"
            except Exception as exc:  # noqa: BLE001 - reported per node
                outcomes[self.addresses[i]] = f"{type(exc).__name__}: {exc}"
        if len(results) < self.quorum:
            raise AggregateError(
                f"only {len(results)} of {len(self._clients)} nodes answered "
                f"(quorum {self.quorum})",
                outcomes,
            )
        per_source = tuple(
            PredictionInterval(results[i][0], results[i][1], epsilon)
            for i in sorted(results)
        )
        return CombinedInterval(
            interval=combine(per_source),
            source_count=len(per_source),
            per_source=per_source,
        )

    def close(self) -> None:
        for c in self._clients:
            c.close()
        self._pool.shutdown(wait=False)

    def __enter__(self) -> "Aggregator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def aggregate_predict(
    addresses: Sequence[str],
    x: Sequence[float],
    epsilon: float,
    timeout: float = 10.0,
    quorum: int | None = None,
    recorder: WireRecorder | None = None,
) -> CombinedInterval:
    """One-shot fan-out: connect, predict once on every node, combine."""
    with Aggregator(addresses, timeout, quorum, recorder) as agg:
        return agg.predict(x, epsilon)
