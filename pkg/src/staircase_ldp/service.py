"""Collector: per-epoch aggregation of perturbed reports over a line-based JSON protocol.

Messages (one JSON object per line, no other keys allowed)::

    {"v": 1, "t": "submit",   "e": <epoch>, "i": <index>, "n": "<nonce>"}
    {"v": 1, "t": "freeze",   "e": <epoch>}
    {"v": 1, "t": "retrieve", "e": <epoch>}

Every request gets one JSON reply line.  A successful ``retrieve`` reply is a
header line followed by ``d`` lines ``index,frequency``: the whole table is
downloaded, so the server never learns which entry a client wanted.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import socket
import threading
from dataclasses import dataclass

import numpy as np

from .estimation import DistributionEstimate, Estimator, Observation

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
SCHEMA = {
    "submit": {"v", "t", "e", "i", "n"},
    "freeze": {"v", "t", "e"},
    "retrieve": {"v", "t", "e"},
}
LOW_CONFIDENCE_BELOW = 100


class ProtocolError(ValueError):
    pass


class EpochError(RuntimeError):
    pass


def parse_message(line: str | bytes) -> dict:
    """Decode and validate one request; unknown fields are refused outright."""
    try:
        msg = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed record: {exc}") from None
    if not isinstance(msg, dict):
        raise ProtocolError("record must be an object")
    kind = msg.get("t")
    if kind not in SCHEMA:
        raise ProtocolError(f"unknown message type {kind!r}")
    keys = set(msg)
    if keys != SCHEMA[kind]:
        extra, missing = keys - SCHEMA[kind], SCHEMA[kind] - keys
        raise ProtocolError(f"bad fields for {kind}: extra={sorted(extra)} missing={sorted(missing)}")
    if msg["v"] != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported version {msg['v']!r}")
    if not _is_int(msg["e"]) or msg["e"] < 0:
        raise ProtocolError("epoch must be a non-negative integer")
    if kind == "submit":
        if not _is_int(msg["i"]):
            raise ProtocolError("index must be an integer")
        if not isinstance(msg["n"], str) or len(msg["n"]) > 64:
            raise ProtocolError("nonce must be a short string")
    return msg


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def submit_record(epoch: int, index: int, nonce: str) -> str:
    return json.dumps({"v": PROTOCOL_VERSION, "t": "submit", "e": epoch, "i": index, "n": nonce})


@dataclass
class EpochAggregate:
    epoch: int
    counts: np.ndarray
    frozen: bool = False
    estimate: DistributionEstimate | None = None

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def same_as(self, other: "EpochAggregate") -> bool:
        if self.epoch != other.epoch or self.frozen != other.frozen:
            return False
        if not np.array_equal(self.counts, other.counts):
            return False
        if (self.estimate is None) != (other.estimate is None):
            return False
        return self.estimate is None or np.array_equal(self.estimate.p_hat, other.estimate.p_hat)


class Collector:
    """In-process aggregation core shared by the network server and simulations."""

    def __init__(self, estimator: Estimator, low_confidence_below: int = LOW_CONFIDENCE_BELOW):
        self.estimator = estimator
        self.d = estimator.table.d
        self.low_confidence_below = low_confidence_below
        self._epochs: dict[int, EpochAggregate] = {}
        self._lock = threading.Lock()
        self.rejected = 0

    def _epoch(self, e: int) -> EpochAggregate:
        agg = self._epochs.get(e)
        if agg is None:
            agg = self._epochs[e] = EpochAggregate(e, np.zeros(self.d, dtype=np.int64))
        return agg

    def submit(self, epoch: int, index: int, nonce: str = "") -> None:
        if not 0 <= index < self.d:
            with self._lock:
                self.rejected += 1
            raise ProtocolError(f"index {index} outside [0, {self.d})")
        with self._lock:
            agg = self._epoch(epoch)
            if agg.frozen:
                raise EpochError(f"epoch {epoch} is frozen")
            agg.counts[index] += 1

    def submit_many(self, epoch: int, indices) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.d):
            raise ProtocolError("index outside the domain")
        with self._lock:
            agg = self._epoch(epoch)
            if agg.frozen:
                raise EpochError(f"epoch {epoch} is frozen")
            agg.counts += np.bincount(idx, minlength=self.d)

    def freeze(self, epoch: int) -> EpochAggregate:
        """Close an epoch and estimate it; an epoch nobody reported to is frozen empty."""
        with self._lock:
            agg = self._epoch(epoch)
            if agg.frozen:
                raise EpochError(f"epoch {epoch} already frozen")
            agg.frozen = True
            counts = agg.counts.copy()
        est = self.estimator.estimate(Observation(self.d, counts), self.low_confidence_below)
        agg.estimate = est
        return agg

    def retrieve(self, epoch: int) -> DistributionEstimate:
        with self._lock:
            agg = self._epochs.get(epoch)
        if agg is None:
            raise EpochError(f"unknown epoch {epoch}")
        if not agg.frozen or agg.estimate is None:
            raise EpochError(f"epoch {epoch} is not frozen yet")
        return agg.estimate

    def aggregate(self, epoch: int) -> EpochAggregate:
        with self._lock:
            if epoch not in self._epochs:
                raise EpochError(f"unknown epoch {epoch}")
            return self._epochs[epoch]

    def handle(self, msg: dict) -> list[str]:
        """Execute a validated request and return the reply lines."""
        kind, e = msg["t"], msg["e"]
        if kind == "submit":
            self.submit(e, msg["i"], msg["n"])
            return [json.dumps({"ok": True})]
        if kind == "freeze":
            agg = self.freeze(e)
            return [json.dumps({"ok": True, "e": e, "n": agg.n})]
        est = self.retrieve(e)
        head = {"ok": True, "e": e, "n": est.n, "d": self.d, "low_confidence": bool(est.low_confidence)}
        return [json.dumps(head)] + [f"{i},{v!r}" for i, v in enumerate(est.p_hat.tolist())]


# --- configuration ---------------------------------------------------------------------


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0
    domain: str = ""
    table: str = ""
    epoch_seconds: int = 300
    low_confidence_below: int = LOW_CONFIDENCE_BELOW

    ENV_PREFIX = "STAIRCASE_"


def load_config(path: str | None = None, env: dict | None = None) -> ServiceConfig:
    """``key = value`` lines (``#`` comments); ``STAIRCASE_<KEY>`` variables override."""
    values: dict[str, str] = {}
    if path:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                k, v = (s.strip() for s in line.split("=", 1))
                values[k] = v
    env = os.environ if env is None else env
    cfg = ServiceConfig()
    for name, default in vars(ServiceConfig()).items():
        raw = env.get(ServiceConfig.ENV_PREFIX + name.upper(), values.get(name))
        if raw is not None:
            setattr(cfg, name, type(default)(raw))
    unknown = set(values) - set(vars(cfg))
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


# --- network server ----------------------------------------------------------------------


class CollectorServer:
    """Asyncio TCP server running on a private event loop in a background thread."""

    def __init__(self, collector: Collector, host: str = "127.0.0.1", port: int = 0):
        self.collector = collector
        self.host, self.port = host, port
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.base_events.Server | None = None
        self._thread: threading.Thread | None = None
        self._tasks: set[asyncio.Task] = set()

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    @property
    def running(self) -> bool:
        return self._thread is not None

    def start(self) -> "CollectorServer":
        if self.running:
            return self
        ready = threading.Event()
        failure: list[BaseException] = []

        def run():
            loop = asyncio.new_event_loop()
            self._loop = loop
            try:
                self._server = loop.run_until_complete(asyncio.start_server(self._client, self.host, self.port))
            except OSError as exc:
                failure.append(exc)
                ready.set()
                loop.close()
                return
            self.port = self._server.sockets[0].getsockname()[1]
            ready.set()
            loop.run_forever()
            loop.close()

        self._thread = threading.Thread(target=run, name="collector", daemon=True)
        self._thread.start()
        ready.wait()
        if failure:
            self._thread = None
            raise failure[0]
        return self

    def stop(self) -> None:
        if not self.running:
            return
        fut = asyncio.run_coroutine_threadsafe(self._shutdown(), self._loop)
        fut.result()
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._thread = None

    async def _shutdown(self) -> None:
        self._server.close()
        await self._server.wait_closed()
        # let connected clients finish what they already sent
        if self._tasks:
            await asyncio.wait(self._tasks, timeout=5)

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                try:
                    reply = self.collector.handle(parse_message(line))
                except (ProtocolError, EpochError) as exc:
                    reply = [json.dumps({"ok": False, "error": str(exc)})]
                writer.write(("\n".join(reply) + "\n").encode())
                await writer.drain()
        except (ConnectionResetError, BrokenPipeError):
            pass
        finally:
            self._tasks.discard(task)
            writer.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class CollectorClient:
    """Blocking client; ``submit_many`` pipelines requests and then reads the acks."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("r", encoding="utf-8", newline="\n")

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send(self, records: list[str]) -> None:
        self.sock.sendall(("\n".join(records) + "\n").encode())

    def _reply(self) -> dict:
        line = self.rfile.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def request(self, record: str) -> dict:
        self._send([record])
        return self._reply()

    def submit(self, epoch: int, index: int, nonce: str) -> dict:
        return self.request(submit_record(epoch, index, nonce))

    def submit_many(self, epoch: int, indices, nonce_prefix: str = "", window: int = 256) -> list[dict]:
        records = [submit_record(epoch, int(i), f"{nonce_prefix}{k}") for k, i in enumerate(indices)]
        replies = []
        # bounded pipelining keeps both socket buffers from filling up
        for start in range(0, len(records), window):
            chunk = records[start : start + window]
            self._send(chunk)
            replies.extend(self._reply() for _ in chunk)
        return replies

    def freeze(self, epoch: int) -> dict:
        return self.request(json.dumps({"v": PROTOCOL_VERSION, "t": "freeze", "e": epoch}))

    def retrieve(self, epoch: int) -> tuple[dict, np.ndarray]:
        head = self.request(json.dumps({"v": PROTOCOL_VERSION, "t": "retrieve", "e": epoch}))
        if not head.get("ok"):
            raise EpochError(head.get("error", "retrieve failed"))
        p = np.empty(head["d"])
        for _ in range(head["d"]):
            i, v = self.rfile.readline().strip().split(",")
            p[int(i)] = float(v)
        return head, p
