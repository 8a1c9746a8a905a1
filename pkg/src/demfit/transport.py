"""Message transports between the manager and the worker endpoints.

Both transports expose the same blocking request/reply surface, so the
scheduler fully determines message ordering and the resulting traces are
identical across transports.

Socket wire format: a connection opens with the magic bytes b"DEMX1";
every frame is little-endian {u32 body-length, u8 msg-kind, u32 subset_id,
u64 iteration, f64-array payload}.
"""
from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from .model import ModelContract, SuffStats

MAGIC = b"DEMX1"
_HEAD = struct.Struct("<BIQ")  # kind, subset_id, iteration

KIND_ESTEP_REQ = 1
KIND_ESTEP_REP = 2
KIND_LOGLIK_REQ = 3
KIND_LOGLIK_REP = 4
KIND_SHUTDOWN = 5


def write_frame(sock, kind: int, subset_id: int, iteration: int, payload: np.ndarray):
    body = _HEAD.pack(kind, subset_id, iteration) + np.asarray(
        payload, dtype="<f8"
    ).tobytes()
    sock.sendall(struct.pack("<I", len(body)) + body)


def _recv_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection mid-frame")
        buf += chunk
    return buf


def read_frame(sock):
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    body = _recv_exact(sock, length)
    kind, subset_id, iteration = _HEAD.unpack(body[: _HEAD.size])
    payload = np.frombuffer(body[_HEAD.size :], dtype="<f8").copy()
    return kind, subset_id, iteration, payload


class InProcessPool:
    """Direct-call worker endpoints for single-threaded deterministic runs."""

    def __init__(self, model: ModelContract, subsets):
        self.model = model
        self.subsets = list(subsets)
        self.messages_sent = 0

    def estep(self, k: int, theta, anchor_tag: int) -> SuffStats:
        self.messages_sent += 2  # theta out, stats back
        return self.model.local_estep(theta, self.subsets[k], subset_id=k,
                                      anchor_tag=anchor_tag)

    def loglik(self, k: int, theta) -> float:
        self.messages_sent += 2
        return self.model.local_loglik(theta, self.subsets[k])

    def close(self):
        pass


class SocketPool:
    """Worker endpoints served over localhost TCP sockets.

    One serving thread per subset; the manager side issues blocking RPCs,
    so ordering is still controlled by the caller.
    """

    def __init__(self, model: ModelContract, subsets):
        self.model = model
        self.subsets = list(subsets)
        self.messages_sent = 0
        self._conns = []
        self._threads = []
        for k, subset in enumerate(self.subsets):
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.bind(("127.0.0.1", 0))
            server.listen(1)
            port = server.getsockname()[1]
            thread = threading.Thread(
                target=self._serve, args=(server, k, subset), daemon=True
            )
            thread.start()
            conn = socket.create_connection(("127.0.0.1", port))
            conn.sendall(MAGIC)
            self._conns.append(conn)
            self._threads.append(thread)

    def _serve(self, server, k: int, subset):
        conn, _ = server.accept()
        server.close()
        try:
            if _recv_exact(conn, len(MAGIC)) != MAGIC:
                raise ConnectionError("bad magic header")
            while True:
                kind, subset_id, iteration, payload = read_frame(conn)
                if kind == KIND_SHUTDOWN:
                    return
                theta = self.model.unpack_theta(payload)
                if kind == KIND_ESTEP_REQ:
                    stats = self.model.local_estep(
                        theta, subset, subset_id=k, anchor_tag=iteration
                    )
                    write_frame(conn, KIND_ESTEP_REP, k, iteration,
                                self.model.pack_stats(stats))
                elif kind == KIND_LOGLIK_REQ:
                    ll = self.model.local_loglik(theta, subset)
                    write_frame(conn, KIND_LOGLIK_REP, k, iteration, np.array([ll]))
        finally:
            conn.close()

    def estep(self, k: int, theta, anchor_tag: int) -> SuffStats:
        conn = self._conns[k]
        write_frame(conn, KIND_ESTEP_REQ, k, anchor_tag, self.model.pack_theta(theta))
        kind, subset_id, iteration, payload = read_frame(conn)
        assert kind == KIND_ESTEP_REP and subset_id == k
        self.messages_sent += 2
        return self.model.unpack_stats(payload, subset_id=k, anchor_tag=iteration)

    def loglik(self, k: int, theta) -> float:
        conn = self._conns[k]
        write_frame(conn, KIND_LOGLIK_REQ, k, 0, self.model.pack_theta(theta))
        kind, _, _, payload = read_frame(conn)
        assert kind == KIND_LOGLIK_REP
        self.messages_sent += 2
        return float(payload[0])

    def close(self):
        for conn in self._conns:
            try:
                write_frame(conn, KIND_SHUTDOWN, 0, 0, np.empty(0))
                conn.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=5)


def make_pool(transport: str, model, subsets):
    if transport == "in_process":
        return InProcessPool(model, subsets)
    if transport == "socket":
        return SocketPool(model, subsets)
    raise ValueError(f"unknown transport {transport!r}")
