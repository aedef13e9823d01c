"""Master-side carriers for synchronous rounds.

Both carriers expose the same four calls::

    start(assignments)        ship one AssignShard per worker
    broadcast_round(params)   send RoundParams (one per worker, same k)
    gather_round(k)           block until all N RoundResults for k arrive
    close()                   send Shutdown and release resources

Every message crosses a real encode/decode boundary, also on loopback, so
the optimization sees bit-identical numbers whichever carrier is used.
Results are always returned in worker_id order.
"""

import os
import selectors
import socket
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from . import messages as msg
from .worker import WorkerNode

DEFAULT_TIMEOUT = 600.0


class WorkerDisconnected(msg.TransportError):
    """A worker connection closed or failed mid-run."""

    def __init__(self, worker_id, detail=""):
        super().__init__(f"worker {worker_id} disconnected" + (f": {detail}" if detail else ""))
        self.worker_id = worker_id


class StaleRoundError(msg.ProtocolError):
    """A result arrived for a round other than the outstanding one."""


class RemoteSolveError(RuntimeError):
    """A worker reported that its subproblem solve failed."""

    def __init__(self, worker_id, k, detail):
        super().__init__(f"worker {worker_id} failed in round {k}: {detail}")
        self.worker_id = worker_id
        self.k = k


def check_barrier(log, n_workers):
    """Verify that no round-(k+1) send precedes the N round-k receipts.

    `log` holds ``(event, k, worker_id)`` tuples with event ``"send"`` or
    ``"recv"``. Raises ProtocolError on the first violation.
    """
    received = {}
    for event, k, wid in log:
        if event == "recv":
            received[k] = received.get(k, 0) + 1
        elif event == "send" and k > 0 and received.get(k - 1, 0) < n_workers:
            raise msg.ProtocolError(
                f"round {k} sent to worker {wid} after only {received.get(k - 1, 0)} "
                f"of {n_workers} round-{k - 1} results"
            )


class _Base:
    def __init__(self):
        self.n_workers = 0
        self.log = []
        self.outstanding = None

    def _check_params(self, params):
        if len(params) != self.n_workers:
            raise msg.ProtocolError(f"{len(params)} round messages for {self.n_workers} workers")
        ks = {p.k for p in params}
        if len(ks) != 1:
            raise msg.ProtocolError("round messages disagree on k")
        if self.outstanding is not None:
            raise msg.ProtocolError(f"round {self.outstanding} still outstanding")
        self.outstanding = ks.pop()

    def _finish(self, k, results):
        if self.outstanding != k:
            raise msg.ProtocolError(f"gather for round {k}, outstanding is {self.outstanding}")
        by_id = {}
        for r in results:
            if isinstance(r, msg.WorkerError):
                self.outstanding = None
                raise RemoteSolveError(r.worker_id, r.k, r.message)
            if not isinstance(r, msg.RoundResult):
                raise msg.ProtocolError(f"expected RoundResult, got {type(r).__name__}")
            if r.k != k:
                raise StaleRoundError(f"worker {r.worker_id} answered round {r.k} during round {k}")
            if r.worker_id in by_id:
                raise msg.ProtocolError(f"duplicate result from worker {r.worker_id}")
            by_id[r.worker_id] = r
        self.outstanding = None
        return [by_id[i] for i in sorted(by_id)]


class LoopbackTransport(_Base):
    """In-process workers reached through encode/decode.

    Parameters
    ----------
    threads : int
        Size of the worker pool; 1 (default) runs workers sequentially.
    """

    def __init__(self, threads=1):
        super().__init__()
        self.threads = int(threads)
        self.nodes = []
        self.pending = []
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def start(self, assignments):
        self.nodes = [WorkerNode(msg.decode(msg.encode(a))) for a in assignments]
        ids = [n.worker_id for n in self.nodes]
        if sorted(ids) != list(range(len(ids))):
            raise msg.ProtocolError(f"worker ids must be 0..N-1, got {ids}")
        self.nodes.sort(key=lambda n: n.worker_id)
        self.n_workers = len(self.nodes)

    def broadcast_round(self, params):
        self._check_params(params)
        self.pending = []
        for wid, p in enumerate(params):
            self.log.append(("send", p.k, wid))
            self.pending.append(msg.encode(p))

    def _serve(self, i):
        reply = self.nodes[i].handle(msg.decode(self.pending[i]))
        return msg.encode(reply)

    def gather_round(self, k):
        idx = range(self.n_workers)
        if self.pool is not None:
            frames = list(self.pool.map(self._serve, idx))
        else:
            frames = [self._serve(i) for i in idx]
        results = [msg.decode(f) for f in frames]
        for r in results:
            self.log.append(("recv", r.k, r.worker_id))
        return self._finish(k, results)

    def close(self):
        for node in self.nodes:
            node.handle(msg.decode(msg.encode(msg.Shutdown())))
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None


def recv_exact(sock, n):
    """Read exactly `n` bytes or raise EOFError."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_message(sock):
    header = recv_exact(sock, msg.HEADER.size)
    msg_type, length = msg.parse_header(header)
    return msg.decode_payload(msg_type, recv_exact(sock, length))


def send_message(sock, m):
    sock.sendall(msg.encode(m))


class TcpTransport(_Base):
    """One TCP connection per worker; the master listens, workers dial in.

    The listening socket is bound on construction so the caller can learn
    the port (pass ``port=0`` for an ephemeral one) before spawning workers.
    """

    def __init__(self, host="127.0.0.1", port=0, timeout=DEFAULT_TIMEOUT):
        super().__init__()
        self.timeout = timeout
        self.server = socket.create_server((host, port))
        self.server.settimeout(timeout)
        self.socks = {}

    @property
    def address(self):
        return self.server.getsockname()[:2]

    def start(self, assignments):
        n = len(assignments)
        while len(self.socks) < n:
            try:
                conn, _ = self.server.accept()
            except socket.timeout as exc:
                raise msg.TransportError(
                    f"only {len(self.socks)} of {n} workers connected within {self.timeout}s"
                ) from exc
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(self.timeout)
            try:
                hello = read_message(conn)
            except (EOFError, OSError) as exc:
                conn.close()
                raise msg.TransportError(f"worker handshake failed: {exc}") from exc
            if not isinstance(hello, msg.Hello):
                conn.close()
                raise msg.ProtocolError(f"expected Hello, got {type(hello).__name__}")
            wid = hello.worker_id
            if wid >= n or wid in self.socks:
                conn.close()
                raise msg.ProtocolError(f"unexpected worker id {wid}")
            self.socks[wid] = conn
        self.n_workers = n
        for a in assignments:
            self._send(a.worker_id, a)
        for wid in sorted(self.socks):
            ack = self._recv(wid)
            if isinstance(ack, msg.WorkerError):
                raise RemoteSolveError(wid, ack.k, ack.message)
            if not (isinstance(ack, msg.Hello) and ack.worker_id == wid):
                raise msg.ProtocolError(f"bad assignment ack from worker {wid}")

    def _send(self, wid, m):
        try:
            send_message(self.socks[wid], m)
        except OSError as exc:
            raise WorkerDisconnected(wid, str(exc)) from exc

    def _recv(self, wid):
        try:
            return read_message(self.socks[wid])
        except (EOFError, OSError) as exc:
            raise WorkerDisconnected(wid, str(exc)) from exc

    def broadcast_round(self, params):
        self._check_params(params)
        for wid, p in enumerate(params):
            self.log.append(("send", p.k, wid))
            self._send(wid, p)

    def gather_round(self, k):
        sel = selectors.DefaultSelector()
        for wid, s in self.socks.items():
            sel.register(s, selectors.EVENT_READ, wid)
        results = []
        try:
            while len(results) < self.n_workers:
                ready = sel.select(self.timeout)
                if not ready:
                    raise msg.TransportError(f"round {k} timed out after {self.timeout}s")
                for key, _ in ready:
                    wid = key.data
                    r = self._recv(wid)
                    sel.unregister(key.fileobj)
                    self.log.append(("recv", getattr(r, "k", None), wid))
                    if getattr(r, "worker_id", wid) != wid:
                        raise msg.ProtocolError(f"connection {wid} spoke for worker {r.worker_id}")
                    results.append(r)
        finally:
            sel.close()
        return self._finish(k, results)

    def close(self):
        for wid, s in self.socks.items():
            try:
                send_message(s, msg.Shutdown())
            except OSError:
                pass
            s.close()
        self.socks = {}
        self.server.close()


def serve_worker(host, port, worker_id, connect_timeout=30.0):
    """Worker process loop: dial the master, take a shard, answer rounds.

    Returns when the master sends Shutdown. Connection attempts are retried
    until `connect_timeout` so workers may start before the master.
    """
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    with sock:
        send_message(sock, msg.Hello(worker_id))
        assign = read_message(sock)
        if not isinstance(assign, msg.AssignShard):
            raise msg.ProtocolError(f"expected AssignShard, got {type(assign).__name__}")
        if assign.worker_id != worker_id:
            raise msg.ProtocolError(f"assigned shard for worker {assign.worker_id}")
        node = WorkerNode(assign)
        send_message(sock, msg.Hello(worker_id))
        while True:
            try:
                m = read_message(sock)
            except EOFError:
                return
            reply = node.handle(m)
            if reply is None:
                return
            send_message(sock, reply)


def spawn_local_workers(host, port, n_workers):
    """Start `n_workers` worker processes on this machine; returns the Popen list."""
    env = dict(os.environ)
    src = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    return [
        subprocess.Popen(
            [sys.executable, "-m", "sadmm.cli", "serve-worker",
             "--master", f"{host}:{port}", "--worker-id", str(i)],
            env=env,
        )
        for i in range(n_workers)
    ]
