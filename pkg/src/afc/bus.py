"""In-memory key-value exchange with blocking takes.

Two transports share one state machine: an in-process bus guarded by a lock
(for threads in one interpreter) and an asyncio TCP server speaking a small
length-prefixed binary protocol.

Frame layout, all integers little-endian::

    u32 length  (bytes that follow)
    u8  opcode
    u16 key length, key bytes (UTF-8)
    u32 payload count, count * f64
"""

from __future__ import annotations

import asyncio
import collections
import multiprocessing as mp
import re
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

PUT, GET, TAKE, WAIT_TAKE, PING, SHUTDOWN = 1, 2, 3, 4, 5, 6
OK, MISS, ERR = 16, 17, 18
OPCODES = {PUT, GET, TAKE, WAIT_TAKE, PING, SHUTDOWN, OK, MISS, ERR}

STATS_KEY = "_bus/stats"
MAX_FRAME = 1 << 28

FIELDS = ("state", "action", "reward", "flag")
_KEY_RE = re.compile(
    r"^run/(0|[1-9]\d*)/sim/(0|[1-9]\d*)/pe/(0|[1-9]\d*)/(state|action|reward|flag)/(0|[1-9]\d*)$")

_HEAD = struct.Struct("<IBH")
_COUNT = struct.Struct("<I")


class BusError(RuntimeError):
    """Protocol misuse reported by the bus (an ERR frame)."""


class BusTimeout(TimeoutError):
    pass


class FrameError(ValueError):
    pass


# --- keys -------------------------------------------------------------------

@dataclass(frozen=True)
class Key:
    run: int
    sim: int
    pe: int
    field: str
    step: int

    def __str__(self) -> str:
        return make_key(self.run, self.sim, self.pe, self.field, self.step)


def make_key(run: int, sim: int, pe: int, field: str, step: int) -> str:
    if field not in FIELDS:
        raise ValueError(f"unknown key field {field!r}")
    ids = (run, sim, pe, step)
    if any(isinstance(i, bool) or int(i) != i or i < 0 for i in ids):
        raise ValueError("key ids must be non-negative integers")
    return f"run/{int(run)}/sim/{int(sim)}/pe/{int(pe)}/{field}/{int(step)}"


def parse_key(key: str) -> Key:
    m = _KEY_RE.match(key)
    if not m:
        raise ValueError(f"malformed key {key!r}")
    run, sim, pe, field, step = m.groups()
    return Key(int(run), int(sim), int(pe), field, int(step))


# --- frames -----------------------------------------------------------------

@dataclass
class Frame:
    op: int
    key: str = ""
    payload: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.payload is None:
            self.payload = np.zeros(0)


def encode_frame(op: int, key: str = "", payload=()) -> bytes:
    kb = key.encode()
    if len(kb) > 0xFFFF:
        raise FrameError("key longer than 65535 bytes")
    body = np.ascontiguousarray(payload, dtype="<f8").ravel().tobytes()
    n = len(body) // 8
    length = 1 + 2 + len(kb) + 4 + len(body)
    return _HEAD.pack(length, op, len(kb)) + kb + _COUNT.pack(n) + body


def decode_body(body: bytes) -> Frame:
    """Parse everything after the length prefix."""
    if len(body) < 7:
        raise FrameError("frame shorter than its fixed header")
    op = body[0]
    if op not in OPCODES:
        raise FrameError(f"unknown opcode {op}")
    (klen,) = struct.unpack_from("<H", body, 1)
    if 3 + klen + 4 > len(body):
        raise FrameError("key overruns frame")
    key = body[3:3 + klen].decode()
    (count,) = _COUNT.unpack_from(body, 3 + klen)
    start = 7 + klen
    if start + 8 * count != len(body):
        raise FrameError("payload count disagrees with frame length")
    payload = np.frombuffer(body, dtype="<f8", count=count, offset=start).astype(np.float64)
    return Frame(op, key, payload)


def decode_frame(buf: bytes) -> Frame:
    if len(buf) < 4:
        raise FrameError("missing length prefix")
    (length,) = struct.unpack_from("<I", buf)
    if length != len(buf) - 4:
        raise FrameError("length prefix disagrees with frame size")
    return decode_body(buf[4:])


# --- state machine ----------------------------------------------------------

class BusState:
    """Store, waiter queues and counters.  Not thread-safe by itself.

    A waiter is any object with ``deliver(payload) -> bool``; it returns False
    if it already gave up, in which case the next waiter (or the store) gets
    the payload.
    """

    def __init__(self):
        self.store: dict[str, np.ndarray] = {}
        self.waiters: dict[str, collections.deque] = collections.defaultdict(collections.deque)
        self.puts = 0
        self.takes = 0
        self.misses = 0

    def put(self, key: str, payload: np.ndarray) -> None:
        if key in self.store:
            raise BusError(f"duplicate put on un-taken key {key}")
        self.puts += 1
        q = self.waiters.get(key)
        while q:
            if q.popleft().deliver(payload):
                self.takes += 1
                if not q:
                    del self.waiters[key]
                return
        self.waiters.pop(key, None)
        self.store[key] = payload

    def get(self, key: str):
        if key == STATS_KEY:
            return self.stats()
        v = self.store.get(key)
        if v is None:
            self.misses += 1
        return v

    def take(self, key: str, count_miss: bool = True):
        v = self.store.pop(key, None)
        if v is None:
            if count_miss:
                self.misses += 1
        else:
            self.takes += 1
        return v

    def add_waiter(self, key: str, waiter) -> None:
        self.waiters[key].append(waiter)

    def drop_waiter(self, key: str, waiter) -> None:
        q = self.waiters.get(key)
        if q is not None:
            try:
                q.remove(waiter)
            except ValueError:
                pass
            if not q:
                del self.waiters[key]

    def stats(self) -> np.ndarray:
        waiting = sum(len(q) for q in self.waiters.values())
        return np.array([self.puts, self.takes, self.misses, len(self.store), waiting], dtype=float)


# --- in-process transport ---------------------------------------------------

class _ThreadWaiter:
    __slots__ = ("event", "payload", "cancelled")

    def __init__(self):
        self.event = threading.Event()
        self.payload = None
        self.cancelled = False

    def deliver(self, payload) -> bool:
        if self.cancelled:
            return False
        self.payload = payload
        self.event.set()
        return True


class InprocBus:
    """Thread-safe bus living in this interpreter."""

    def __init__(self):
        self._lock = threading.Lock()
        self.state = BusState()

    def put(self, key: str, payload=()) -> None:
        arr = np.array(payload, dtype=np.float64).ravel()
        with self._lock:
            self.state.put(key, arr)

    def get(self, key: str):
        with self._lock:
            v = self.state.get(key)
        return None if v is None else v.copy()

    def take(self, key: str):
        with self._lock:
            return self.state.take(key)

    def wait_take(self, key: str, timeout: float | None = None) -> np.ndarray:
        with self._lock:
            v = self.state.take(key, count_miss=False)
            if v is not None:
                return v
            w = _ThreadWaiter()
            self.state.add_waiter(key, w)
        w.event.wait(None if timeout is None or timeout < 0 else timeout)
        with self._lock:
            if w.payload is not None:
                return w.payload
            w.cancelled = True
            self.state.drop_waiter(key, w)
            self.state.misses += 1
        raise BusTimeout(f"timed out waiting for {key}")

    def ping(self) -> bool:
        return True

    def stats(self) -> np.ndarray:
        with self._lock:
            return self.state.stats()

    def close(self) -> None:
        pass

    def shutdown(self) -> None:
        pass


_INPROC: dict[str, InprocBus] = {}
_INPROC_LOCK = threading.Lock()


def inproc_bus(name: str = "default") -> InprocBus:
    with _INPROC_LOCK:
        bus = _INPROC.get(name)
        if bus is None:
            bus = _INPROC[name] = InprocBus()
        return bus


def drop_inproc(name: str = "default") -> None:
    with _INPROC_LOCK:
        _INPROC.pop(name, None)


# --- network transport ------------------------------------------------------

class _FutureWaiter:
    __slots__ = ("future",)

    def __init__(self, future):
        self.future = future

    def deliver(self, payload) -> bool:
        if self.future.done():
            return False
        self.future.set_result(payload)
        return True


class _Server:
    def __init__(self):
        self.state = BusState()
        self.writers: set = set()
        self.done: asyncio.Event | None = None

    def _reply(self, writer, op: int, key: str = "", payload=()) -> None:
        writer.write(encode_frame(op, key, payload))

    async def handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        sock = writer.get_extra_info("socket")
        if sock is not None:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.writers.add(writer)
        try:
            while True:
                try:
                    head = await reader.readexactly(4)
                except (asyncio.IncompleteReadError, ConnectionError):
                    return
                (length,) = struct.unpack("<I", head)
                if length > MAX_FRAME:
                    self._reply(writer, ERR, "frame too large")
                    return
                try:
                    body = await reader.readexactly(length)
                    frame = decode_body(body)
                except asyncio.IncompleteReadError:
                    return
                except (FrameError, UnicodeDecodeError) as exc:
                    self._reply(writer, ERR, str(exc))
                    await writer.drain()
                    return
                if frame.op == SHUTDOWN:
                    self._reply(writer, OK)
                    await writer.drain()
                    self.done.set()
                    return
                await self.dispatch(frame, writer)
                await writer.drain()
        finally:
            self.writers.discard(writer)
            writer.close()

    async def dispatch(self, frame: Frame, writer) -> None:
        st = self.state
        op, key = frame.op, frame.key
        if op == PING:
            self._reply(writer, OK)
        elif op == PUT:
            try:
                st.put(key, frame.payload)
                self._reply(writer, OK)
            except BusError as exc:
                self._reply(writer, ERR, str(exc))
        elif op == GET:
            v = st.get(key)
            self._reply(writer, MISS) if v is None else self._reply(writer, OK, key, v)
        elif op == TAKE:
            v = st.take(key)
            self._reply(writer, MISS) if v is None else self._reply(writer, OK, key, v)
        elif op == WAIT_TAKE:
            timeout = float(frame.payload[0]) if frame.payload.size else -1.0
            v = st.take(key, count_miss=False)
            if v is not None:
                self._reply(writer, OK, key, v)
                return
            fut = asyncio.get_running_loop().create_future()
            w = _FutureWaiter(fut)
            st.add_waiter(key, w)
            try:
                v = await asyncio.wait_for(asyncio.shield(fut), None if timeout < 0 else timeout)
                self._reply(writer, OK, key, v)
            except asyncio.TimeoutError:
                if fut.done():  # delivered in the same tick as the timeout
                    self._reply(writer, OK, key, fut.result())
                else:
                    fut.cancel()
                    st.drop_waiter(key, w)
                    st.misses += 1
                    self._reply(writer, MISS)
        else:
            self._reply(writer, ERR, f"opcode {op} not accepted from clients")

    async def run(self, host: str, port: int, ready=None) -> None:
        self.done = asyncio.Event()
        server = await asyncio.start_server(self.handle, host, port)
        bound = server.sockets[0].getsockname()[1]
        if ready is not None:
            ready(bound)
        async with server:
            await self.done.wait()
            server.close()
            for w in list(self.writers):
                w.close()
        await server.wait_closed()


def parse_endpoint(endpoint: str) -> tuple[str, str | tuple[str, int]]:
    """``("inproc", name)`` or ``("tcp", (host, port))``."""
    ep = endpoint.strip()
    if ep == "inproc":
        return "inproc", "default"
    if ep.startswith("inproc://"):
        return "inproc", ep[len("inproc://"):] or "default"
    if ep.startswith("tcp://"):
        ep = ep[len("tcp://"):]
    host, sep, port = ep.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"bad bus endpoint {endpoint!r}; use inproc[://name] or host:port")
    return "tcp", (host, int(port))


def serve(endpoint: str, ready=None) -> None:
    """Run a TCP bus in the calling thread until a SHUTDOWN frame arrives."""
    kind, addr = parse_endpoint(endpoint)
    if kind != "tcp":
        raise ValueError("serve() needs a host:port endpoint")
    asyncio.run(_Server().run(addr[0], addr[1], ready))


class BusThread:
    """TCP bus on a background thread of this process (tests, single-host runs)."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._started = threading.Event()
        self.port = None
        self.error: BaseException | None = None

        def ready(p):
            self.port = p
            self._started.set()

        def main():
            try:
                serve(f"{host}:{port}", ready)
            except BaseException as exc:  # surfaced through start()
                self.error = exc
                self._started.set()

        self.host = host
        self._thread = threading.Thread(target=main, name="afc-bus", daemon=True)
        self._thread.start()
        self._started.wait(10)
        if self.error is not None:
            raise OSError(f"bus failed to bind {host}:{port}: {self.error}")

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def stop(self, timeout: float = 5.0) -> None:
        if self._thread.is_alive():
            try:
                with BusClient(self.host, self.port) as c:
                    c.shutdown()
            except OSError:
                pass
            self._thread.join(timeout)


def _serve_child(endpoint, conn):
    try:
        serve(endpoint, conn.send)
    except OSError as exc:
        conn.send(-1)
        raise SystemExit(f"bus bind failure: {exc}")


def start_server_process(endpoint: str = "127.0.0.1:0", ctx=None):
    """Spawn a bus process; returns ``(process, "host:port")`` once it listens."""
    kind, (host, port) = parse_endpoint(endpoint)
    ctx = ctx or mp.get_context()
    parent, child = ctx.Pipe(duplex=False)
    proc = ctx.Process(target=_serve_child, args=(f"{host}:{port}", child), daemon=True)
    proc.start()
    child.close()
    if not parent.poll(20):
        proc.kill()
        raise OSError("bus process did not come up")
    bound = parent.recv()
    if bound < 0:
        proc.join()
        raise OSError(f"bus failed to bind {host}:{port}")
    return proc, f"{host}:{bound}"


class BusClient:
    """Blocking client; one request in flight per connection."""

    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self.sock.makefile("rb")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, op: int, key: str = "", payload=()) -> Frame:
        self.sock.sendall(encode_frame(op, key, payload))
        head = self._rfile.read(4)
        if len(head) < 4:
            raise ConnectionError("bus closed the connection")
        (length,) = struct.unpack("<I", head)
        body = self._rfile.read(length)
        if len(body) < length:
            raise ConnectionError("bus closed the connection mid-frame")
        frame = decode_body(body)
        if frame.op == ERR:
            raise BusError(frame.key)
        return frame

    def put(self, key: str, payload=()) -> None:
        self._call(PUT, key, payload)

    def get(self, key: str):
        fr = self._call(GET, key)
        return None if fr.op == MISS else fr.payload

    def take(self, key: str):
        fr = self._call(TAKE, key)
        return None if fr.op == MISS else fr.payload

    def wait_take(self, key: str, timeout: float | None = None) -> np.ndarray:
        fr = self._call(WAIT_TAKE, key, [-1.0 if timeout is None else float(timeout)])
        if fr.op == MISS:
            raise BusTimeout(f"timed out waiting for {key}")
        return fr.payload

    def ping(self) -> bool:
        return self._call(PING).op == OK

    def stats(self) -> np.ndarray:
        return self.get(STATS_KEY)

    def shutdown(self) -> None:
        self._call(SHUTDOWN)

    def close(self) -> None:
        try:
            self._rfile.close()
            self.sock.close()
        except OSError:
            pass


def connect(endpoint: str):
    """A bus handle for ``endpoint``; inproc handles are shared per name."""
    kind, addr = parse_endpoint(endpoint)
    if kind == "inproc":
        return inproc_bus(addr)
    return BusClient(*addr)
