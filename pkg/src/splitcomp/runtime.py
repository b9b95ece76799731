"""Head/tail split inference over a TCP socket.

Frame layout (little-endian)::

    magic "SPLF" | version u8 | msg_type u8 | body_len u32 | body

Bodies:

* INFER_REQUEST (1): request_id u32, rank u8, dims rank*u32, codec u8, payload
* INFER_RESPONSE (2): request_id u32, label u32, server_compute_ns u64
* MODEL_INFO (3): empty as a request; JSON description as a response
* ERROR (255): request_id u32, code_len u8, code (ascii), message (utf-8)

One request is in flight per connection. A frame that cannot be parsed is
answered with ERROR; if its declared length was sane the body is consumed
so the stream stays aligned, otherwise the connection is closed.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from splitcomp import codec as C
from splitcomp.errors import CorruptPayload, EndpointUnavailable, NetworkTimeout, ProtocolError
from splitcomp.model.graph import check_input
from splitcomp.sim import DelayBreakdown

log = logging.getLogger(__name__)

MAGIC = b"SPLF"
VERSION = 1
INFER_REQUEST, INFER_RESPONSE, MODEL_INFO, ERROR = 1, 2, 3, 255
MSG_TYPES = (INFER_REQUEST, INFER_RESPONSE, MODEL_INFO, ERROR)
CODECS = {"float32": 0, "bq8": 1}
CODEC_NAMES = {v: k for k, v in CODECS.items()}
HEADER = struct.Struct("<4sBBI")
MAX_BODY = 64 * 1024 * 1024
MAX_RANK = 8
RESPONSE = struct.Struct("<IIQ")
RESPONSE_FRAME_BYTES = HEADER.size + RESPONSE.size


@dataclass
class WireMessage:
    msg_type: int
    body: bytes
    version: int = VERSION

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.msg_type, len(self.body)) + self.body


@dataclass
class InferRequest:
    request_id: int
    dims: tuple
    codec: str
    payload: bytes

    def encode_body(self) -> bytes:
        dims = tuple(int(d) for d in self.dims)
        return (
            struct.pack("<IB", self.request_id, len(dims))
            + struct.pack(f"<{len(dims)}I", *dims)
            + struct.pack("<B", CODECS[self.codec])
            + self.payload
        )

    @classmethod
    def decode_body(cls, body: bytes) -> "InferRequest":
        if len(body) < 5:
            raise ProtocolError("malformed", "request body shorter than its fixed fields")
        request_id, rank = struct.unpack_from("<IB", body, 0)
        if rank == 0 or rank > MAX_RANK:
            raise ProtocolError("malformed", f"unsupported tensor rank {rank}", request_id)
        need = 5 + 4 * rank + 1
        if len(body) < need:
            raise ProtocolError("malformed", "request body truncated before payload", request_id)
        dims = struct.unpack_from(f"<{rank}I", body, 5)
        code = body[5 + 4 * rank]
        if code not in CODEC_NAMES:
            raise ProtocolError("unsupported_codec", f"unknown codec id {code}", request_id)
        return cls(request_id, tuple(dims), CODEC_NAMES[code], bytes(body[need:]))


@dataclass
class InferResponse:
    request_id: int
    label: int
    server_compute_ns: int

    def encode_body(self) -> bytes:
        return RESPONSE.pack(self.request_id, self.label, self.server_compute_ns)

    @classmethod
    def decode_body(cls, body: bytes) -> "InferResponse":
        if len(body) != RESPONSE.size:
            raise ProtocolError("malformed", f"response body has {len(body)} bytes")
        return cls(*RESPONSE.unpack(body))


def encode_error(code: str, message: str, request_id: int = 0) -> bytes:
    c = code.encode("ascii")[:255]
    return struct.pack("<IB", request_id, len(c)) + c + message.encode("utf-8")


def decode_error(body: bytes) -> tuple[int, str, str]:
    if len(body) < 5:
        raise ProtocolError("malformed", "error body too short")
    request_id, n = struct.unpack_from("<IB", body, 0)
    code = body[5 : 5 + n].decode("ascii", "replace")
    return request_id, code, body[5 + n :].decode("utf-8", "replace")


def decode_frame(buf: bytes) -> WireMessage:
    """Parse one complete frame; raises ProtocolError on any violation."""
    if len(buf) < HEADER.size:
        raise ProtocolError("malformed", "frame shorter than header")
    magic, version, msg_type, body_len = HEADER.unpack_from(buf, 0)
    _check_header(magic, version, msg_type, body_len)
    if len(buf) != HEADER.size + body_len:
        raise ProtocolError("malformed", f"body_len {body_len} != {len(buf) - HEADER.size} bytes present")
    return WireMessage(msg_type, bytes(buf[HEADER.size :]), version)


def _check_header(magic, version, msg_type, body_len):
    if magic != MAGIC:
        raise ProtocolError("bad_magic", f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError("bad_version", f"unsupported version {version}")
    if msg_type not in MSG_TYPES:
        raise ProtocolError("bad_type", f"unknown message type {msg_type}")
    if body_len > MAX_BODY:
        raise ProtocolError("too_large", f"body of {body_len} bytes exceeds {MAX_BODY}")


def _recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> WireMessage:
    """Read one frame from ``sock``.

    Raises ProtocolError with ``.resync`` set to True when the declared body
    was consumed and the stream is still aligned.
    """
    head = _recv_exact(sock, HEADER.size)
    magic, version, msg_type, body_len = HEADER.unpack(head)
    try:
        _check_header(magic, version, msg_type, body_len)
    except ProtocolError as e:
        if body_len <= MAX_BODY:
            _recv_exact(sock, body_len)
            e.resync = True
        raise
    return WireMessage(msg_type, _recv_exact(sock, body_len), version)


# --------------------------------------------------------------------------
# payloads
# --------------------------------------------------------------------------


def encode_tensor(t, codec: str) -> bytes:
    if codec not in CODECS:
        raise ValueError(f"unknown codec {codec!r}")
    return C.encode(t, codec)


def decode_tensor(payload: bytes, dims, codec: str) -> np.ndarray:
    return C.decode(payload, dims, codec)


def head_payload(head, image, codec: str) -> tuple[bytes, tuple]:
    """Run the head on one image and serialize the bottleneck tensor."""
    z = head(check_input(head, image))[0]
    return encode_tensor(z, codec), z.shape


def infer_local_split(head, tail, image, codec: str = "bq8", *, return_payload: bool = False):
    """Split inference without a network, applying the same codec as the wire path."""
    payload, dims = head_payload(head, image, codec)
    z = decode_tensor(payload, dims, codec)
    label = int(np.argmax(tail(z[None])[0]))
    return (label, payload) if return_payload else label


# --------------------------------------------------------------------------
# server
# --------------------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: SplitServer = self.server.owner
        sock = self.request
        sock.settimeout(srv.idle_timeout)
        while True:
            try:
                msg = read_frame(sock)
            except ProtocolError as e:
                self._send_error(sock, e)
                if not e.resync:
                    return
                continue
            except (ConnectionError, OSError):
                return
            try:
                reply = srv.dispatch(msg)
            except ProtocolError as e:
                self._send_error(sock, e)
                continue
            except Exception as e:  # keep serving other requests
                log.exception("internal error while handling a request")
                self._send_error(sock, ProtocolError("internal", str(e)))
                continue
            try:
                sock.sendall(reply)
            except OSError:
                return

    @staticmethod
    def _send_error(sock, e: ProtocolError):
        try:
            sock.sendall(WireMessage(ERROR, encode_error(e.code, str(e), e.request_id)).encode())
        except OSError:
            pass


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SplitServer:
    """Serves a tail model. Use :func:`serve` to construct and start one."""

    def __init__(self, tail, host="127.0.0.1", port=0, codec="any", *, idle_timeout=30.0, record=False):
        if codec not in ("any", *CODECS):
            raise ValueError(f"codec must be 'any' or one of {tuple(CODECS)}")
        self.tail = tail
        self.codec = codec
        self.idle_timeout = idle_timeout
        self.record = record
        self.received: list[bytes] = []
        self._lock = threading.Lock()
        try:
            self._srv = _TCPServer((host, port), _Handler)
        except OSError as e:
            raise EndpointUnavailable(f"cannot bind {host}:{port}: {e}") from e
        self._srv.owner = self
        self._thread = None

    @property
    def endpoint(self) -> tuple[str, int]:
        return self._srv.server_address[:2]

    def start(self):
        self._thread = threading.Thread(target=self._srv.serve_forever, name="split-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._srv.serve_forever()

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def model_info(self) -> dict:
        return {
            "input_shape": list(self.tail.input_shape),
            "num_classes": self.tail.num_classes,
            "codecs": list(CODECS) if self.codec == "any" else [self.codec],
            "version": VERSION,
        }

    def dispatch(self, msg: WireMessage) -> bytes:
        if msg.msg_type == MODEL_INFO:
            return WireMessage(MODEL_INFO, json.dumps(self.model_info(), sort_keys=True).encode()).encode()
        if msg.msg_type != INFER_REQUEST:
            raise ProtocolError("bad_type", f"servers only accept requests, got type {msg.msg_type}")
        req = InferRequest.decode_body(msg.body)
        rid = req.request_id
        if self.codec != "any" and req.codec != self.codec:
            raise ProtocolError("unsupported_codec", f"server expects {self.codec}, got {req.codec}", rid)
        if tuple(req.dims) != tuple(self.tail.input_shape):
            raise ProtocolError("shape_mismatch", f"dims {req.dims} != tail input {self.tail.input_shape}", rid)
        if self.record:
            with self._lock:
                self.received.append(req.payload)
        t0 = time.perf_counter_ns()
        try:
            z = decode_tensor(req.payload, req.dims, req.codec)
        except CorruptPayload as e:
            raise ProtocolError("corrupt_payload", str(e), rid) from e
        label = int(np.argmax(self.tail(z[None])[0]))
        dt = time.perf_counter_ns() - t0
        return WireMessage(INFER_RESPONSE, InferResponse(rid, label, dt).encode_body()).encode()


def serve(tail, endpoint=("127.0.0.1", 0), codec: str = "any", **kw) -> SplitServer:
    """Bind ``endpoint`` and serve ``tail`` on a background thread."""
    host, port = endpoint
    return SplitServer(tail, host, port, codec, **kw).start()


# --------------------------------------------------------------------------
# client
# --------------------------------------------------------------------------


class SplitClient:
    """One connection to a split server; not shared between threads."""

    def __init__(self, endpoint, timeout: float = 10.0):
        self.endpoint = tuple(endpoint)
        self.timeout = timeout
        self._next_id = 1
        try:
            self.sock = socket.create_connection(self.endpoint, timeout=timeout)
        except socket.timeout as e:
            raise NetworkTimeout(f"connecting to {self.endpoint} timed out") from e
        except OSError as e:
            raise EndpointUnavailable(f"cannot connect to {self.endpoint}: {e}") from e
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def exchange(self, frame: bytes) -> WireMessage:
        try:
            self.sock.sendall(frame)
            return read_frame(self.sock)
        except socket.timeout as e:
            raise NetworkTimeout(f"no reply from {self.endpoint} within {self.timeout}s") from e
        except (ConnectionError, OSError) as e:
            raise EndpointUnavailable(f"connection to {self.endpoint} failed: {e}") from e

    def model_info(self) -> dict:
        msg = self.exchange(WireMessage(MODEL_INFO, b"").encode())
        _raise_if_error(msg)
        return json.loads(msg.body)

    def request(self, payload: bytes, dims, codec: str) -> InferResponse:
        rid = self._next_id
        self._next_id = (self._next_id + 1) & 0xFFFFFFFF or 1
        body = InferRequest(rid, tuple(dims), codec, payload).encode_body()
        msg = self.exchange(WireMessage(INFER_REQUEST, body).encode())
        _raise_if_error(msg)
        if msg.msg_type != INFER_RESPONSE:
            raise ProtocolError("bad_type", f"expected a response, got type {msg.msg_type}")
        resp = InferResponse.decode_body(msg.body)
        if resp.request_id != rid:
            raise ProtocolError("malformed", f"response id {resp.request_id} != request id {rid}")
        return resp


def _raise_if_error(msg: WireMessage):
    if msg.msg_type == ERROR:
        rid, code, text = decode_error(msg.body)
        raise ProtocolError(code, text, rid)


def infer_remote(head, image, endpoint, codec: str = "bq8", *, timeout: float = 10.0,
                 client: SplitClient | None = None, return_payload: bool = False):
    """Run the head locally, ship the bottleneck, return ``(label, DelayBreakdown)``.

    The breakdown holds head compute, serialization, the uplink/downlink
    share of the measured round trip (split evenly) and the server-reported
    tail time. Pass a ``client`` to reuse a connection.
    """
    own = client is None
    client = client or SplitClient(endpoint, timeout)
    try:
        t0 = time.perf_counter()
        z = head(check_input(head, image))[0]
        t1 = time.perf_counter()
        payload = encode_tensor(z, codec)
        t2 = time.perf_counter()
        resp = client.request(payload, z.shape, codec)
        t3 = time.perf_counter()
    finally:
        if own:
            client.close()
    tail_s = resp.server_compute_ns * 1e-9
    net = max(t3 - t2 - tail_s, 0.0)
    bd = DelayBreakdown(
        d_head_s=t1 - t0,
        d_net_up_s=net / 2,
        d_tail_s=tail_s,
        d_net_down_s=net / 2,
        d_serialize_s=t2 - t1,
    )
    out = (int(resp.label), bd)
    return out + (payload,) if return_payload else out

