"""Out-of-process encoder backend over a small length-prefixed binary protocol.

Every message is one frame: a 4-byte big-endian payload length, then the
payload. A payload is a 4-byte big-endian header length, a UTF-8 JSON header
and a body of blobs whose sizes the header lists in order.

request header::

    {"schema": "vihoi.encode/1", "prompt": str, "text_char_span": [a, b],
     "layers": [int, ...], "blobs": [n_bytes, ...]}      # blobs = 3 PNG images

response header::

    {"schema": "vihoi.encode/1", "layers": [int, ...], "shape": [T, d],
     "visual_span": [s, e], "text_span": [s, e], "dtype": "<f4",
     "blobs": [n_bytes, ...]}                            # one array per layer

or ``{"schema": ..., "error": {"type": str, "message": str}}``.
"""
from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading

import numpy as np

from . import errors
from .priors import LayeredEmbeddings, PromptBundle, array_to_png, build_extraction_prompt, encode, png_to_array

SCHEMA = "vihoi.encode/1"
MAX_FRAME = 1 << 30


def pack(header: dict, blobs=()) -> bytes:
    blobs = list(blobs)
    header = dict(header, blobs=[len(b) for b in blobs])
    h = json.dumps(header, sort_keys=True).encode()
    payload = struct.pack(">I", len(h)) + h + b"".join(blobs)
    return struct.pack(">I", len(payload)) + payload


def unpack(payload: bytes):
    (hlen,) = struct.unpack(">I", payload[:4])
    header = json.loads(payload[4:4 + hlen])
    blobs, pos = [], 4 + hlen
    for n in header.get("blobs", []):
        blobs.append(payload[pos:pos + n])
        pos += n
    if pos != len(payload):
        raise ValueError("frame length does not match blob sizes")
    return header, blobs


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock) -> bytes:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise ValueError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def parse_endpoint(endpoint: str):
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


class RemoteEncoder:
    """Client; one request at a time per connection."""

    def __init__(self, endpoint: str, timeout: float = 60.0, image_size: int = 224):
        self.endpoint = endpoint
        self.timeout = timeout
        self.image_size = image_size
        self._lock = threading.Lock()
        self._sock = None

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(parse_endpoint(self.endpoint), timeout=self.timeout)
            except OSError as e:
                raise errors.BackendUnavailable(f"encoder backend {self.endpoint}: {e}") from e
        return self._sock

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def info(self) -> dict:
        with self._lock:
            sock = self._connect()
            sock.sendall(pack({"schema": SCHEMA, "op": "info"}))
            header, _ = unpack(read_frame(sock))
        return header

    def checksum(self) -> str:
        return self.info().get("checksum", "remote")

    def encode_remote(self, images, prompt: PromptBundle, layers) -> LayeredEmbeddings:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] != 3 or arr.shape[-1] != 3:
            raise errors.BadImageShape(f"expected 3 RGB images, got {arr.shape}")
        req = {"schema": SCHEMA, "op": "encode", "prompt": prompt.raw,
               "text_char_span": list(prompt.char_span), "layers": sorted(set(int(l) for l in layers))}
        with self._lock:
            sock = self._connect()
            sock.sendall(pack(req, [array_to_png(a) for a in arr]))
            header, blobs = unpack(read_frame(sock))
        if "error" in header:
            err = header["error"]
            cls = getattr(errors, err.get("type", ""), errors.VihoiError)
            raise cls(err.get("message", "remote error"))
        T, d = header["shape"]
        states = {int(l): np.frombuffer(b, dtype="<f4").reshape(T, d)
                  for l, b in zip(header["layers"], blobs)}
        return LayeredEmbeddings(states, tuple(header["visual_span"]), tuple(header["text_span"]), d,
                                 meta={"backend": self.endpoint})


def handle_request(header: dict, blobs, encoder) -> bytes:
    """Server-side dispatch, usable without sockets."""
    try:
        if header.get("schema") != SCHEMA:
            raise ValueError(f"unknown schema {header.get('schema')!r}")
        if header.get("op") == "info":
            return pack({"schema": SCHEMA, "depth": encoder.depth, "d_enc": encoder.d_enc,
                         "checksum": encoder.checksum()})
        size = encoder.cfg.image_size
        images = np.stack([png_to_array(b, size) for b in blobs])
        prompt = header["prompt"]
        a, b = header["text_char_span"]
        text = prompt[a:b]
        bundle = build_extraction_prompt(text)
        if bundle.raw != prompt:
            raise errors.TokenizationMismatch("prompt does not follow the extraction template")
        emb = encode(images, bundle, encoder, header["layers"])
        layers = sorted(emb.states)
        arrays = [np.ascontiguousarray(emb.states[l], dtype="<f4").tobytes() for l in layers]
        T, d = emb.states[layers[0]].shape
        return pack({"schema": SCHEMA, "layers": layers, "shape": [T, d], "dtype": "<f4",
                     "visual_span": list(emb.visual_span), "text_span": list(emb.text_span)}, arrays)
    except Exception as e:  # reported to the client, server keeps running
        return pack({"schema": SCHEMA, "error": {"type": type(e).__name__, "message": str(e)}})


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                payload = read_frame(self.request)
            except (ConnectionError, struct.error):
                return
            header, blobs = unpack(payload)
            self.request.sendall(handle_request(header, blobs, self.server.encoder))


class EncoderServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, encoder):
        self.encoder = encoder
        super().__init__(address, _Handler)


def serve_in_thread(encoder, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a background thread; returns (server, 'host:port')."""
    server = EncoderServer((host, port), encoder)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    h, p = server.server_address[:2]
    return server, f"{h}:{p}"
