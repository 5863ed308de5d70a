"""A small object store with pre-signed URLs, for desk-scale use of the storage transport.

URL scheme: ``<base>/blobs/<key>?expiresAt=<unix>&token=<hmac>``. The token is
``HMAC-SHA256(secret, "<METHOD>\\n<signed key>\\n<expiresAt>")``. With
``scope=prefix`` the signed key is a prefix ending in ``/`` and the URL grants
the method on any direct child of that prefix (a DELETE on the prefix itself
removes everything below it).
"""

from __future__ import annotations

import hmac
import logging
import threading
import time
from hashlib import sha256
from http.server import BaseHTTPRequestHandler
from urllib.parse import parse_qs, quote, unquote, urlencode, urlsplit

from ..wire.http import QuietHTTPServer

logger = logging.getLogger(__name__)


def sign(secret: str, method: str, key: str, expires_at: int) -> str:
    msg = f"{method.upper()}\n{key}\n{expires_at}".encode()
    return hmac.new(secret.encode(), msg, sha256).hexdigest()


def presign(base_url: str, secret: str, method: str, key: str, ttl_seconds: float, now: float | None = None) -> str:
    expires_at = int((time.time() if now is None else now) + ttl_seconds)
    query = {"expiresAt": expires_at, "token": sign(secret, method, key, expires_at)}
    if key.endswith("/"):
        query["scope"] = "prefix"
    return f"{base_url.rstrip('/')}/blobs/{quote(key)}?{urlencode(query)}"


def child_url(prefix_url: str, name: str) -> str:
    """Turn a prefix-scoped URL into the URL of one object under that prefix."""
    parts = urlsplit(prefix_url)
    if not parts.path.endswith("/"):
        raise ValueError("not a prefix URL")
    return parts._replace(path=parts.path + quote(name)).geturl()


def key_of(url: str) -> str:
    path = unquote(urlsplit(url).path)
    if not path.startswith("/blobs/"):
        raise ValueError(f"not a blob URL: {url}")
    return path[len("/blobs/"):]


class BlobStore:
    """In-memory blob store served over HTTP on a background thread."""

    def __init__(self, secret: str = "awcp-dev-secret", host: str = "127.0.0.1", port: int = 0):
        self.secret = secret
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self._server = QuietHTTPServer((host, port), _make_handler(self))
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "BlobStore":
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True, name="blobstore"
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # direct access for tests and audits
    def keys(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(k for k in self._blobs if k.startswith(prefix))

    def get(self, key: str) -> bytes | None:
        with self._lock:
            return self._blobs.get(key)

    def corrupt(self, key: str, index: int) -> None:
        with self._lock:
            data = bytearray(self._blobs[key])
            data[index % len(data)] ^= 0xFF
            self._blobs[key] = bytes(data)

    def authorize(self, method: str, key: str, query: dict[str, list[str]]) -> bool:
        try:
            expires_at = int(query["expiresAt"][0])
            token = query["token"][0]
        except (KeyError, ValueError, IndexError):
            return False
        if time.time() > expires_at:
            return False
        if query.get("scope", [""])[0] == "prefix":
            if key.endswith("/"):
                signed = key
            else:
                signed = key.rsplit("/", 1)[0] + "/" if "/" in key else ""
        else:
            signed = key
        return hmac.compare_digest(token, sign(self.secret, method, signed, expires_at))

    def _put(self, key: str, data: bytes) -> None:
        with self._lock:
            self._blobs[key] = data

    def _delete(self, key: str) -> int:
        with self._lock:
            doomed = [k for k in self._blobs if k == key or (key.endswith("/") and k.startswith(key))]
            for k in doomed:
                del self._blobs[k]
            return len(doomed)


def _make_handler(store: BlobStore):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("blobstore: " + fmt, *args)

        def _reply(self, status: int, body: bytes = b"", ctype: str = "application/octet-stream"):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if body and self.command != "HEAD":
                self.wfile.write(body)

        def _route(self):
            parts = urlsplit(self.path)
            if not parts.path.startswith("/blobs/"):
                self._reply(404, b"not found", "text/plain")
                return None
            key = unquote(parts.path[len("/blobs/"):])
            if not key or ".." in key.split("/"):
                self._reply(400, b"bad key", "text/plain")
                return None
            if not store.authorize(self.command, key, parse_qs(parts.query)):
                self._reply(403, b"forbidden", "text/plain")
                return None
            return key

        def do_PUT(self):
            length = int(self.headers.get("Content-Length", "0"))
            body = self.rfile.read(length) if length else b""
            key = self._route()
            if key is None:
                return
            if key.endswith("/"):
                self._reply(400, b"cannot PUT a prefix", "text/plain")
                return
            store._put(key, body)
            self._reply(201)

        def do_GET(self):
            key = self._route()
            if key is None:
                return
            data = store.get(key)
            if data is None:
                self._reply(404, b"no such blob", "text/plain")
            else:
                self._reply(200, data)

        def do_DELETE(self):
            key = self._route()
            if key is None:
                return
            store._delete(key)
            self._reply(204)

    return Handler
