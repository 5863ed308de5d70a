from __future__ import annotations

import logging
import threading
from http.server import ThreadingHTTPServer

import httpx

logger = logging.getLogger(__name__)

_lock = threading.Lock()
_transport: httpx.HTTPTransport | None = None


def shared_transport() -> httpx.HTTPTransport:
    """One connection pool per process; building an SSL context per client costs ~50 ms."""
    global _transport
    with _lock:
        if _transport is None:
            _transport = httpx.HTTPTransport(retries=0)
        return _transport


class _Unclosable(httpx.BaseTransport):
    # clients are closed freely; the shared pool must survive them
    def __init__(self, inner: httpx.BaseTransport):
        self.inner = inner

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        return self.inner.handle_request(request)

    def close(self) -> None:
        pass


def make_client(
    transport: httpx.BaseTransport | None = None,
    token: str | None = None,
    timeout: float = 30.0,
) -> httpx.Client:
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    return httpx.Client(
        transport=_Unclosable(transport or shared_transport()),
        trust_env=False,
        timeout=timeout,
        headers=headers,
    )


class QuietHTTPServer(ThreadingHTTPServer):
    """Threaded server that logs peer resets at debug level instead of printing tracebacks."""

    daemon_threads = True

    def handle_error(self, request, client_address):
        logger.debug("connection from %s dropped", client_address, exc_info=True)
