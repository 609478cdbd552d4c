"""Page-image storage with short-lived, single-use randomized URLs.

Scanned pages are stored content-addressed (blobs named by digest plus an
append-only index), so a few thousand images need no database. A grant is a
high-entropy token bound to one asset with an expiry and a fetch budget;
check-and-decrement of the budget is atomic, so a single-use grant serves
exactly one of any number of concurrent fetches. Expired, exhausted, revoked,
and unknown tokens are indistinguishable from the outside: all are served as
not-found.
"""
from __future__ import annotations

import hashlib
import json
import secrets
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

from .errors import ValidationError

SUPPORTED_MEDIA_TYPES = frozenset({"image/png", "image/jpeg"})

#: Backends may re-read an image while retrying a transaction, so the default
#: budget is two fetches rather than one; callers can tighten it per grant.
DEFAULT_MAX_FETCHES = 2
DEFAULT_TTL_SECONDS = 120.0


@dataclass(frozen=True)
class PageAsset:
    asset_id: str
    student_pseudonym: Optional[int]
    page_no: Optional[int]
    rubric_reference: Optional[str]
    media_type: str
    digest: str


@dataclass(frozen=True)
class Grant:
    token: str
    url: str
    asset_id: str
    expires_at: float
    max_fetches: int


class _GrantState:
    __slots__ = ("asset_id", "expires_at", "remaining")

    def __init__(self, asset_id: str, expires_at: float, remaining: int):
        self.asset_id = asset_id
        self.expires_at = expires_at
        self.remaining = remaining


class AssetStore:
    """Content-addressed image store with an in-memory grant table.

    ``root=None`` keeps blobs in memory (tests, simulated runs); with a
    directory, blobs live under ``objects/`` and registrations are replayed
    from ``index.jsonl`` on startup. The clock is injectable so expiry
    behavior is deterministic under test.
    """

    def __init__(
        self,
        root: Path | str | None = None,
        *,
        base_url: str = "http://127.0.0.1:8640",
        clock: Callable[[], float] = time.monotonic,
    ):
        self._root = Path(root) if root is not None else None
        self._base_url = base_url.rstrip("/")
        self._clock = clock
        self._lock = threading.Lock()
        self._assets: dict[str, PageAsset] = {}
        self._blobs: dict[str, bytes] = {}
        self._by_page: dict[tuple[int, int], str] = {}
        self._by_rubric: dict[str, str] = {}
        self._grants: dict[str, _GrantState] = {}
        if self._root is not None:
            (self._root / "objects").mkdir(parents=True, exist_ok=True)
            self._load_index()

    # -- registration ------------------------------------------------------

    def _load_index(self):
        index = self._root / "index.jsonl"
        if not index.exists():
            return
        for line in index.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            asset = PageAsset(
                rec["asset_id"],
                rec.get("student"),
                rec.get("page"),
                rec.get("rubric"),
                rec["media_type"],
                rec["digest"],
            )
            self._index_asset(asset)

    def _index_asset(self, asset: PageAsset):
        self._assets[asset.asset_id] = asset
        if asset.rubric_reference is not None:
            self._by_rubric[asset.rubric_reference] = asset.asset_id
        elif asset.student_pseudonym is not None and asset.page_no is not None:
            self._by_page[(asset.student_pseudonym, asset.page_no)] = asset.asset_id

    def _store_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        if self._root is None:
            self._blobs.setdefault(digest, data)
        else:
            path = self._root / "objects" / digest
            if not path.exists():
                path.write_bytes(data)
        return digest

    def _append_index(self, asset: PageAsset):
        if self._root is None:
            return
        rec = {
            "asset_id": asset.asset_id,
            "student": asset.student_pseudonym,
            "page": asset.page_no,
            "rubric": asset.rubric_reference,
            "media_type": asset.media_type,
            "digest": asset.digest,
        }
        with (self._root / "index.jsonl").open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def _check_payload(data: bytes, media_type: str):
        if not data:
            raise ValidationError("empty image payload")
        if media_type not in SUPPORTED_MEDIA_TYPES:
            raise ValidationError(f"unsupported media type: {media_type}")

    def register_page(
        self, data: bytes, student_pseudonym: int, page_no: int, media_type: str = "image/png"
    ) -> str:
        """Store one student page; (student, page) must be unique."""
        self._check_payload(data, media_type)
        with self._lock:
            key = (int(student_pseudonym), int(page_no))
            if key in self._by_page:
                raise ValidationError(f"page already registered for student {key[0]} page {key[1]}")
            digest = self._store_blob(data)
            asset = PageAsset(secrets.token_hex(8), key[0], key[1], None, media_type, digest)
            self._index_asset(asset)
            self._append_index(asset)
            return asset.asset_id

    def register_rubric(self, reference: str, data: bytes, media_type: str = "image/png") -> str:
        """Store one rubric page under its reference label."""
        self._check_payload(data, media_type)
        with self._lock:
            if reference in self._by_rubric:
                raise ValidationError(f"rubric already registered: {reference}")
            digest = self._store_blob(data)
            asset = PageAsset(secrets.token_hex(8), None, None, reference, media_type, digest)
            self._index_asset(asset)
            self._append_index(asset)
            return asset.asset_id

    # -- lookup ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._assets)

    def page_asset_id(self, student_pseudonym: int, page_no: int) -> str:
        try:
            return self._by_page[(int(student_pseudonym), int(page_no))]
        except KeyError:
            raise ValidationError(f"no asset for student {student_pseudonym} page {page_no}") from None

    def rubric_asset_id(self, reference: str) -> str:
        try:
            return self._by_rubric[reference]
        except KeyError:
            raise ValidationError(f"no rubric asset: {reference}") from None

    def asset(self, asset_id: str) -> PageAsset:
        try:
            return self._assets[asset_id]
        except KeyError:
            raise ValidationError(f"unknown asset: {asset_id}") from None

    # -- grants ------------------------------------------------------------

    def mint_grant(
        self,
        asset_id: str,
        ttl: float = DEFAULT_TTL_SECONDS,
        max_fetches: int = DEFAULT_MAX_FETCHES,
    ) -> Grant:
        """Issue a fresh unguessable URL for one asset.

        Tokens carry 256 bits of randomness; two grants for the same asset
        never share one.
        """
        if ttl <= 0:
            raise ValidationError(f"ttl must be positive, got {ttl}")
        if max_fetches < 1:
            raise ValidationError("max_fetches must be at least 1")
        asset = self.asset(asset_id)
        token = secrets.token_urlsafe(32)
        expires_at = self._clock() + ttl
        with self._lock:
            self._grants[token] = _GrantState(asset.asset_id, expires_at, max_fetches)
        return Grant(token, f"{self._base_url}/asset/{token}", asset.asset_id, expires_at, max_fetches)

    def serve(self, token: str) -> tuple[bytes, str] | None:
        """Payload and media type for a live token, else None.

        The budget decrement happens inside the lock, so concurrent fetches
        of a single-use grant cannot both win. No caller can tell apart
        expired, exhausted, and unknown tokens.
        """
        with self._lock:
            state = self._grants.get(token)
            if state is None:
                return None
            if state.remaining <= 0 or self._clock() >= state.expires_at:
                del self._grants[token]
                return None
            state.remaining -= 1
            asset = self._assets[state.asset_id]
        return self._load_blob(asset.digest), asset.media_type

    def peek_grant(self, token: str) -> PageAsset | None:
        """Resolve a live token to its asset without spending a fetch.

        In-process trusted use only (e.g. a simulated backend mapping URLs
        back to pages); nothing network-facing exposes this.
        """
        with self._lock:
            state = self._grants.get(token)
            if state is None or state.remaining <= 0 or self._clock() >= state.expires_at:
                return None
            return self._assets[state.asset_id]

    def resolve_url(self, url: str) -> PageAsset | None:
        return self.peek_grant(url.rsplit("/", 1)[-1])

    def revoke(self, token: str) -> None:
        with self._lock:
            self._grants.pop(token, None)

    def active_grant_count(self) -> int:
        now = self._clock()
        with self._lock:
            return sum(
                1 for s in self._grants.values() if s.remaining > 0 and s.expires_at > now
            )

    def _load_blob(self, digest: str) -> bytes:
        if self._root is None:
            return self._blobs[digest]
        return (self._root / "objects" / digest).read_bytes()


_LOOPBACK = frozenset({"127.0.0.1", "::1"})


class _AssetHandler(BaseHTTPRequestHandler):
    server_version = "gradekit-assets"
    protocol_version = "HTTP/1.1"

    def _not_found(self):
        body = b"not found\n"
        self.send_response(404)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        store: AssetStore = self.server.store  # type: ignore[attr-defined]
        if not self.path.startswith("/asset/"):
            self._not_found()
            return
        token = self.path[len("/asset/"):]
        result = store.serve(token)
        if result is None:
            self._not_found()
            return
        data, media_type = result
        self.send_response(200)
        self.send_header("Content-Type", media_type)
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        store: AssetStore = self.server.store  # type: ignore[attr-defined]
        if not self.path.startswith("/revoke/"):
            self._not_found()
            return
        if self.client_address[0] not in _LOOPBACK:
            self.send_response(403)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        store.revoke(self.path[len("/revoke/"):])
        self.send_response(204)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass


class _AssetServer(ThreadingHTTPServer):
    daemon_threads = True
    # a grading run opens many connections at once; the stdlib default
    # backlog of 5 drops the rest on the floor
    request_queue_size = 128


def build_server(store: AssetStore, bind: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP front for a store: GET /asset/{token}, POST /revoke/{token} (loopback only)."""
    server = _AssetServer((bind, port), _AssetHandler)
    server.store = store  # type: ignore[attr-defined]
    return server
