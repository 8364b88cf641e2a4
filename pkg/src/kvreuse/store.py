"""Content-addressed store for encoder caches and pre-RoPE KV caches.

Entries are keyed by a sha256 over the raw pixel bytes of the image that
produced them. On disk the store is a `manifest.json` plus one blob per entry
under `blobs/`, where each blob file is named by the sha256 of its own bytes;
loading re-hashes every blob, so any corruption or truncation is detected and
reported with the offending logical key.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InputError, IntegrityError, StaleCacheError

DIGEST_ALGO = "sha256"
MANIFEST_NAME = "manifest.json"
STORE_FORMAT = "kvreuse-store-v1"


@dataclass(frozen=True)
class ImageHash:
    """Hex-encoded 256-bit content digest."""

    hex: str

    def __post_init__(self):
        if len(self.hex) != 64 or self.hex != self.hex.lower():
            raise InputError(f"not a lowercase 64-char hex digest: {self.hex!r}")

    def __str__(self) -> str:
        return self.hex


def hash_image(pixels: np.ndarray) -> ImageHash:
    """Digest of an image's raw pixel bytes (C order, caller's dtype)."""
    buf = np.ascontiguousarray(pixels)
    if buf.size == 0:
        raise InputError("cannot hash an empty pixel buffer")
    return ImageHash(hashlib.sha256(buf.tobytes()).hexdigest())


def hash_request(images: list[np.ndarray]) -> ImageHash:
    """Digest over the concatenated pixel bytes of all images, in order."""
    if not images:
        raise InputError("cannot hash an empty image list")
    h = hashlib.sha256()
    for px in images:
        buf = np.ascontiguousarray(px)
        if buf.size == 0:
            raise InputError("cannot hash an empty pixel buffer")
        h.update(buf.tobytes())
    return ImageHash(h.hexdigest())


@dataclass
class EncoderCacheEntry:
    hash: ImageHash
    embeddings: np.ndarray  # [T, d] float32
    model_fingerprint: int


@dataclass
class KVCacheEntry:
    hash: ImageHash
    keys: np.ndarray    # [L, T, kv_dim] float32, pre-RoPE
    values: np.ndarray  # [L, T, kv_dim] float32
    origin_position: int  # position of the image's first token when cached
    model_fingerprint: int


def _require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite values")
    return arr


class CacheStore:
    """In-memory store with explicit persistence.

    Reads are lock-free (atomic dict lookups); writes take a lock, so a get
    never blocks on a put of a different key. Persistence grabs the same lock
    plus an on-disk lockfile for cross-process exclusion.
    """

    def __init__(self):
        self._enc: dict[str, EncoderCacheEntry] = {}
        self._kv: dict[str, KVCacheEntry] = {}
        self._shapes: dict[int, dict[str, tuple]] = {}
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._enc) + len(self._kv)

    # -- shape discipline ---------------------------------------------------

    def _check_shape(self, fingerprint: int, kind: str, shape: tuple) -> None:
        known = self._shapes.setdefault(fingerprint, {})
        if kind in known and known[kind] != shape:
            raise InputError(
                f"{kind} entry shape {shape} disagrees with previously stored "
                f"{known[kind]} for model {fingerprint:#x}")
        known[kind] = shape

    @staticmethod
    def _check_fingerprint(entry, expected: int | None, key: str):
        if expected is not None and entry.model_fingerprint != expected:
            raise StaleCacheError(
                f"{key}: cached by model {entry.model_fingerprint:#x}, "
                f"requested for {expected:#x}")

    # -- puts / gets ---------------------------------------------------------

    def put_encoder(self, entry: EncoderCacheEntry) -> None:
        emb = _require_finite("embeddings", entry.embeddings)
        with self._write_lock:
            self._check_shape(entry.model_fingerprint, "encoder", emb.shape)
            self._enc[entry.hash.hex] = EncoderCacheEntry(
                entry.hash, emb, entry.model_fingerprint)

    def get_encoder(self, h: ImageHash,
                    expected_fingerprint: int | None = None) -> EncoderCacheEntry | None:
        entry = self._enc.get(h.hex)
        if entry is None:
            return None
        self._check_fingerprint(entry, expected_fingerprint, f"encoder/{h.hex}")
        return entry

    def put_kv(self, entry: KVCacheEntry) -> None:
        keys = _require_finite("keys", entry.keys)
        values = _require_finite("values", entry.values)
        if keys.shape != values.shape:
            raise InputError("key/value shapes differ")
        with self._write_lock:
            self._check_shape(entry.model_fingerprint, "kv", keys.shape)
            self._kv[entry.hash.hex] = KVCacheEntry(
                entry.hash, keys, values, int(entry.origin_position),
                entry.model_fingerprint)

    def get_kv(self, h: ImageHash,
               expected_fingerprint: int | None = None) -> KVCacheEntry | None:
        entry = self._kv.get(h.hex)
        if entry is None:
            return None
        self._check_fingerprint(entry, expected_fingerprint, f"kv/{h.hex}")
        return entry

    # -- persistence ----------------------------------------------------------

    def persist(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "blobs").mkdir(parents=True, exist_ok=True)
        with self._write_lock, _dir_lock(directory):
            entries = {}
            for hex_key, enc in sorted(self._enc.items()):
                entries[f"encoder/{hex_key}"] = self._write_blob(
                    directory, enc.embeddings, {
                        "kind": "encoder",
                        "image_hash": hex_key,
                        "shape": list(enc.embeddings.shape),
                        "model_fingerprint": enc.model_fingerprint,
                    })
            for hex_key, kv in sorted(self._kv.items()):
                stacked = np.stack([kv.keys, kv.values])
                entries[f"kv/{hex_key}"] = self._write_blob(
                    directory, stacked, {
                        "kind": "kv",
                        "image_hash": hex_key,
                        "shape": list(stacked.shape),
                        "origin_position": kv.origin_position,
                        "model_fingerprint": kv.model_fingerprint,
                    })
            manifest = {
                "format": STORE_FORMAT,
                "digest_algo": DIGEST_ALGO,
                "entries": entries,
            }
            (directory / MANIFEST_NAME).write_text(
                json.dumps(manifest, indent=1, sort_keys=True))

    @staticmethod
    def _write_blob(directory: Path, arr: np.ndarray, meta: dict) -> dict:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blob_sha = hashlib.sha256(raw).hexdigest()
        rel = f"blobs/{blob_sha}.bin"
        path = directory / rel
        if not path.exists():
            path.write_bytes(raw)
        meta = dict(meta)
        meta["blob"] = rel
        meta["sha256"] = blob_sha
        meta["bytes"] = len(raw)
        return meta

    @classmethod
    def load(cls, directory: str | Path) -> "CacheStore":
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise IntegrityError(f"no manifest at {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"corrupt manifest {manifest_path}: {exc}") from None
        if manifest.get("format") != STORE_FORMAT:
            raise IntegrityError(f"unknown store format {manifest.get('format')!r}")
        store = cls()
        for key, meta in sorted(manifest.get("entries", {}).items()):
            arr = cls._read_blob(directory, key, meta)
            h = ImageHash(meta["image_hash"])
            fp = int(meta["model_fingerprint"])
            if meta["kind"] == "encoder":
                store.put_encoder(EncoderCacheEntry(h, arr, fp))
            elif meta["kind"] == "kv":
                store.put_kv(KVCacheEntry(h, arr[0], arr[1],
                                          int(meta["origin_position"]), fp))
            else:
                raise IntegrityError(f"{key}: unknown entry kind {meta['kind']!r}")
        return store

    @staticmethod
    def _read_blob(directory: Path, key: str, meta: dict) -> np.ndarray:
        path = directory / meta["blob"]
        if not path.exists():
            raise IntegrityError(f"{key}: missing blob {meta['blob']}")
        raw = path.read_bytes()
        if len(raw) != meta["bytes"]:
            raise IntegrityError(
                f"{key}: blob is {len(raw)} bytes, manifest says {meta['bytes']}")
        if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
            raise IntegrityError(f"{key}: blob checksum mismatch")
        return np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()


class _dir_lock:
    """O_EXCL lockfile guarding persistence of one store directory."""

    def __init__(self, directory: Path, timeout: float = 10.0):
        self.path = directory / ".lock"
        self.timeout = timeout

    def __enter__(self):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.close(fd)
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise IntegrityError(
                        f"store directory {self.path.parent} is locked") from None
                time.sleep(0.05)

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False
