"""On-disk store for global and aggregate similarity vectors.

Binary layout (little endian)::

    magic        8 bytes  b"CDULVEC1"
    version      u32
    n_classes    u32
    kind         u32      0 = global, 1 = aggregate
    snippet_size u32      0 for global
    backend_id   u16 length + UTF-8
    entry_count  u32
    records      entry_count x (u16 length + UTF-8 image_id, n_classes x f32)

Each cache file ``X`` has a sidecar ``X.manifest.json`` holding the header
fields, the entry count, the SHA-256 of the whole binary file and the
pipeline parameters (zeta, prompt template) that are not part of the
binary header. Generation appends finished records to ``X.journal`` so an
interrupted run picks up where it stopped.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .dataset import DatasetManifest, load_image
from .encoder import DEFAULT_TEMPLATE, EncoderBackend
from .errors import (CacheConsistencyError, CacheCorruptionError, CacheMismatchError,
                     ConfigError, DataError, EntryNotFoundError, MissingFileError)
from .pseudo import aggregate_scores, global_scores, local_scores, tile_image

log = logging.getLogger(__name__)

MAGIC = b"CDULVEC1"
VERSION = 1
KIND_CODES = {"global": 0, "aggregate": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_FIXED = struct.Struct("<8sIIII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class CacheHeader:
    n_classes: int
    kind: str
    snippet_size: int
    backend_id: str
    version: int = VERSION

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ConfigError(f"cache kind must be 'global' or 'aggregate', got {self.kind!r}")
        if self.kind == "global" and self.snippet_size != 0:
            raise ConfigError("global caches carry snippet_size 0")
        if self.kind == "aggregate" and self.snippet_size < 1:
            raise ConfigError("aggregate caches need snippet_size >= 1")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")

    def pack(self, entry_count: int) -> bytes:
        bid = self.backend_id.encode("utf-8")
        return (_FIXED.pack(MAGIC, self.version, self.n_classes, KIND_CODES[self.kind], self.snippet_size)
                + _U16.pack(len(bid)) + bid + _U32.pack(entry_count))


def cache_filename(kind: str, snippet_size: int = 0) -> str:
    return "global.cdulvec" if kind == "global" else f"aggregate_k{snippet_size}.cdulvec"


def sidecar_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def journal_path(path) -> Path:
    return Path(str(path) + ".journal")


def _pack_record(image_id: str, vector: np.ndarray) -> bytes:
    raw = image_id.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"image_id too long for cache record: {image_id[:40]}...")
    return _U16.pack(len(raw)) + raw + np.asarray(vector, dtype="<f4").tobytes()


def _check_vector(image_id: str, vector, n_classes: int) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float32).ravel()
    if v.shape[0] != n_classes:
        raise DataError(f"{image_id}: vector has {v.shape[0]} entries, cache expects {n_classes}")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{image_id}: vector contains non-finite values")
    return v


@dataclass(eq=False)
class VectorCache:
    header: CacheHeader
    ids: list[str]
    vectors: np.ndarray  # (n, n_classes) float32, stored order
    params: dict = field(default_factory=dict)
    path: Path | None = None
    generation: dict | None = None

    def __post_init__(self):
        self.index = {image_id: i for i, image_id in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id):
        return image_id in self.index

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self.vectors[self.index[image_id]]
        except KeyError:
            where = f" ({self.path})" if self.path else ""
            raise EntryNotFoundError(f"image_id {image_id!r} not in cache{where}") from None

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self.ids, self.vectors)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(iter(self))

    def matrix(self, ids: Iterable[str]) -> np.ndarray:
        """Vectors for ``ids`` in the given order, shape (len(ids), n_classes)."""
        ids = list(ids)
        if not ids:
            return np.zeros((0, self.header.n_classes), dtype=np.float32)
        return np.stack([self[i] for i in ids])

    def check_backend(self, backend_id: str) -> None:
        if backend_id != self.header.backend_id:
            raise CacheMismatchError(
                f"cache {self.path} was built with backend {self.header.backend_id!r}, "
                f"but the experiment uses {backend_id!r}; rebuild the cache or fix the backend config")


def cache_write(entries: Iterable[tuple[str, np.ndarray]], meta: CacheHeader, path,
                params: dict | None = None) -> Path:
    """Write a cache atomically: stream to a temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    count, seen = 0, set()
    try:
        with open(tmp, "wb") as fh:
            fh.write(meta.pack(0))
            for image_id, vector in entries:
                if image_id in seen:
                    raise DataError(f"duplicate image_id {image_id!r} in cache entries")
                seen.add(image_id)
                fh.write(_pack_record(image_id, _check_vector(image_id, vector, meta.n_classes)))
                count += 1
            fh.seek(len(meta.pack(0)) - _U32.size)
            fh.write(_U32.pack(count))
            fh.flush()
            os.fsync(fh.fileno())
        digest = hashlib.sha256(tmp.read_bytes()).hexdigest()
        sidecar = {"magic": MAGIC.decode(), **asdict(meta), "entry_count": count,
                   "sha256": digest, "params": params or {}}
        side_tmp = sidecar_path(tmp)
        side_tmp.write_text(json.dumps(sidecar, indent=2))
        os.replace(tmp, path)
        os.replace(side_tmp, sidecar_path(path))
    except BaseException:
        tmp.unlink(missing_ok=True)
        sidecar_path(tmp).unlink(missing_ok=True)
        raise
    return path


def _read_header(buf: io.BytesIO, where) -> tuple[CacheHeader, int]:
    raw = buf.read(_FIXED.size)
    if len(raw) < _FIXED.size:
        raise CacheCorruptionError(f"{where}: file too short for a cache header")
    magic, version, n_classes, kind, snippet = _FIXED.unpack(raw)
    if magic != MAGIC:
        raise CacheCorruptionError(f"{where}: bad magic {magic!r}")
    if version != VERSION:
        raise CacheCorruptionError(f"{where}: unsupported cache version {version}")
    if kind not in KIND_NAMES:
        raise CacheCorruptionError(f"{where}: unknown kind code {kind}")
    bid = _read_string(buf, where)
    raw = buf.read(_U32.size)
    if len(raw) < _U32.size:
        raise CacheCorruptionError(f"{where}: truncated header")
    try:
        header = CacheHeader(n_classes, KIND_NAMES[kind], snippet, bid, version)
    except ConfigError as exc:
        raise CacheCorruptionError(f"{where}: invalid header: {exc}") from exc
    return header, _U32.unpack(raw)[0]


def _read_string(buf: io.BytesIO, where) -> str:
    raw = buf.read(_U16.size)
    if len(raw) < _U16.size:
        raise CacheCorruptionError(f"{where}: truncated string length")
    (n,) = _U16.unpack(raw)
    data = buf.read(n)
    if len(data) < n:
        raise CacheCorruptionError(f"{where}: truncated string")
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CacheCorruptionError(f"{where}: invalid UTF-8 in string") from exc


def _read_records(buf: io.BytesIO, n_classes: int, where, count: int | None):
    """Parse records; with ``count=None`` read to EOF and tolerate a torn tail."""
    width = 4 * n_classes
    ids, rows = [], []
    good_end = buf.tell()
    while count is None or len(ids) < count:
        start = buf.tell()
        if count is None and not buf.read(1):
            break
        buf.seek(start)
        try:
            image_id = _read_string(buf, where)
            raw = buf.read(width)
            if len(raw) < width:
                raise CacheCorruptionError(f"{where}: truncated record for {image_id!r}")
        except CacheCorruptionError:
            if count is None:
                break
            raise
        ids.append(image_id)
        rows.append(np.frombuffer(raw, dtype="<f4"))
        good_end = buf.tell()
    vectors = np.stack(rows).astype(np.float32) if rows else np.zeros((0, n_classes), np.float32)
    return ids, vectors, good_end


def cache_read(path, expected_backend_id: str | None = None) -> VectorCache:
    """Load and validate a cache file against its sidecar manifest."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"cache file not found: {path}")
    side = sidecar_path(path)
    if not side.exists():
        raise CacheCorruptionError(f"{path}: sidecar manifest {side.name} is missing")
    try:
        sidecar = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CacheCorruptionError(f"{side}: unreadable sidecar manifest: {exc}") from exc
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != sidecar.get("sha256"):
        raise CacheCorruptionError(f"{path}: checksum mismatch (file truncated or modified)")
    buf = io.BytesIO(data)
    header, count = _read_header(buf, path)
    ids, vectors, _ = _read_records(buf, header.n_classes, path, count)
    if buf.read(1):
        raise CacheCorruptionError(f"{path}: trailing bytes after {count} records")
    if len(set(ids)) != len(ids):
        raise CacheCorruptionError(f"{path}: duplicate image ids")
    for key in ("n_classes", "kind", "snippet_size", "backend_id", "version"):
        if sidecar.get(key) != getattr(header, key):
            raise CacheCorruptionError(f"{path}: sidecar field {key!r} disagrees with the binary header")
    if sidecar.get("entry_count") != count:
        raise CacheCorruptionError(f"{path}: sidecar entry_count disagrees with the binary header")
    cache = VectorCache(header, ids, vectors, sidecar.get("params", {}), path)
    if expected_backend_id is not None:
        cache.check_backend(expected_backend_id)
    return cache


# --- resumable generation ---------------------------------------------------

class _Journal:
    """Append-only record log: one JSON header line, then binary records."""

    def __init__(self, path: Path, header: CacheHeader, params: dict):
        self.path = path
        self.header = header
        self.params = params

    def _header_line(self) -> bytes:
        return (json.dumps({**asdict(self.header), "params": self.params}, sort_keys=True) + "\n").encode()

    def load(self) -> dict[str, np.ndarray]:
        if not self.path.exists():
            return {}
        data = self.path.read_bytes()
        newline = data.find(b"\n")
        if newline < 0:
            self.path.unlink()
            return {}
        if data[:newline + 1] != self._header_line():
            raise CacheConsistencyError(
                f"{self.path}: journal was written for a different configuration; "
                "delete it to start over")
        buf = io.BytesIO(data)
        buf.seek(newline + 1)
        ids, vectors, good_end = _read_records(buf, self.header.n_classes, self.path, None)
        if good_end < len(data):
            log.warning("%s: discarding torn trailing record", self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
        if len(set(ids)) != len(ids):
            raise CacheConsistencyError(f"{self.path}: journal lists an image twice")
        return dict(zip(ids, vectors))

    def open(self):
        fresh = not self.path.exists()
        fh = open(self.path, "ab")
        if fresh:
            fh.write(self._header_line())
            fh.flush()
        return fh


def _compute(kind: str, images: list[np.ndarray], backend: EncoderBackend, table, k: int,
             zeta: float) -> np.ndarray:
    if kind == "global":
        return global_scores(images, backend, table)
    return np.stack([aggregate_scores(local_scores(img, k, backend, table), zeta) for img in images])


def generate_or_resume(manifest: DatasetManifest, kind: str, k: int, backend: EncoderBackend, path, *,
                       zeta: float = 0.5, template: str = DEFAULT_TEMPLATE, batch_size: int = 32,
                       progress: Callable[[int, int, float], None] | None = None) -> VectorCache:
    """Build the cache at ``path``, embedding only images not already done.

    Finished vectors go to a journal first, so a crash loses at most the
    batch in flight. The returned cache carries a ``generation`` dict with
    counts and timings for this invocation.
    """
    path = Path(path)
    snippet = 0 if kind == "global" else int(k)
    header = CacheHeader(len(manifest.vocabulary), kind, snippet, backend.backend_id)
    params = {"zeta": float(zeta), "template": template} if kind == "aggregate" else {"template": template}
    wanted = manifest.image_ids
    t0 = time.perf_counter()

    if path.exists():
        existing = cache_read(path)
        existing.check_backend(backend.backend_id)
        if existing.header != header or existing.params != params:
            raise CacheMismatchError(f"{path} exists with different header or parameters; "
                                     "remove it or choose another output path")
        if existing.ids != wanted:
            raise CacheConsistencyError(f"{path} covers a different image list than the manifest")
        log.info("%s: resumed: 0 remaining", path.name)
        existing.generation = {"computed": 0, "resumed": len(wanted), "remaining": 0,
                               "seconds": time.perf_counter() - t0, "per_image_seconds": None,
                               "snippets": 0}
        return existing

    path.parent.mkdir(parents=True, exist_ok=True)
    journal = _Journal(journal_path(path), header, params)
    done = journal.load()
    stray = set(done) - set(wanted)
    if stray:
        raise CacheConsistencyError(f"{journal.path}: journal has ids absent from the manifest, "
                                    f"e.g. {sorted(stray)[:3]}")
    todo = [s for s in manifest.samples if s.image_id not in done]
    log.info("%s: %d cached, %d remaining", path.name, len(done), len(todo))
    table = backend.embed_texts(manifest.vocabulary, template)

    n_snippets = 0
    t_compute = time.perf_counter()
    computed = 0
    step = batch_size if kind == "global" else 1
    with journal.open() as fh:
        for start in range(0, len(todo), step):
            chunk = todo[start:start + step]
            images = [load_image(s.image_path) for s in chunk]
            if kind == "aggregate":
                n_snippets += sum(tile_image(img, snippet).count for img in images)
            rows = _compute(kind, images, backend, table, snippet, zeta)
            for s, row in zip(chunk, rows):
                vec = _check_vector(s.image_id, row, header.n_classes)
                fh.write(_pack_record(s.image_id, vec))
                done[s.image_id] = vec
            fh.flush()
            computed += len(chunk)
            elapsed = time.perf_counter() - t_compute
            eta = elapsed / computed * (len(todo) - computed)
            if progress is not None:
                progress(computed, len(todo), eta)
            if computed == len(todo) or computed % max(1, len(todo) // 20) < step:
                log.info("%s: %d/%d images, %.3fs/image, eta %.0fs", path.name, computed,
                         len(todo), elapsed / computed, eta)

    cache_write(((i, done[i]) for i in wanted), header, path, params)
    journal.path.unlink(missing_ok=True)
    cache = cache_read(path)
    seconds = time.perf_counter() - t0
    cache.generation = {
        "computed": computed, "resumed": len(wanted) - computed, "remaining": 0,
        "seconds": seconds,
        "per_image_seconds": (time.perf_counter() - t_compute) / computed if computed else None,
        "snippets": n_snippets,
    }
    return cache
