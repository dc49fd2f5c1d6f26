"""Content-addressed solve cache and atomic file output."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Path):
        return str(o)
    return str(o)


def content_hash(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(str(part.dtype).encode())
            h.update(str(part.shape).encode())
            h.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, bytes):
            h.update(part)
        else:
            h.update(stable_json(part).encode())
        h.update(b"\x00")
    return h.hexdigest()


def atomic_write(path, data, force: bool = True) -> Path:
    """Write ``data`` (str or bytes) to ``path`` through a temp file and rename."""
    path = Path(path)
    raw = data.encode() if isinstance(data, str) else data
    if path.exists() and not force:
        # identical bytes are not an overwrite
        if path.read_bytes() == raw:
            return path
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def default_cache_dir() -> Path:
    env = os.environ.get("PARCAP_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "parcap"


class SolveCache:
    """JSON records keyed by the content hash of the problem inputs.

    Each record stores a digest of its own payload, so a corrupted or
    truncated entry is detected on read and treated as a miss.  Inserts are
    exclusive: the first writer wins and later writers of the same key
    leave the file alone (the payload is a pure function of the key).
    """

    def __init__(self, root=None, enabled: bool = True):
        self.root = Path(root) if root is not None else default_cache_dir()
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self.corrupt = 0

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        if not self.enabled:
            return None
        path = self._path(key)
        try:
            rec = json.loads(path.read_text())
            payload = rec["payload"]
            ok = rec["digest"] == content_hash(stable_json(payload).encode())
        except FileNotFoundError:
            self.misses += 1
            return None
        except (ValueError, KeyError, TypeError, OSError):
            ok = False
        if not ok:
            log.warning("cache entry %s is corrupted; recomputing", key[:12])
            self.corrupt += 1
            self.misses += 1
            path.unlink(missing_ok=True)
            return None
        self.hits += 1
        return payload

    def put(self, key: str, payload) -> None:
        if not self.enabled:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.loads(stable_json(payload))
        rec = {"digest": content_hash(stable_json(payload).encode()), "payload": payload}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ins.", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(stable_json(rec))
        try:
            os.link(tmp, path)
        except FileExistsError:
            pass
        except OSError:
            # filesystems without hard links: rename is still atomic
            os.replace(tmp, path)
            return
        os.unlink(tmp)

    def get_or_compute(self, key: str, compute):
        hit = self.get(key)
        if hit is not None:
            return hit
        # return the JSON round trip so hits and misses look identical
        payload = json.loads(stable_json(compute()))
        self.put(key, payload)
        return payload

    def _npz_path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npz"

    def get_or_compute_arrays(self, key: str, compute):
        """Like :meth:`get_or_compute` for ``compute() -> (payload, {name: array})``.

        Arrays live in a sidecar ``.npz`` whose digest is part of the JSON record.
        """
        rec = self.get(key)
        if rec is not None:
            try:
                raw = self._npz_path(key).read_bytes()
                if content_hash(raw) == rec["npz_digest"]:
                    with np.load(io.BytesIO(raw)) as z:
                        return rec["payload"], {k: z[k] for k in z.files}
            except (OSError, KeyError, ValueError):
                pass
            log.warning("cache arrays for %s are corrupted; recomputing", key[:12])
            self.corrupt += 1
            self.hits -= 1
            self.misses += 1
            self._path(key).unlink(missing_ok=True)
        payload, arrays = compute()
        if self.enabled:
            buf = io.BytesIO()
            np.savez(buf, **{k: np.asarray(v) for k, v in sorted(arrays.items())})
            raw = buf.getvalue()
            atomic_write(self._npz_path(key), raw)
            self.put(key, {"payload": payload, "npz_digest": content_hash(raw)})
        return json.loads(stable_json(payload)), arrays


def set_key(kind: str, mask: np.ndarray, grid_dict: dict, params_dict: dict, **extra) -> str:
    return content_hash(kind, grid_dict, params_dict, extra, np.packbits(mask.ravel()), mask.shape)
