"""
Content-addressed result cache: one JSON file per entry, named by a SHA-256 key.

Entries are immutable. A second write under an existing key is accepted only if
it carries the same record; otherwise it is rejected and logged.
"""

import hashlib
import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


def content_digest(*parts: Any) -> str:
    """SHA-256 over a canonical JSON encoding of the parts."""
    payload = json.dumps(list(parts), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class ContentCache:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def put(self, key: str, record: Dict[str, Any]) -> bool:
        """Store a record; returns False when a different record already owns the key."""
        with self._lock:
            existing = self.get(key)
            if existing is not None:
                if existing != record:
                    logger.warning(f"Cache conflict for key {key[:12]}..., keeping the stored entry")
                    return False
                return True
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(record, f, ensure_ascii=False, sort_keys=True, indent=2)
            os.replace(tmp, self._path(key))
            logger.debug(f"Cached entry {key[:12]}...")
            return True

    def __contains__(self, key: str) -> bool:
        return self._path(key).exists()

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))
