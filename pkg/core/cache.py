# core/cache.py
"""
Append-only memo shared by cocycle workers, with optional on-disk backing

Setting MUDICHO_CACHE_DIR stores computed step-matrix tables as numpy .npz
files keyed by spec hash and index range, so repeated CLI runs skip the
expensive products and integrations.
"""

import logging
import os
import threading
from typing import Any, Dict, Hashable, Optional

import numpy as np

CACHE_DIR_ENV = "MUDICHO_CACHE_DIR"


class StepMemo:
    """Thread-safe memo; concurrent writers of the same key keep the first value"""

    def __init__(self, namespace: Optional[str] = None, directory: Optional[str] = None):
        self._entries: Dict[Hashable, Any] = {}
        self._lock = threading.Lock()
        self.namespace = namespace
        self.directory = None
        self.hits = 0
        self.misses = 0

        directory = directory if directory is not None else os.getenv(CACHE_DIR_ENV)
        if directory and namespace:
            try:
                os.makedirs(directory, exist_ok=True)
                self.directory = directory
            except OSError as e:
                logging.warning(f"On-disk memo disabled, cannot use {directory}: {e}")

    def get(self, key: Hashable) -> Optional[Any]:
        with self._lock:
            value = self._entries.get(key)
            if value is None:
                self.misses += 1
            else:
                self.hits += 1
            return value

    def put(self, key: Hashable, value: Any) -> Any:
        with self._lock:
            return self._entries.setdefault(key, value)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def _path(self, name: str) -> Optional[str]:
        if self.directory is None:
            return None
        return os.path.join(self.directory, f"{self.namespace}-{name}.npz")

    def load_arrays(self, name: str) -> Optional[Dict[str, np.ndarray]]:
        path = self._path(name)
        if path is None or not os.path.exists(path):
            return None
        try:
            with np.load(path) as data:
                arrays = {key: data[key] for key in data.files}
            logging.debug(f"Loaded memo {path}")
            return arrays
        except (OSError, ValueError) as e:
            logging.warning(f"Ignoring unreadable memo {path}: {e}")
            return None

    def save_arrays(self, name: str, **arrays: np.ndarray) -> None:
        path = self._path(name)
        if path is None:
            return
        tmp = path + f".{os.getpid()}.{threading.get_ident()}.tmp"
        try:
            with open(tmp, "wb") as f:
                np.savez(f, **arrays)
            os.replace(tmp, path)
        except OSError as e:
            logging.warning(f"Could not write memo {path}: {e}")

    def get_stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "entries": len(self._entries),
                "hits": self.hits,
                "misses": self.misses,
                "directory": self.directory,
            }
