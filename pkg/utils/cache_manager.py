import glob
import json
import logging
import os
import shutil
from pathlib import Path
from typing import Any, Optional, Union

from utils.config import CacheConfig


class CacheManager:
    """File cache of JSON manifests plus one artifact directory per key.

    Keys are derived from content hashes, so entries never expire.
    """

    def __init__(self, config: Union[CacheConfig, dict, None] = None, default_dir: Optional[str] = None,
                 logger: Optional[logging.Logger] = None) -> None:
        if isinstance(config, CacheConfig):
            config = config.model_dump()
        config = config or {}
        self.enabled: bool = bool(config.get("enabled", True))
        self.dir = Path(default_dir or config.get("dir") or ".cache")
        self.logger = logger or logging.getLogger("ot-ssl-gnss")
        if self.enabled:
            self.dir.mkdir(parents=True, exist_ok=True)

    def _safe(self, key: str) -> str:
        return key.replace("/", "_").replace(":", "_")

    def _file_path(self, key: str) -> Path:
        return self.dir / f"{self._safe(key)}.json"

    def artifact_dir(self, key: str) -> Path:
        return self.dir / self._safe(key)

    def get(self, key: str) -> Any:
        if not self.enabled:
            return None
        path = self._file_path(key)
        if not path.exists():
            return None
        try:
            data = json.loads(path.read_text("utf-8"))
            return data.get("value")
        except (OSError, ValueError) as e:
            self.logger.warning("Ignoring unreadable cache entry %s: %s", path, e)
            return None

    def set(self, key: str, value: Any) -> None:
        if not self.enabled:
            return
        path = self._file_path(key)
        tmp = path.with_suffix(".json.tmp")
        try:
            tmp.write_text(json.dumps({"key": key, "value": value}, sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as e:
            self.logger.warning("Failed to write cache entry %s: %s", path, e)

    def invalidate(self, pattern: str) -> int:
        """Invalidate keys matching pattern. Returns number of invalidated entries."""
        count = 0
        for file in glob.glob(str(self.dir / f"{self._safe(pattern)}.json")):
            try:
                os.remove(file)
                count += 1
            except OSError:
                continue
            artifacts = Path(file[: -len(".json")])
            if artifacts.is_dir():
                shutil.rmtree(artifacts, ignore_errors=True)
        return count

