"""Global runtime settings for clopasim.

Reads the output directory and thread count from the environment by
default.  Tests and embedding code can populate the singleton directly
before running anything:

    from clopasim.config import settings
    settings.DEBUG = True
"""

import os
from typing import Optional

_ENV_PREFIX = "CLOPA_"

# Only these names fall back to the process environment.
_ENV_NAMES = frozenset({"OUT_DIR", "THREADS"})


class ConfigError(Exception):
    """A configuration value is missing, malformed, or out of range."""

    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"Invalid configuration for '{key}': {message}")


class Settings:
    """Lightweight mutable config, one global instance."""

    OUT_DIR: Optional[str] = None
    THREADS: Optional[int] = None
    DEBUG: bool = False

    def get(self, name: str) -> Optional[str]:
        """Return the attribute value if set, otherwise fall back to env."""
        value = getattr(self, name, None)
        if value is not None:
            return str(value)
        if name in _ENV_NAMES:
            return os.getenv(_ENV_PREFIX + name)
        return None

    def thread_count(self) -> int:
        raw = self.get("THREADS")
        if raw is None:
            return 1
        try:
            count = int(raw)
        except ValueError:
            raise ConfigError("threads", f"expected an integer, got {raw!r}")
        if count < 1:
            raise ConfigError("threads", "must be at least 1")
        return count

    def reset(self) -> None:
        self.OUT_DIR = None
        self.THREADS = None
        self.DEBUG = False


settings = Settings()
