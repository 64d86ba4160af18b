"""Control-signal-partitioned specification mining for CISC instruction traces."""

from __future__ import annotations

from .errors import ConfigError, ExtensionError, MiningError, ParseError, UnknownSignalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ExtensionError", "MiningError", "ParseError", "UnknownSignalError", "__version__"]
