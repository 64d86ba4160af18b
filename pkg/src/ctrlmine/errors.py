"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MiningError(Exception):
    """Base class for all errors raised by ctrlmine."""


class ParseError(MiningError):
    """Malformed input text. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(MiningError):
    """Inconsistent configuration (signal space, effects table, ISA file)."""


class ExtensionError(MiningError):
    """A translation block cannot be extended into per-instruction events."""


class UnknownSignalError(MiningError, KeyError):
    """A signal name that does not resolve in the current signal space."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""
