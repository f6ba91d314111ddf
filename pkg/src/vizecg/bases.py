"""Interfaces shared by the training, gradient checking and command line code."""

from typing import Any, Protocol, runtime_checkable

__all__ = ["Logger"]


@runtime_checkable
class Logger(Protocol):
    """Structured logger accepted by long-running routines.

    A `uvlog` logger satisfies it. Extra keyword arguments are structured fields of the record, e.g.
    `logger.info("epoch finished", epoch=3, val_f1=0.91)`.

    >>> import uvlog
    >>> isinstance(uvlog.get_logger("vizecg"), Logger)
    True
    """

    def debug(self, msg: str, /, *args: Any, **fields: Any) -> None: ...

    def info(self, msg: str, /, *args: Any, **fields: Any) -> None: ...

    def warning(self, msg: str, /, *args: Any, **fields: Any) -> None: ...

    def get_child(self, name: str, /, *, persistent: bool = ...) -> "Logger":
        """Logger named `<parent>.<name>`, e.g. one per sub-command or per gradient-checked op."""
