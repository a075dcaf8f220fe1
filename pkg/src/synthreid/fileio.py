"""File access that reports failures as ``IoError``. Writes create missing parent directories."""

from __future__ import annotations

from pathlib import Path

from .errors import IoError


def _fail(action: str, path, err: OSError) -> IoError:
    return IoError(f"cannot {action} {path}: {err.strerror or err}")


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as err:
        raise _fail("read", path, err) from None


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise _fail("read", path, err) from None


def write_bytes(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as err:
        raise _fail("write", path, err) from None


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode("utf-8"))
