"""Version header shared by every persisted file."""

from __future__ import annotations

import os
import re
from pathlib import Path

from .errors import StoreError, VersionMismatch

STORE_MAGIC = "UMGR-STORE"
STORE_VERSION = 1
STORE_HEADER = f"{STORE_MAGIC} v{STORE_VERSION}"

_HEADER = re.compile(rf"^{STORE_MAGIC} v(\d+)$")


def check_header(line: str, where: str = "store file") -> None:
    m = _HEADER.match(line)
    if not m:
        raise StoreError(f"{where}: missing '{STORE_HEADER}' header")
    if int(m[1]) != STORE_VERSION:
        raise VersionMismatch(f"{where}: format v{m[1]}, this build reads v{STORE_VERSION}")


def split_body(text: str, where: str = "store file") -> list[str]:
    """Check the header and return the remaining non-empty lines."""
    lines = text.split("\n")
    check_header(lines[0], where)
    return [ln for ln in lines[1:] if ln]


def write_atomic(path: Path, lines: list[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(STORE_HEADER + "\n")
        for ln in lines:
            fh.write(ln + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
