"""RFC 3339 conversion for integer UTC-second timestamps."""

from __future__ import annotations

import re
from datetime import datetime, timedelta, timezone

_DATE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")
_DATETIME = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[Tt ](\d{2}):(\d{2}):(\d{2})(?:\.\d+)?"
    r"(Z|z|[+-]\d{2}:\d{2})$"
)
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def parse(text: str) -> int:
    """Parse an RFC 3339 date or date-time into UTC seconds.

    A bare date means midnight UTC. Fractional seconds are truncated.
    Raises ValueError on anything else.
    """
    m = _DATE.match(text)
    if m:
        dt = datetime(int(m[1]), int(m[2]), int(m[3]), tzinfo=timezone.utc)
        return int((dt - _EPOCH).total_seconds())
    m = _DATETIME.match(text)
    if not m:
        raise ValueError(f"not an RFC 3339 date or date-time: {text!r}")
    zone = m[7]
    if zone in ("Z", "z"):
        tz = timezone.utc
    else:
        sign = 1 if zone[0] == "+" else -1
        tz = timezone(sign * timedelta(hours=int(zone[1:3]), minutes=int(zone[4:6])))
    dt = datetime(int(m[1]), int(m[2]), int(m[3]), int(m[4]), int(m[5]), int(m[6]), tzinfo=tz)
    return int((dt - _EPOCH).total_seconds())


def render(ts: int) -> str:
    """Canonical text: a bare date at midnight, otherwise ``YYYY-MM-DDTHH:MM:SSZ``."""
    dt = _EPOCH + timedelta(seconds=ts)
    if ts % 86400 == 0:
        return dt.strftime("%Y-%m-%d")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def looks_like(text: str) -> bool:
    return bool(_DATE.match(text) or _DATETIME.match(text))
