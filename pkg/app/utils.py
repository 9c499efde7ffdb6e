import hashlib
import os
import re
import tempfile
import unicodedata
from pathlib import Path
from typing import Any, Iterable, Iterator

import orjson

_TOKEN_RE = re.compile(r"[^\W_]+")
_WHITESPACE_RE = re.compile(r"\s+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics; no stemming, no stopwords."""
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    """Dedup key: lowercase, punctuation stripped, whitespace collapsed."""
    lowered = text.lower()
    stripped = "".join(ch for ch in lowered if not unicodedata.category(ch).startswith("P"))
    return _WHITESPACE_RE.sub(" ", stripped).strip()


def collapse_whitespace(text: str) -> str:
    return _WHITESPACE_RE.sub(" ", text).strip()


def sha256_hex(value: str) -> str:
    return hashlib.sha256(value.encode("utf-8")).hexdigest()


def dumps(payload: Any) -> bytes:
    return orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)


def read_jsonl(path: Path) -> Iterator[tuple[int, Any]]:
    """Yield (line_number, object) for every non-blank line."""
    with path.open("rb") as handle:
        for line_number, line in enumerate(handle, start=1):
            if line.strip():
                yield line_number, orjson.loads(line)


def append_jsonl(path: Path, payloads: Iterable[Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("ab") as handle:
        for payload in payloads:
            handle.write(dumps(payload) + b"\n")


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
