"""Atomic, deterministic file output shared by datasets, archives, reports."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile


def dumps_canonical(obj) -> str:
    """Deterministic JSON: sorted keys, fixed separators, full float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_text(path: str, text: str) -> None:
    """Write-temp-then-rename so readers never observe partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj) -> None:
    atomic_write_text(path, dumps_canonical(obj) + "\n")


def read_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path: str, rows, fieldnames) -> None:
    lines = [",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(str(row[f]) for f in fieldnames))
    atomic_write_text(path, "\n".join(lines) + "\n")
