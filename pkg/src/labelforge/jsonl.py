"""JSON-lines files with a leading format-version header record.

Every JSONL artifact written by this package starts with a header record
``{"format_version": ..., "kind": ...}`` so files can be identified and
versioned without a sidecar.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

FORMAT_VERSION = 1


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]], kind: str) -> Path:
    """Write records to ``path`` preceded by a format-version header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, "kind": kind}) + "\n")
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_jsonl(path: str | Path, kind: str | None = None) -> Iterator[dict[str, Any]]:
    """Yield data records from ``path``, skipping the header if present.

    If ``kind`` is given and the file carries a header of a different kind,
    raise ``ValueError``. Files without a header are accepted as-is so
    externally produced prediction/reference files still load.
    """
    with Path(path).open("r", encoding="utf-8") as fh:
        first = True
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if first:
                first = False
                if isinstance(record, dict) and "format_version" in record:
                    if kind is not None and record.get("kind") not in (None, kind):
                        raise ValueError(
                            f"{path}: expected {kind!r} file, found {record.get('kind')!r}"
                        )
                    continue
            yield record
