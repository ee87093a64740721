"""Small deterministic writers for JSON/CSV artifacts."""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path


def write_bytes_atomic(path, data: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, p)


def write_json(path, data) -> None:
    text = json.dumps(data, sort_keys=True, indent=2)
    write_bytes_atomic(path, (text + "\n").encode("utf-8"))


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, restval="",
                            extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    write_bytes_atomic(path, buf.getvalue().encode("utf-8"))
