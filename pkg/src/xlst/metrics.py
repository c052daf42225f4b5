"""Line-delimited metrics records, one JSON object per line.

Each line is self-contained, so a crashed run's log is parseable up to the
last complete line. Records are kept in memory as well for programmatic use.
"""

from __future__ import annotations

import json


class MetricsWriter:
    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, **fields):
        self.records.append(fields)
        if self._fh is not None:
            self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    """Parse a metrics file, tolerating a truncated final line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return records
