"""CSV emission: UTF-8, '.' decimal separator, bit-reproducible float text."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    """Shortest round-trip text for floats, plain text otherwise."""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(target, columns, rows, comments=()) -> str:
    """Write one table; ``target`` is a path or a text buffer (None: text only).

    ``comments`` become leading '# ' lines before the header row, used to
    embed solver targets and run parameters for auditability.
    """
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    text = buf.getvalue()
    if isinstance(target, (str, Path)):
        Path(target).write_text(text, encoding="utf-8")
    elif target is not None:
        target.write(text)
    return text
