"""CSV reports, key=value config files and tensor CSV input."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from fatq.trainer.checkpoint import atomic_write_bytes


class ConfigError(ValueError):
    pass


class TensorParseError(ValueError):
    pass


def format_value(v):
    """Floats with 9 significant digits, bools as 0/1, everything else via str."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".9g")
    return str(v)


@dataclass
class CsvReport:
    schema: str
    header: list
    rows: list = field(default_factory=list)

    def add(self, row):
        if isinstance(row, dict):
            missing = [h for h in self.header if h not in row]
            if missing:
                raise ValueError(f"{self.schema}: row lacks columns {missing}")
            row = [row[h] for h in self.header]
        if len(row) != len(self.header):
            raise ValueError(f"{self.schema}: row has {len(row)} fields, header has {len(self.header)}")
        self.rows.append(list(row))

    def to_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow([format_value(v) for v in row])
        return buf.getvalue()

    def write(self, path):
        atomic_write_bytes(path, self.to_text().encode("utf-8"))


def parse_config(text, source="config"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Keys are normalized to lower case with dashes turned into underscores.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        key = key.lower().replace("-", "_")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_tensor_csv(text, source="input"):
    """2-D float array from comma-separated rows; errors carry the line number."""
    rows = []
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        row = []
        for cell in line.split(","):
            cell = cell.strip()
            try:
                val = float(cell)
            except ValueError:
                raise TensorParseError(f"{source}:{lineno}: cannot parse {cell!r} as a number") from None
            if not math.isfinite(val):
                raise TensorParseError(f"{source}:{lineno}: non-finite value {cell!r}")
            row.append(val)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise TensorParseError(f"{source}:{lineno}: expected {width} values, found {len(row)}")
        rows.append(row)
    if not rows:
        raise TensorParseError(f"{source}: no data rows")
    return np.array(rows, dtype=np.float64)


def tensor_csv_text(arr):
    """Headerless counterpart of :func:`read_tensor_csv`."""
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    arr = arr.reshape(arr.shape[0], -1)
    return "".join(",".join(format_value(v) for v in row) + "\n" for row in arr)


def write_tensor_csv(path, arr):
    atomic_write_bytes(path, tensor_csv_text(arr).encode("utf-8"))
