"""Result tables and their CSV form (with a provenance footer)."""

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from opclab.buffer import fmt_float
from opclab.errors import ContractError


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if np.isnan(x) else fmt_float(x)
    return str(x)


@dataclass
class ResultTable:
    """Rectangular table; ``None`` or NaN cells are written empty."""

    columns: list
    rows: list = field(default_factory=list)
    config_hash: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.columns = list(self.columns)
        if len(set(self.columns)) != len(self.columns):
            raise ContractError("column names must be unique")
        for row in self.rows:
            self._check(row)
        self.rows = [tuple(r) for r in self.rows]

    def _check(self, row):
        if len(row) != len(self.columns):
            raise ContractError(f"row has {len(row)} cells, expected {len(self.columns)}")

    def append(self, *row):
        self._check(row)
        self.rows.append(tuple(row))

    def column(self, name):
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def array(self, name):
        """Column as floats, empty cells as NaN."""
        return np.array([np.nan if v is None else float(v) for v in self.column(name)])

    def to_csv(self):
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_cell(x) for x in row])
        buf.write(f"# config_hash={self.config_hash}\r\n")
        buf.write(f"# seed={'' if self.seed is None else self.seed}\r\n")
        return buf.getvalue()

    def write(self, path):
        write_atomic(path, self.to_csv())


def read_csv(text):
    """``(columns, rows, footer)`` from a table's CSV text; cells stay strings."""
    lines = text.splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    footer = dict(ln[2:].split("=", 1) for ln in lines if ln.startswith("# "))
    rows = list(csv.reader(body))
    return rows[0], rows[1:], footer


def write_atomic(path, text):
    """Write ``text`` via a temp file in the same directory and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".opclab-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
