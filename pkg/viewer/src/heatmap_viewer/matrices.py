"""Parsing of flow/cost matrix CSV exports.

File format (produced by the distillation harness): a header row with
an empty first cell followed by 1-based teacher layer indices, then one
row per student layer whose first cell is the 1-based student index.
Files are named ``epoch<k>_<attn|hidden>_<flow|cost>.csv``.
"""

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("flow", "cost")
TARGETS = ("attn", "hidden")

_NAME_RE = re.compile(r"epoch(\d+)_(attn|hidden)_(flow|cost)\.csv$")


class ParseError(ValueError):
    """Raised for malformed CSV input; the message names the bad line."""


@dataclass(frozen=True)
class MatrixSet:
    """One parsed matrix: N student rows by M teacher columns."""

    kind: str       # "flow" or "cost"
    target: str     # "attn" or "hidden"
    epoch: int
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParseError(f"unknown matrix kind {self.kind!r}")
        if self.target not in TARGETS:
            raise ParseError(f"unknown matrix target {self.target!r}")
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise ParseError(f"expected a 2-D grid, got shape {self.values.shape}")
        if self.kind == "flow" and np.any(self.values < 0):
            raise ParseError("flow matrix contains negative values")

    @property
    def num_students(self) -> int:
        return self.values.shape[0]

    @property
    def num_teachers(self) -> int:
        return self.values.shape[1]

    def value(self, student: int, teacher: int) -> float:
        """Cell for 1-based student row and teacher column indices."""
        return float(self.values[student - 1, teacher - 1])


def parse_name(path) -> tuple[int, str, str]:
    """Extract (epoch, target, kind) from a harness export filename."""
    m = _NAME_RE.search(Path(path).name)
    if m is None:
        raise ParseError(
            f"{Path(path).name}: expected epoch<k>_<attn|hidden>_<flow|cost>.csv"
        )
    return int(m.group(1)), m.group(2), m.group(3)


def load_matrix(path, kind=None, target=None, epoch=None) -> MatrixSet:
    """Read one CSV export. Metadata defaults from the filename; pass
    kind/target/epoch explicitly for files named otherwise."""
    path = Path(path)
    if None in (kind, target, epoch):
        try:
            name_epoch, name_target, name_kind = parse_name(path)
        except ParseError:
            raise ParseError(
                f"{path.name}: cannot infer kind/target/epoch from the "
                "filename; pass them explicitly"
            )
        kind = kind if kind is not None else name_kind
        target = target if target is not None else name_target
        epoch = epoch if epoch is not None else name_epoch

    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    rows = [row for row in rows if row]
    if len(rows) < 2:
        raise ParseError(f"{path.name}, line 1: need a header and at least one row")

    header = rows[0]
    if header[0].strip() != "":
        raise ParseError(f"{path.name}, line 1: first header cell must be empty")
    m = len(header) - 1
    if m < 1 or [c.strip() for c in header[1:]] != [str(i + 1) for i in range(m)]:
        raise ParseError(
            f"{path.name}, line 1: teacher columns must be labeled 1..M"
        )

    grid = np.zeros((len(rows) - 1, m))
    for j, row in enumerate(rows[1:], start=1):
        line_no = j + 1
        if len(row) != m + 1:
            raise ParseError(
                f"{path.name}, line {line_no}: expected {m + 1} cells, "
                f"got {len(row)}"
            )
        if row[0].strip() != str(j):
            raise ParseError(
                f"{path.name}, line {line_no}: student row label should be "
                f"{j}, got {row[0]!r}"
            )
        for i, cell in enumerate(row[1:]):
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path.name}, line {line_no}: non-numeric cell {cell!r}"
                ) from None
            if not np.isfinite(value):
                raise ParseError(
                    f"{path.name}, line {line_no}: non-finite cell {cell!r}"
                )
            grid[j - 1, i] = value

    return MatrixSet(kind=kind, target=target, epoch=epoch, values=grid)


def find_exports(run_dir) -> list[Path]:
    """All harness matrix exports under a run directory, sorted by
    (target, kind, epoch)."""
    run_dir = Path(run_dir)
    found = [p for p in run_dir.iterdir() if _NAME_RE.search(p.name)]
    if not found:
        raise ParseError(f"{run_dir}: no epoch*_{{attn,hidden}}_{{flow,cost}}.csv files")

    def key(p):
        epoch, target, kind = parse_name(p)
        return (target, kind, epoch)

    return sorted(found, key=key)
