"""Result rows and their CSV encoding.

Sweep CSVs always carry the columns ``defense,param,round,adversary,asr,loss,mse,seed``
in that order. Floats are written with Python's shortest round-trip repr, and
missing values are left empty, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from recupfl.errors import ParseError

SWEEP_COLUMNS = ("defense", "param", "round", "adversary", "asr", "loss", "mse", "seed")
CONVERGENCE_COLUMNS = ("defense", "participation", "round", "loss", "seed")


@dataclass(frozen=True)
class TradeoffPoint:
    defense: str
    param: float
    round: int
    adversary: str
    asr: float | None
    loss: float | None
    mse: float | None
    seed: int

    def __post_init__(self):
        if self.asr is not None and not 0.0 <= self.asr <= 1.0:
            raise ValueError(f"ASR {self.asr} outside [0, 1]")
        if self.loss is not None and self.loss < 0:
            raise ValueError(f"negative loss {self.loss}")

    @property
    def is_error(self) -> bool:
        return self.adversary == "error"


@dataclass(frozen=True)
class ConvergenceRow:
    defense: str
    participation: float
    round: int
    loss: float
    seed: int


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _render(columns: Sequence[str], rows: Iterable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in columns])
    return buf.getvalue()


def points_to_csv(points: Iterable[TradeoffPoint]) -> str:
    return _render(SWEEP_COLUMNS, points)


def convergence_to_csv(rows: Iterable[ConvergenceRow]) -> str:
    return _render(CONVERGENCE_COLUMNS, rows)


def write_points(points: Iterable[TradeoffPoint], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(points_to_csv(points), encoding="utf-8")
    return path


def write_convergence(rows: Iterable[ConvergenceRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(convergence_to_csv(rows), encoding="utf-8")
    return path


def _opt(v: str):
    return float(v) if v != "" else None


def read_points(path: str | Path) -> list[TradeoffPoint]:
    """Parse a sweep CSV written by :func:`write_points`."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != SWEEP_COLUMNS:
        raise ParseError(f"unexpected sweep header {header!r}", offset=0)
    out = []
    for i, row in enumerate(reader, start=2):
        if len(row) != len(SWEEP_COLUMNS):
            raise ParseError(f"line {i}: expected {len(SWEEP_COLUMNS)} fields, got {len(row)}", offset=i)
        try:
            out.append(
                TradeoffPoint(row[0], float(row[1]), int(row[2]), row[3], _opt(row[4]), _opt(row[5]), _opt(row[6]), int(row[7]))
            )
        except ValueError as exc:
            raise ParseError(f"line {i}: {exc}", offset=i) from None
    return out
