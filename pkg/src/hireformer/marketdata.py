"""Daily volume series, next-day volume-direction labels and temporal splits.

A filing dated ``D`` is labeled by comparing the volume on the first trading
date on or after ``D`` with the volume on the following trading date:
``Y = 1`` when the change is ``>= 0``.
"""
from __future__ import annotations

import bisect
import csv
import datetime as dt
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .numerics.rng import RngStream
from .textpipe.document import Document

log = logging.getLogger(__name__)

HEADER = ["date", "ticker", "volume"]


class VolumeDataError(ValueError):
    pass


@dataclass
class VolumeSeries:
    ticker: str
    dates: list = field(default_factory=list)
    volumes: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.dates) != len(self.volumes):
            raise VolumeDataError(f"{self.ticker}: dates and volumes differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise VolumeDataError(f"{self.ticker}: dates must be strictly increasing")

    def __len__(self):
        return len(self.dates)

    def first_on_or_after(self, day: dt.date) -> Optional[int]:
        i = bisect.bisect_left(self.dates, day)
        return i if i < len(self.dates) else None


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def load_volume_csv(path) -> dict[str, VolumeSeries]:
    """Parse a ``date,ticker,volume`` CSV into per-ticker series sorted by date."""
    rows: dict[str, dict] = {}
    seen: dict[tuple, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != HEADER:
            raise VolumeDataError(f"{path}:1: expected header {','.join(HEADER)}, got {header}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise VolumeDataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                day = _parse_date(row[0])
            except ValueError:
                raise VolumeDataError(f"{path}:{lineno}: bad date {row[0]!r}") from None
            ticker = row[1].strip()
            if not ticker:
                raise VolumeDataError(f"{path}:{lineno}: empty ticker")
            try:
                volume = int(row[2])
            except ValueError:
                raise VolumeDataError(f"{path}:{lineno}: volume {row[2]!r} is not an integer") from None
            if volume < 0:
                raise VolumeDataError(f"{path}:{lineno}: negative volume {volume}")
            key = (day, ticker)
            if key in seen:
                raise VolumeDataError(f"{path}:{lineno}: duplicate row for {ticker} on {day} "
                                      f"(first at line {seen[key]})")
            seen[key] = lineno
            rows.setdefault(ticker, {})[day] = volume
    out = {}
    for ticker in sorted(rows):
        days = sorted(rows[ticker])
        out[ticker] = VolumeSeries(ticker, days, [rows[ticker][d] for d in days])
    return out


def write_volume_csv(path, rows: Iterable[tuple]) -> None:
    """Write ``(date, ticker, volume)`` rows in the order given."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for day, ticker, volume in rows:
            w.writerow([day.isoformat() if isinstance(day, dt.date) else day, ticker, int(volume)])


@dataclass(frozen=True)
class Label:
    y: int
    v_d: int
    v_d1: int
    resolved_dates: tuple


@dataclass(frozen=True)
class Skip:
    reason: str


NO_SERIES = "no volume series"
NO_DAY = "no trading date on or after filing date"
NO_NEXT = "no next trading date"


def label_for(ticker: str, filing_date: dt.date, volumes: dict) -> Label | Skip:
    series = volumes.get(ticker)
    if series is None or not len(series):
        return Skip(NO_SERIES)
    i = series.first_on_or_after(filing_date)
    if i is None:
        return Skip(NO_DAY)
    if i + 1 >= len(series):
        return Skip(NO_NEXT)
    v0, v1 = series.volumes[i], series.volumes[i + 1]
    return Label(int(v1 - v0 >= 0), v0, v1, (series.dates[i], series.dates[i + 1]))


@dataclass
class LabeledExample:
    doc: Document
    y: int
    v_d: int
    v_d1: int
    resolved_dates: tuple
    split: Optional[str] = None

    @property
    def doc_id(self) -> str:
        return self.doc.doc_id


@dataclass
class SkipReport:
    counts: Counter = field(default_factory=Counter)
    doc_ids: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def positive_rate(examples: Sequence[LabeledExample]) -> float:
    return sum(e.y for e in examples) / len(examples) if examples else float("nan")


def join_and_label(documents: Iterable[Document], volumes: dict) -> tuple[list[LabeledExample], SkipReport]:
    examples, report = [], SkipReport()
    for doc in documents:
        res = label_for(doc.ticker, doc.filing_date, volumes)
        if isinstance(res, Skip):
            report.counts[res.reason] += 1
            report.doc_ids.setdefault(res.reason, []).append(doc.doc_id)
            continue
        examples.append(LabeledExample(doc, res.y, res.v_d, res.v_d1, res.resolved_dates))
    log.info("joined %d documents, skipped %d, up-movement rate %.3f",
             len(examples), report.total, positive_rate(examples))
    return examples, report


@dataclass(frozen=True)
class SplitSpec:
    holdout_start: dt.date = dt.date(2018, 1, 1)
    val_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.val_fraction <= 1:
            raise ValueError("val_fraction must lie in [0, 1]")


def split_dataset(examples: Sequence[LabeledExample], spec: SplitSpec = SplitSpec()) -> dict[str, list]:
    """Train = filings before ``holdout_start``; the rest is shuffled and cut into val/test.

    The validation share is ``floor(val_fraction * n_holdout)``.
    """
    train = [e for e in examples if e.doc.filing_date < spec.holdout_start]
    holdout = [e for e in examples if e.doc.filing_date >= spec.holdout_start]
    if not holdout:
        raise VolumeDataError(f"no examples on or after {spec.holdout_start}")
    order = RngStream(spec.seed, "split").generator().permutation(len(holdout))
    n_val = int(spec.val_fraction * len(holdout))
    val = [holdout[i] for i in order[:n_val]]
    test = [holdout[i] for i in order[n_val:]]
    assert all(e.doc.filing_date < spec.holdout_start for e in train), "train leaks past holdout_start"
    out = {"train": train, "val": val, "test": test}
    for name, part in out.items():
        for e in part:
            e.split = name
    return out


def write_labeled(path, splits: dict[str, list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("train", "val", "test"):
            for e in splits.get(name, []):
                rec = {"doc_id": e.doc.doc_id, "ticker": e.doc.ticker, "filing_date": e.doc.filing_date.isoformat(),
                       "Y": e.y, "V_D": e.v_d, "V_D1": e.v_d1, "split": name}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_labeled(path, documents: dict[str, Document]) -> dict[str, list]:
    """Rebuild splits from a labeled file plus the documents it refers to."""
    out = {"train": [], "val": [], "test": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            doc = documents.get(rec["doc_id"])
            if doc is None:
                raise VolumeDataError(f"{path}:{lineno}: unknown doc_id {rec['doc_id']!r}")
            ex = LabeledExample(doc, int(rec["Y"]), int(rec["V_D"]), int(rec["V_D1"]), (), rec["split"])
            out[rec["split"]].append(ex)
    return out
