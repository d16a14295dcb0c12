"""Snapshot CSV input/output and the data-quality filters.

File layouts
------------
securities CSV  ``security_id,capitalization_usd,price_usd,is_us,is_listed``
    (the last three may be left empty; booleans are ``true``/``false``)
holdings CSV    ``fund_id,security_id,value_usd``
rejects CSV     ``line,reason``
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .universe import (
    EmptyInputError,
    RejectedRow,
    SecurityRecord,
    UniverseSnapshot,
    build_snapshot,
)

log = logging.getLogger(__name__)

SECURITIES_HEADER = ("security_id", "capitalization_usd", "price_usd", "is_us", "is_listed")
HOLDINGS_HEADER = ("fund_id", "security_id", "value_usd")
REJECTS_HEADER = ("line", "reason")

_REQUIRED_SECURITY_COLUMNS = ("security_id", "capitalization_usd")


class MissingHeaderError(ValueError):
    """A CSV input lacks one of its required columns."""


class EmptyAfterFilteringError(ValueError):
    def __init__(self, message: str, report: "FilterReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class FilterConfig:
    min_fund_value: float = 1e5
    min_capitalization: float = 1e5
    min_positions: int = 5
    min_investors: int = 10
    min_price: float = 5.0
    us_only: bool = True
    require_listed: bool = True

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, bool) and value < 0:
                raise ValueError(f"{f.name} must be >= 0, got {value!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "FilterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown filter settings: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "FilterConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FilterStage:
    stage: str
    funds_before: int
    funds_after: int
    securities_before: int
    securities_after: int

    @property
    def removed(self) -> int:
        return (self.funds_before - self.funds_after) + (
            self.securities_before - self.securities_after
        )


@dataclass
class FilterReport:
    stages: list[FilterStage] = field(default_factory=list)

    def add(self, stage, before: UniverseSnapshot | None, after: UniverseSnapshot | None):
        self.stages.append(
            FilterStage(
                stage=stage,
                funds_before=before.n_funds if before is not None else 0,
                funds_after=after.n_funds if after is not None else 0,
                securities_before=before.M if before is not None else 0,
                securities_after=after.M if after is not None else 0,
            )
        )

    @property
    def total_removed(self) -> int:
        return sum(s.removed for s in self.stages)

    @property
    def n_passes(self) -> int:
        return len({s.stage.split(":")[0] for s in self.stages})

    def to_list(self) -> list[dict]:
        return [asdict(s) for s in self.stages]

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_list(), fh, indent=2)
            fh.write("\n")


# ---------------------------------------------------------------------------
# CSV reading


def _parse_bool(text: str) -> bool | None:
    t = text.strip().lower()
    if t == "":
        return None
    if t == "true":
        return True
    if t == "false":
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_optional_float(text: str) -> float | None:
    t = text.strip()
    return None if t == "" else float(t)


def _open_reader(path, required):
    fh = open(path, newline="")
    reader = csv.DictReader(fh)
    header = reader.fieldnames
    missing = [c for c in required if header is None or c not in header]
    if missing:
        fh.close()
        raise MissingHeaderError(f"{path}: missing column(s) {', '.join(missing)}")
    return fh, reader


def read_securities(path) -> tuple[list[SecurityRecord], list[RejectedRow]]:
    fh, reader = _open_reader(path, _REQUIRED_SECURITY_COLUMNS)
    records, rejected, seen = [], [], set()
    with fh:
        for line, row in enumerate(reader, start=2):
            sid = (row.get("security_id") or "").strip()
            if not sid:
                rejected.append(RejectedRow(line, "[securities] empty security_id"))
                continue
            if sid in seen:
                rejected.append(RejectedRow(line, f"[securities] duplicate security_id {sid!r}"))
                continue
            try:
                cap = float(row["capitalization_usd"])
                price = _parse_optional_float(row.get("price_usd") or "")
                is_us = _parse_bool(row.get("is_us") or "")
                listed = _parse_bool(row.get("is_listed") or "")
            except (TypeError, ValueError) as exc:
                rejected.append(RejectedRow(line, f"[securities] unparsable field: {exc}"))
                continue
            if not (math.isfinite(cap) and cap > 0):
                rejected.append(RejectedRow(line, "[securities] non-positive capitalization"))
                continue
            if price is not None and not (math.isfinite(price) and price > 0):
                rejected.append(RejectedRow(line, "[securities] non-positive price"))
                continue
            seen.add(sid)
            records.append(SecurityRecord(sid, cap, price, is_us, listed))
    return records, rejected


def read_holdings(path) -> list[tuple[str, str, str]]:
    fh, reader = _open_reader(path, HOLDINGS_HEADER)
    with fh:
        return [
            ((row["fund_id"] or "").strip(), (row["security_id"] or "").strip(), row["value_usd"])
            for row in reader
        ]


def write_rejects(rejected, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REJECTS_HEADER)
        for r in rejected:
            w.writerow([r.row, r.reason])


def load_snapshot(securities_path, holdings_path, rejects_path=None, as_of=None) -> UniverseSnapshot:
    """Read the two CSV files into a snapshot.

    Malformed rows are skipped and listed in ``snapshot.rejected`` (1-based
    file line numbers); they are also written to ``rejects_path`` when given.
    A missing required column raises :class:`MissingHeaderError`.
    """
    securities, sec_rejects = read_securities(securities_path)
    rows = read_holdings(holdings_path)
    snap = build_snapshot(securities, rows, as_of=as_of)
    # build_snapshot numbers rows from 0; the header is line 1
    hold_rejects = [RejectedRow(r.row + 2, r.reason) for r in snap.rejected]
    rejected = tuple(sec_rejects + hold_rejects)
    object.__setattr__(snap, "rejected", rejected)
    if rejected:
        log.warning("%d malformed row(s) rejected", len(rejected))
    if rejects_path is not None:
        write_rejects(rejected, rejects_path)
    return snap


def _fmt_float(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _fmt_bool(code: int) -> str:
    return "" if code < 0 else ("true" if code else "false")


def save_snapshot(snapshot: UniverseSnapshot, securities_path, holdings_path) -> None:
    """Write a snapshot in the ingestion CSV layouts (lossless for floats)."""
    with open(securities_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECURITIES_HEADER)
        for k in range(snapshot.M):
            w.writerow(
                [
                    snapshot.security_ids[k],
                    _fmt_float(snapshot.capitalization[k]),
                    _fmt_float(snapshot.price[k]),
                    _fmt_bool(snapshot.is_us[k]),
                    _fmt_bool(snapshot.is_listed[k]),
                ]
            )
    with open(holdings_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HOLDINGS_HEADER)
        for fid, sid, value in snapshot.holdings_rows():
            w.writerow([fid, sid, repr(value)])


def save_snapshot_dir(snapshot: UniverseSnapshot, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    sec, hold = directory / "securities.csv", directory / "holdings.csv"
    save_snapshot(snapshot, sec, hold)
    return sec, hold


def load_snapshot_dir(directory, rejects_path=None) -> UniverseSnapshot:
    directory = Path(directory)
    return load_snapshot(directory / "securities.csv", directory / "holdings.csv", rejects_path)


# ---------------------------------------------------------------------------
# Filters


def security_mask(snapshot: UniverseSnapshot, config: FilterConfig) -> np.ndarray:
    """Securities that pass the size, penny-stock, listing, US and investor filters.

    Unknown price, listing or country passes: the filters only act on
    information that is present.
    """
    keep = snapshot.capitalization >= config.min_capitalization
    price = snapshot.price
    keep &= ~(~np.isnan(price) & (price < config.min_price))
    if config.require_listed:
        keep &= snapshot.is_listed != 0
    if config.us_only:
        keep &= snapshot.is_us != 0
    keep &= snapshot.security_investors >= config.min_investors
    return keep


def fund_mask(snapshot: UniverseSnapshot, config: FilterConfig) -> np.ndarray:
    return (snapshot.fund_value >= config.min_fund_value) & (
        snapshot.fund_positions >= config.min_positions
    )


def apply_filters(
    snapshot: UniverseSnapshot, config: FilterConfig, max_passes: int = 1000
) -> tuple[UniverseSnapshot, FilterReport]:
    """Apply security then fund filters repeatedly until nothing is removed.

    Removing a fund lowers the investor count of its securities, and removing a
    security lowers the position count of its holders, so a single pass can
    leave entities that violate a threshold.  Only the fixed point satisfies
    every threshold at once.
    """
    report = FilterReport()
    current = snapshot
    for k in range(1, max_passes + 1):
        removed = False
        for stage, mask_fn in (("securities", security_mask), ("funds", fund_mask)):
            if stage == "securities":
                keep_s = mask_fn(current, config)
                keep_f = np.ones(current.n_funds, dtype=bool)
            else:
                keep_f = mask_fn(current, config)
                keep_s = np.ones(current.M, dtype=bool)
            if keep_s.all() and keep_f.all():
                report.add(f"pass{k}:{stage}", current, current)
                continue
            try:
                nxt = current.subset(keep_f, keep_s)
            except EmptyInputError:
                report.add(f"pass{k}:{stage}", current, None)
                raise EmptyAfterFilteringError("empty after filtering", report) from None
            report.add(f"pass{k}:{stage}", current, nxt)
            removed = removed or (nxt.n_funds, nxt.M) != (current.n_funds, current.M)
            current = nxt
        if not removed:
            return current, report
    raise RuntimeError(f"filters did not reach a fixed point in {max_passes} passes")
